#pragma once

#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cllab/checkpoint.hpp"
#include "cllab/graph.hpp"
#include "cllab/lora.hpp"

namespace cllab {

/// Token batch in next-token form: `tokens` feed the model, `labels` are the
/// shifted-by-one ground truth, and `label_mask` keeps loss on target spans
/// only (prompts and padding are masked out).
struct Batch {
    int64_t bsz = 0;
    int64_t len = 0;                  // input length (sequence length - 1)
    std::vector<int32_t> tokens;      // bsz * len
    std::vector<int32_t> labels;      // bsz * len
    std::vector<uint8_t> label_mask;  // bsz * len
};

struct Example;  // dataset.hpp
Batch make_batch(std::span<const Example* const> examples, int32_t pad_id = 0);

enum class TrainMode {
    none,          // evaluation: every tensor is frozen
    full,          // all base tensors trainable
    last_adapter,  // base + earlier adapters frozen, newest adapter trainable
};

/// Forward graph over a batch, with LoRA adapters composed additively into
/// every targeted weight. `params` maps parameter names to graph leaves:
/// base tensors under their canonical names, adapter factors as
/// "adapter:<target>.A" / "adapter:<target>.B".
struct LmGraph {
    Graph graph;
    Var logits;  // [bsz, len, vocab]
    std::unordered_map<std::string, Var> params;

    LmGraph(DType dt, bool check_finite) : graph(dt, check_finite) {}
};

LmGraph build_lm_graph(const Checkpoint& ckpt, std::span<const LoraAdapter* const> adapters,
                       const Batch& batch, TrainMode mode, bool check_finite = true);

/// Causal forward over one sequence; returns logits [len, vocab].
/// The empty-adapter case and the all-fresh-adapter case are byte-identical
/// to the pure base forward.
Tensor lm_forward(const Checkpoint& ckpt, std::span<const LoraAdapter* const> adapters,
                  const std::vector<int32_t>& tokens);

/// Mean -log softmax(logits)[target] over masked-in rows. logits may be
/// [rows, vocab] or [bsz, len, vocab] (flattened row-major).
double ce_loss(const Tensor& logits, const std::vector<int32_t>& targets,
               const std::vector<uint8_t>& loss_mask);

/// Greedy argmax continuation (ties break to the lowest token id).
std::vector<int32_t> greedy_decode(const Checkpoint& ckpt,
                                   std::span<const LoraAdapter* const> adapters,
                                   const std::vector<int32_t>& prompt, int64_t n_gen);

int32_t argmax_last_row(const Tensor& logits);

}  // namespace cllab
