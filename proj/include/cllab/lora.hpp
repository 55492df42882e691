#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cllab/checkpoint.hpp"
#include "cllab/graph.hpp"

namespace cllab {

struct LoraConfig {
    int64_t r = 8;
    double alpha = 16.0;                // delta is scaled by alpha / r
    std::vector<std::string> targets;   // canonical weight names; empty = defaults
    bool include_embeddings = false;    // adds embed.weight / lm_head.weight targets
    std::string label;
};

/// Default adapter targets: every q/k/v/o/gate/up/down projection.
/// Embedding and lm_head targets are opt-in (they train at a reduced rate,
/// see TrainConfig::embed_lr_mult).
std::vector<std::string> default_lora_targets(const ModelConfig&, bool include_embeddings);

/// Low-rank factor pair for one target weight W[d_out, d_in]:
/// A is [r, d_in], B is [d_out, r], delta = (alpha/r) * B * A.
struct LoraEntry {
    Tensor A;
    Tensor B;
};

struct LoraAdapter {
    int64_t r = 8;
    double alpha = 16.0;
    std::vector<std::string> targets;  // ordered
    std::unordered_map<std::string, LoraEntry> entries;
    std::string label;

    const LoraEntry& entry(const std::string& target) const;
    double scaling() const { return alpha / static_cast<double>(r); }
};

/// A is drawn N(0, 1/r^2) from a per-target keyed stream; B starts at zero so
/// a fresh adapter is an exact no-op on the forward pass.
LoraAdapter init_lora(const LoraConfig&, const ModelConfig&, uint64_t seed);

/// W + (alpha/r) * B * A, computed in the weight's dtype.
Tensor effective_weight(const Tensor& W, const LoraEntry&, int64_t r, double alpha);

/// Checks that an adapter conforms to a checkpoint's canonical shapes.
void check_adapter_compat(const Checkpoint&, const LoraAdapter&);

/// Cross-adapter row-space Gram report: for each previous adapter and each
/// shared target, O = A_prev * A_cur^T (size r_prev x r_cur) with squared
/// Frobenius contribution; `total` sums contributions over targets and
/// previous adapters.
struct OrthReport {
    struct Item {
        std::string prev_label;
        std::string target;
        Tensor gram;
        double fro_sq = 0.0;
    };
    std::vector<Item> items;
    double total = 0.0;
};

OrthReport orth_penalty(std::span<const LoraAdapter* const> previous, const LoraAdapter& current);

/// ce + lambda * orth_penalty(previous, current).total
double olora_loss(double ce, std::span<const LoraAdapter* const> previous,
                  const LoraAdapter& current, double lambda);

/// Graph node for the penalty so that gradients reach the current adapter's A
/// factors; previous adapters enter as constants.
Var orth_penalty_node(Graph& g, std::span<const LoraAdapter* const> previous,
                      const std::vector<std::string>& targets,
                      const std::unordered_map<std::string, Var>& current_A);

/// Materializes the adapter into base weights; all other tensors are copied
/// and the lineage gains one entry.
Checkpoint fold_adapter(const Checkpoint& base, const LoraAdapter&);

void save_adapter(const LoraAdapter&, const std::filesystem::path& dir);
LoraAdapter load_adapter(const std::filesystem::path& dir);
bool is_adapter_dir(const std::filesystem::path& dir);

}  // namespace cllab
