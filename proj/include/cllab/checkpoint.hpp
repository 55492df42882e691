#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "cllab/tensor.hpp"

namespace cllab {

/// Shape of the tiny decoder-only transformer: token + learned absolute
/// position embeddings, pre-norm attention with q/k/v/o projections, gated
/// (SiLU) FFN with separate gate/up/down projections, final norm, lm_head.
struct ModelConfig {
    int64_t vocab_size = 64;
    int64_t seq_len = 64;
    int64_t d_model = 64;
    int64_t n_heads = 4;
    int64_t n_layers = 2;
    int64_t ffn_hidden = 128;
    bool tie_embeddings = false;

    void validate() const;  // throws ConfigError
    bool operator==(const ModelConfig&) const = default;
};

std::string model_config_to_json(const ModelConfig&);
ModelConfig model_config_from_json(const std::string& text);

/// Canonical tensor names for a config, in manifest order:
/// embed.weight, pos.weight, layers.<i>.attn.norm.weight,
/// layers.<i>.attn.{q,k,v,o}.weight, layers.<i>.ffn.norm.weight,
/// layers.<i>.ffn.{gate,up,down}.weight, final.norm.weight, lm_head.weight
/// (lm_head omitted when embeddings are tied).
std::vector<std::string> canonical_tensor_names(const ModelConfig&);

/// Expected shape of a canonical tensor; throws ConfigError for unknown names.
std::vector<int64_t> canonical_tensor_shape(const ModelConfig&, const std::string& name);

/// Named tensor tree housing all model parameters, plus the training history
/// that produced it.
struct Checkpoint {
    ModelConfig config;
    std::vector<std::string> order;  // canonical manifest order
    std::unordered_map<std::string, Tensor> tensors;
    std::vector<std::string> lineage;

    bool has(const std::string& name) const { return tensors.count(name) != 0; }
    const Tensor& tensor(const std::string& name) const;
    Tensor& tensor_mut(const std::string& name);
    bool bits_equal(const Checkpoint& o) const;
};

/// Seeded initialization: weights ~ N(0, 0.02^2) from a per-tensor keyed
/// stream, norm gains at 1, no biases. Identical seeds give byte-identical
/// checkpoints.
Checkpoint build_model(const ModelConfig& config, uint64_t seed);

void save_checkpoint(const Checkpoint&, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// True if `dir` looks like a checkpoint directory.
bool is_checkpoint_dir(const std::filesystem::path& dir);

}  // namespace cllab
