#include "cllab/checkpoint.hpp"

#include <json.hpp>

#include "cllab/rng.hpp"
#include "cllab/tensor_io.hpp"

namespace cllab {

namespace fs = std::filesystem;
using nlohmann::json;

void ModelConfig::validate() const {
    if (vocab_size < 1 || seq_len < 1 || d_model < 1 || n_heads < 1 || n_layers < 1 ||
        ffn_hidden < 1)
        throw ConfigError("model config: all dimensions must be >= 1");
    if (d_model % n_heads != 0)
        throw ConfigError("model config: d_model " + std::to_string(d_model) +
                          " not divisible by n_heads " + std::to_string(n_heads));
}

std::string model_config_to_json(const ModelConfig& c) {
    json j;
    j["vocab_size"] = c.vocab_size;
    j["seq_len"] = c.seq_len;
    j["d_model"] = c.d_model;
    j["n_heads"] = c.n_heads;
    j["n_layers"] = c.n_layers;
    j["ffn_hidden"] = c.ffn_hidden;
    j["tie_embeddings"] = c.tie_embeddings;
    return j.dump(2) + "\n";
}

ModelConfig model_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("model config is not valid JSON: ") + e.what());
    }
    ModelConfig c;
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.seq_len = j.value("seq_len", c.seq_len);
    c.d_model = j.value("d_model", c.d_model);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.ffn_hidden = j.value("ffn_hidden", c.ffn_hidden);
    c.tie_embeddings = j.value("tie_embeddings", c.tie_embeddings);
    c.validate();
    return c;
}

std::vector<std::string> canonical_tensor_names(const ModelConfig& c) {
    std::vector<std::string> names;
    names.push_back("embed.weight");
    names.push_back("pos.weight");
    for (int64_t i = 0; i < c.n_layers; ++i) {
        const std::string p = "layers." + std::to_string(i) + ".";
        names.push_back(p + "attn.norm.weight");
        names.push_back(p + "attn.q.weight");
        names.push_back(p + "attn.k.weight");
        names.push_back(p + "attn.v.weight");
        names.push_back(p + "attn.o.weight");
        names.push_back(p + "ffn.norm.weight");
        names.push_back(p + "ffn.gate.weight");
        names.push_back(p + "ffn.up.weight");
        names.push_back(p + "ffn.down.weight");
    }
    names.push_back("final.norm.weight");
    if (!c.tie_embeddings) names.push_back("lm_head.weight");
    return names;
}

std::vector<int64_t> canonical_tensor_shape(const ModelConfig& c, const std::string& name) {
    auto ends_with = [&](const std::string& suffix) {
        return name.size() >= suffix.size() &&
               name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    if (name == "embed.weight") return {c.vocab_size, c.d_model};
    if (name == "pos.weight") return {c.seq_len, c.d_model};
    if (name == "final.norm.weight") return {c.d_model};
    if (name == "lm_head.weight") return {c.vocab_size, c.d_model};
    if (name.rfind("layers.", 0) == 0) {
        if (ends_with(".attn.norm.weight") || ends_with(".ffn.norm.weight")) return {c.d_model};
        if (ends_with(".attn.q.weight") || ends_with(".attn.k.weight") ||
            ends_with(".attn.v.weight") || ends_with(".attn.o.weight"))
            return {c.d_model, c.d_model};
        if (ends_with(".ffn.gate.weight") || ends_with(".ffn.up.weight"))
            return {c.ffn_hidden, c.d_model};
        if (ends_with(".ffn.down.weight")) return {c.d_model, c.ffn_hidden};
    }
    throw ConfigError("unknown canonical tensor name '" + name + "'");
}

const Tensor& Checkpoint::tensor(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ContractError("checkpoint has no tensor '" + name + "'");
    return it->second;
}

Tensor& Checkpoint::tensor_mut(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ContractError("checkpoint has no tensor '" + name + "'");
    return it->second;
}

bool Checkpoint::bits_equal(const Checkpoint& o) const {
    if (order != o.order || !(config == o.config)) return false;
    for (const auto& name : order) {
        if (!o.has(name) || !tensor(name).bits_equal(o.tensor(name))) return false;
    }
    return true;
}

Checkpoint build_model(const ModelConfig& config, uint64_t seed) {
    config.validate();
    Checkpoint ckpt;
    ckpt.config = config;
    ckpt.order = canonical_tensor_names(config);
    for (const auto& name : ckpt.order) {
        const auto shape = canonical_tensor_shape(config, name);
        Tensor t(shape, DType::F32);
        const bool is_norm = name.find("norm") != std::string::npos;
        if (is_norm) {
            float* p = t.f32();
            for (int64_t i = 0; i < t.numel(); ++i) p[i] = 1.0f;
        } else {
            Rng rng(mix_seed(seed, name));
            float* p = t.f32();
            for (int64_t i = 0; i < t.numel(); ++i)
                p[i] = static_cast<float>(rng.normal() * 0.02);
        }
        ckpt.tensors.emplace(name, std::move(t));
    }
    ckpt.lineage.push_back("init:seed=" + std::to_string(seed));
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& dir) {
    fs::create_directories(dir);
    NamedTensors named;
    for (const auto& name : ckpt.order) named.emplace_back(name, ckpt.tensor(name));
    write_tensor_dir(dir, named);
    write_text_file(dir / "config.json", model_config_to_json(ckpt.config));
    write_text_file(dir / "lineage.json", json(ckpt.lineage).dump(2) + "\n");
}

Checkpoint load_checkpoint(const fs::path& dir) {
    Checkpoint ckpt;
    ckpt.config = model_config_from_json(read_text_file(dir / "config.json"));
    NamedTensors named = read_tensor_dir(dir);
    const auto expected = canonical_tensor_names(ckpt.config);
    if (named.size() != expected.size())
        throw FormatError("checkpoint at " + dir.string() + " has " +
                          std::to_string(named.size()) + " tensors, expected " +
                          std::to_string(expected.size()));
    for (auto& [name, t] : named) {
        const auto shape = canonical_tensor_shape(ckpt.config, name);
        if (t.shape() != shape)
            throw FormatError("tensor '" + name + "': shape " + t.shape_str() +
                              " does not match config (want " + shape_to_string(shape) + ")");
        ckpt.order.push_back(name);
        ckpt.tensors.emplace(name, std::move(t));
    }
    if (fs::exists(dir / "lineage.json")) {
        try {
            ckpt.lineage =
                json::parse(read_text_file(dir / "lineage.json")).get<std::vector<std::string>>();
        } catch (const json::exception& e) {
            throw FormatError("lineage.json: " + std::string(e.what()));
        }
    }
    return ckpt;
}

bool is_checkpoint_dir(const fs::path& dir) {
    return fs::exists(dir / "manifest.json") && fs::exists(dir / "config.json");
}

}  // namespace cllab
