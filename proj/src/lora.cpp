#include "cllab/lora.hpp"

#include <algorithm>

#include <json.hpp>

#include "cllab/rng.hpp"
#include "cllab/tensor_io.hpp"

namespace cllab {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<std::string> default_lora_targets(const ModelConfig& c, bool include_embeddings) {
    std::vector<std::string> targets;
    for (int64_t i = 0; i < c.n_layers; ++i) {
        const std::string p = "layers." + std::to_string(i) + ".";
        for (const char* w : {"attn.q", "attn.k", "attn.v", "attn.o", "ffn.gate", "ffn.up",
                              "ffn.down"})
            targets.push_back(p + w + ".weight");
    }
    if (include_embeddings) {
        targets.push_back("embed.weight");
        if (!c.tie_embeddings) targets.push_back("lm_head.weight");
    }
    return targets;
}

const LoraEntry& LoraAdapter::entry(const std::string& target) const {
    auto it = entries.find(target);
    if (it == entries.end()) throw ContractError("adapter has no entry for '" + target + "'");
    return it->second;
}

LoraAdapter init_lora(const LoraConfig& cfg, const ModelConfig& mc, uint64_t seed) {
    if (cfg.r < 1) throw ConfigError("lora: rank must be >= 1");
    LoraAdapter a;
    a.r = cfg.r;
    a.alpha = cfg.alpha;
    a.label = cfg.label;
    a.targets = cfg.targets.empty() ? default_lora_targets(mc, cfg.include_embeddings)
                                    : cfg.targets;
    for (const auto& t : a.targets) {
        const auto wshape = canonical_tensor_shape(mc, t);  // ConfigError on unknown names
        if (wshape.size() != 2)
            throw ConfigError("lora target '" + t + "' is not a 2-D weight");
        const int64_t d_out = wshape[0], d_in = wshape[1];
        LoraEntry e;
        e.A = Tensor({cfg.r, d_in}, DType::F32);
        e.B = Tensor({d_out, cfg.r}, DType::F32);
        Rng rng(mix_seed(seed, t + ".A"));
        const double std_a = 1.0 / static_cast<double>(cfg.r);
        float* ap = e.A.f32();
        for (int64_t i = 0; i < e.A.numel(); ++i)
            ap[i] = static_cast<float>(rng.normal() * std_a);
        a.entries.emplace(t, std::move(e));
    }
    return a;
}

Tensor effective_weight(const Tensor& W, const LoraEntry& e, int64_t r, double alpha) {
    if (W.rank() != 2 || e.A.rank() != 2 || e.B.rank() != 2 || e.A.dim(0) != r ||
        e.B.dim(1) != r || e.B.dim(0) != W.dim(0) || e.A.dim(1) != W.dim(1))
        throw ShapeError("effective_weight: adapter factors do not conform to weight " +
                         W.shape_str());
    Graph g(W.dtype(), /*check_finite=*/false);
    Var w = g.input(W);
    Var delta = g.scale(g.matmul(g.input(e.B), g.input(e.A)), alpha / static_cast<double>(r));
    return g.value(g.add(w, delta));
}

void check_adapter_compat(const Checkpoint& ckpt, const LoraAdapter& a) {
    for (const auto& t : a.targets) {
        if (!ckpt.has(t))
            throw ShapeError("adapter target '" + t + "' not present in checkpoint");
        const Tensor& W = ckpt.tensor(t);
        const LoraEntry& e = a.entry(t);
        if (e.B.dim(0) != W.dim(0) || e.A.dim(1) != W.dim(1))
            throw ShapeError("adapter entry '" + t + "' (A " + e.A.shape_str() + ", B " +
                             e.B.shape_str() + ") does not conform to weight " + W.shape_str());
    }
}

OrthReport orth_penalty(std::span<const LoraAdapter* const> previous, const LoraAdapter& current) {
    OrthReport rep;
    for (const LoraAdapter* prev : previous) {
        if (prev->targets != current.targets)
            throw ShapeError("orth_penalty: adapters have different target sets");
        for (const auto& t : current.targets) {
            const LoraEntry& ep = prev->entry(t);
            const LoraEntry& ec = current.entry(t);
            if (ep.A.dim(1) != ec.A.dim(1))
                throw ShapeError("orth_penalty: input dims differ on '" + t + "'");
            Graph g(DType::F64, /*check_finite=*/false);
            Var o = g.matmul_nt(g.input(ep.A.to(DType::F64)), g.input(ec.A.to(DType::F64)));
            OrthReport::Item item;
            item.prev_label = prev->label;
            item.target = t;
            item.gram = g.value(o);
            item.fro_sq = g.value(g.sum_sq(o)).get(0);
            rep.total += item.fro_sq;
            rep.items.push_back(std::move(item));
        }
    }
    return rep;
}

double olora_loss(double ce, std::span<const LoraAdapter* const> previous,
                  const LoraAdapter& current, double lambda) {
    if (lambda < 0) throw DomainError("olora_loss: lambda must be >= 0");
    if (lambda == 0 || previous.empty()) return ce;
    return ce + lambda * orth_penalty(previous, current).total;
}

Var orth_penalty_node(Graph& g, std::span<const LoraAdapter* const> previous,
                      const std::vector<std::string>& targets,
                      const std::unordered_map<std::string, Var>& current_A) {
    Var total;
    for (const LoraAdapter* prev : previous) {
        for (const auto& t : targets) {
            auto it = current_A.find(t);
            if (it == current_A.end())
                throw ContractError("orth_penalty_node: no A var bound for '" + t + "'");
            Var o = g.matmul_nt(g.input(prev->entry(t).A, "prev:" + t), it->second);
            Var term = g.sum_sq(o);
            total = total.valid() ? g.add(total, term) : term;
        }
    }
    if (!total.valid()) total = g.input(Tensor::scalar(0.0, g.dtype()));
    return total;
}

Checkpoint fold_adapter(const Checkpoint& base, const LoraAdapter& a) {
    check_adapter_compat(base, a);
    Checkpoint out = base;
    for (const auto& t : a.targets)
        out.tensor_mut(t) = effective_weight(base.tensor(t), a.entry(t), a.r, a.alpha);
    out.lineage.push_back("fold:" + (a.label.empty() ? std::string("adapter") : a.label));
    return out;
}

void save_adapter(const LoraAdapter& a, const fs::path& dir) {
    fs::create_directories(dir);
    NamedTensors named;
    for (const auto& t : a.targets) {
        named.emplace_back(t + ".A", a.entry(t).A);
        named.emplace_back(t + ".B", a.entry(t).B);
    }
    write_tensor_dir(dir, named);
    json meta;
    meta["r"] = a.r;
    meta["alpha"] = a.alpha;
    meta["targets"] = a.targets;
    meta["label"] = a.label;
    write_text_file(dir / "meta.json", meta.dump(2) + "\n");
}

LoraAdapter load_adapter(const fs::path& dir) {
    json meta;
    try {
        meta = json::parse(read_text_file(dir / "meta.json"));
    } catch (const json::exception& e) {
        throw FormatError("adapter meta.json: " + std::string(e.what()));
    }
    LoraAdapter a;
    a.r = meta.at("r").get<int64_t>();
    a.alpha = meta.at("alpha").get<double>();
    a.targets = meta.at("targets").get<std::vector<std::string>>();
    a.label = meta.value("label", "");

    std::unordered_map<std::string, Tensor> by_name;
    for (auto& [name, t] : read_tensor_dir(dir)) by_name.emplace(name, std::move(t));
    for (const auto& t : a.targets) {
        auto ita = by_name.find(t + ".A");
        auto itb = by_name.find(t + ".B");
        if (ita == by_name.end() || itb == by_name.end())
            throw FormatError("adapter missing factors for target '" + t + "'");
        LoraEntry e;
        e.A = std::move(ita->second);
        e.B = std::move(itb->second);
        if (e.A.dim(0) != a.r || e.B.dim(1) != a.r)
            throw FormatError("adapter factors for '" + t + "' do not match rank " +
                              std::to_string(a.r));
        a.entries.emplace(t, std::move(e));
    }
    return a;
}

bool is_adapter_dir(const fs::path& dir) {
    return fs::exists(dir / "manifest.json") && fs::exists(dir / "meta.json");
}

}  // namespace cllab
