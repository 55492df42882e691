#include "cllab/model.hpp"

#include <algorithm>
#include <cmath>

#include "cllab/dataset.hpp"

namespace cllab {

Batch make_batch(std::span<const Example* const> examples, int32_t pad_id) {
    if (examples.empty()) throw ContractError("make_batch: empty example list");
    Batch b;
    b.bsz = static_cast<int64_t>(examples.size());
    int64_t max_len = 0;
    for (const Example* e : examples) {
        if (e->target.empty()) throw ContractError("make_batch: example with empty target");
        max_len = std::max(max_len,
                           static_cast<int64_t>(e->prompt.size() + e->target.size()));
    }
    b.len = max_len - 1;
    b.tokens.assign(static_cast<size_t>(b.bsz * b.len), pad_id);
    b.labels.assign(static_cast<size_t>(b.bsz * b.len), pad_id);
    b.label_mask.assign(static_cast<size_t>(b.bsz * b.len), 0);
    for (int64_t i = 0; i < b.bsz; ++i) {
        const Example& e = *examples[static_cast<size_t>(i)];
        std::vector<int32_t> seq = e.prompt;
        seq.insert(seq.end(), e.target.begin(), e.target.end());
        const int64_t n = static_cast<int64_t>(seq.size());
        const int64_t prompt_len = static_cast<int64_t>(e.prompt.size());
        for (int64_t j = 0; j + 1 < n; ++j) {
            b.tokens[static_cast<size_t>(i * b.len + j)] = seq[static_cast<size_t>(j)];
            b.labels[static_cast<size_t>(i * b.len + j)] = seq[static_cast<size_t>(j + 1)];
            // label j is token j+1; masked in iff it lies in the target span
            b.label_mask[static_cast<size_t>(i * b.len + j)] = (j + 1 >= prompt_len) ? 1 : 0;
        }
    }
    return b;
}

namespace {

Tensor causal_mask(int64_t len, DType dt) {
    Tensor m({len, len}, dt);
    for (int64_t i = 0; i < len; ++i)
        for (int64_t j = 0; j < len; ++j)
            if (j > i) m.set(i * len + j, -1e30);
    return m;
}

void check_tokens(const ModelConfig& cfg, const std::vector<int32_t>& tokens, int64_t len) {
    if (len > cfg.seq_len)
        throw ContractError("sequence length " + std::to_string(len) + " exceeds seq_len " +
                            std::to_string(cfg.seq_len));
    for (int32_t t : tokens)
        if (t < 0 || t >= cfg.vocab_size)
            throw ContractError("token id " + std::to_string(t) + " outside vocabulary of " +
                                std::to_string(cfg.vocab_size));
}

}  // namespace

LmGraph build_lm_graph(const Checkpoint& ckpt, std::span<const LoraAdapter* const> adapters,
                       const Batch& batch, TrainMode mode, bool check_finite) {
    const ModelConfig& cfg = ckpt.config;
    check_tokens(cfg, batch.tokens, batch.len);
    for (const LoraAdapter* a : adapters) check_adapter_compat(ckpt, *a);

    LmGraph lm(DType::F32, check_finite);
    Graph& g = lm.graph;

    // Bind base tensors.
    std::unordered_map<std::string, Var> base;
    for (const auto& name : ckpt.order) {
        if (mode == TrainMode::full) {
            Var v = g.param(ckpt.tensor(name), name);
            base[name] = v;
            lm.params[name] = v;
        } else {
            base[name] = g.input(ckpt.tensor(name), name);
        }
    }

    // Compose adapter deltas into targeted weights; only the newest adapter
    // trains in last_adapter mode.
    std::unordered_map<std::string, Var> eff = base;
    for (size_t ai = 0; ai < adapters.size(); ++ai) {
        const LoraAdapter& a = *adapters[ai];
        const bool trainable =
            mode == TrainMode::last_adapter && ai + 1 == adapters.size();
        for (const auto& t : a.targets) {
            const LoraEntry& e = a.entry(t);
            Var va, vb;
            if (trainable) {
                va = g.param(e.A, "adapter:" + t + ".A");
                vb = g.param(e.B, "adapter:" + t + ".B");
                lm.params["adapter:" + t + ".A"] = va;
                lm.params["adapter:" + t + ".B"] = vb;
            } else {
                va = g.input(e.A);
                vb = g.input(e.B);
            }
            Var delta = g.scale(g.matmul(vb, va), a.scaling());
            eff[t] = g.add(eff[t], delta);
        }
    }

    const int64_t bsz = batch.bsz, len = batch.len, H = cfg.n_heads;
    const int64_t head_dim = cfg.d_model / H;

    Var x = g.embedding(eff.at("embed.weight"), batch.tokens, {bsz, len});
    x = g.add(x, g.slice(eff.at("pos.weight"), 0, 0, len));
    Var mask = g.input(causal_mask(len, DType::F32), "causal_mask");

    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        Var h = g.layernorm(x, eff.at(p + "attn.norm.weight"));
        Var q = g.split_heads(g.matmul_nt(h, eff.at(p + "attn.q.weight")), H);
        Var k = g.split_heads(g.matmul_nt(h, eff.at(p + "attn.k.weight")), H);
        Var v = g.split_heads(g.matmul_nt(h, eff.at(p + "attn.v.weight")), H);
        Var scores = g.scale(g.matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(head_dim)));
        Var probs = g.softmax(g.add(scores, mask));
        Var ctx = g.merge_heads(g.matmul(probs, v));
        x = g.add(x, g.matmul_nt(ctx, eff.at(p + "attn.o.weight")));

        Var h2 = g.layernorm(x, eff.at(p + "ffn.norm.weight"));
        Var gate = g.silu(g.matmul_nt(h2, eff.at(p + "ffn.gate.weight")));
        Var up = g.matmul_nt(h2, eff.at(p + "ffn.up.weight"));
        x = g.add(x, g.matmul_nt(g.mul(gate, up), eff.at(p + "ffn.down.weight")));
    }

    x = g.layernorm(x, eff.at("final.norm.weight"));
    const std::string head = cfg.tie_embeddings ? "embed.weight" : "lm_head.weight";
    lm.logits = g.matmul_nt(x, eff.at(head));
    return lm;
}

Tensor lm_forward(const Checkpoint& ckpt, std::span<const LoraAdapter* const> adapters,
                  const std::vector<int32_t>& tokens) {
    if (tokens.empty()) throw ContractError("lm_forward: empty token sequence");
    Batch b;
    b.bsz = 1;
    b.len = static_cast<int64_t>(tokens.size());
    b.tokens = tokens;
    b.labels.assign(tokens.size(), 0);
    b.label_mask.assign(tokens.size(), 0);
    LmGraph lm = build_lm_graph(ckpt, adapters, b, TrainMode::none);
    return lm.graph.value(lm.logits).reshaped({b.len, ckpt.config.vocab_size});
}

double ce_loss(const Tensor& logits, const std::vector<int32_t>& targets,
               const std::vector<uint8_t>& loss_mask) {
    const int64_t v = logits.dim(-1);
    const int64_t rows = logits.numel() / v;
    if (static_cast<int64_t>(targets.size()) != rows || targets.size() != loss_mask.size())
        throw ContractError("ce_loss: targets/mask do not align with logits rows");
    int64_t n_masked = 0;
    double total = 0;
    for (int64_t r = 0; r < rows; ++r) {
        if (!loss_mask[static_cast<size_t>(r)]) continue;
        ++n_masked;
        const int32_t t = targets[static_cast<size_t>(r)];
        if (t < 0 || t >= v) throw ContractError("ce_loss: target id outside vocabulary");
        double mx = logits.get(r * v);
        for (int64_t i = 1; i < v; ++i) mx = std::max(mx, logits.get(r * v + i));
        double s = 0;
        for (int64_t i = 0; i < v; ++i) s += std::exp(logits.get(r * v + i) - mx);
        total += mx + std::log(s) - logits.get(r * v + t);
    }
    if (n_masked == 0) throw ContractError("ce_loss: all positions masked out");
    return total / static_cast<double>(n_masked);
}

int32_t argmax_last_row(const Tensor& logits) {
    const int64_t v = logits.dim(-1);
    const int64_t row = logits.numel() / v - 1;
    int32_t best = 0;
    double best_v = logits.get(row * v);
    for (int64_t i = 1; i < v; ++i) {
        const double x = logits.get(row * v + i);
        if (x > best_v) {
            best_v = x;
            best = static_cast<int32_t>(i);
        }
    }
    return best;
}

std::vector<int32_t> greedy_decode(const Checkpoint& ckpt,
                                   std::span<const LoraAdapter* const> adapters,
                                   const std::vector<int32_t>& prompt, int64_t n_gen) {
    std::vector<int32_t> seq = prompt;
    std::vector<int32_t> out;
    out.reserve(static_cast<size_t>(n_gen));
    for (int64_t i = 0; i < n_gen; ++i) {
        const Tensor logits = lm_forward(ckpt, adapters, seq);
        const int32_t next = argmax_last_row(logits);
        out.push_back(next);
        seq.push_back(next);
    }
    return out;
}

}  // namespace cllab
