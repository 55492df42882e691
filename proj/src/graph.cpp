#include "cllab/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace cllab {

namespace {

constexpr double kLayerNormEps = 1e-5;

// ---- GEMM kernels -------------------------------------------------------
// All kernels accumulate (C +=) with a fixed iteration order, so callers get
// byte-reproducible results. Loop layouts are chosen so the innermost loop
// either has no reduction (vectorizes as-is) or uses a fixed bank of
// independent accumulators.

template <class T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* ar = a + i * k;
        T* cr = c + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const T av = ar[p];
            const T* br = b + p * n;
            for (int64_t j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

// c[i,j] += sum_p a[i,p] * b[j,p]
template <class T>
void gemm_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    constexpr int64_t U = 8;
    for (int64_t i = 0; i < m; ++i) {
        const T* ar = a + i * k;
        T* cr = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const T* br = b + j * k;
            T acc[U] = {};
            int64_t p = 0;
            for (; p + U <= k; p += U) {
                for (int64_t u = 0; u < U; ++u) acc[u] += ar[p + u] * br[p + u];
            }
            T s = 0;
            for (int64_t u = 0; u < U; ++u) s += acc[u];
            for (; p < k; ++p) s += ar[p] * br[p];
            cr[j] += s;
        }
    }
}

// c[i,j] += sum_p a[p,i] * b[p,j]   (a is [k,m], b is [k,n])
template <class T>
void gemm_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t p = 0; p < k; ++p) {
        const T* ar = a + p * m;
        const T* br = b + p * n;
        for (int64_t i = 0; i < m; ++i) {
            const T av = ar[i];
            T* cr = c + i * n;
            for (int64_t j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

template <class T>
const T* data_of(const Tensor& t);
template <>
const float* data_of<float>(const Tensor& t) {
    return t.f32();
}
template <>
const double* data_of<double>(const Tensor& t) {
    return t.f64();
}

template <class T>
T* data_of(Tensor& t);
template <>
float* data_of<float>(Tensor& t) {
    return t.f32();
}
template <>
double* data_of<double>(Tensor& t) {
    return t.f64();
}

std::vector<int64_t> lead_dims(const std::vector<int64_t>& shape, size_t keep_last) {
    return std::vector<int64_t>(shape.begin(), shape.end() - static_cast<int64_t>(keep_last));
}

int64_t prod(const std::vector<int64_t>& dims) {
    int64_t n = 1;
    for (int64_t d : dims) n *= d;
    return n;
}

bool is_suffix(const std::vector<int64_t>& suffix, const std::vector<int64_t>& full) {
    if (suffix.size() > full.size()) return false;
    return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

}  // namespace

const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Leaf: return "leaf";
        case OpKind::Matmul: return "matmul";
        case OpKind::MatmulNT: return "matmul_nt";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "mul";
        case OpKind::Scale: return "scale";
        case OpKind::Softmax: return "softmax";
        case OpKind::LayerNorm: return "layer_norm";
        case OpKind::Embedding: return "embedding";
        case OpKind::Silu: return "silu";
        case OpKind::Concat: return "concat";
        case OpKind::Slice: return "slice";
        case OpKind::SplitHeads: return "split_heads";
        case OpKind::MergeHeads: return "merge_heads";
        case OpKind::Reshape: return "reshape";
        case OpKind::Sum: return "sum";
        case OpKind::SumSq: return "sum_sq";
        case OpKind::CrossEntropy: return "cross_entropy";
        case OpKind::RowScale: return "row_scale";
        case OpKind::TopKGate: return "topk_gate";
    }
    return "?";
}

Graph::Node& Graph::at(Var v) {
    check_same_graph(v);
    return nodes_[static_cast<size_t>(v.id)];
}

const Graph::Node& Graph::at(Var v) const {
    check_same_graph(v);
    return nodes_[static_cast<size_t>(v.id)];
}

void Graph::check_same_graph(Var v) const {
    if (!v.valid() || v.id >= static_cast<int32_t>(nodes_.size()))
        throw ContractError("graph: dangling node handle");
}

void Graph::fail_shape(const std::string& msg, OpKind k, Var a, Var b) const {
    std::ostringstream os;
    os << "node " << nodes_.size() << " (" << op_name(k) << "): " << msg;
    if (a.valid()) os << "; lhs " << at(a).value.shape_str();
    if (b.valid()) os << "; rhs " << at(b).value.shape_str();
    throw ShapeError(os.str());
}

Var Graph::push(Node n) {
    if (n.kind != OpKind::Leaf && n.value.dtype() != dtype_)
        throw ContractError("graph: node dtype drifted from graph dtype");
    if (check_finite_ && !n.value.all_finite()) {
        std::ostringstream os;
        os << "node " << nodes_.size() << " (" << op_name(n.kind) << "): non-finite output";
        if (!n.name.empty()) os << " [" << n.name << "]";
        throw NumericError(os.str());
    }
    nodes_.push_back(std::move(n));
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

Var Graph::param(Tensor value, std::string name) {
    if (value.dtype() != dtype_) throw ContractError("param dtype differs from graph dtype");
    Node n;
    n.kind = OpKind::Leaf;
    n.value = std::move(value);
    n.needs_grad = true;
    n.is_param = true;
    n.name = std::move(name);
    return push(std::move(n));
}

Var Graph::input(Tensor value, std::string name) {
    if (value.dtype() != dtype_) throw ContractError("input dtype differs from graph dtype");
    Node n;
    n.kind = OpKind::Leaf;
    n.value = std::move(value);
    n.name = std::move(name);
    return push(std::move(n));
}

const Tensor& Graph::value(Var v) const { return at(v).value; }

Tensor Graph::grad(Var v) const {
    const Node& n = at(v);
    if (n.grad.defined() && n.grad.numel() == n.value.numel()) return n.grad;
    return Tensor::zeros(n.value.shape(), dtype_);
}

Tensor& Graph::grad_buf(int32_t id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.grad.defined() || n.grad.numel() != n.value.numel())
        n.grad = Tensor::zeros(n.value.shape(), dtype_);
    return n.grad;
}

int64_t Graph::n_masked_rows(Var ce_node) const {
    const Node& n = at(ce_node);
    if (n.kind != OpKind::CrossEntropy) throw ContractError("n_masked_rows: not a CE node");
    return n.i0;
}

// ---- op construction ------------------------------------------------------

namespace {
template <class T>
void matmul_fwd(const Tensor& a, const Tensor& b, Tensor& y, bool nt) {
    const int64_t m = a.dim(-2), k = a.dim(-1);
    const int64_t n = nt ? b.dim(-2) : b.dim(-1);
    const int64_t slabs = prod(lead_dims(a.shape(), 2));
    const bool shared_b = b.rank() == 2;
    const T* ap = data_of<T>(a);
    const T* bp = data_of<T>(b);
    T* yp = data_of<T>(y);
    for (int64_t s = 0; s < slabs; ++s) {
        const T* bs = shared_b ? bp : bp + s * k * n;
        if (nt)
            gemm_nt(ap + s * m * k, bs, yp + s * m * n, m, k, n);
        else
            gemm_nn(ap + s * m * k, bs, yp + s * m * n, m, k, n);
    }
}
}  // namespace

Var Graph::matmul(Var a, Var b) {
    const Node& na = at(a);
    const Node& nb = at(b);
    if (na.value.rank() < 2 || nb.value.rank() < 2)
        fail_shape("operands must have rank >= 2", OpKind::Matmul, a, b);
    const int64_t k = na.value.dim(-1);
    if (nb.value.dim(-2) != k) fail_shape("inner dimensions differ", OpKind::Matmul, a, b);
    if (nb.value.rank() != 2 && lead_dims(na.value.shape(), 2) != lead_dims(nb.value.shape(), 2))
        fail_shape("leading batch dimensions differ", OpKind::Matmul, a, b);
    std::vector<int64_t> out_shape = na.value.shape();
    out_shape.back() = nb.value.dim(-1);
    Node n;
    n.kind = OpKind::Matmul;
    n.in = {a.id, b.id};
    n.needs_grad = na.needs_grad || nb.needs_grad;
    n.value = Tensor::zeros(out_shape, dtype_);
    if (dtype_ == DType::F32)
        matmul_fwd<float>(na.value, nb.value, n.value, false);
    else
        matmul_fwd<double>(na.value, nb.value, n.value, false);
    return push(std::move(n));
}

Var Graph::matmul_nt(Var a, Var b) {
    const Node& na = at(a);
    const Node& nb = at(b);
    if (na.value.rank() < 2 || nb.value.rank() < 2)
        fail_shape("operands must have rank >= 2", OpKind::MatmulNT, a, b);
    const int64_t k = na.value.dim(-1);
    if (nb.value.dim(-1) != k) fail_shape("inner dimensions differ", OpKind::MatmulNT, a, b);
    if (nb.value.rank() != 2 && lead_dims(na.value.shape(), 2) != lead_dims(nb.value.shape(), 2))
        fail_shape("leading batch dimensions differ", OpKind::MatmulNT, a, b);
    std::vector<int64_t> out_shape = na.value.shape();
    out_shape.back() = nb.value.dim(-2);
    Node n;
    n.kind = OpKind::MatmulNT;
    n.in = {a.id, b.id};
    n.needs_grad = na.needs_grad || nb.needs_grad;
    n.value = Tensor::zeros(out_shape, dtype_);
    if (dtype_ == DType::F32)
        matmul_fwd<float>(na.value, nb.value, n.value, true);
    else
        matmul_fwd<double>(na.value, nb.value, n.value, true);
    return push(std::move(n));
}

namespace {
template <class T, class F>
void ew_broadcast(const Tensor& a, const Tensor& b, Tensor& y, F&& f) {
    const T* ap = data_of<T>(a);
    const T* bp = data_of<T>(b);
    T* yp = data_of<T>(y);
    const int64_t bn = b.numel();
    const int64_t rep = a.numel() / bn;
    for (int64_t r = 0; r < rep; ++r) {
        const T* as = ap + r * bn;
        T* ys = yp + r * bn;
        for (int64_t i = 0; i < bn; ++i) ys[i] = f(as[i], bp[i]);
    }
}
}  // namespace

Var Graph::add(Var a, Var b) {
    const Node& na = at(a);
    const Node& nb = at(b);
    if (!is_suffix(nb.value.shape(), na.value.shape()))
        fail_shape("rhs shape is not a suffix of lhs shape", OpKind::Add, a, b);
    Node n;
    n.kind = OpKind::Add;
    n.in = {a.id, b.id};
    n.needs_grad = na.needs_grad || nb.needs_grad;
    n.value = Tensor::zeros(na.value.shape(), dtype_);
    if (dtype_ == DType::F32)
        ew_broadcast<float>(na.value, nb.value, n.value, [](float x, float y) { return x + y; });
    else
        ew_broadcast<double>(na.value, nb.value, n.value, [](double x, double y) { return x + y; });
    return push(std::move(n));
}

Var Graph::sub(Var a, Var b) {
    const Node& na = at(a);
    const Node& nb = at(b);
    if (na.value.shape() != nb.value.shape())
        fail_shape("operand shapes differ", OpKind::Sub, a, b);
    Node n;
    n.kind = OpKind::Sub;
    n.in = {a.id, b.id};
    n.needs_grad = na.needs_grad || nb.needs_grad;
    n.value = Tensor::zeros(na.value.shape(), dtype_);
    if (dtype_ == DType::F32)
        ew_broadcast<float>(na.value, nb.value, n.value, [](float x, float y) { return x - y; });
    else
        ew_broadcast<double>(na.value, nb.value, n.value, [](double x, double y) { return x - y; });
    return push(std::move(n));
}

Var Graph::mul(Var a, Var b) {
    const Node& na = at(a);
    const Node& nb = at(b);
    if (!is_suffix(nb.value.shape(), na.value.shape()))
        fail_shape("rhs shape is not a suffix of lhs shape", OpKind::Mul, a, b);
    Node n;
    n.kind = OpKind::Mul;
    n.in = {a.id, b.id};
    n.needs_grad = na.needs_grad || nb.needs_grad;
    n.value = Tensor::zeros(na.value.shape(), dtype_);
    if (dtype_ == DType::F32)
        ew_broadcast<float>(na.value, nb.value, n.value, [](float x, float y) { return x * y; });
    else
        ew_broadcast<double>(na.value, nb.value, n.value, [](double x, double y) { return x * y; });
    return push(std::move(n));
}

Var Graph::scale(Var a, double s) {
    const Node& na = at(a);
    Node n;
    n.kind = OpKind::Scale;
    n.in = {a.id, -1};
    n.scalar = s;
    n.needs_grad = na.needs_grad;
    n.value = Tensor::zeros(na.value.shape(), dtype_);
    if (dtype_ == DType::F32) {
        const float fv = static_cast<float>(s);
        const float* ap = na.value.f32();
        float* yp = n.value.f32();
        for (int64_t i = 0; i < na.value.numel(); ++i) yp[i] = ap[i] * fv;
    } else {
        const double* ap = na.value.f64();
        double* yp = n.value.f64();
        for (int64_t i = 0; i < na.value.numel(); ++i) yp[i] = ap[i] * s;
    }
    return push(std::move(n));
}

namespace {
template <class T>
void softmax_fwd(const Tensor& x, Tensor& y) {
    const int64_t d = x.dim(-1);
    const int64_t rows = x.numel() / d;
    const T* xp = data_of<T>(x);
    T* yp = data_of<T>(y);
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = xp + r * d;
        T* yr = yp + r * d;
        T mx = xr[0];
        for (int64_t i = 1; i < d; ++i) mx = std::max(mx, xr[i]);
        T s = 0;
        for (int64_t i = 0; i < d; ++i) {
            yr[i] = std::exp(xr[i] - mx);
            s += yr[i];
        }
        const T inv = T(1) / s;
        for (int64_t i = 0; i < d; ++i) yr[i] *= inv;
    }
}

template <class T>
void layernorm_fwd(const Tensor& x, const Tensor& g, Tensor& y) {
    const int64_t d = x.dim(-1);
    const int64_t rows = x.numel() / d;
    const T* xp = data_of<T>(x);
    const T* gp = data_of<T>(g);
    T* yp = data_of<T>(y);
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = xp + r * d;
        T* yr = yp + r * d;
        double mu = 0;
        for (int64_t i = 0; i < d; ++i) mu += static_cast<double>(xr[i]);
        mu /= static_cast<double>(d);
        double var = 0;
        for (int64_t i = 0; i < d; ++i) {
            const double c = static_cast<double>(xr[i]) - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        for (int64_t i = 0; i < d; ++i)
            yr[i] = static_cast<T>((static_cast<double>(xr[i]) - mu) * inv) * gp[i];
    }
}

template <class T>
void silu_fwd(const Tensor& x, Tensor& y) {
    const T* xp = data_of<T>(x);
    T* yp = data_of<T>(y);
    for (int64_t i = 0; i < x.numel(); ++i) {
        const T s = T(1) / (T(1) + std::exp(-xp[i]));
        yp[i] = xp[i] * s;
    }
}
}  // namespace

Var Graph::softmax(Var a) {
    const Node& na = at(a);
    if (na.value.rank() < 1) fail_shape("operand must have rank >= 1", OpKind::Softmax, a, {});
    Node n;
    n.kind = OpKind::Softmax;
    n.in = {a.id, -1};
    n.needs_grad = na.needs_grad;
    n.value = Tensor::zeros(na.value.shape(), dtype_);
    if (dtype_ == DType::F32)
        softmax_fwd<float>(na.value, n.value);
    else
        softmax_fwd<double>(na.value, n.value);
    return push(std::move(n));
}

Var Graph::layernorm(Var x, Var gain) {
    const Node& nx = at(x);
    const Node& ng = at(gain);
    if (ng.value.rank() != 1 || ng.value.dim(0) != nx.value.dim(-1))
        fail_shape("gain must be a vector matching the last dimension", OpKind::LayerNorm, x, gain);
    Node n;
    n.kind = OpKind::LayerNorm;
    n.in = {x.id, gain.id};
    n.needs_grad = nx.needs_grad || ng.needs_grad;
    n.value = Tensor::zeros(nx.value.shape(), dtype_);
    if (dtype_ == DType::F32)
        layernorm_fwd<float>(nx.value, ng.value, n.value);
    else
        layernorm_fwd<double>(nx.value, ng.value, n.value);
    return push(std::move(n));
}

Var Graph::embedding(Var table, std::vector<int32_t> ids, std::vector<int64_t> lead_shape) {
    const Node& nt = at(table);
    if (nt.value.rank() != 2) fail_shape("table must be rank 2", OpKind::Embedding, table, {});
    const int64_t rows = nt.value.dim(0);
    const int64_t d = nt.value.dim(1);
    if (prod(lead_shape) != static_cast<int64_t>(ids.size()))
        fail_shape("lead shape does not match id count", OpKind::Embedding, table, {});
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= rows) {
            std::ostringstream os;
            os << "embedding: id " << ids[i] << " at position " << i << " outside table of "
               << rows << " rows";
            throw ContractError(os.str());
        }
    }
    std::vector<int64_t> out_shape = lead_shape;
    out_shape.push_back(d);
    Node n;
    n.kind = OpKind::Embedding;
    n.in = {table.id, -1};
    n.needs_grad = nt.needs_grad;
    n.value = Tensor::zeros(out_shape, dtype_);
    const size_t row_bytes = static_cast<size_t>(d) * dtype_size(dtype_);
    for (size_t i = 0; i < ids.size(); ++i) {
        std::memcpy(n.value.raw() + i * row_bytes,
                    nt.value.raw() + static_cast<size_t>(ids[i]) * row_bytes, row_bytes);
    }
    n.ids = std::move(ids);
    return push(std::move(n));
}

Var Graph::silu(Var a) {
    const Node& na = at(a);
    Node n;
    n.kind = OpKind::Silu;
    n.in = {a.id, -1};
    n.needs_grad = na.needs_grad;
    n.value = Tensor::zeros(na.value.shape(), dtype_);
    if (dtype_ == DType::F32)
        silu_fwd<float>(na.value, n.value);
    else
        silu_fwd<double>(na.value, n.value);
    return push(std::move(n));
}

Var Graph::concat(const std::vector<Var>& parts, int64_t axis) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    const Node& first = at(parts[0]);
    const int64_t r = first.value.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) fail_shape("axis out of range", OpKind::Concat, parts[0], {});
    std::vector<int64_t> out_shape = first.value.shape();
    bool needs = false;
    for (Var p : parts) {
        const Node& np = at(p);
        if (np.value.rank() != r) fail_shape("rank mismatch", OpKind::Concat, parts[0], p);
        for (int64_t i = 0; i < r; ++i) {
            if (i != axis && np.value.dim(i) != first.value.dim(i))
                fail_shape("non-axis dimensions differ", OpKind::Concat, parts[0], p);
        }
        if (p.id != parts[0].id) out_shape[static_cast<size_t>(axis)] += np.value.dim(axis);
        needs = needs || np.needs_grad;
    }
    Node n;
    n.kind = OpKind::Concat;
    n.i0 = axis;
    n.needs_grad = needs;
    n.value = Tensor::zeros(out_shape, dtype_);
    for (Var p : parts) n.multi_in.push_back(p.id);

    // outer x axis x inner copy
    const int64_t outer = prod(std::vector<int64_t>(out_shape.begin(), out_shape.begin() + axis));
    const int64_t inner =
        prod(std::vector<int64_t>(out_shape.begin() + axis + 1, out_shape.end()));
    const size_t esz = dtype_size(dtype_);
    int64_t axis_off = 0;
    for (Var p : parts) {
        const Tensor& pv = at(p).value;
        const int64_t pa = pv.dim(axis);
        for (int64_t o = 0; o < outer; ++o) {
            std::memcpy(n.value.raw() +
                            ((o * out_shape[static_cast<size_t>(axis)] + axis_off) * inner) * esz,
                        pv.raw() + (o * pa * inner) * esz,
                        static_cast<size_t>(pa * inner) * esz);
        }
        axis_off += pa;
    }
    return push(std::move(n));
}

Var Graph::slice(Var a, int64_t axis, int64_t start, int64_t len) {
    const Node& na = at(a);
    const int64_t r = na.value.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) fail_shape("axis out of range", OpKind::Slice, a, {});
    if (start < 0 || len <= 0 || start + len > na.value.dim(axis))
        fail_shape("slice bounds out of range", OpKind::Slice, a, {});
    std::vector<int64_t> out_shape = na.value.shape();
    out_shape[static_cast<size_t>(axis)] = len;
    Node n;
    n.kind = OpKind::Slice;
    n.in = {a.id, -1};
    n.i0 = axis;
    n.i1 = start;
    n.i2 = len;
    n.needs_grad = na.needs_grad;
    n.value = Tensor::zeros(out_shape, dtype_);
    const int64_t outer =
        prod(std::vector<int64_t>(out_shape.begin(), out_shape.begin() + axis));
    const int64_t inner =
        prod(std::vector<int64_t>(out_shape.begin() + axis + 1, out_shape.end()));
    const int64_t in_axis = na.value.dim(axis);
    const size_t esz = dtype_size(dtype_);
    for (int64_t o = 0; o < outer; ++o) {
        std::memcpy(n.value.raw() + (o * len * inner) * esz,
                    na.value.raw() + ((o * in_axis + start) * inner) * esz,
                    static_cast<size_t>(len * inner) * esz);
    }
    return push(std::move(n));
}

Var Graph::split_heads(Var x, int64_t n_heads) {
    const Node& nx = at(x);
    if (nx.value.rank() != 3) fail_shape("expected [batch, seq, d]", OpKind::SplitHeads, x, {});
    const int64_t b = nx.value.dim(0), s = nx.value.dim(1), d = nx.value.dim(2);
    if (n_heads <= 0 || d % n_heads != 0)
        fail_shape("d_model not divisible by head count", OpKind::SplitHeads, x, {});
    const int64_t e = d / n_heads;
    Node n;
    n.kind = OpKind::SplitHeads;
    n.in = {x.id, -1};
    n.i0 = n_heads;
    n.needs_grad = nx.needs_grad;
    n.value = Tensor::zeros({b, n_heads, s, e}, dtype_);
    const size_t esz = dtype_size(dtype_);
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t h = 0; h < n_heads; ++h)
            for (int64_t si = 0; si < s; ++si)
                std::memcpy(n.value.raw() + (((bi * n_heads + h) * s + si) * e) * esz,
                            nx.value.raw() + ((bi * s + si) * d + h * e) * esz,
                            static_cast<size_t>(e) * esz);
    return push(std::move(n));
}

Var Graph::merge_heads(Var x) {
    const Node& nx = at(x);
    if (nx.value.rank() != 4) fail_shape("expected [batch, heads, seq, e]", OpKind::MergeHeads, x, {});
    const int64_t b = nx.value.dim(0), h = nx.value.dim(1), s = nx.value.dim(2), e = nx.value.dim(3);
    Node n;
    n.kind = OpKind::MergeHeads;
    n.in = {x.id, -1};
    n.needs_grad = nx.needs_grad;
    n.value = Tensor::zeros({b, s, h * e}, dtype_);
    const size_t esz = dtype_size(dtype_);
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t hi = 0; hi < h; ++hi)
            for (int64_t si = 0; si < s; ++si)
                std::memcpy(n.value.raw() + ((bi * s + si) * (h * e) + hi * e) * esz,
                            nx.value.raw() + (((bi * h + hi) * s + si) * e) * esz,
                            static_cast<size_t>(e) * esz);
    return push(std::move(n));
}

Var Graph::reshape(Var a, std::vector<int64_t> shape) {
    const Node& na = at(a);
    Node n;
    n.kind = OpKind::Reshape;
    n.in = {a.id, -1};
    n.needs_grad = na.needs_grad;
    n.value = na.value.reshaped(std::move(shape));
    return push(std::move(n));
}

Var Graph::sum(Var a) {
    const Node& na = at(a);
    Node n;
    n.kind = OpKind::Sum;
    n.in = {a.id, -1};
    n.needs_grad = na.needs_grad;
    double acc = 0;
    for (int64_t i = 0; i < na.value.numel(); ++i) acc += na.value.get(i);
    n.value = Tensor::scalar(acc, dtype_);
    return push(std::move(n));
}

Var Graph::sum_sq(Var a) {
    const Node& na = at(a);
    Node n;
    n.kind = OpKind::SumSq;
    n.in = {a.id, -1};
    n.needs_grad = na.needs_grad;
    double acc = 0;
    for (int64_t i = 0; i < na.value.numel(); ++i) {
        const double v = na.value.get(i);
        acc += v * v;
    }
    n.value = Tensor::scalar(acc, dtype_);
    return push(std::move(n));
}

Var Graph::cross_entropy(Var logits, std::vector<int32_t> targets, std::vector<uint8_t> mask) {
    const Node& nl = at(logits);
    if (nl.value.rank() < 2) fail_shape("logits must have rank >= 2", OpKind::CrossEntropy, logits, {});
    const int64_t v = nl.value.dim(-1);
    const int64_t rows = nl.value.numel() / v;
    if (static_cast<int64_t>(targets.size()) != rows || targets.size() != mask.size())
        fail_shape("targets/mask length does not match logit rows", OpKind::CrossEntropy, logits, {});
    int64_t n_masked = 0;
    for (size_t i = 0; i < mask.size(); ++i) {
        if (!mask[i]) continue;
        ++n_masked;
        if (targets[i] < 0 || targets[i] >= v)
            throw ContractError("cross_entropy: target id outside vocabulary");
    }
    if (n_masked == 0) throw ContractError("cross_entropy: all positions masked out");

    double total = 0;
    for (int64_t r = 0; r < rows; ++r) {
        if (!mask[static_cast<size_t>(r)]) continue;
        double mx = nl.value.get(r * v);
        for (int64_t i = 1; i < v; ++i) mx = std::max(mx, nl.value.get(r * v + i));
        double s = 0;
        for (int64_t i = 0; i < v; ++i) s += std::exp(nl.value.get(r * v + i) - mx);
        const double lse = mx + std::log(s);
        total += lse - nl.value.get(r * v + targets[static_cast<size_t>(r)]);
    }
    Node n;
    n.kind = OpKind::CrossEntropy;
    n.in = {logits.id, -1};
    n.needs_grad = nl.needs_grad;
    n.i0 = n_masked;
    n.ids = std::move(targets);
    n.mask = std::move(mask);
    n.value = Tensor::scalar(total / static_cast<double>(n_masked), dtype_);
    return push(std::move(n));
}

Var Graph::row_scale(Var x, Var w) {
    const Node& nx = at(x);
    const Node& nw = at(w);
    std::vector<int64_t> lead = lead_dims(nx.value.shape(), 1);
    std::vector<int64_t> wshape = nw.value.shape();
    if (!wshape.empty() && wshape.back() == 1) wshape.pop_back();
    if (wshape != lead) fail_shape("weights must match row layout", OpKind::RowScale, x, w);
    Node n;
    n.kind = OpKind::RowScale;
    n.in = {x.id, w.id};
    n.needs_grad = nx.needs_grad || nw.needs_grad;
    n.value = Tensor::zeros(nx.value.shape(), dtype_);
    const int64_t d = nx.value.dim(-1);
    const int64_t rows = nx.value.numel() / d;
    if (dtype_ == DType::F32) {
        const float* xp = nx.value.f32();
        const float* wp = nw.value.f32();
        float* yp = n.value.f32();
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t i = 0; i < d; ++i) yp[r * d + i] = xp[r * d + i] * wp[r];
    } else {
        const double* xp = nx.value.f64();
        const double* wp = nw.value.f64();
        double* yp = n.value.f64();
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t i = 0; i < d; ++i) yp[r * d + i] = xp[r * d + i] * wp[r];
    }
    return push(std::move(n));
}

namespace {
// Deterministic top-k selection: indices ordered by (logit desc, index asc).
std::vector<int64_t> topk_select(const Tensor& logits, int64_t row, int64_t e, int64_t k) {
    std::vector<int64_t> idx(static_cast<size_t>(e));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
        return logits.get(row * e + a) > logits.get(row * e + b);
    });
    idx.resize(static_cast<size_t>(k));
    std::sort(idx.begin(), idx.end());
    return idx;
}
}  // namespace

Var Graph::topk_gate(Var logits, int64_t k) {
    const Node& nl = at(logits);
    if (nl.value.rank() < 1) fail_shape("rank >= 1 required", OpKind::TopKGate, logits, {});
    const int64_t e = nl.value.dim(-1);
    if (k < 1 || k > e) throw DomainError("topk_gate: k outside [1, n_experts]");
    const int64_t rows = nl.value.numel() / e;
    Node n;
    n.kind = OpKind::TopKGate;
    n.in = {logits.id, -1};
    n.i0 = k;
    n.needs_grad = nl.needs_grad;
    n.value = Tensor::zeros(nl.value.shape(), dtype_);
    for (int64_t r = 0; r < rows; ++r) {
        const auto sel = topk_select(nl.value, r, e, k);
        double mx = nl.value.get(r * e + sel[0]);
        for (int64_t i : sel) mx = std::max(mx, nl.value.get(r * e + i));
        double s = 0;
        for (int64_t i : sel) s += std::exp(nl.value.get(r * e + i) - mx);
        for (int64_t i : sel)
            n.value.set(r * e + i, std::exp(nl.value.get(r * e + i) - mx) / s);
    }
    return push(std::move(n));
}

// ---- backward -------------------------------------------------------------

GradMap Graph::backward(Var loss) {
    Node& nl = at(loss);
    if (nl.value.numel() != 1) throw ContractError("backward: loss node is not scalar");
    for (Node& n : nodes_) n.grad = Tensor();
    grad_buf(loss.id).set(0, 1.0);
    for (int32_t id = loss.id; id >= 0; --id) {
        const Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.needs_grad || n.kind == OpKind::Leaf) continue;
        if (!n.grad.defined() || n.grad.numel() != n.value.numel()) continue;  // unused branch
        backward_node(id);
    }
    backward_done_ = true;
    GradMap out;
    for (size_t i = 0; i < nodes_.size(); ++i) {
        const Node& n = nodes_[i];
        if (n.is_param && n.grad.defined() && n.grad.numel() == n.value.numel())
            out.emplace(static_cast<int32_t>(i), n.grad);
    }
    return out;
}

namespace {
template <class T>
void matmul_bwd(const Tensor& gout, const Tensor& a, const Tensor& b, Tensor* da, Tensor* db,
                bool nt) {
    const int64_t m = a.dim(-2), k = a.dim(-1);
    const int64_t n = nt ? b.dim(-2) : b.dim(-1);
    const int64_t slabs = prod(lead_dims(a.shape(), 2));
    const bool shared_b = b.rank() == 2;
    const T* gp = data_of<T>(gout);
    const T* ap = data_of<T>(a);
    const T* bp = data_of<T>(b);
    for (int64_t s = 0; s < slabs; ++s) {
        const T* gs = gp + s * m * n;
        const T* as = ap + s * m * k;
        if (!nt) {
            // y = a.b ; da = g.b^T ; db = a^T.g
            const T* bs = shared_b ? bp : bp + s * k * n;
            if (da) gemm_nt(gs, bs, data_of<T>(*da) + s * m * k, m, n, k);
            if (db) gemm_tn(as, gs, data_of<T>(*db) + (shared_b ? 0 : s * k * n), k, m, n);
        } else {
            // y = a.b^T ; da = g.b ; db = g^T.a
            const T* bs = shared_b ? bp : bp + s * n * k;
            if (da) gemm_nn(gs, bs, data_of<T>(*da) + s * m * k, m, n, k);
            if (db) gemm_tn(gs, as, data_of<T>(*db) + (shared_b ? 0 : s * n * k), n, m, k);
        }
    }
}
}  // namespace

void Graph::backward_node(int32_t id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    const Tensor& gout = n.grad;
    auto in_node = [&](int which) -> Node& { return nodes_[static_cast<size_t>(n.in[which])]; };
    auto want = [&](int which) {
        return n.in[which] >= 0 && in_node(which).needs_grad;
    };
    auto gbuf = [&](int which) -> Tensor& { return grad_buf(n.in[which]); };

    switch (n.kind) {
        case OpKind::Leaf:
            break;
        case OpKind::Matmul:
        case OpKind::MatmulNT: {
            const Tensor& a = in_node(0).value;
            const Tensor& b = in_node(1).value;
            Tensor* da = want(0) ? &gbuf(0) : nullptr;
            Tensor* db = want(1) ? &gbuf(1) : nullptr;
            if (dtype_ == DType::F32)
                matmul_bwd<float>(gout, a, b, da, db, n.kind == OpKind::MatmulNT);
            else
                matmul_bwd<double>(gout, a, b, da, db, n.kind == OpKind::MatmulNT);
            break;
        }
        case OpKind::Add:
        case OpKind::Sub:
        case OpKind::Mul: {
            const Tensor& a = in_node(0).value;
            const Tensor& b = in_node(1).value;
            const int64_t bn = b.numel();
            const int64_t rep = a.numel() / bn;
            if (want(0)) {
                Tensor& da = gbuf(0);
                if (n.kind == OpKind::Mul) {
                    for (int64_t r = 0; r < rep; ++r)
                        for (int64_t i = 0; i < bn; ++i)
                            da.set(r * bn + i, da.get(r * bn + i) + gout.get(r * bn + i) * b.get(i));
                } else {
                    for (int64_t i = 0; i < a.numel(); ++i) da.set(i, da.get(i) + gout.get(i));
                }
            }
            if (want(1)) {
                Tensor& db = gbuf(1);
                if (n.kind == OpKind::Mul) {
                    for (int64_t r = 0; r < rep; ++r)
                        for (int64_t i = 0; i < bn; ++i)
                            db.set(i, db.get(i) + gout.get(r * bn + i) * a.get(r * bn + i));
                } else if (n.kind == OpKind::Sub) {
                    for (int64_t i = 0; i < bn; ++i) db.set(i, db.get(i) - gout.get(i));
                } else {
                    for (int64_t r = 0; r < rep; ++r)
                        for (int64_t i = 0; i < bn; ++i)
                            db.set(i, db.get(i) + gout.get(r * bn + i));
                }
            }
            break;
        }
        case OpKind::Scale: {
            if (want(0)) {
                Tensor& da = gbuf(0);
                for (int64_t i = 0; i < gout.numel(); ++i)
                    da.set(i, da.get(i) + gout.get(i) * n.scalar);
            }
            break;
        }
        case OpKind::Softmax: {
            if (!want(0)) break;
            Tensor& da = gbuf(0);
            const Tensor& y = n.value;
            const int64_t d = y.dim(-1);
            const int64_t rows = y.numel() / d;
            for (int64_t r = 0; r < rows; ++r) {
                double dot = 0;
                for (int64_t i = 0; i < d; ++i) dot += gout.get(r * d + i) * y.get(r * d + i);
                for (int64_t i = 0; i < d; ++i)
                    da.set(r * d + i,
                           da.get(r * d + i) + y.get(r * d + i) * (gout.get(r * d + i) - dot));
            }
            break;
        }
        case OpKind::LayerNorm: {
            const Tensor& x = in_node(0).value;
            const Tensor& g = in_node(1).value;
            const int64_t d = x.dim(-1);
            const int64_t rows = x.numel() / d;
            Tensor* dx = want(0) ? &gbuf(0) : nullptr;
            Tensor* dg = want(1) ? &gbuf(1) : nullptr;
            std::vector<double> xhat(static_cast<size_t>(d));
            for (int64_t r = 0; r < rows; ++r) {
                double mu = 0;
                for (int64_t i = 0; i < d; ++i) mu += x.get(r * d + i);
                mu /= static_cast<double>(d);
                double var = 0;
                for (int64_t i = 0; i < d; ++i) {
                    const double c = x.get(r * d + i) - mu;
                    var += c * c;
                }
                var /= static_cast<double>(d);
                const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
                for (int64_t i = 0; i < d; ++i)
                    xhat[static_cast<size_t>(i)] = (x.get(r * d + i) - mu) * inv;
                if (dg) {
                    for (int64_t i = 0; i < d; ++i)
                        dg->set(i, dg->get(i) + gout.get(r * d + i) * xhat[static_cast<size_t>(i)]);
                }
                if (dx) {
                    double m1 = 0, m2 = 0;
                    for (int64_t i = 0; i < d; ++i) {
                        const double dyh = gout.get(r * d + i) * g.get(i);
                        m1 += dyh;
                        m2 += dyh * xhat[static_cast<size_t>(i)];
                    }
                    m1 /= static_cast<double>(d);
                    m2 /= static_cast<double>(d);
                    for (int64_t i = 0; i < d; ++i) {
                        const double dyh = gout.get(r * d + i) * g.get(i);
                        dx->set(r * d + i, dx->get(r * d + i) +
                                               inv * (dyh - m1 - xhat[static_cast<size_t>(i)] * m2));
                    }
                }
            }
            break;
        }
        case OpKind::Embedding: {
            if (!want(0)) break;
            Tensor& dt = gbuf(0);
            const int64_t d = n.value.dim(-1);
            for (size_t i = 0; i < n.ids.size(); ++i) {
                const int64_t row = n.ids[i];
                for (int64_t j = 0; j < d; ++j)
                    dt.set(row * d + j,
                           dt.get(row * d + j) + gout.get(static_cast<int64_t>(i) * d + j));
            }
            break;
        }
        case OpKind::Silu: {
            if (!want(0)) break;
            Tensor& da = gbuf(0);
            const Tensor& x = in_node(0).value;
            for (int64_t i = 0; i < x.numel(); ++i) {
                const double xv = x.get(i);
                const double s = 1.0 / (1.0 + std::exp(-xv));
                da.set(i, da.get(i) + gout.get(i) * s * (1.0 + xv * (1.0 - s)));
            }
            break;
        }
        case OpKind::Concat: {
            const int64_t axis = n.i0;
            const auto& oshape = n.value.shape();
            const int64_t outer =
                prod(std::vector<int64_t>(oshape.begin(), oshape.begin() + axis));
            const int64_t inner =
                prod(std::vector<int64_t>(oshape.begin() + axis + 1, oshape.end()));
            int64_t axis_off = 0;
            for (int32_t pid : n.multi_in) {
                Node& pn = nodes_[static_cast<size_t>(pid)];
                const int64_t pa = pn.value.dim(axis);
                if (pn.needs_grad) {
                    Tensor& dp = grad_buf(pid);
                    for (int64_t o = 0; o < outer; ++o)
                        for (int64_t x = 0; x < pa * inner; ++x)
                            dp.set(o * pa * inner + x,
                                   dp.get(o * pa * inner + x) +
                                       gout.get((o * oshape[static_cast<size_t>(axis)] + axis_off) *
                                                    inner +
                                                x));
                }
                axis_off += pa;
            }
            break;
        }
        case OpKind::Slice: {
            if (!want(0)) break;
            Tensor& da = gbuf(0);
            const Tensor& a = in_node(0).value;
            const int64_t axis = n.i0, start = n.i1, len = n.i2;
            const auto& ishape = a.shape();
            const int64_t outer =
                prod(std::vector<int64_t>(ishape.begin(), ishape.begin() + axis));
            const int64_t inner =
                prod(std::vector<int64_t>(ishape.begin() + axis + 1, ishape.end()));
            const int64_t in_axis = a.dim(axis);
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t x = 0; x < len * inner; ++x)
                    da.set((o * in_axis + start) * inner + x,
                           da.get((o * in_axis + start) * inner + x) +
                               gout.get(o * len * inner + x));
            break;
        }
        case OpKind::SplitHeads: {
            if (!want(0)) break;
            Tensor& da = gbuf(0);
            const int64_t b = n.value.dim(0), h = n.value.dim(1), s = n.value.dim(2),
                          e = n.value.dim(3);
            const int64_t d = h * e;
            for (int64_t bi = 0; bi < b; ++bi)
                for (int64_t hi = 0; hi < h; ++hi)
                    for (int64_t si = 0; si < s; ++si)
                        for (int64_t ei = 0; ei < e; ++ei)
                            da.set((bi * s + si) * d + hi * e + ei,
                                   da.get((bi * s + si) * d + hi * e + ei) +
                                       gout.get(((bi * h + hi) * s + si) * e + ei));
            break;
        }
        case OpKind::MergeHeads: {
            if (!want(0)) break;
            Tensor& da = gbuf(0);
            const Tensor& x = in_node(0).value;
            const int64_t b = x.dim(0), h = x.dim(1), s = x.dim(2), e = x.dim(3);
            for (int64_t bi = 0; bi < b; ++bi)
                for (int64_t hi = 0; hi < h; ++hi)
                    for (int64_t si = 0; si < s; ++si)
                        for (int64_t ei = 0; ei < e; ++ei)
                            da.set(((bi * h + hi) * s + si) * e + ei,
                                   da.get(((bi * h + hi) * s + si) * e + ei) +
                                       gout.get((bi * s + si) * (h * e) + hi * e + ei));
            break;
        }
        case OpKind::Reshape: {
            if (!want(0)) break;
            Tensor& da = gbuf(0);
            for (int64_t i = 0; i < gout.numel(); ++i) da.set(i, da.get(i) + gout.get(i));
            break;
        }
        case OpKind::Sum: {
            if (!want(0)) break;
            Tensor& da = gbuf(0);
            const double gv = gout.get(0);
            for (int64_t i = 0; i < da.numel(); ++i) da.set(i, da.get(i) + gv);
            break;
        }
        case OpKind::SumSq: {
            if (!want(0)) break;
            Tensor& da = gbuf(0);
            const Tensor& x = in_node(0).value;
            const double gv = gout.get(0);
            for (int64_t i = 0; i < da.numel(); ++i)
                da.set(i, da.get(i) + 2.0 * x.get(i) * gv);
            break;
        }
        case OpKind::CrossEntropy: {
            if (!want(0)) break;
            Tensor& dl = gbuf(0);
            const Tensor& z = in_node(0).value;
            const int64_t v = z.dim(-1);
            const int64_t rows = z.numel() / v;
            const double gv = gout.get(0) / static_cast<double>(n.i0);
            for (int64_t r = 0; r < rows; ++r) {
                if (!n.mask[static_cast<size_t>(r)]) continue;
                double mx = z.get(r * v);
                for (int64_t i = 1; i < v; ++i) mx = std::max(mx, z.get(r * v + i));
                double s = 0;
                for (int64_t i = 0; i < v; ++i) s += std::exp(z.get(r * v + i) - mx);
                for (int64_t i = 0; i < v; ++i) {
                    const double p = std::exp(z.get(r * v + i) - mx) / s;
                    const double delta = (i == n.ids[static_cast<size_t>(r)]) ? 1.0 : 0.0;
                    dl.set(r * v + i, dl.get(r * v + i) + gv * (p - delta));
                }
            }
            break;
        }
        case OpKind::RowScale: {
            const Tensor& x = in_node(0).value;
            const Tensor& w = in_node(1).value;
            const int64_t d = x.dim(-1);
            const int64_t rows = x.numel() / d;
            if (want(0)) {
                Tensor& dx = gbuf(0);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t i = 0; i < d; ++i)
                        dx.set(r * d + i, dx.get(r * d + i) + gout.get(r * d + i) * w.get(r));
            }
            if (want(1)) {
                Tensor& dw = gbuf(1);
                for (int64_t r = 0; r < rows; ++r) {
                    double acc = 0;
                    for (int64_t i = 0; i < d; ++i) acc += gout.get(r * d + i) * x.get(r * d + i);
                    dw.set(r, dw.get(r) + acc);
                }
            }
            break;
        }
        case OpKind::TopKGate: {
            if (!want(0)) break;
            Tensor& dl = gbuf(0);
            const Tensor& z = in_node(0).value;
            const Tensor& y = n.value;
            const int64_t e = z.dim(-1);
            const int64_t rows = z.numel() / e;
            for (int64_t r = 0; r < rows; ++r) {
                const auto sel = topk_select(z, r, e, n.i0);
                double dot = 0;
                for (int64_t i : sel) dot += gout.get(r * e + i) * y.get(r * e + i);
                for (int64_t i : sel)
                    dl.set(r * e + i,
                           dl.get(r * e + i) + y.get(r * e + i) * (gout.get(r * e + i) - dot));
            }
            break;
        }
    }
}

double finite_diff_check(const std::function<double(const Tensor&)>& f,
                         const std::function<Tensor(const Tensor&)>& analytic_grad,
                         const Tensor& point, double eps) {
    if (eps <= 0) throw DomainError("finite_diff_check: eps must be positive");
    const Tensor g = analytic_grad(point);
    if (!g.same_shape(point)) throw ContractError("finite_diff_check: gradient shape mismatch");
    double max_rel = 0;
    for (int64_t i = 0; i < point.numel(); ++i) {
        Tensor p = point;
        const double orig = point.get(i);
        p.set(i, orig + eps);
        const double fp = f(p);
        p.set(i, orig - eps);
        const double fm = f(p);
        const double num = (fp - fm) / (2.0 * eps);
        const double ana = g.get(i);
        const double denom = std::max({std::abs(num), std::abs(ana), 1e-6});
        max_rel = std::max(max_rel, std::abs(num - ana) / denom);
    }
    return max_rel;
}

}  // namespace cllab
