#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "cllab/tensor.hpp"

namespace cllab {

/// Handle into a Graph's node tape.
struct Var {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

/// Gradients of the loss w.r.t. parameter leaves, keyed by node id.
/// Absent entries mean zero gradient.
using GradMap = std::unordered_map<int32_t, Tensor>;

enum class OpKind {
    Leaf,
    Matmul,     // a[...,m,k] x b[...,k,n]; b may be rank-2 (shared across lead dims)
    MatmulNT,   // a[...,m,k] x b[...,n,k]^T -> [...,m,n]; b may be rank-2
    Add,        // suffix-broadcast of rhs
    Sub,        // same shape
    Mul,        // suffix-broadcast of rhs
    Scale,      // times compile-time scalar
    Softmax,    // last dim
    LayerNorm,  // last dim, eps 1e-5, weight-only affine
    Embedding,  // row gather from a [rows, d] table
    Silu,
    Concat,
    Slice,
    SplitHeads,  // [b,s,d] -> [b,h,s,d/h]
    MergeHeads,  // [b,h,s,e] -> [b,s,h*e]
    Reshape,
    Sum,           // scalar
    SumSq,         // scalar sum of squares
    CrossEntropy,  // mean -log softmax[target] over masked-in rows
    RowScale,      // x[...,d] scaled per row by w[...] (or w[...,1])
    TopKGate,      // top-k softmax gates over last dim, zeros elsewhere
};

const char* op_name(OpKind k);

/// Reverse-mode tape over dense tensors. Operations evaluate eagerly as the
/// tape is built, so node values are always available; backward() replays the
/// tape in reverse with a fixed accumulation order, which makes gradients
/// byte-reproducible for identical inputs.
///
/// Single-threaded per graph; distinct graphs share no mutable state.
class Graph {
  public:
    explicit Graph(DType dt, bool check_finite = true)
        : dtype_(dt), check_finite_(check_finite) {}

    DType dtype() const { return dtype_; }

    /// Trainable leaf: gradient is computed and retained.
    Var param(Tensor value, std::string name = "");
    /// Frozen leaf: participates in the forward pass only.
    Var input(Tensor value, std::string name = "");

    Var matmul(Var a, Var b);
    Var matmul_nt(Var a, Var b);
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double s);
    Var softmax(Var a);
    Var layernorm(Var x, Var gain);
    Var embedding(Var table, std::vector<int32_t> ids, std::vector<int64_t> lead_shape);
    Var silu(Var a);
    Var concat(const std::vector<Var>& parts, int64_t axis);
    Var slice(Var a, int64_t axis, int64_t start, int64_t len);
    Var split_heads(Var x, int64_t n_heads);
    Var merge_heads(Var x);
    Var reshape(Var a, std::vector<int64_t> shape);
    Var sum(Var a);
    Var sum_sq(Var a);
    Var cross_entropy(Var logits, std::vector<int32_t> targets, std::vector<uint8_t> mask);
    Var row_scale(Var x, Var w);
    Var topk_gate(Var logits, int64_t k);

    /// Backpropagate from a scalar loss node. Fills gradients for every
    /// parameter leaf the loss depends on and returns them keyed by node id.
    GradMap backward(Var loss);

    const Tensor& value(Var v) const;
    /// Gradient of the last backward() w.r.t. node v (zeros if untouched).
    Tensor grad(Var v) const;

    int64_t node_count() const { return static_cast<int64_t>(nodes_.size()); }
    int64_t n_masked_rows(Var ce_node) const;  // bookkeeping for CE callers

  private:
    struct Node {
        OpKind kind;
        std::array<int32_t, 2> in{{-1, -1}};
        std::vector<int32_t> multi_in;  // Concat only
        Tensor value;
        Tensor grad;  // allocated during backward
        bool needs_grad = false;
        bool is_param = false;
        double scalar = 0.0;
        int64_t i0 = 0, i1 = 0, i2 = 0;  // axis/start/len/k/heads
        std::vector<int32_t> ids;        // Embedding / CrossEntropy targets
        std::vector<uint8_t> mask;       // CrossEntropy
        std::string name;
    };

    DType dtype_ = DType::F32;
    bool check_finite_ = true;
    std::vector<Node> nodes_;
    bool backward_done_ = false;

    Node& at(Var v);
    const Node& at(Var v) const;
    Var push(Node n);
    void check_same_graph(Var v) const;
    [[noreturn]] void fail_shape(const std::string& msg, OpKind k, Var a, Var b) const;
    void backward_node(int32_t id);
    Tensor& grad_buf(int32_t id);
};

/// Max relative error between an analytic gradient and central differences,
/// taken over all coordinates of `point`.
double finite_diff_check(const std::function<double(const Tensor&)>& f,
                         const std::function<Tensor(const Tensor&)>& analytic_grad,
                         const Tensor& point, double eps);

}  // namespace cllab
