#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "iqvq/tensor.hpp"

namespace iqvq {

/// Handle into a GradTape.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

/// Reverse-mode tape over a closed kernel set. Nodes are recorded in forward
/// order; backward() walks them in reverse, so gradients are bit-deterministic
/// for identical graphs. replay() re-runs the forward pass against the current
/// leaf values with two freezes that make the tape's gradient field the exact
/// derivative of the replayed function: StopGrad nodes emit their originally
/// recorded value, and all integer attributes (gather rows, conv geometry,
/// cross-entropy targets) are fixed at build time.
class Tape {
public:
    enum class Op {
        Leaf,
        Add,
        Sub,
        Mul,
        AddScalar,
        MulScalar,
        AddSMul,
        Silu,
        Sigmoid,
        Tanh,
        Exp,
        Log,
        Sqrt,
        SqrtShift,
        Abs,
        LogSigmoid,
        Clamp,
        MatMul,
        Linear,
        Conv2d,
        AvgDown,
        UpNearest,
        SoftmaxRows,
        LayerNormRows,
        Sum,
        Mean,
        SoftmaxCE,
        GatherRows,
        Reshape,
        StopGrad,
    };

    // ---- graph construction ----

    Var leaf(const Tensor& t) {
        Node n;
        n.op = Op::Leaf;
        n.val = t;
        n.needs_grad = t.requires_grad;
        return push(std::move(n));
    }

    Var constant(Tensor t) {
        t.requires_grad = false;
        return leaf(t);
    }

    Var add(Var a, Var b) { return binary(Op::Add, a, b); }
    Var sub(Var a, Var b) { return binary(Op::Sub, a, b); }
    Var mul(Var a, Var b) { return binary(Op::Mul, a, b); }

    Var add_scalar(Var a, double c) { return unary_s(Op::AddScalar, a, c); }
    Var mul_scalar(Var a, double c) { return unary_s(Op::MulScalar, a, c); }

    /// x + coef * s where s is a single-element var (scalar broadcast).
    Var add_smul(Var x, Var s, double coef = 1.0) {
        if (node(s).val.size() != 1) throw std::invalid_argument("add_smul: s must be scalar");
        Node n;
        n.op = Op::AddSMul;
        n.a = x.id;
        n.b = s.id;
        n.s0 = coef;
        return push_eval(std::move(n));
    }

    Var silu(Var a) { return unary_s(Op::Silu, a, 0.0); }
    Var sigmoid(Var a) { return unary_s(Op::Sigmoid, a, 0.0); }
    Var tanh_(Var a) { return unary_s(Op::Tanh, a, 0.0); }
    Var exp_(Var a) { return unary_s(Op::Exp, a, 0.0); }
    Var log_(Var a) { return unary_s(Op::Log, a, 0.0); }
    Var sqrt_(Var a) { return unary_s(Op::Sqrt, a, 0.0); }
    /// Smooth magnitude: sqrt(x + delta) - sqrt(delta), delta > 0.
    Var sqrt_shift(Var a, double delta) { return unary_s(Op::SqrtShift, a, delta); }
    Var abs_(Var a) { return unary_s(Op::Abs, a, 0.0); }
    Var log_sigmoid(Var a) { return unary_s(Op::LogSigmoid, a, 0.0); }
    Var clamp(Var a, double lo, double hi) {
        Node n;
        n.op = Op::Clamp;
        n.a = a.id;
        n.s0 = lo;
        n.s1 = hi;
        return push_eval(std::move(n));
    }

    Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false) {
        Node n;
        n.op = Op::MatMul;
        n.a = a.id;
        n.b = b.id;
        n.i0 = trans_a ? 1 : 0;
        n.i1 = trans_b ? 1 : 0;
        return push_eval(std::move(n));
    }

    /// x[n x d] * W[d x m] + bias[m] broadcast over rows.
    Var linear(Var x, Var w, Var bias) {
        Node n;
        n.op = Op::Linear;
        n.a = x.id;
        n.b = w.id;
        n.c = bias.id;
        return push_eval(std::move(n));
    }

    /// input[H x W x Cin] (*) kernel[k x k x Cin x Cout] with zero padding.
    /// Pass an invalid Var for bias to skip it.
    Var conv2d(Var x, Var kernel, int stride, int pad, Var bias = Var{}) {
        Node n;
        n.op = Op::Conv2d;
        n.a = x.id;
        n.b = kernel.id;
        n.c = bias.id;
        n.i0 = stride;
        n.i1 = pad;
        return push_eval(std::move(n));
    }

    /// r x r block averaging, extents must divide by r.
    Var avg_down(Var x, int r) {
        Node n;
        n.op = Op::AvgDown;
        n.a = x.id;
        n.i0 = r;
        return push_eval(std::move(n));
    }

    /// Nearest-neighbor replication by factor r.
    Var up_nearest(Var x, int r) {
        Node n;
        n.op = Op::UpNearest;
        n.a = x.id;
        n.i0 = r;
        return push_eval(std::move(n));
    }

    Var softmax_rows(Var x) { return unary_s(Op::SoftmaxRows, x, 0.0); }

    /// Per-row layer normalization of x[n x d] with learned gain[d], bias[d].
    Var layer_norm_rows(Var x, Var gain, Var bias, double eps = 1e-5) {
        Node n;
        n.op = Op::LayerNormRows;
        n.a = x.id;
        n.b = gain.id;
        n.c = bias.id;
        n.s0 = eps;
        return push_eval(std::move(n));
    }

    Var sum(Var x) { return unary_s(Op::Sum, x, 0.0); }
    Var mean(Var x) { return unary_s(Op::Mean, x, 0.0); }

    /// Mean over rows of -log softmax(logits_row)[target].
    Var softmax_cross_entropy(Var logits, std::vector<int> targets) {
        const Tensor& lv = node(logits).val;
        if (lv.rank() != 2) throw std::invalid_argument("softmax_cross_entropy: logits must be n x K");
        if (static_cast<int>(targets.size()) != lv.shape[0])
            throw std::invalid_argument("softmax_cross_entropy: one target per row required");
        for (int t : targets)
            if (t < 0 || t >= lv.shape[1])
                throw std::out_of_range("softmax_cross_entropy: target index " + std::to_string(t) +
                                        " outside [0," + std::to_string(lv.shape[1]) + ")");
        Node n;
        n.op = Op::SoftmaxCE;
        n.a = logits.id;
        n.idx = std::move(targets);
        return push_eval(std::move(n));
    }

    Var gather_rows(Var table, std::vector<int> rows) {
        const Tensor& tv = node(table).val;
        if (tv.rank() != 2) throw std::invalid_argument("gather_rows: table must be m x d");
        for (int r : rows)
            if (r < 0 || r >= tv.shape[0]) throw std::out_of_range("gather_rows: row out of range");
        Node n;
        n.op = Op::GatherRows;
        n.a = table.id;
        n.idx = std::move(rows);
        return push_eval(std::move(n));
    }

    Var reshape(Var x, Shape s) {
        if (shape_numel(s) != node(x).val.size())
            throw std::invalid_argument("reshape: element count mismatch");
        Node n;
        n.op = Op::Reshape;
        n.a = x.id;
        n.shape_attr = std::move(s);
        return push_eval(std::move(n));
    }

    /// Forward copy whose gradient is dropped. replay() re-emits the value
    /// recorded at build time, so finite differences of a replayed graph match
    /// the tape's own gradients even across stop-gradient boundaries.
    Var stop_grad(Var x) {
        Node n;
        n.op = Op::StopGrad;
        n.a = x.id;
        n.needs_grad = false;
        eval(n);
        n.frozen = n.val;
        return push(std::move(n));
    }

    /// Straight-through estimator: value of zq, gradient of identity on zh.
    Var straight_through(Var zh, Var zq) {
        require_same_shape(node(zh).val, node(zq).val, "straight_through");
        return add(zh, stop_grad(sub(zq, zh)));
    }

    // ---- access ----

    const Tensor& value(Var v) const { return node(v).val; }
    Tensor& mutable_value(Var v) { return node(v).val; }
    double scalar(Var v) const {
        const Tensor& t = node(v).val;
        if (t.size() != 1) throw std::logic_error("scalar: tensor has " + std::to_string(t.size()) + " elements");
        return t.data[0];
    }
    const Tensor& grad(Var v) const {
        const Node& n = node(v);
        if (n.grad.size() == 0) throw std::logic_error("grad: not computed for this var");
        return n.grad;
    }
    bool has_grad(Var v) const { return node(v).grad.size() != 0; }
    std::size_t node_count() const { return nodes_.size(); }

    // ---- autodiff ----

    void backward(Var out) {
        const Node& on = node(out);
        if (on.val.size() != 1) throw std::invalid_argument("backward: output must be scalar");
        for (Node& n : nodes_)
            if (n.needs_grad)
                n.grad = Tensor::zeros(n.val.shape);
            else
                n.grad = Tensor();
        if (!nodes_[out.id].needs_grad) return;  // nothing depends on a grad leaf
        nodes_[out.id].grad.data[0] = 1.0;
        for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (!n.needs_grad || n.grad.size() == 0) continue;
            backprop(n);
        }
    }

    /// Recompute every node value from the current leaf values, freezing
    /// StopGrad outputs at their originally recorded values.
    void replay() {
        for (Node& n : nodes_) {
            if (n.op == Op::Leaf) continue;
            if (n.op == Op::StopGrad) {
                n.val = n.frozen;
                continue;
            }
            eval(n);
        }
    }

private:
    struct Node {
        Op op = Op::Leaf;
        int a = -1, b = -1, c = -1;
        Tensor val;
        Tensor grad;
        bool needs_grad = false;
        double s0 = 0.0, s1 = 0.0;
        int i0 = 0, i1 = 0;
        std::vector<int> idx;
        Shape shape_attr;
        Tensor frozen;
    };

    std::vector<Node> nodes_;

    const Node& node(Var v) const {
        if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
            throw std::logic_error("Tape: invalid var handle");
        return nodes_[static_cast<std::size_t>(v.id)];
    }
    Node& node(Var v) { return const_cast<Node&>(static_cast<const Tape*>(this)->node(v)); }

    Var push(Node n) {
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    Var push_eval(Node n) {
        n.needs_grad = inherits_grad(n);
        eval(n);
        return push(std::move(n));
    }

    Var binary(Op op, Var a, Var b) {
        Node n;
        n.op = op;
        n.a = a.id;
        n.b = b.id;
        return push_eval(std::move(n));
    }

    Var unary_s(Op op, Var a, double s0) {
        Node n;
        n.op = op;
        n.a = a.id;
        n.s0 = s0;
        return push_eval(std::move(n));
    }

    bool inherits_grad(const Node& n) const {
        bool g = false;
        if (n.a >= 0) g = g || nodes_[static_cast<std::size_t>(n.a)].needs_grad;
        if (n.b >= 0) g = g || nodes_[static_cast<std::size_t>(n.b)].needs_grad;
        if (n.c >= 0) g = g || nodes_[static_cast<std::size_t>(n.c)].needs_grad;
        return g;
    }

    const Tensor& in_a(const Node& n) const { return nodes_[static_cast<std::size_t>(n.a)].val; }
    const Tensor& in_b(const Node& n) const { return nodes_[static_cast<std::size_t>(n.b)].val; }
    const Tensor& in_c(const Node& n) const { return nodes_[static_cast<std::size_t>(n.c)].val; }
    Tensor* grad_a(Node& n) {
        Node& m = nodes_[static_cast<std::size_t>(n.a)];
        return m.needs_grad ? &m.grad : nullptr;
    }
    Tensor* grad_b(Node& n) {
        Node& m = nodes_[static_cast<std::size_t>(n.b)];
        return m.needs_grad ? &m.grad : nullptr;
    }
    Tensor* grad_c(Node& n) {
        Node& m = nodes_[static_cast<std::size_t>(n.c)];
        return m.needs_grad ? &m.grad : nullptr;
    }

    static double stable_sigmoid(double x) {
        if (x >= 0.0) {
            const double z = std::exp(-x);
            return 1.0 / (1.0 + z);
        }
        const double z = std::exp(x);
        return z / (1.0 + z);
    }

    // ---- forward ----

    void eval(Node& n) {
        switch (n.op) {
            case Op::Leaf:
                break;
            case Op::Add: {
                const Tensor &a = in_a(n), &b = in_b(n);
                require_same_shape(a, b, "add");
                n.val = Tensor(a.shape);
                for (std::int64_t i = 0; i < a.size(); ++i) n.val[i] = a[i] + b[i];
                break;
            }
            case Op::Sub: {
                const Tensor &a = in_a(n), &b = in_b(n);
                require_same_shape(a, b, "sub");
                n.val = Tensor(a.shape);
                for (std::int64_t i = 0; i < a.size(); ++i) n.val[i] = a[i] - b[i];
                break;
            }
            case Op::Mul: {
                const Tensor &a = in_a(n), &b = in_b(n);
                require_same_shape(a, b, "mul");
                n.val = Tensor(a.shape);
                for (std::int64_t i = 0; i < a.size(); ++i) n.val[i] = a[i] * b[i];
                break;
            }
            case Op::AddScalar: {
                const Tensor& a = in_a(n);
                n.val = Tensor(a.shape);
                for (std::int64_t i = 0; i < a.size(); ++i) n.val[i] = a[i] + n.s0;
                break;
            }
            case Op::MulScalar: {
                const Tensor& a = in_a(n);
                n.val = Tensor(a.shape);
                for (std::int64_t i = 0; i < a.size(); ++i) n.val[i] = a[i] * n.s0;
                break;
            }
            case Op::AddSMul: {
                const Tensor& a = in_a(n);
                const double s = in_b(n).data[0] * n.s0;
                n.val = Tensor(a.shape);
                for (std::int64_t i = 0; i < a.size(); ++i) n.val[i] = a[i] + s;
                break;
            }
            case Op::Silu: {
                const Tensor& a = in_a(n);
                n.val = Tensor(a.shape);
                for (std::int64_t i = 0; i < a.size(); ++i) n.val[i] = a[i] * stable_sigmoid(a[i]);
                break;
            }
            case Op::Sigmoid: {
                const Tensor& a = in_a(n);
                n.val = Tensor(a.shape);
                for (std::int64_t i = 0; i < a.size(); ++i) n.val[i] = stable_sigmoid(a[i]);
                break;
            }
            case Op::Tanh: {
                const Tensor& a = in_a(n);
                n.val = Tensor(a.shape);
                for (std::int64_t i = 0; i < a.size(); ++i) n.val[i] = std::tanh(a[i]);
                break;
            }
            case Op::Exp: {
                const Tensor& a = in_a(n);
                n.val = Tensor(a.shape);
                for (std::int64_t i = 0; i < a.size(); ++i) n.val[i] = std::exp(a[i]);
                break;
            }
            case Op::Log: {
                const Tensor& a = in_a(n);
                n.val = Tensor(a.shape);
                for (std::int64_t i = 0; i < a.size(); ++i) n.val[i] = std::log(a[i]);
                break;
            }
            case Op::Sqrt: {
                const Tensor& a = in_a(n);
                n.val = Tensor(a.shape);
                for (std::int64_t i = 0; i < a.size(); ++i) n.val[i] = std::sqrt(a[i]);
                break;
            }
            case Op::SqrtShift: {
                const Tensor& a = in_a(n);
                const double root = std::sqrt(n.s0);
                n.val = Tensor(a.shape);
                for (std::int64_t i = 0; i < a.size(); ++i) n.val[i] = std::sqrt(a[i] + n.s0) - root;
                break;
            }
            case Op::Abs: {
                const Tensor& a = in_a(n);
                n.val = Tensor(a.shape);
                for (std::int64_t i = 0; i < a.size(); ++i) n.val[i] = std::fabs(a[i]);
                break;
            }
            case Op::LogSigmoid: {
                const Tensor& a = in_a(n);
                n.val = Tensor(a.shape);
                for (std::int64_t i = 0; i < a.size(); ++i) {
                    const double x = a[i];
                    n.val[i] = x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
                }
                break;
            }
            case Op::Clamp: {
                const Tensor& a = in_a(n);
                n.val = Tensor(a.shape);
                for (std::int64_t i = 0; i < a.size(); ++i) n.val[i] = std::clamp(a[i], n.s0, n.s1);
                break;
            }
            case Op::MatMul:
                eval_matmul(n);
                break;
            case Op::Linear:
                eval_linear(n);
                break;
            case Op::Conv2d:
                eval_conv2d(n);
                break;
            case Op::AvgDown:
                eval_avg_down(n);
                break;
            case Op::UpNearest:
                eval_up_nearest(n);
                break;
            case Op::SoftmaxRows:
                eval_softmax_rows(n);
                break;
            case Op::LayerNormRows:
                eval_layer_norm(n);
                break;
            case Op::Sum: {
                const Tensor& a = in_a(n);
                double s = 0.0;
                for (std::int64_t i = 0; i < a.size(); ++i) s += a[i];
                n.val = Tensor::scalar(s);
                break;
            }
            case Op::Mean: {
                const Tensor& a = in_a(n);
                double s = 0.0;
                for (std::int64_t i = 0; i < a.size(); ++i) s += a[i];
                n.val = Tensor::scalar(s / static_cast<double>(a.size()));
                break;
            }
            case Op::SoftmaxCE:
                eval_softmax_ce(n);
                break;
            case Op::GatherRows: {
                const Tensor& t = in_a(n);
                const int d = t.shape[1];
                n.val = Tensor(Shape{static_cast<int>(n.idx.size()), d});
                for (std::size_t i = 0; i < n.idx.size(); ++i)
                    std::copy_n(&t.data[static_cast<std::size_t>(n.idx[i]) * d], d,
                                &n.val.data[i * static_cast<std::size_t>(d)]);
                break;
            }
            case Op::Reshape: {
                n.val = in_a(n);
                n.val.shape = n.shape_attr;
                break;
            }
            case Op::StopGrad:
                n.val = in_a(n);
                break;
        }
        n.val.requires_grad = false;
    }

    void eval_matmul(Node& n) {
        const Tensor &a = in_a(n), &b = in_b(n);
        if (a.rank() != 2 || b.rank() != 2) throw std::invalid_argument("matmul: operands must be rank 2");
        const bool ta = n.i0 != 0, tb = n.i1 != 0;
        const int rows = ta ? a.shape[1] : a.shape[0];
        const int inner = ta ? a.shape[0] : a.shape[1];
        const int inner_b = tb ? b.shape[1] : b.shape[0];
        const int cols = tb ? b.shape[0] : b.shape[1];
        if (inner != inner_b)
            throw std::invalid_argument("matmul: inner dimension mismatch " + shape_str(a.shape) +
                                        " vs " + shape_str(b.shape));
        n.val = Tensor(Shape{rows, cols});
        mm_accumulate(a, ta, b, tb, n.val, false);
    }

    static void mm_accumulate(const Tensor& a, bool ta, const Tensor& b, bool tb, Tensor& out,
                              bool accumulate) {
        const int rows = out.shape[0], cols = out.shape[1];
        const int inner = ta ? a.shape[0] : a.shape[1];
        if (!accumulate) std::fill(out.data.begin(), out.data.end(), 0.0);
        if (!ta && !tb) {
            for (int i = 0; i < rows; ++i) {
                double* orow = &out.data[static_cast<std::size_t>(i) * cols];
                const double* arow = &a.data[static_cast<std::size_t>(i) * inner];
                for (int k = 0; k < inner; ++k) {
                    const double av = arow[k];
                    const double* brow = &b.data[static_cast<std::size_t>(k) * cols];
                    for (int j = 0; j < cols; ++j) orow[j] += av * brow[j];
                }
            }
            return;
        }
        for (int i = 0; i < rows; ++i) {
            double* orow = &out.data[static_cast<std::size_t>(i) * cols];
            for (int k = 0; k < inner; ++k) {
                const double av = ta ? a.at(k, i) : a.at(i, k);
                if (!tb) {
                    const double* brow = &b.data[static_cast<std::size_t>(k) * cols];
                    for (int j = 0; j < cols; ++j) orow[j] += av * brow[j];
                } else {
                    for (int j = 0; j < cols; ++j) orow[j] += av * b.at(j, k);
                }
            }
        }
    }

    void eval_linear(Node& n) {
        const Tensor &x = in_a(n), &w = in_b(n), &bias = in_c(n);
        if (x.rank() != 2 || w.rank() != 2 || bias.rank() != 1)
            throw std::invalid_argument("linear: expected x[n x d], W[d x m], bias[m]");
        if (x.shape[1] != w.shape[0] || w.shape[1] != bias.shape[0])
            throw std::invalid_argument("linear: dimension mismatch");
        const int rows = x.shape[0], inner = x.shape[1], cols = w.shape[1];
        n.val = Tensor(Shape{rows, cols});
        for (int i = 0; i < rows; ++i) {
            double* orow = &n.val.data[static_cast<std::size_t>(i) * cols];
            std::copy_n(bias.data.data(), cols, orow);
            const double* xrow = &x.data[static_cast<std::size_t>(i) * inner];
            for (int k = 0; k < inner; ++k) {
                const double xv = xrow[k];
                const double* wrow = &w.data[static_cast<std::size_t>(k) * cols];
                for (int j = 0; j < cols; ++j) orow[j] += xv * wrow[j];
            }
        }
    }

    void eval_conv2d(Node& n) {
        const Tensor &x = in_a(n), &k = in_b(n);
        if (x.rank() != 3 || k.rank() != 4)
            throw std::invalid_argument("conv2d: expected input[H x W x Cin], kernel[k x k x Cin x Cout]");
        const int h = x.shape[0], w = x.shape[1], cin = x.shape[2];
        const int kh = k.shape[0], kw = k.shape[1], cout = k.shape[3];
        if (k.shape[2] != cin)
            throw std::invalid_argument("conv2d: kernel Cin " + std::to_string(k.shape[2]) +
                                        " does not match input channels " + std::to_string(cin));
        const int stride = n.i0, pad = n.i1;
        if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
        if (kh > h + 2 * pad || kw > w + 2 * pad)
            throw std::invalid_argument("conv2d: kernel larger than padded input");
        const double* bias = nullptr;
        if (n.c >= 0) {
            const Tensor& bt = in_c(n);
            if (bt.rank() != 1 || bt.shape[0] != cout)
                throw std::invalid_argument("conv2d: bias must have Cout entries");
            bias = bt.data.data();
        }
        const int oh = (h + 2 * pad - kh) / stride + 1;
        const int ow = (w + 2 * pad - kw) / stride + 1;
        n.val = Tensor(Shape{oh, ow, cout});
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                double* acc = &n.val.data[(static_cast<std::size_t>(oy) * ow + ox) * cout];
                if (bias)
                    std::copy_n(bias, cout, acc);
                for (int ky = 0; ky < kh; ++ky) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (int kx = 0; kx < kw; ++kx) {
                        const int ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= w) continue;
                        const double* xrow = &x.data[(static_cast<std::size_t>(iy) * w + ix) * cin];
                        const double* kbase =
                            &k.data[((static_cast<std::size_t>(ky) * kw + kx) * cin) * cout];
                        for (int ci = 0; ci < cin; ++ci) {
                            const double xv = xrow[ci];
                            const double* krow = kbase + static_cast<std::size_t>(ci) * cout;
                            for (int co = 0; co < cout; ++co) acc[co] += xv * krow[co];
                        }
                    }
                }
            }
        }
    }

    void eval_avg_down(Node& n) {
        const Tensor& x = in_a(n);
        if (x.rank() != 3) throw std::invalid_argument("avg_down: expected H x W x C");
        const int r = n.i0;
        const int h = x.shape[0], w = x.shape[1], c = x.shape[2];
        if (r < 1 || h % r != 0 || w % r != 0)
            throw std::invalid_argument("avg_down: extents " + shape_str(x.shape) +
                                        " not divisible by factor " + std::to_string(r));
        const int oh = h / r, ow = w / r;
        const double inv = 1.0 / (static_cast<double>(r) * r);
        n.val = Tensor(Shape{oh, ow, c});
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                double* acc = &n.val.data[(static_cast<std::size_t>(oy) * ow + ox) * c];
                for (int dy = 0; dy < r; ++dy)
                    for (int dx = 0; dx < r; ++dx) {
                        const double* src =
                            &x.data[(static_cast<std::size_t>(oy * r + dy) * w + ox * r + dx) * c];
                        for (int ch = 0; ch < c; ++ch) acc[ch] += src[ch];
                    }
                for (int ch = 0; ch < c; ++ch) acc[ch] *= inv;
            }
    }

    void eval_up_nearest(Node& n) {
        const Tensor& x = in_a(n);
        if (x.rank() != 3) throw std::invalid_argument("up_nearest: expected H x W x C");
        const int r = n.i0;
        if (r < 1) throw std::invalid_argument("up_nearest: factor must be >= 1");
        const int h = x.shape[0], w = x.shape[1], c = x.shape[2];
        n.val = Tensor(Shape{h * r, w * r, c});
        for (int y = 0; y < h * r; ++y)
            for (int x2 = 0; x2 < w * r; ++x2) {
                const double* src = &x.data[(static_cast<std::size_t>(y / r) * w + x2 / r) * c];
                double* dst = &n.val.data[(static_cast<std::size_t>(y) * (w * r) + x2) * c];
                std::copy_n(src, c, dst);
            }
    }

    void eval_softmax_rows(Node& n) {
        const Tensor& x = in_a(n);
        if (x.rank() != 2) throw std::invalid_argument("softmax_rows: expected n x K");
        const int rows = x.shape[0], k = x.shape[1];
        n.val = Tensor(x.shape);
        for (int i = 0; i < rows; ++i) {
            const double* xr = &x.data[static_cast<std::size_t>(i) * k];
            double* yr = &n.val.data[static_cast<std::size_t>(i) * k];
            double m = xr[0];
            for (int j = 1; j < k; ++j) m = std::max(m, xr[j]);
            double s = 0.0;
            for (int j = 0; j < k; ++j) {
                yr[j] = std::exp(xr[j] - m);
                s += yr[j];
            }
            const double inv = 1.0 / s;
            for (int j = 0; j < k; ++j) yr[j] *= inv;
        }
    }

    void eval_layer_norm(Node& n) {
        const Tensor &x = in_a(n), &g = in_b(n), &b = in_c(n);
        if (x.rank() != 2 || g.rank() != 1 || b.rank() != 1 || g.shape[0] != x.shape[1] ||
            b.shape[0] != x.shape[1])
            throw std::invalid_argument("layer_norm_rows: expected x[n x d], gain[d], bias[d]");
        const int rows = x.shape[0], d = x.shape[1];
        n.val = Tensor(x.shape);
        for (int i = 0; i < rows; ++i) {
            const double* xr = &x.data[static_cast<std::size_t>(i) * d];
            double* yr = &n.val.data[static_cast<std::size_t>(i) * d];
            double mu = 0.0;
            for (int j = 0; j < d; ++j) mu += xr[j];
            mu /= d;
            double var = 0.0;
            for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
            var /= d;
            const double inv = 1.0 / std::sqrt(var + n.s0);
            for (int j = 0; j < d; ++j) yr[j] = g[j] * ((xr[j] - mu) * inv) + b[j];
        }
    }

    void eval_softmax_ce(Node& n) {
        const Tensor& x = in_a(n);
        const int rows = x.shape[0], k = x.shape[1];
        double loss = 0.0;
        for (int i = 0; i < rows; ++i) {
            const double* xr = &x.data[static_cast<std::size_t>(i) * k];
            double m = xr[0];
            for (int j = 1; j < k; ++j) m = std::max(m, xr[j]);
            double s = 0.0;
            for (int j = 0; j < k; ++j) s += std::exp(xr[j] - m);
            loss += std::log(s) - (xr[n.idx[static_cast<std::size_t>(i)]] - m);
        }
        n.val = Tensor::scalar(loss / rows);
    }

    // ---- backward ----

    void backprop(Node& n) {
        const Tensor& g = n.grad;
        switch (n.op) {
            case Op::Leaf:
            case Op::StopGrad:
                break;
            case Op::Add: {
                if (Tensor* da = grad_a(n))
                    for (std::int64_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
                if (Tensor* db = grad_b(n))
                    for (std::int64_t i = 0; i < g.size(); ++i) (*db)[i] += g[i];
                break;
            }
            case Op::Sub: {
                if (Tensor* da = grad_a(n))
                    for (std::int64_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
                if (Tensor* db = grad_b(n))
                    for (std::int64_t i = 0; i < g.size(); ++i) (*db)[i] -= g[i];
                break;
            }
            case Op::Mul: {
                const Tensor &a = in_a(n), &b = in_b(n);
                if (Tensor* da = grad_a(n))
                    for (std::int64_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * b[i];
                if (Tensor* db = grad_b(n))
                    for (std::int64_t i = 0; i < g.size(); ++i) (*db)[i] += g[i] * a[i];
                break;
            }
            case Op::AddScalar: {
                if (Tensor* da = grad_a(n))
                    for (std::int64_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
                break;
            }
            case Op::MulScalar: {
                if (Tensor* da = grad_a(n))
                    for (std::int64_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * n.s0;
                break;
            }
            case Op::AddSMul: {
                if (Tensor* da = grad_a(n))
                    for (std::int64_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
                if (Tensor* db = grad_b(n)) {
                    double s = 0.0;
                    for (std::int64_t i = 0; i < g.size(); ++i) s += g[i];
                    (*db)[0] += n.s0 * s;
                }
                break;
            }
            case Op::Silu: {
                const Tensor& a = in_a(n);
                if (Tensor* da = grad_a(n))
                    for (std::int64_t i = 0; i < g.size(); ++i) {
                        const double s = stable_sigmoid(a[i]);
                        (*da)[i] += g[i] * s * (1.0 + a[i] * (1.0 - s));
                    }
                break;
            }
            case Op::Sigmoid: {
                if (Tensor* da = grad_a(n))
                    for (std::int64_t i = 0; i < g.size(); ++i)
                        (*da)[i] += g[i] * n.val[i] * (1.0 - n.val[i]);
                break;
            }
            case Op::Tanh: {
                if (Tensor* da = grad_a(n))
                    for (std::int64_t i = 0; i < g.size(); ++i)
                        (*da)[i] += g[i] * (1.0 - n.val[i] * n.val[i]);
                break;
            }
            case Op::Exp: {
                if (Tensor* da = grad_a(n))
                    for (std::int64_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * n.val[i];
                break;
            }
            case Op::Log: {
                const Tensor& a = in_a(n);
                if (Tensor* da = grad_a(n))
                    for (std::int64_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] / a[i];
                break;
            }
            case Op::Sqrt: {
                if (Tensor* da = grad_a(n))
                    for (std::int64_t i = 0; i < g.size(); ++i)
                        if (n.val[i] > 0.0) (*da)[i] += g[i] * 0.5 / n.val[i];
                break;
            }
            case Op::SqrtShift: {
                const double root = std::sqrt(n.s0);
                if (Tensor* da = grad_a(n))
                    for (std::int64_t i = 0; i < g.size(); ++i)
                        (*da)[i] += g[i] * 0.5 / (n.val[i] + root);
                break;
            }
            case Op::Abs: {
                const Tensor& a = in_a(n);
                if (Tensor* da = grad_a(n))
                    for (std::int64_t i = 0; i < g.size(); ++i) {
                        if (a[i] > 0.0)
                            (*da)[i] += g[i];
                        else if (a[i] < 0.0)
                            (*da)[i] -= g[i];
                    }
                break;
            }
            case Op::LogSigmoid: {
                const Tensor& a = in_a(n);
                if (Tensor* da = grad_a(n))
                    for (std::int64_t i = 0; i < g.size(); ++i)
                        (*da)[i] += g[i] * stable_sigmoid(-a[i]);
                break;
            }
            case Op::Clamp: {
                const Tensor& a = in_a(n);
                if (Tensor* da = grad_a(n))
                    for (std::int64_t i = 0; i < g.size(); ++i)
                        if (a[i] >= n.s0 && a[i] <= n.s1) (*da)[i] += g[i];
                break;
            }
            case Op::MatMul: {
                const Tensor &a = in_a(n), &b = in_b(n);
                const bool ta = n.i0 != 0, tb = n.i1 != 0;
                if (Tensor* da = grad_a(n)) {
                    if (!ta)
                        mm_accumulate(g, false, b, !tb, *da, true);
                    else
                        mm_accumulate(b, tb, g, true, *da, true);
                }
                if (Tensor* db = grad_b(n)) {
                    if (!tb)
                        mm_accumulate(a, !ta, g, false, *db, true);
                    else
                        mm_accumulate(g, true, a, ta, *db, true);
                }
                break;
            }
            case Op::Linear: {
                const Tensor &x = in_a(n), &w = in_b(n);
                if (Tensor* dx = grad_a(n)) mm_accumulate(g, false, w, true, *dx, true);
                if (Tensor* dw = grad_b(n)) mm_accumulate(x, true, g, false, *dw, true);
                if (Tensor* dbias = grad_c(n)) {
                    const int rows = g.shape[0], cols = g.shape[1];
                    for (int i = 0; i < rows; ++i) {
                        const double* gr = &g.data[static_cast<std::size_t>(i) * cols];
                        for (int j = 0; j < cols; ++j) (*dbias)[j] += gr[j];
                    }
                }
                break;
            }
            case Op::Conv2d:
                backprop_conv2d(n);
                break;
            case Op::AvgDown: {
                const int r = n.i0;
                const double inv = 1.0 / (static_cast<double>(r) * r);
                Tensor* dx = grad_a(n);
                if (!dx) break;
                const int oh = n.val.shape[0], ow = n.val.shape[1], c = n.val.shape[2];
                const int w = dx->shape[1];
                for (int oy = 0; oy < oh; ++oy)
                    for (int ox = 0; ox < ow; ++ox) {
                        const double* gr = &g.data[(static_cast<std::size_t>(oy) * ow + ox) * c];
                        for (int dy = 0; dy < r; ++dy)
                            for (int dx2 = 0; dx2 < r; ++dx2) {
                                double* dst =
                                    &dx->data[(static_cast<std::size_t>(oy * r + dy) * w + ox * r + dx2) * c];
                                for (int ch = 0; ch < c; ++ch) dst[ch] += gr[ch] * inv;
                            }
                    }
                break;
            }
            case Op::UpNearest: {
                const int r = n.i0;
                Tensor* dx = grad_a(n);
                if (!dx) break;
                const int h = dx->shape[0], w = dx->shape[1], c = dx->shape[2];
                for (int y = 0; y < h * r; ++y)
                    for (int x2 = 0; x2 < w * r; ++x2) {
                        const double* gr = &g.data[(static_cast<std::size_t>(y) * (w * r) + x2) * c];
                        double* dst = &dx->data[(static_cast<std::size_t>(y / r) * w + x2 / r) * c];
                        for (int ch = 0; ch < c; ++ch) dst[ch] += gr[ch];
                    }
                break;
            }
            case Op::SoftmaxRows: {
                Tensor* dx = grad_a(n);
                if (!dx) break;
                const int rows = n.val.shape[0], k = n.val.shape[1];
                for (int i = 0; i < rows; ++i) {
                    const double* yr = &n.val.data[static_cast<std::size_t>(i) * k];
                    const double* gr = &g.data[static_cast<std::size_t>(i) * k];
                    double dot = 0.0;
                    for (int j = 0; j < k; ++j) dot += yr[j] * gr[j];
                    double* dr = &dx->data[static_cast<std::size_t>(i) * k];
                    for (int j = 0; j < k; ++j) dr[j] += yr[j] * (gr[j] - dot);
                }
                break;
            }
            case Op::LayerNormRows:
                backprop_layer_norm(n);
                break;
            case Op::Sum: {
                if (Tensor* da = grad_a(n)) {
                    const double gv = g[0];
                    for (std::int64_t i = 0; i < da->size(); ++i) (*da)[i] += gv;
                }
                break;
            }
            case Op::Mean: {
                if (Tensor* da = grad_a(n)) {
                    const double gv = g[0] / static_cast<double>(da->size());
                    for (std::int64_t i = 0; i < da->size(); ++i) (*da)[i] += gv;
                }
                break;
            }
            case Op::SoftmaxCE: {
                Tensor* dx = grad_a(n);
                if (!dx) break;
                const Tensor& x = in_a(n);
                const int rows = x.shape[0], k = x.shape[1];
                const double gv = g[0] / rows;
                std::vector<double> prob(static_cast<std::size_t>(k));
                for (int i = 0; i < rows; ++i) {
                    const double* xr = &x.data[static_cast<std::size_t>(i) * k];
                    double m = xr[0];
                    for (int j = 1; j < k; ++j) m = std::max(m, xr[j]);
                    double s = 0.0;
                    for (int j = 0; j < k; ++j) {
                        prob[static_cast<std::size_t>(j)] = std::exp(xr[j] - m);
                        s += prob[static_cast<std::size_t>(j)];
                    }
                    double* dr = &dx->data[static_cast<std::size_t>(i) * k];
                    const int t = n.idx[static_cast<std::size_t>(i)];
                    for (int j = 0; j < k; ++j) dr[j] += gv * (prob[static_cast<std::size_t>(j)] / s - (j == t ? 1.0 : 0.0));
                }
                break;
            }
            case Op::GatherRows: {
                Tensor* dt = grad_a(n);
                if (!dt) break;
                const int d = dt->shape[1];
                for (std::size_t i = 0; i < n.idx.size(); ++i) {
                    const double* gr = &g.data[i * static_cast<std::size_t>(d)];
                    double* dst = &dt->data[static_cast<std::size_t>(n.idx[i]) * d];
                    for (int j = 0; j < d; ++j) dst[j] += gr[j];
                }
                break;
            }
            case Op::Reshape: {
                if (Tensor* da = grad_a(n))
                    for (std::int64_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
                break;
            }
        }
    }

    void backprop_conv2d(Node& n) {
        const Tensor &x = in_a(n), &k = in_b(n), &g = n.grad;
        Tensor* dx = grad_a(n);
        Tensor* dk = grad_b(n);
        Tensor* db = n.c >= 0 ? grad_c(n) : nullptr;
        if (!dx && !dk && !db) return;
        const int h = x.shape[0], w = x.shape[1], cin = x.shape[2];
        const int kh = k.shape[0], kw = k.shape[1], cout = k.shape[3];
        const int stride = n.i0, pad = n.i1;
        const int oh = n.val.shape[0], ow = n.val.shape[1];
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                const double* gr = &g.data[(static_cast<std::size_t>(oy) * ow + ox) * cout];
                if (db)
                    for (int co = 0; co < cout; ++co) (*db)[co] += gr[co];
                if (!dx && !dk) continue;
                for (int ky = 0; ky < kh; ++ky) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (int kx = 0; kx < kw; ++kx) {
                        const int ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= w) continue;
                        const std::size_t xoff = (static_cast<std::size_t>(iy) * w + ix) * cin;
                        const std::size_t koff = (static_cast<std::size_t>(ky) * kw + kx) * cin * cout;
                        for (int ci = 0; ci < cin; ++ci) {
                            const double xv = x.data[xoff + static_cast<std::size_t>(ci)];
                            const double* krow = &k.data[koff + static_cast<std::size_t>(ci) * cout];
                            double accx = 0.0;
                            if (dk) {
                                double* dkrow = &dk->data[koff + static_cast<std::size_t>(ci) * cout];
                                for (int co = 0; co < cout; ++co) {
                                    dkrow[co] += xv * gr[co];
                                    accx += krow[co] * gr[co];
                                }
                            } else {
                                for (int co = 0; co < cout; ++co) accx += krow[co] * gr[co];
                            }
                            if (dx) dx->data[xoff + static_cast<std::size_t>(ci)] += accx;
                        }
                    }
                }
            }
        }
    }

    void backprop_layer_norm(Node& n) {
        const Tensor &x = in_a(n), &gain = in_b(n), &g = n.grad;
        Tensor* dx = grad_a(n);
        Tensor* dg = grad_b(n);
        Tensor* db = grad_c(n);
        const int rows = x.shape[0], d = x.shape[1];
        for (int i = 0; i < rows; ++i) {
            const double* xr = &x.data[static_cast<std::size_t>(i) * d];
            const double* gr = &g.data[static_cast<std::size_t>(i) * d];
            double mu = 0.0;
            for (int j = 0; j < d; ++j) mu += xr[j];
            mu /= d;
            double var = 0.0;
            for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
            var /= d;
            const double inv = 1.0 / std::sqrt(var + n.s0);
            if (dg || db) {
                for (int j = 0; j < d; ++j) {
                    const double xhat = (xr[j] - mu) * inv;
                    if (dg) (*dg)[j] += gr[j] * xhat;
                    if (db) (*db)[j] += gr[j];
                }
            }
            if (dx) {
                // dxhat = g * gain; dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                for (int j = 0; j < d; ++j) {
                    const double dxhat = gr[j] * gain[j];
                    const double xhat = (xr[j] - mu) * inv;
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += dxhat * xhat;
                }
                mean_dxhat /= d;
                mean_dxhat_xhat /= d;
                double* dr = &dx->data[static_cast<std::size_t>(i) * d];
                for (int j = 0; j < d; ++j) {
                    const double dxhat = gr[j] * gain[j];
                    const double xhat = (xr[j] - mu) * inv;
                    dr[j] += inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
        }
    }
};

}  // namespace iqvq
