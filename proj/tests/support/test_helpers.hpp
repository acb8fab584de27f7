#pragma once

#include <functional>
#include <vector>

#include "iqvq/gradcheck.hpp"
#include "iqvq/rng.hpp"
#include "iqvq/tape.hpp"
#include "iqvq/tensor.hpp"

namespace iqvq::testing {

inline Tensor random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
    Tensor t(std::move(s));
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    t.requires_grad = requires_grad;
    return t;
}

/// Builds a graph from leaf params and returns a scalar output var.
using GraphBuilder = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Central-difference check of a graph builder at the given parameter values.
inline double builder_check(const GraphBuilder& build, const std::vector<Tensor>& params,
                            double eps = 1e-5) {
    auto run = [&](const std::vector<Tensor>& p, bool want_grads,
                   std::vector<Tensor>* grads) -> double {
        Tape tape;
        std::vector<Var> leaves;
        leaves.reserve(p.size());
        for (const Tensor& t : p) {
            Tensor copy = t;
            copy.requires_grad = true;
            leaves.push_back(tape.leaf(copy));
        }
        Var out = build(tape, leaves);
        if (want_grads) {
            tape.backward(out);
            grads->clear();
            for (Var v : leaves) grads->push_back(tape.grad(v));
        }
        return tape.scalar(out);
    };
    DiffFn fn;
    fn.value = [&](const std::vector<Tensor>& p) { return run(p, false, nullptr); };
    fn.gradient = [&](const std::vector<Tensor>& p) {
        std::vector<Tensor> grads;
        run(p, true, &grads);
        return grads;
    };
    return check_gradients(fn, params, eps);
}

/// Reduces an arbitrary tensor-valued var to a scalar with fixed pseudo-random
/// weights so that every output entry influences the check.
inline Var weighted_sum(Tape& tape, Var y, std::uint64_t seed = 1234) {
    Rng rng(seed);
    Tensor w(tape.value(y).shape);
    for (std::int64_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-1.0, 1.0);
    return tape.sum(tape.mul(y, tape.constant(w)));
}

/// Independent direct convolution: explicit zero padding, kernel-major loops.
inline Tensor conv2d_oracle(const Tensor& x, const Tensor& k, int stride, int pad) {
    const int h = x.shape[0], w = x.shape[1], cin = x.shape[2];
    const int kh = k.shape[0], kw = k.shape[1], cout = k.shape[3];
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (w + 2 * pad - kw) / stride + 1;
    Tensor out(Shape{oh, ow, cout});
    for (int co = 0; co < cout; ++co)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                double acc = 0.0;
                for (int ky = 0; ky < kh; ++ky)
                    for (int kx = 0; kx < kw; ++kx)
                        for (int ci = 0; ci < cin; ++ci) {
                            const int iy = oy * stride - pad + ky;
                            const int ix = ox * stride - pad + kx;
                            const double xv =
                                (iy >= 0 && iy < h && ix >= 0 && ix < w) ? x.at(iy, ix, ci) : 0.0;
                            acc += xv * k.at(ky, kx, ci, co);
                        }
                out.at(oy, ox, co) = acc;
            }
    return out;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

inline bool bit_identical(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) return false;
    for (std::int64_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

}  // namespace iqvq::testing
