#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "iqvq/tape.hpp"
#include "iqvq/tensor.hpp"

namespace iqvq {

/// A scalar function of a parameter list together with its analytic gradient.
struct DiffFn {
    std::function<double(const std::vector<Tensor>&)> value;
    std::function<std::vector<Tensor>(const std::vector<Tensor>&)> gradient;
};

inline double rel_error(double analytic, double central) {
    return std::fabs(analytic - central) /
           std::max({1.0, std::fabs(analytic), std::fabs(central)});
}

/// Central-difference check of f's analytic gradient at `params`.
/// Returns max over all parameter entries of
/// |analytic - central| / max(1, |analytic|, |central|).
inline double check_gradients(const DiffFn& f, std::vector<Tensor> params, double eps) {
    if (eps < 1e-7 || eps > 1e-3) throw std::invalid_argument("check_gradients: eps outside [1e-7, 1e-3]");
    const std::vector<Tensor> analytic = f.gradient(params);
    if (analytic.size() != params.size())
        throw std::logic_error("check_gradients: gradient count mismatch");
    double worst = 0.0;
    for (std::size_t p = 0; p < params.size(); ++p) {
        for (std::int64_t i = 0; i < params[p].size(); ++i) {
            const double keep = params[p][i];
            params[p][i] = keep + eps;
            const double fp = f.value(params);
            params[p][i] = keep - eps;
            const double fm = f.value(params);
            params[p][i] = keep;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw std::runtime_error("check_gradients: non-finite value at parameter " +
                                         std::to_string(p) + " entry " + std::to_string(i));
            const double central = (fp - fm) / (2.0 * eps);
            worst = std::max(worst, rel_error(analytic[p][i], central));
        }
    }
    return worst;
}

/// Finite-difference check of a loss already recorded on a tape. Perturbs the
/// listed leaf values in place and replays the graph (stop-gradient values
/// stay frozen, so the replayed function is exactly the one whose gradient
/// backward() computes). Returns the max relative error over all leaf entries.
inline double tape_fd_max_rel_error(Tape& tape, Var loss, const std::vector<Var>& leaves,
                                    double eps) {
    tape.backward(loss);
    std::vector<Tensor> analytic;
    analytic.reserve(leaves.size());
    for (Var v : leaves) analytic.push_back(tape.grad(v));
    double worst = 0.0;
    for (std::size_t p = 0; p < leaves.size(); ++p) {
        Tensor& t = tape.mutable_value(leaves[p]);
        for (std::int64_t i = 0; i < t.size(); ++i) {
            const double keep = t[i];
            t[i] = keep + eps;
            tape.replay();
            const double fp = tape.scalar(loss);
            t[i] = keep - eps;
            tape.replay();
            const double fm = tape.scalar(loss);
            t[i] = keep;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw std::runtime_error("tape_fd_max_rel_error: non-finite loss at leaf " +
                                         std::to_string(p) + " entry " + std::to_string(i));
            const double central = (fp - fm) / (2.0 * eps);
            worst = std::max(worst, rel_error(analytic[p][i], central));
        }
    }
    tape.replay();  // restore recorded values
    return worst;
}

}  // namespace iqvq
