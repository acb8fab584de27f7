#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "iqvq/tape.hpp"
#include "iqvq/tensor.hpp"

namespace iqvq {

/// Smoothing constant inside the magnitude terms of P1/P3. Keeps the proxies
/// C^1 everywhere (finite-difference checkable) while a constant image still
/// scores exactly zero.
inline constexpr double kMagnitudeDelta = 1e-4;

/// Per-proxy min/max statistics fitted once over a reference corpus.
struct NormalizerEntry {
    double s_min = 0.0;
    double s_max = 0.0;
};

inline constexpr int kNumProxies = 3;   // trained ensemble members
inline constexpr int kJudgeIndex = 3;   // held-out judge slot

struct QualityReport {
    std::array<double, kNumProxies> raw{};
    std::array<double, kNumProxies> normalized{};
    double ensemble = 0.0;
    int bin = 0;
};

namespace detail {

inline Tensor replicate_channels(const std::array<std::array<double, 3>, 3>& w, int channels) {
    Tensor k(Shape{3, 3, channels, 1});
    for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 3; ++x)
            for (int c = 0; c < channels; ++c) k.at(y, x, c, 0) = w[y][x];
    return k;
}

inline Tensor sobel_x_kernel(int channels) {
    return replicate_channels({{{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}}}, channels);
}

inline Tensor sobel_y_kernel(int channels) {
    return replicate_channels({{{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}}}, channels);
}

inline Tensor laplacian_kernel(int channels) {
    return replicate_channels({{{0, 1, 0}, {1, -4, 1}, {0, 1, 0}}}, channels);
}

/// 5x5 difference of Gaussians, each lobe normalized to sum 1. A band-pass
/// filter tuned to mid frequencies; it ignores both flat regions and
/// pixel-rate alternation, which is what makes it a useful unoptimized judge.
inline Tensor dog_kernel(int channels, double sigma_narrow = 0.8, double sigma_wide = 1.6) {
    std::array<std::array<double, 5>, 5> narrow{}, wide{};
    double sn = 0.0, sw = 0.0;
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 5; ++x) {
            const double d2 = (y - 2.0) * (y - 2.0) + (x - 2.0) * (x - 2.0);
            narrow[y][x] = std::exp(-d2 / (2.0 * sigma_narrow * sigma_narrow));
            wide[y][x] = std::exp(-d2 / (2.0 * sigma_wide * sigma_wide));
            sn += narrow[y][x];
            sw += wide[y][x];
        }
    Tensor k(Shape{5, 5, channels, 1});
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 5; ++x)
            for (int c = 0; c < channels; ++c)
                k.at(y, x, c, 0) = narrow[y][x] / sn - wide[y][x] / sw;
    return k;
}

}  // namespace detail

struct ProxyVars {
    Var p1;  // mean Sobel gradient magnitude
    Var p2;  // pixel standard deviation
    Var p3;  // mean absolute Laplacian response
};

/// Differentiable raw proxy triple for an image var of shape H x W x C.
inline ProxyVars proxy_graph(Tape& tape, Var image) {
    const Tensor& img = tape.value(image);
    if (img.rank() != 3) throw std::invalid_argument("proxy_graph: image must be H x W x C");
    const int c = img.shape[2];
    ProxyVars out;
    {
        Var gx = tape.conv2d(image, tape.constant(detail::sobel_x_kernel(c)), 1, 0);
        Var gy = tape.conv2d(image, tape.constant(detail::sobel_y_kernel(c)), 1, 0);
        Var mag2 = tape.add(tape.mul(gx, gx), tape.mul(gy, gy));
        out.p1 = tape.mean(tape.sqrt_shift(mag2, kMagnitudeDelta));
    }
    {
        Var mu = tape.mean(image);
        Var centered = tape.add_smul(image, mu, -1.0);
        out.p2 = tape.sqrt_(tape.mean(tape.mul(centered, centered)));
    }
    {
        Var lap = tape.conv2d(image, tape.constant(detail::laplacian_kernel(c)), 1, 0);
        out.p3 = tape.mean(tape.sqrt_shift(tape.mul(lap, lap), kMagnitudeDelta));
    }
    return out;
}

/// Raw proxy scores of an image (value path).
inline std::array<double, kNumProxies> proxy_scores(const Tensor& image) {
    Tape tape;
    ProxyVars p = proxy_graph(tape, tape.constant(image));
    return {tape.scalar(p.p1), tape.scalar(p.p2), tape.scalar(p.p3)};
}

/// Raw held-out judge score: mean absolute response of the fixed 5x5
/// difference-of-Gaussians kernel. Never trained against, never ensembled.
inline double judge_score(const Tensor& image) {
    Tape tape;
    Var r = tape.conv2d(tape.constant(image), tape.constant(detail::dog_kernel(image.shape[2])), 1, 0);
    return tape.scalar(tape.mean(tape.abs_(r)));
}

class CorpusNormalizer {
public:
    CorpusNormalizer() = default;

    /// Fit per-proxy (and judge) min/max over raw score rows.
    static CorpusNormalizer fit(const std::vector<std::array<double, 4>>& raw_rows) {
        if (raw_rows.empty()) throw std::invalid_argument("CorpusNormalizer: empty corpus");
        CorpusNormalizer n;
        for (int p = 0; p < 4; ++p) {
            double lo = raw_rows[0][static_cast<std::size_t>(p)];
            double hi = lo;
            for (const auto& row : raw_rows) {
                lo = std::min(lo, row[static_cast<std::size_t>(p)]);
                hi = std::max(hi, row[static_cast<std::size_t>(p)]);
            }
            n.entries_[static_cast<std::size_t>(p)] = {lo, hi};
        }
        n.fitted_ = true;
        return n;
    }

    static CorpusNormalizer from_entries(const std::array<NormalizerEntry, 4>& e) {
        CorpusNormalizer n;
        n.entries_ = e;
        n.fitted_ = true;
        return n;
    }

    bool fitted() const { return fitted_; }
    const NormalizerEntry& entry(int proxy) const { return entries_.at(static_cast<std::size_t>(proxy)); }

    /// (s - s_min) / (s_max - s_min + 1e-5), clamped into [0, 1).
    double normalize(int proxy, double raw) const {
        require_fitted();
        const NormalizerEntry& e = entries_[static_cast<std::size_t>(proxy)];
        const double v = (raw - e.s_min) / (e.s_max - e.s_min + 1e-5);
        return std::clamp(v, 0.0, 1.0 - 1e-9);
    }

    /// Same affine-and-clamp transform on the tape.
    Var normalize_var(Tape& tape, int proxy, Var raw) const {
        require_fitted();
        const NormalizerEntry& e = entries_[static_cast<std::size_t>(proxy)];
        const double scale = 1.0 / (e.s_max - e.s_min + 1e-5);
        return tape.clamp(tape.mul_scalar(tape.add_scalar(raw, -e.s_min), scale), 0.0, 1.0 - 1e-9);
    }

private:
    std::array<NormalizerEntry, 4> entries_{};
    bool fitted_ = false;

    void require_fitted() const {
        if (!fitted_) throw std::logic_error("CorpusNormalizer: not fitted");
    }
};

/// Arithmetic mean of normalized scores.
inline double ensemble(const std::vector<double>& normalized) {
    if (normalized.empty()) throw std::invalid_argument("ensemble: empty score list");
    double s = 0.0;
    for (double v : normalized) s += v;
    return s / static_cast<double>(normalized.size());
}

/// clamp(floor(10 * S), 0, 9).
inline int bin_score(double s) {
    if (s < 0.0) throw std::invalid_argument("bin_score: S must be >= 0");
    const int b = static_cast<int>(std::floor(10.0 * s));
    return std::clamp(b, 0, 9);
}

inline QualityReport score_image(const Tensor& image, const CorpusNormalizer& normalizer) {
    QualityReport r;
    r.raw = proxy_scores(image);
    for (int p = 0; p < kNumProxies; ++p)
        r.normalized[static_cast<std::size_t>(p)] = normalizer.normalize(p, r.raw[static_cast<std::size_t>(p)]);
    r.ensemble = ensemble({r.normalized.begin(), r.normalized.end()});
    r.bin = bin_score(r.ensemble);
    return r;
}

/// Differentiable corpus-normalized ensemble score S of an image var.
inline Var ensemble_graph(Tape& tape, Var image, const CorpusNormalizer& normalizer) {
    ProxyVars p = proxy_graph(tape, image);
    Var s = tape.add(tape.add(normalizer.normalize_var(tape, 0, p.p1),
                              normalizer.normalize_var(tape, 1, p.p2)),
                     normalizer.normalize_var(tape, 2, p.p3));
    return tape.mul_scalar(s, 1.0 / 3.0);
}

/// Normalized held-out judge score (value path).
inline double judge_score_normalized(const Tensor& image, const CorpusNormalizer& normalizer) {
    return normalizer.normalize(kJudgeIndex, judge_score(image));
}

}  // namespace iqvq
