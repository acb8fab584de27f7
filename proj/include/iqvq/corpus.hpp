#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "iqvq/degrade.hpp"
#include "iqvq/rng.hpp"
#include "iqvq/tensor.hpp"

namespace iqvq {

/// Synthetic HQ corpus with nonuniform intrinsic quality. Each image composes
/// a radial gradient, a few filled ellipses and a sinusoidal texture patch,
/// then applies an intrinsic blur sigma_gt. The blur distribution is
/// right-skewed: most images are moderately soft, a small fraction stays
/// nearly sharp, so the sharp tail populates the top quality bins.
struct CorpusSpec {
    int count = 512;
    int image_size = 32;
    std::uint64_t seed = 7;
    double sharp_prob = 0.14;       // mass of the near-zero blur mode
    double sharp_max_sigma = 0.05;
    double blur_base = 0.25;        // lower edge of the moderate-blur bulk
    double blur_span = 0.65;        // bulk width
    double blur_shape = 1.1;        // >1 pushes bulk mass toward blur_base
    double heavy_prob = 0.10;       // mass of the strong-blur tail
    double heavy_base = 1.4;
    double heavy_span = 1.6;
};

struct CorpusImage {
    Tensor image;
    double sigma_gt = 0.0;
    std::uint64_t seed = 0;
};

namespace detail {

inline Tensor synthesize_scene(int n, Rng& rng) {
    Tensor img(Shape{n, n, 1});
    // Radial gradient background. Ranges are deliberately narrow so that the
    // intrinsic blur, not scene composition, dominates the quality axis.
    const double cx = rng.uniform(0.25 * n, 0.75 * n);
    const double cy = rng.uniform(0.25 * n, 0.75 * n);
    const double base = rng.uniform(0.36, 0.42);
    const double amp = rng.uniform(0.33, 0.37);
    const double rho = rng.uniform(0.4 * n, 0.6 * n);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            img.at(y, x, 0) = base + amp * std::exp(-r2 / (2.0 * rho * rho));
        }
    // One dark and one bright ellipse with a ~1px feathered rim; geometry
    // varies, contrast stays pinned so composition noise does not drown the
    // blur axis.
    for (int e = 0; e < 2; ++e) {
        const double ex = rng.uniform(0.15 * n, 0.85 * n);
        const double ey = rng.uniform(0.15 * n, 0.85 * n);
        const double ra = rng.uniform(0.17 * n, 0.21 * n);
        const double rb = rng.uniform(0.17 * n, 0.21 * n);
        const double theta = rng.uniform(0.0, M_PI);
        const double value = (e == 0) ? rng.uniform(0.08, 0.13) : rng.uniform(0.87, 0.92);
        const double ct = std::cos(theta), st = std::sin(theta);
        const double feather = 1.0 / std::min(ra, rb);
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                const double dx = x - ex, dy = y - ey;
                const double u = (dx * ct + dy * st) / ra;
                const double v = (-dx * st + dy * ct) / rb;
                const double d = std::sqrt(u * u + v * v);
                const double cov = std::clamp((1.0 - d) / feather + 0.5, 0.0, 1.0);
                img.at(y, x, 0) = (1.0 - cov) * img.at(y, x, 0) + cov * value;
            }
    }
    // Sinusoidal texture patch.
    const int patch = (6 * n) / 10;
    const int px = rng.uniform_int(0, n - patch);
    const int py = rng.uniform_int(0, n - patch);
    const double freq = rng.uniform(0.19, 0.22);
    const double dir = rng.uniform(0.0, M_PI);
    const double phase = rng.uniform(0.0, 2.0 * M_PI);
    const double amp_tex = 0.26;
    const double cd = std::cos(dir), sd = std::sin(dir);
    for (int y = py; y < py + patch; ++y)
        for (int x = px; x < px + patch; ++x)
            img.at(y, x, 0) += amp_tex * std::sin(2.0 * M_PI * freq * (x * cd + y * sd) + phase);
    for (std::int64_t i = 0; i < img.size(); ++i) img[i] = std::clamp(img[i], 0.0, 1.0);
    return img;
}

inline double sample_sigma_gt(const CorpusSpec& spec, Rng& rng) {
    const double u = rng.uniform();
    if (u < spec.sharp_prob) return rng.uniform(0.0, spec.sharp_max_sigma);
    if (u < spec.sharp_prob + spec.heavy_prob)
        return spec.heavy_base + spec.heavy_span * rng.uniform();
    return spec.blur_base + spec.blur_span * std::pow(rng.uniform(), spec.blur_shape);
}

}  // namespace detail

/// Generates one corpus image; deterministic in (spec, index).
inline CorpusImage gen_corpus_image(const CorpusSpec& spec, int index) {
    CorpusImage out;
    out.seed = spec.seed + static_cast<std::uint64_t>(index);
    Rng rng(out.seed);
    Tensor scene = detail::synthesize_scene(spec.image_size, rng);
    out.sigma_gt = detail::sample_sigma_gt(spec, rng);
    out.image = gaussian_blur(scene, out.sigma_gt);
    return out;
}

inline std::vector<CorpusImage> gen_corpus(const CorpusSpec& spec) {
    if (spec.count < 64) throw std::invalid_argument("gen_corpus: count must be >= 64");
    std::vector<CorpusImage> out;
    out.reserve(static_cast<std::size_t>(spec.count));
    for (int i = 0; i < spec.count; ++i) out.push_back(gen_corpus_image(spec, i));
    return out;
}

}  // namespace iqvq
