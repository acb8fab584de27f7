#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "iqvq/rng.hpp"
#include "iqvq/tensor.hpp"

namespace iqvq {

/// Parameters of the blur / resample / noise / JPEG chain. Ranges are the
/// desk-scale defaults; delta lives on the 0-255 scale.
struct DegradationParams {
    double sigma = 1.0;  // blur kernel width, in [1, 4]
    int r = 1;           // resampling factor, image extents must divide by it
    double delta = 0.0;  // noise stddev on the 0-255 scale, in [0, 20]
    int q = 90;          // JPEG quality factor, in [30, 90]
};

namespace detail {

inline int reflect_index(int i, int n) {
    // Mirror with edge repeat: -1 -> 0, -2 -> 1, n -> n-1, ...
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
}

inline std::vector<double> gaussian_taps(double sigma) {
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> taps(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0.0;
    for (int d = -radius; d <= radius; ++d) {
        const double w = std::exp(-(static_cast<double>(d) * d) / (2.0 * sigma * sigma));
        taps[static_cast<std::size_t>(d + radius)] = w;
        sum += w;
    }
    for (double& w : taps) w /= sum;
    return taps;
}

// Standard luminance quantization table.
inline constexpr std::array<int, 64> kLuminanceTable = {
    16, 11, 10, 16, 24,  40,  51,  61,   //
    12, 12, 14, 19, 26,  58,  60,  55,   //
    14, 13, 16, 24, 40,  57,  69,  56,   //
    14, 17, 22, 29, 51,  87,  80,  62,   //
    18, 22, 37, 56, 68,  109, 103, 77,   //
    24, 35, 55, 64, 81,  104, 113, 92,   //
    49, 64, 78, 87, 103, 121, 120, 101,  //
    72, 92, 95, 98, 112, 100, 103, 99};

/// Effective quantization table at quality q: floor((Q*s + 50)/100), >= 1,
/// with s = 5000/q below the q=50 pivot and 200 - 2q above it.
inline std::array<int, 64> scaled_quant_table(int q) {
    const int s = (q < 50) ? 5000 / q : 200 - 2 * q;
    std::array<int, 64> out{};
    for (int i = 0; i < 64; ++i)
        out[static_cast<std::size_t>(i)] =
            std::max(1, (kLuminanceTable[static_cast<std::size_t>(i)] * s + 50) / 100);
    return out;
}

/// Orthonormal 8x8 DCT-II basis: row u is the u-th cosine at 8 sample points.
inline const std::array<std::array<double, 8>, 8>& dct_basis() {
    static const std::array<std::array<double, 8>, 8> basis = [] {
        std::array<std::array<double, 8>, 8> m{};
        for (int u = 0; u < 8; ++u) {
            const double alpha = (u == 0) ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
            for (int x = 0; x < 8; ++x)
                m[static_cast<std::size_t>(u)][static_cast<std::size_t>(x)] =
                    alpha * std::cos((2.0 * x + 1.0) * u * M_PI / 16.0);
        }
        return m;
    }();
    return basis;
}

}  // namespace detail

/// Separable Gaussian blur with reflect padding; sigma = 0 is the identity.
inline Tensor gaussian_blur(const Tensor& image, double sigma) {
    if (sigma < 0.0) throw std::invalid_argument("gaussian_blur: sigma must be >= 0");
    if (sigma == 0.0) return image;
    const auto taps = detail::gaussian_taps(sigma);
    const int radius = static_cast<int>(taps.size() / 2);
    const int h = image.shape[0], w = image.shape[1], c = image.shape[2];
    Tensor horiz(image.shape);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch) {
                double acc = 0.0;
                for (int d = -radius; d <= radius; ++d)
                    acc += taps[static_cast<std::size_t>(d + radius)] *
                           image.at(y, detail::reflect_index(x + d, w), ch);
                horiz.at(y, x, ch) = acc;
            }
    Tensor out(image.shape);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch) {
                double acc = 0.0;
                for (int d = -radius; d <= radius; ++d)
                    acc += taps[static_cast<std::size_t>(d + radius)] *
                           horiz.at(detail::reflect_index(y + d, h), x, ch);
                out.at(y, x, ch) = acc;
            }
    return out;
}

/// r x r block averaging.
inline Tensor resample_down(const Tensor& image, int r) {
    if (r < 1) throw std::invalid_argument("resample_down: r must be >= 1");
    if (r == 1) return image;
    const int h = image.shape[0], w = image.shape[1], c = image.shape[2];
    if (h % r != 0 || w % r != 0)
        throw std::invalid_argument("resample_down: extents " + shape_str(image.shape) +
                                    " not divisible by " + std::to_string(r));
    Tensor out(Shape{h / r, w / r, c});
    const double inv = 1.0 / (static_cast<double>(r) * r);
    for (int oy = 0; oy < h / r; ++oy)
        for (int ox = 0; ox < w / r; ++ox)
            for (int ch = 0; ch < c; ++ch) {
                double acc = 0.0;
                for (int dy = 0; dy < r; ++dy)
                    for (int dx = 0; dx < r; ++dx) acc += image.at(oy * r + dy, ox * r + dx, ch);
                out.at(oy, ox, ch) = acc * inv;
            }
    return out;
}

/// Nearest-neighbor replication back up by factor r.
inline Tensor resample_up(const Tensor& image, int r) {
    if (r < 1) throw std::invalid_argument("resample_up: r must be >= 1");
    if (r == 1) return image;
    const int h = image.shape[0], w = image.shape[1], c = image.shape[2];
    Tensor out(Shape{h * r, w * r, c});
    for (int y = 0; y < h * r; ++y)
        for (int x = 0; x < w * r; ++x)
            for (int ch = 0; ch < c; ++ch) out.at(y, x, ch) = image.at(y / r, x / r, ch);
    return out;
}

/// Adds i.i.d. zero-mean Gaussian noise with stddev delta/255, clamps to [0,1].
inline Tensor add_noise(const Tensor& image, double delta, std::uint64_t seed) {
    if (delta < 0.0) throw std::invalid_argument("add_noise: delta must be >= 0");
    if (delta == 0.0) return image;
    Rng rng(seed);
    const double stddev = delta / 255.0;
    Tensor out(image.shape);
    for (std::int64_t i = 0; i < image.size(); ++i)
        out[i] = std::clamp(image[i] + stddev * rng.normal(), 0.0, 1.0);
    return out;
}

/// Grayscale 8x8-block JPEG round-trip: shift to the [-128,127] scale,
/// orthonormal DCT, quantize with the scaled luminance table, inverse DCT,
/// shift back, clamp.
inline Tensor jpeg_roundtrip(const Tensor& image, int q) {
    if (image.rank() != 3 || image.shape[2] != 1)
        throw std::invalid_argument("jpeg_roundtrip: expected a single-channel image");
    if (q < 1 || q > 100) throw std::invalid_argument("jpeg_roundtrip: q must be in [1,100]");
    const int h = image.shape[0], w = image.shape[1];
    if (h % 8 != 0 || w % 8 != 0)
        throw std::invalid_argument("jpeg_roundtrip: extents " + shape_str(image.shape) +
                                    " not divisible by 8");
    const auto qt = detail::scaled_quant_table(q);
    const auto& m = detail::dct_basis();
    Tensor out(image.shape);
    double block[8][8], tmp[8][8], freq[8][8];
    for (int by = 0; by < h; by += 8)
        for (int bx = 0; bx < w; bx += 8) {
            for (int y = 0; y < 8; ++y)
                for (int x = 0; x < 8; ++x) block[y][x] = image.at(by + y, bx + x, 0) * 255.0 - 128.0;
            // F = M * B * M^T
            for (int u = 0; u < 8; ++u)
                for (int x = 0; x < 8; ++x) {
                    double acc = 0.0;
                    for (int y = 0; y < 8; ++y) acc += m[u][y] * block[y][x];
                    tmp[u][x] = acc;
                }
            for (int u = 0; u < 8; ++u)
                for (int v = 0; v < 8; ++v) {
                    double acc = 0.0;
                    for (int x = 0; x < 8; ++x) acc += tmp[u][x] * m[v][x];
                    const double step = qt[static_cast<std::size_t>(u * 8 + v)];
                    freq[u][v] = std::round(acc / step) * step;
                }
            // B' = M^T * F * M
            for (int y = 0; y < 8; ++y)
                for (int v = 0; v < 8; ++v) {
                    double acc = 0.0;
                    for (int u = 0; u < 8; ++u) acc += m[u][y] * freq[u][v];
                    tmp[y][v] = acc;
                }
            for (int y = 0; y < 8; ++y)
                for (int x = 0; x < 8; ++x) {
                    double acc = 0.0;
                    for (int v = 0; v < 8; ++v) acc += tmp[y][v] * m[v][x];
                    out.at(by + y, bx + x, 0) = std::clamp((acc + 128.0) / 255.0, 0.0, 1.0);
                }
        }
    return out;
}

/// Full LQ synthesis: blur -> down(r) -> noise -> jpeg(q) -> up(r).
/// Output extents equal input extents; deterministic under (params, seed).
inline Tensor degrade(const Tensor& image, const DegradationParams& p, std::uint64_t seed) {
    if (image.shape[0] != image.shape[1])
        throw std::invalid_argument("degrade: image must be square");
    if (image.shape[0] % (p.r * 8) != 0)
        throw std::invalid_argument("degrade: extent " + std::to_string(image.shape[0]) +
                                    " must divide by 8*r for the JPEG stage");
    Tensor x = gaussian_blur(image, p.sigma);
    x = resample_down(x, p.r);
    x = add_noise(x, p.delta, seed);
    x = jpeg_roundtrip(x, p.q);
    return resample_up(x, p.r);
}

/// Samples degradation parameters from the desk-scale ranges: sigma and delta
/// as uniform reals, q as a uniform integer, r uniform over the factors of the
/// image extent that keep the downsampled image JPEG-compatible.
inline DegradationParams sample_params(Rng& rng, int image_size) {
    DegradationParams p;
    p.sigma = rng.uniform(1.0, 4.0);
    std::vector<int> factors;
    for (int r = 1; r <= 4; ++r)
        if (image_size % (8 * r) == 0) factors.push_back(r);
    p.r = factors[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(factors.size()) - 1))];
    p.delta = rng.uniform(0.0, 20.0);
    p.q = rng.uniform_int(30, 90);
    return p;
}

}  // namespace iqvq
