#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "iqvq/rng.hpp"
#include "iqvq/tape.hpp"
#include "iqvq/tensor.hpp"

namespace iqvq {

enum class CodebookRole { Common, HqPlus };

struct Codebook {
    Tensor entries;  // N x c
    CodebookRole role = CodebookRole::Common;

    int size() const { return entries.shape[0]; }
    int dim() const { return entries.shape[1]; }

    /// Entries drawn uniformly from [-1/c, 1/c].
    static Codebook init_random(int n, int c, CodebookRole role, Rng& rng) {
        Codebook cb;
        cb.entries = Tensor(Shape{n, c});
        const double bound = 1.0 / c;
        for (std::int64_t i = 0; i < cb.entries.size(); ++i)
            cb.entries[i] = rng.uniform(-bound, bound);
        cb.role = role;
        return cb;
    }
};

struct CodeSequence {
    std::vector<int> indices;  // length h*w, each in [0, N)
};

/// Nearest-entry quantization of Z[h x w x c]: per grid position the L2
/// closest codebook row, ties broken toward the lowest index. Returns the
/// substituted feature map and the code sequence.
inline std::pair<Tensor, CodeSequence> quantize(const Tensor& z, const Codebook& cb) {
    if (z.rank() != 3 || z.shape[2] != cb.dim())
        throw std::invalid_argument("quantize: channel dim " + shape_str(z.shape) +
                                    " does not match codebook dim " + std::to_string(cb.dim()));
    const int h = z.shape[0], w = z.shape[1], c = z.shape[2];
    const int n = cb.size();
    Tensor zq(z.shape);
    CodeSequence codes;
    codes.indices.resize(static_cast<std::size_t>(h) * w);
    for (int i = 0; i < h * w; ++i) {
        const double* zv = &z.data[static_cast<std::size_t>(i) * c];
        int best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (int k = 0; k < n; ++k) {
            const double* e = &cb.entries.data[static_cast<std::size_t>(k) * c];
            double d = 0.0;
            for (int j = 0; j < c; ++j) {
                const double diff = zv[j] - e[j];
                d += diff * diff;
            }
            if (d < best_d) {
                best_d = d;
                best = k;
            }
        }
        codes.indices[static_cast<std::size_t>(i)] = best;
        std::copy_n(&cb.entries.data[static_cast<std::size_t>(best) * c], c,
                    &zq.data[static_cast<std::size_t>(i) * c]);
    }
    return {std::move(zq), std::move(codes)};
}

/// Differentiable lookup of a code sequence against a codebook var:
/// gather rows and reshape to the h x w x c grid. Gradients flow into the
/// selected codebook rows.
inline Var lookup_codes(Tape& tape, Var codebook, const CodeSequence& codes, int h, int w) {
    const int c = tape.value(codebook).shape[1];
    return tape.reshape(tape.gather_rows(codebook, codes.indices), Shape{h, w, c});
}

/// Dual-codebook fusion. Stage I routes on the quality score: zq1 + alpha*zq2
/// when S > S_thr, zq1 alone otherwise. Stage II (always_add) fuses both
/// unconditionally.
inline Var fuse(Tape& tape, Var zq1, Var zq2, double s, double s_thr, double alpha,
                bool always_add = false) {
    require_same_shape(tape.value(zq1), tape.value(zq2), "fuse");
    if (!always_add && !(s > s_thr)) return zq1;
    if (alpha == 0.0) return zq1;
    return tape.add(zq1, tape.mul_scalar(zq2, alpha));
}

/// Value-path fuse for inference code.
inline Tensor fuse_values(const Tensor& zq1, const Tensor& zq2, double alpha) {
    require_same_shape(zq1, zq2, "fuse");
    Tensor out(zq1.shape);
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = zq1[i] + alpha * zq2[i];
    return out;
}

/// Stop-gradient code feature loss:
///   ||sg(zh) - zq||^2 + beta * ||zh - sg(zq)||^2        (sum of squares)
/// Codebook entries receive gradient only through the first term, the encoder
/// output only through the second.
inline Var codebook_loss(Tape& tape, Var zh, Var zq, double beta) {
    require_same_shape(tape.value(zh), tape.value(zq), "codebook_loss");
    Var pull = tape.sub(tape.stop_grad(zh), zq);
    Var commit = tape.sub(zh, tape.stop_grad(zq));
    return tape.add(tape.sum(tape.mul(pull, pull)),
                    tape.mul_scalar(tape.sum(tape.mul(commit, commit)), beta));
}

/// Fraction of codebook entries referenced by a set of code sequences.
inline double utilization(const std::vector<CodeSequence>& seqs, int codebook_size) {
    std::vector<char> used(static_cast<std::size_t>(codebook_size), 0);
    for (const CodeSequence& s : seqs)
        for (int i : s.indices) used[static_cast<std::size_t>(i)] = 1;
    int count = 0;
    for (char u : used) count += u;
    return static_cast<double>(count) / codebook_size;
}

}  // namespace iqvq
