#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "iqvq/checkpoint.hpp"
#include "iqvq/rng.hpp"
#include "iqvq/tape.hpp"
#include "iqvq/tensor.hpp"
#include "iqvq/vq.hpp"

namespace iqvq {

/// The frozen perceptual extractor is shared by every run, like a pretrained
/// network would be, so its seed is a fixed constant rather than a run seed.
inline constexpr std::uint64_t kPerceptualSeed = 1905;

struct ModelConfig {
    int image_size = 32;
    int image_channels = 1;
    int latent_hw = 4;   // latent grid is latent_hw x latent_hw
    int latent_c = 32;   // code dimension
    std::vector<int> stage_channels = {8, 12, 16, 32};  // widths per resolution
    int codebook_common = 64;  // N1
    int codebook_hq = 32;      // N2
    std::vector<int> disc_channels = {8, 16, 16};
    std::vector<int> perc_channels = {4, 8, 8};
    int tf_layers = 2;
    int tf_heads = 4;
    int tf_ffn = 64;
    // Soft LN floor: keeps the loss surface gentle enough that eps=1e-5
    // central differences sit well inside the 1e-4 check tolerance.
    double ln_eps = 1e-3;
    // Optional fixed scale on the encoder head output.
    double latent_scale = 1.0;

    int downs() const { return static_cast<int>(stage_channels.size()) - 1; }
    int tokens() const { return latent_hw * latent_hw; }
    int embed_dim() const { return latent_hw * latent_hw * latent_c; }

    void validate() const {
        if ((latent_hw << downs()) != image_size)
            throw std::invalid_argument("ModelConfig: image_size must equal latent_hw * 2^downs");
        if (latent_c % tf_heads != 0)
            throw std::invalid_argument("ModelConfig: latent_c must divide by tf_heads");
        if (image_size % 8 != 0 && disc_channels.size() == 3)
            throw std::invalid_argument("ModelConfig: discriminator needs image_size divisible by 8");
    }

    /// Micro configuration used by fast tests and gradient checks.
    static ModelConfig micro() {
        ModelConfig cfg;
        cfg.image_size = 8;
        cfg.latent_hw = 2;
        cfg.latent_c = 4;
        cfg.stage_channels = {2, 3, 4};
        cfg.codebook_common = 6;
        cfg.codebook_hq = 5;
        cfg.disc_channels = {2, 3, 3};
        cfg.perc_channels = {2, 2, 2};
        cfg.tf_layers = 1;
        cfg.tf_heads = 2;
        cfg.tf_ffn = 6;
        return cfg;
    }
};

/// Ordered name -> tensor store for all trainable and frozen weights.
class Params {
public:
    void add(const std::string& name, Tensor t) {
        if (index_.count(name)) throw std::logic_error("Params: duplicate " + name);
        index_[name] = items_.size();
        items_.emplace_back(name, std::move(t));
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    const Tensor& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("Params: missing " + name);
        return items_[it->second].second;
    }
    Tensor& get(const std::string& name) {
        return const_cast<Tensor&>(static_cast<const Params*>(this)->get(name));
    }

    const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }

    void to_checkpoint(Checkpoint& ckpt) const {
        for (const auto& [name, t] : items_) ckpt.add(name, t);
    }

    /// Model weights only; bookkeeping records like quality/ stay behind.
    static Params from_checkpoint(const Checkpoint& ckpt) {
        Params p;
        for (const auto& [name, t] : ckpt.records())
            if (name.rfind("quality/", 0) != 0) p.add(name, t);
        return p;
    }

private:
    std::vector<std::pair<std::string, Tensor>> items_;
    std::map<std::string, std::size_t> index_;
};

/// Tape handles for registered parameters.
struct VarMap {
    std::map<std::string, Var> vars;

    Var at(const std::string& name) const {
        auto it = vars.find(name);
        if (it == vars.end()) throw std::out_of_range("VarMap: missing " + name);
        return it->second;
    }
};

/// Registers every parameter as a tape leaf; `trainable` decides which leaves
/// carry gradients.
inline VarMap register_params(Tape& tape, const Params& params,
                              const std::function<bool(const std::string&)>& trainable) {
    VarMap out;
    for (const auto& [name, t] : params.items()) {
        Tensor copy = t;
        copy.requires_grad = trainable(name);
        out.vars[name] = tape.leaf(copy);
    }
    return out;
}

inline std::function<bool(const std::string&)> prefix_trainable(std::vector<std::string> prefixes) {
    return [prefixes = std::move(prefixes)](const std::string& name) {
        for (const auto& p : prefixes)
            if (name.rfind(p, 0) == 0) return true;
        return false;
    };
}

namespace init {

inline Tensor uniform_fan_in(Shape shape, int fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
    return t;
}

inline void add_conv(Params& p, const std::string& name, int k, int cin, int cout, Rng& rng,
                     bool bias = true) {
    p.add(name + ".k", uniform_fan_in(Shape{k, k, cin, cout}, k * k * cin, rng));
    if (bias) p.add(name + ".b", Tensor(Shape{cout}));
}

inline void add_linear(Params& p, const std::string& name, int d, int m, Rng& rng) {
    p.add(name + ".w", uniform_fan_in(Shape{d, m}, d, rng));
    p.add(name + ".b", Tensor(Shape{m}));
}

inline void add_layer_norm(Params& p, const std::string& name, int d) {
    p.add(name + ".g", Tensor(Shape{d}, 1.0));
    p.add(name + ".b", Tensor(Shape{d}));
}

inline void add_resblock(Params& p, const std::string& name, int ch, Rng& rng) {
    add_layer_norm(p, name + ".ln", ch);
    add_conv(p, name + ".c1", 3, ch, ch, rng);
    add_conv(p, name + ".c2", 3, ch, ch, rng);
}

inline void add_encoder(Params& p, const std::string& prefix, const ModelConfig& cfg, Rng& rng) {
    const auto& w = cfg.stage_channels;
    add_conv(p, prefix + "in", 3, cfg.image_channels, w[0], rng);
    add_resblock(p, prefix + "rb0", w[0], rng);
    for (int i = 1; i <= cfg.downs(); ++i) {
        add_conv(p, prefix + "down" + std::to_string(i), 3, w[static_cast<std::size_t>(i - 1)],
                 w[static_cast<std::size_t>(i)], rng);
        add_resblock(p, prefix + "rb" + std::to_string(i), w[static_cast<std::size_t>(i)], rng);
    }
    add_layer_norm(p, prefix + "head.ln", w.back());
    add_conv(p, prefix + "head", 1, w.back(), cfg.latent_c, rng);
}

inline void add_decoder(Params& p, const std::string& prefix, const ModelConfig& cfg, Rng& rng) {
    const auto& w = cfg.stage_channels;
    add_conv(p, prefix + "in", 3, cfg.latent_c, w.back(), rng);
    add_resblock(p, prefix + "rb" + std::to_string(cfg.downs()), w.back(), rng);
    for (int i = cfg.downs(); i >= 1; --i) {
        add_conv(p, prefix + "up" + std::to_string(i), 3, w[static_cast<std::size_t>(i)],
                 w[static_cast<std::size_t>(i - 1)], rng);
        add_resblock(p, prefix + "rb" + std::to_string(i - 1) + "u", w[static_cast<std::size_t>(i - 1)], rng);
    }
    add_layer_norm(p, prefix + "out.ln", w[0]);
    add_conv(p, prefix + "out", 3, w[0], cfg.image_channels, rng);
}

inline void add_discriminator(Params& p, const std::string& prefix, const ModelConfig& cfg, Rng& rng) {
    int cin = cfg.image_channels;
    for (std::size_t i = 0; i < cfg.disc_channels.size(); ++i) {
        add_conv(p, prefix + "c" + std::to_string(i), 3, cin, cfg.disc_channels[i], rng);
        cin = cfg.disc_channels[i];
    }
    add_conv(p, prefix + "out", 3, cin, 1, rng);
}

inline void add_perceptual(Params& p, const std::string& prefix, const ModelConfig& cfg) {
    Rng rng(kPerceptualSeed);
    int cin = cfg.image_channels;
    for (std::size_t i = 0; i < cfg.perc_channels.size(); ++i) {
        add_conv(p, prefix + "c" + std::to_string(i), 3, cin, cfg.perc_channels[i], rng, false);
        cin = cfg.perc_channels[i];
    }
}

inline void add_transformer(Params& p, const std::string& prefix, const ModelConfig& cfg, Rng& rng) {
    const int width = cfg.latent_c;
    const int dk = width / cfg.tf_heads;
    p.add(prefix + "pos", uniform_fan_in(Shape{cfg.tokens(), width}, width, rng));
    for (int l = 0; l < cfg.tf_layers; ++l) {
        const std::string lp = prefix + "l" + std::to_string(l) + "/";
        add_layer_norm(p, lp + "ln1", width);
        for (int h = 0; h < cfg.tf_heads; ++h) {
            const std::string hp = lp + "h" + std::to_string(h) + ".";
            add_linear(p, hp + "q", width, dk, rng);
            add_linear(p, hp + "k", width, dk, rng);
            add_linear(p, hp + "v", width, dk, rng);
            add_linear(p, hp + "o", dk, width, rng);
        }
        add_layer_norm(p, lp + "ln2", width);
        add_linear(p, lp + "ffn1", width, cfg.tf_ffn, rng);
        add_linear(p, lp + "ffn2", cfg.tf_ffn, width, rng);
    }
    add_layer_norm(p, prefix + "lnf", width);
    add_linear(p, prefix + "head1", width, cfg.codebook_common, rng);
    add_linear(p, prefix + "head2", width, cfg.codebook_hq, rng);
}

}  // namespace init

/// Stage-I weight groups: encoder, decoder, discriminator, both codebooks and
/// the frozen perceptual stack.
inline Params init_stage1_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    Params p;
    init::add_encoder(p, "enc/", cfg, rng);
    init::add_decoder(p, "dec/", cfg, rng);
    init::add_discriminator(p, "disc/", cfg, rng);
    p.add("cb1/entries", Codebook::init_random(cfg.codebook_common, cfg.latent_c,
                                               CodebookRole::Common, rng)
                             .entries);
    p.add("cb2/entries", Codebook::init_random(cfg.codebook_hq, cfg.latent_c,
                                               CodebookRole::HqPlus, rng)
                             .entries);
    init::add_perceptual(p, "perc/", cfg);
    return p;
}

/// Stage-II additions: the fine-tuned encoder copy (enc2/), the score
/// embedding table and the conditional transformer.
inline void add_stage2_params(Params& p, const ModelConfig& cfg, std::uint64_t seed,
                              bool init_from_stage1) {
    cfg.validate();
    Rng rng(seed);
    if (init_from_stage1) {
        std::vector<std::pair<std::string, Tensor>> copies;
        for (const auto& [name, t] : p.items())
            if (name.rfind("enc/", 0) == 0) copies.emplace_back("enc2/" + name.substr(4), t);
        for (auto& [name, t] : copies) p.add(name, std::move(t));
    } else {
        init::add_encoder(p, "enc2/", cfg, rng);
    }
    p.add("score/table", init::uniform_fan_in(Shape{10, cfg.embed_dim()}, cfg.embed_dim(), rng));
    init::add_transformer(p, "tf/", cfg, rng);
}

// ---- forward builders ----

namespace detail {

inline Var ln_spatial(Tape& tape, const VarMap& v, const ModelConfig& cfg, const std::string& name,
                      Var x) {
    const Shape s = tape.value(x).shape;  // H x W x C
    Var rows = tape.reshape(x, Shape{s[0] * s[1], s[2]});
    Var normed = tape.layer_norm_rows(rows, v.at(name + ".g"), v.at(name + ".b"), cfg.ln_eps);
    return tape.reshape(normed, s);
}

inline Var conv(Tape& tape, const VarMap& v, const std::string& name, Var x, int stride, int pad) {
    return tape.conv2d(x, v.at(name + ".k"), stride, pad, v.at(name + ".b"));
}

inline Var resblock(Tape& tape, const VarMap& v, const ModelConfig& cfg, const std::string& name,
                    Var x) {
    Var h = ln_spatial(tape, v, cfg, name + ".ln", x);
    h = conv(tape, v, name + ".c1", tape.silu(h), 1, 1);
    h = conv(tape, v, name + ".c2", tape.silu(h), 1, 1);
    return tape.add(x, h);
}

}  // namespace detail

/// Encoder: image_size^2 x C -> latent_hw^2 x latent_c.
inline Var encoder_forward(Tape& tape, const ModelConfig& cfg, const VarMap& v,
                           const std::string& prefix, Var image) {
    const Tensor& img = tape.value(image);
    if (img.shape != Shape{cfg.image_size, cfg.image_size, cfg.image_channels})
        throw std::invalid_argument("encoder_forward: bad input shape " + shape_str(img.shape));
    Var x = detail::conv(tape, v, prefix + "in", image, 1, 1);
    x = detail::resblock(tape, v, cfg, prefix + "rb0", x);
    for (int i = 1; i <= cfg.downs(); ++i) {
        x = detail::conv(tape, v, prefix + "down" + std::to_string(i), tape.silu(x), 2, 1);
        x = detail::resblock(tape, v, cfg, prefix + "rb" + std::to_string(i), x);
    }
    x = detail::ln_spatial(tape, v, cfg, prefix + "head.ln", x);
    return tape.mul_scalar(detail::conv(tape, v, prefix + "head", tape.silu(x), 1, 0),
                           cfg.latent_scale);
}

/// Decoder: latent grid -> image in [0,1] via a final sigmoid.
inline Var decoder_forward(Tape& tape, const ModelConfig& cfg, const VarMap& v,
                           const std::string& prefix, Var latent) {
    const Tensor& z = tape.value(latent);
    if (z.shape != Shape{cfg.latent_hw, cfg.latent_hw, cfg.latent_c})
        throw std::invalid_argument("decoder_forward: bad latent shape " + shape_str(z.shape));
    Var x = detail::conv(tape, v, prefix + "in", latent, 1, 1);
    x = detail::resblock(tape, v, cfg, prefix + "rb" + std::to_string(cfg.downs()), x);
    for (int i = cfg.downs(); i >= 1; --i) {
        x = tape.up_nearest(x, 2);
        x = detail::conv(tape, v, prefix + "up" + std::to_string(i), tape.silu(x), 1, 1);
        x = detail::resblock(tape, v, cfg, prefix + "rb" + std::to_string(i - 1) + "u", x);
    }
    x = detail::ln_spatial(tape, v, cfg, prefix + "out.ln", x);
    return tape.sigmoid(detail::conv(tape, v, prefix + "out", tape.silu(x), 1, 1));
}

/// Patch discriminator: image -> logit grid (image_size / 8 per side), no
/// normalization and no squashing on the final layer.
inline Var discriminator_forward(Tape& tape, const ModelConfig& cfg, const VarMap& v,
                                 const std::string& prefix, Var image) {
    Var x = image;
    for (std::size_t i = 0; i < cfg.disc_channels.size(); ++i)
        x = tape.silu(detail::conv(tape, v, prefix + "c" + std::to_string(i), x, 2, 1));
    return detail::conv(tape, v, prefix + "out", x, 1, 1);
}

/// Frozen random-convolution feature stack; returns all three activation maps.
inline std::vector<Var> perceptual_forward(Tape& tape, const ModelConfig& cfg, const VarMap& v,
                                           const std::string& prefix, Var image) {
    std::vector<Var> maps;
    Var x = image;
    for (std::size_t i = 0; i < cfg.perc_channels.size(); ++i) {
        x = tape.tanh_(tape.conv2d(x, v.at(prefix + "c" + std::to_string(i) + ".k"), 2, 1));
        maps.push_back(x);
    }
    return maps;
}

/// Row `bin` of the score table reshaped to the latent grid.
inline Var embed_score(Tape& tape, const ModelConfig& cfg, const VarMap& v, int bin) {
    if (bin < 0 || bin > 9)
        throw std::invalid_argument("embed_score: bin " + std::to_string(bin) + " outside [0,9]");
    Var row = tape.gather_rows(v.at("score/table"), {bin});
    return tape.reshape(row, Shape{cfg.latent_hw, cfg.latent_hw, cfg.latent_c});
}

/// Conditional transformer: conditioned latent -> two logit matrices
/// (tokens x N1, tokens x N2).
inline std::pair<Var, Var> predict_codes(Tape& tape, const ModelConfig& cfg, const VarMap& v,
                                         Var zl_hat) {
    const Tensor& z = tape.value(zl_hat);
    if (z.shape != Shape{cfg.latent_hw, cfg.latent_hw, cfg.latent_c})
        throw std::invalid_argument("predict_codes: bad latent shape " + shape_str(z.shape));
    const int width = cfg.latent_c;
    const int dk = width / cfg.tf_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    Var x = tape.reshape(zl_hat, Shape{cfg.tokens(), width});
    x = tape.add(x, v.at("tf/pos"));
    for (int l = 0; l < cfg.tf_layers; ++l) {
        const std::string lp = "tf/l" + std::to_string(l) + "/";
        Var a = tape.layer_norm_rows(x, v.at(lp + "ln1.g"), v.at(lp + "ln1.b"), cfg.ln_eps);
        Var attn;
        for (int h = 0; h < cfg.tf_heads; ++h) {
            const std::string hp = lp + "h" + std::to_string(h) + ".";
            Var q = tape.linear(a, v.at(hp + "q.w"), v.at(hp + "q.b"));
            Var k = tape.linear(a, v.at(hp + "k.w"), v.at(hp + "k.b"));
            Var val = tape.linear(a, v.at(hp + "v.w"), v.at(hp + "v.b"));
            Var scores = tape.mul_scalar(tape.matmul(q, k, false, true), scale);
            Var mix = tape.matmul(tape.softmax_rows(scores), val);
            Var proj = tape.linear(mix, v.at(hp + "o.w"), v.at(hp + "o.b"));
            attn = (h == 0) ? proj : tape.add(attn, proj);
        }
        x = tape.add(x, attn);
        Var f = tape.layer_norm_rows(x, v.at(lp + "ln2.g"), v.at(lp + "ln2.b"), cfg.ln_eps);
        Var ffn = tape.linear(tape.silu(tape.linear(f, v.at(lp + "ffn1.w"), v.at(lp + "ffn1.b"))),
                              v.at(lp + "ffn2.w"), v.at(lp + "ffn2.b"));
        x = tape.add(x, ffn);
    }
    x = tape.layer_norm_rows(x, v.at("tf/lnf.g"), v.at("tf/lnf.b"), cfg.ln_eps);
    Var logits1 = tape.linear(x, v.at("tf/head1.w"), v.at("tf/head1.b"));
    Var logits2 = tape.linear(x, v.at("tf/head2.w"), v.at("tf/head2.b"));
    return {logits1, logits2};
}

/// Per-row argmax of a logit matrix, ties toward the lower index.
inline std::vector<int> argmax_rows(const Tensor& logits) {
    std::vector<int> out(static_cast<std::size_t>(logits.shape[0]));
    for (int i = 0; i < logits.shape[0]; ++i) {
        int best = 0;
        double best_v = logits.at(i, 0);
        for (int j = 1; j < logits.shape[1]; ++j)
            if (logits.at(i, j) > best_v) {
                best_v = logits.at(i, j);
                best = j;
            }
        out[static_cast<std::size_t>(i)] = best;
    }
    return out;
}

}  // namespace iqvq
