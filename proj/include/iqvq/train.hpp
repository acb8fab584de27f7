#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "iqvq/checkpoint.hpp"
#include "iqvq/models.hpp"
#include "iqvq/quality.hpp"
#include "iqvq/tape.hpp"
#include "iqvq/vq.hpp"

namespace iqvq {

struct Stage1Config {
    double lr = 0.03;
    double momentum = 0.0;
    int steps = 2000;
    int batch = 4;
    double alpha = 1.0;   // quantized feature fusion weight
    double beta = 0.25;   // commitment weight inside the code feature loss
    double s_thr = 0.90;  // HQ+ routing threshold on the ensemble score
    double w_per = 0.1;   // perceptual loss weight
    double w_adv = 0.05;  // adversarial loss weight
    double adv_warmup_frac = 0.25;
    int holdout = 64;     // images reserved for reconstruction tracking
    std::uint64_t seed = 7;
    bool use_dual = true;  // ablation switch: false trains the common codebook only
};

struct Stage2Config {
    double lr = 0.03;
    double momentum = 0.0;
    int steps = 2000;
    int batch = 4;
    double lambda1 = 0.5;
    double lambda2 = 0.1;
    std::uint64_t seed = 7;
    bool init_from_stage1 = true;
    bool defer_quality = false;  // apply the quality term only in the final 25% of steps
    bool use_condition = true;   // ablation switch: false pins the bin to 5
    bool use_dual = true;        // ablation switch: false uses the common codebook only
};

struct TrainPair {
    Tensor lq;
    Tensor hq;
};

struct TrainCurve {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;
};

// ---- checkpoint plumbing ----

inline Tensor normalizer_to_tensor(const CorpusNormalizer& n) {
    Tensor t(Shape{4, 2});
    for (int p = 0; p < 4; ++p) {
        t.at(p, 0) = n.entry(p).s_min;
        t.at(p, 1) = n.entry(p).s_max;
    }
    return t;
}

inline CorpusNormalizer normalizer_from_tensor(const Tensor& t) {
    std::array<NormalizerEntry, 4> e;
    for (int p = 0; p < 4; ++p) e[static_cast<std::size_t>(p)] = {t.at(p, 0), t.at(p, 1)};
    return CorpusNormalizer::from_entries(e);
}

inline void model_config_to_meta(Checkpoint& ckpt, const ModelConfig& cfg) {
    auto join = [](const std::vector<int>& v) {
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
        return s;
    };
    ckpt.set_meta("mc.image_size", std::to_string(cfg.image_size));
    ckpt.set_meta("mc.image_channels", std::to_string(cfg.image_channels));
    ckpt.set_meta("mc.latent_hw", std::to_string(cfg.latent_hw));
    ckpt.set_meta("mc.latent_c", std::to_string(cfg.latent_c));
    ckpt.set_meta("mc.stage_channels", join(cfg.stage_channels));
    ckpt.set_meta("mc.codebook_common", std::to_string(cfg.codebook_common));
    ckpt.set_meta("mc.codebook_hq", std::to_string(cfg.codebook_hq));
    ckpt.set_meta("mc.disc_channels", join(cfg.disc_channels));
    ckpt.set_meta("mc.perc_channels", join(cfg.perc_channels));
    ckpt.set_meta("mc.tf_layers", std::to_string(cfg.tf_layers));
    ckpt.set_meta("mc.tf_heads", std::to_string(cfg.tf_heads));
    ckpt.set_meta("mc.tf_ffn", std::to_string(cfg.tf_ffn));
    ckpt.set_meta("mc.ln_eps", std::to_string(cfg.ln_eps));
}

inline ModelConfig model_config_from_meta(const Checkpoint& ckpt) {
    auto split = [](const std::string& s) {
        std::vector<int> out;
        std::stringstream ss(s);
        std::string item;
        while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
        return out;
    };
    ModelConfig cfg;
    cfg.image_size = ckpt.meta_int("mc.image_size");
    cfg.image_channels = ckpt.meta_int("mc.image_channels");
    cfg.latent_hw = ckpt.meta_int("mc.latent_hw");
    cfg.latent_c = ckpt.meta_int("mc.latent_c");
    cfg.stage_channels = split(ckpt.meta("mc.stage_channels"));
    cfg.codebook_common = ckpt.meta_int("mc.codebook_common");
    cfg.codebook_hq = ckpt.meta_int("mc.codebook_hq");
    cfg.disc_channels = split(ckpt.meta("mc.disc_channels"));
    cfg.perc_channels = split(ckpt.meta("mc.perc_channels"));
    cfg.tf_layers = ckpt.meta_int("mc.tf_layers");
    cfg.tf_heads = ckpt.meta_int("mc.tf_heads");
    cfg.tf_ffn = ckpt.meta_int("mc.tf_ffn");
    cfg.ln_eps = ckpt.meta_double("mc.ln_eps");
    return cfg;
}

// ---- SGD ----

/// Heavy-ball velocity buffers, keyed by parameter name. A zero momentum
/// coefficient reduces the update to plain SGD and never touches the buffers.
struct SgdState {
    double momentum = 0.0;
    std::map<std::string, Tensor> velocity;
};

inline void sgd_step(Params& params, const Tape& tape, const VarMap& v, double lr,
                     const std::function<bool(const std::string&)>& trainable,
                     SgdState* state = nullptr) {
    const double mu = state ? state->momentum : 0.0;
    for (const auto& [name, var] : v.vars) {
        if (!trainable(name)) continue;
        Tensor& p = params.get(name);
        const Tensor& g = tape.grad(var);
        if (mu == 0.0) {
            for (std::int64_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
            continue;
        }
        Tensor& vel = state->velocity.try_emplace(name, Tensor::zeros(p.shape)).first->second;
        for (std::int64_t i = 0; i < p.size(); ++i) {
            vel[i] = mu * vel[i] + g[i];
            p[i] -= lr * vel[i];
        }
    }
}

// ---- stage I ----

struct Stage1Sample {
    const Tensor* image;  // HQ image
    double score;         // ensemble quality score S
};

struct Stage1Terms {
    Var total, l1, lper, ladv, lfeat;
};

/// Generator-side stage-I loss over a batch:
///   L1 + w_per*L_per + w_adv*L_adv + L_feat
/// with per-sample HQ+ routing (fuse engages the second codebook only when
/// S > S_thr) and straight-through decoding. L_feat is the Eq-style two-term
/// stop-gradient loss scaled by 1/numel to keep it commensurate with the
/// mean-reduced image losses.
inline Stage1Terms stage1_generator_graph(Tape& tape, const ModelConfig& mcfg, const VarMap& v,
                                          const std::vector<Stage1Sample>& batch,
                                          const Stage1Config& cfg, bool adv_on,
                                          std::vector<Tensor>* recon_out = nullptr) {
    if (batch.empty()) throw std::invalid_argument("stage1_generator_graph: empty batch");
    const double inv_batch = 1.0 / static_cast<double>(batch.size());
    const double inv_latent = 1.0 / static_cast<double>(mcfg.tokens() * mcfg.latent_c);
    Var l1_sum, lper_sum, ladv_sum, lfeat_sum;
    const Codebook cb1{tape.value(v.at("cb1/entries")), CodebookRole::Common};
    const Codebook cb2{tape.value(v.at("cb2/entries")), CodebookRole::HqPlus};
    for (std::size_t s = 0; s < batch.size(); ++s) {
        Var img = tape.constant(*batch[s].image);
        Var zh = encoder_forward(tape, mcfg, v, "enc/", img);
        auto [zq1_vals, codes1] = quantize(tape.value(zh), cb1);
        Var zq1 = lookup_codes(tape, v.at("cb1/entries"), codes1, mcfg.latent_hw, mcfg.latent_hw);
        Var zq = zq1;
        if (cfg.use_dual && batch[s].score > cfg.s_thr) {
            auto [zq2_vals, codes2] = quantize(tape.value(zh), cb2);
            Var zq2 = lookup_codes(tape, v.at("cb2/entries"), codes2, mcfg.latent_hw, mcfg.latent_hw);
            zq = fuse(tape, zq1, zq2, batch[s].score, cfg.s_thr, cfg.alpha);
        }
        Var lfeat = tape.mul_scalar(codebook_loss(tape, zh, zq, cfg.beta), inv_latent);
        Var xrec = decoder_forward(tape, mcfg, v, "dec/", tape.straight_through(zh, zq));
        if (recon_out) recon_out->push_back(tape.value(xrec));
        Var diff = tape.sub(img, xrec);
        Var l1 = tape.mean(tape.abs_(diff));
        auto maps_h = perceptual_forward(tape, mcfg, v, "perc/", img);
        auto maps_r = perceptual_forward(tape, mcfg, v, "perc/", xrec);
        Var lper;
        for (std::size_t l = 0; l < maps_h.size(); ++l) {
            Var d = tape.sub(maps_h[l], maps_r[l]);
            Var term = tape.mean(tape.mul(d, d));
            lper = (l == 0) ? term : tape.add(lper, term);
        }
        Var ladv;
        if (adv_on) {
            Var d_fake = discriminator_forward(tape, mcfg, v, "disc/", xrec);
            ladv = tape.mul_scalar(tape.mean(tape.log_sigmoid(d_fake)), -1.0);
        } else {
            ladv = tape.constant(Tensor::scalar(0.0));
        }
        l1_sum = (s == 0) ? l1 : tape.add(l1_sum, l1);
        lper_sum = (s == 0) ? lper : tape.add(lper_sum, lper);
        ladv_sum = (s == 0) ? ladv : tape.add(ladv_sum, ladv);
        lfeat_sum = (s == 0) ? lfeat : tape.add(lfeat_sum, lfeat);
    }
    Stage1Terms t;
    t.l1 = tape.mul_scalar(l1_sum, inv_batch);
    t.lper = tape.mul_scalar(lper_sum, inv_batch);
    t.ladv = tape.mul_scalar(ladv_sum, inv_batch);
    t.lfeat = tape.mul_scalar(lfeat_sum, inv_batch);
    t.total = tape.add(tape.add(t.l1, tape.mul_scalar(t.lper, cfg.w_per)),
                       tape.add(tape.mul_scalar(t.ladv, cfg.w_adv), t.lfeat));
    return t;
}

/// Discriminator loss: -[log D(x_h) + log(1 - D(x_rec))] averaged over the
/// batch, with reconstructions entering as constants.
inline Var stage1_discriminator_graph(Tape& tape, const ModelConfig& mcfg, const VarMap& v,
                                      const std::vector<const Tensor*>& real,
                                      const std::vector<Tensor>& fake) {
    if (real.empty() || real.size() != fake.size())
        throw std::invalid_argument("stage1_discriminator_graph: batch mismatch");
    Var sum;
    for (std::size_t s = 0; s < real.size(); ++s) {
        Var d_real = discriminator_forward(tape, mcfg, v, "disc/", tape.constant(*real[s]));
        Var d_fake = discriminator_forward(tape, mcfg, v, "disc/", tape.constant(fake[s]));
        Var term = tape.add(tape.mean(tape.log_sigmoid(d_real)),
                            tape.mean(tape.log_sigmoid(tape.mul_scalar(d_fake, -1.0))));
        sum = (s == 0) ? term : tape.add(sum, term);
    }
    return tape.mul_scalar(sum, -1.0 / static_cast<double>(real.size()));
}

struct Stage1StepStats {
    double l1 = 0.0, lper = 0.0, ladv = 0.0, lfeat = 0.0, total = 0.0, d_loss = 0.0;
};

/// One generator step (plus one discriminator step when adv_on).
inline Stage1StepStats stage1_step(Params& params, const ModelConfig& mcfg,
                                   const Stage1Config& cfg,
                                   const std::vector<Stage1Sample>& batch, bool adv_on,
                                   SgdState* opt = nullptr) {
    Stage1StepStats stats;
    const auto gen_trainable = prefix_trainable({"enc/", "dec/", "cb1/", "cb2/"});
    std::vector<Tensor> recon;
    {
        Tape tape;
        VarMap v = register_params(tape, params, gen_trainable);
        Stage1Terms terms = stage1_generator_graph(tape, mcfg, v, batch, cfg, adv_on, &recon);
        stats.l1 = tape.scalar(terms.l1);
        stats.lper = tape.scalar(terms.lper);
        stats.ladv = tape.scalar(terms.ladv);
        stats.lfeat = tape.scalar(terms.lfeat);
        stats.total = tape.scalar(terms.total);
        if (!std::isfinite(stats.total))
            throw std::runtime_error("stage1: non-finite generator loss");
        tape.backward(terms.total);
        sgd_step(params, tape, v, cfg.lr, gen_trainable, opt);
    }
    if (adv_on) {
        Tape tape;
        const auto disc_trainable = prefix_trainable({"disc/"});
        VarMap v = register_params(tape, params, disc_trainable);
        std::vector<const Tensor*> real;
        for (const Stage1Sample& s : batch) real.push_back(s.image);
        Var d_loss = stage1_discriminator_graph(tape, mcfg, v, real, recon);
        stats.d_loss = tape.scalar(d_loss);
        if (!std::isfinite(stats.d_loss))
            throw std::runtime_error("stage1: non-finite discriminator loss");
        tape.backward(d_loss);
        sgd_step(params, tape, v, cfg.lr, disc_trainable, opt);
    }
    return stats;
}

/// Deterministic reconstruction of one HQ image through the stage-I
/// autoencoder with score routing.
inline Tensor stage1_reconstruct(const Params& params, const ModelConfig& mcfg,
                                 const Stage1Config& cfg, const Tensor& image, double score) {
    Tape tape;
    VarMap v = register_params(tape, params, [](const std::string&) { return false; });
    Var zh = encoder_forward(tape, mcfg, v, "enc/", tape.constant(image));
    const Codebook cb1{params.get("cb1/entries"), CodebookRole::Common};
    auto [zq1_vals, codes1] = quantize(tape.value(zh), cb1);
    Var zq = lookup_codes(tape, v.at("cb1/entries"), codes1, mcfg.latent_hw, mcfg.latent_hw);
    if (cfg.use_dual && score > cfg.s_thr) {
        const Codebook cb2{params.get("cb2/entries"), CodebookRole::HqPlus};
        auto [zq2_vals, codes2] = quantize(tape.value(zh), cb2);
        Var zq2 = lookup_codes(tape, v.at("cb2/entries"), codes2, mcfg.latent_hw, mcfg.latent_hw);
        zq = fuse(tape, zq, zq2, score, cfg.s_thr, cfg.alpha);
    }
    return tape.value(decoder_forward(tape, mcfg, v, "dec/", zq));
}

inline double mean_l1(const Tensor& a, const Tensor& b) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i) acc += std::fabs(a[i] - b[i]);
    return acc / static_cast<double>(a.size());
}

struct Stage1Result {
    Checkpoint checkpoint;
    TrainCurve curve;
    double holdout_l1_start = 0.0;
    double holdout_l1_end = 0.0;
};

/// Full stage-I run: seeded init, seeded batch order, warmup-gated adversary.
/// The last cfg.holdout images are excluded from training and tracked as a
/// reconstruction holdout.
inline Stage1Result train_stage1(const std::vector<Tensor>& images,
                                 const std::vector<QualityReport>& reports,
                                 const CorpusNormalizer& normalizer, const ModelConfig& mcfg,
                                 const Stage1Config& cfg) {
    if (images.empty() || images.size() != reports.size())
        throw std::invalid_argument("train_stage1: corpus images and reports must align");
    const int holdout = std::min<int>(cfg.holdout, static_cast<int>(images.size()) / 4);
    const int n_train = static_cast<int>(images.size()) - holdout;
    if (n_train < cfg.batch) throw std::invalid_argument("train_stage1: corpus too small");
    int above = 0;
    for (int i = 0; i < n_train; ++i)
        if (reports[static_cast<std::size_t>(i)].ensemble > cfg.s_thr) ++above;
    if (cfg.use_dual && (above == 0 || above == n_train))
        std::cerr << "[train_stage1] warning: all training scores on one side of S_thr; "
                     "the dual codebook degenerates\n";

    Params params = init_stage1_params(mcfg, cfg.seed);
    Rng order(cfg.seed + 1);

    auto holdout_l1 = [&]() {
        double acc = 0.0;
        for (int i = n_train; i < static_cast<int>(images.size()); ++i)
            acc += mean_l1(images[static_cast<std::size_t>(i)],
                           stage1_reconstruct(params, mcfg, cfg, images[static_cast<std::size_t>(i)],
                                              reports[static_cast<std::size_t>(i)].ensemble));
        return holdout > 0 ? acc / holdout : 0.0;
    };

    Stage1Result result;
    result.curve.header = {"step", "l1", "lper", "ladv", "lfeat", "total", "d_loss"};
    result.holdout_l1_start = holdout_l1();
    SgdState opt;
    opt.momentum = cfg.momentum;
    const int warmup = static_cast<int>(cfg.adv_warmup_frac * cfg.steps);
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<Stage1Sample> batch;
        for (int b = 0; b < cfg.batch; ++b) {
            const int idx = order.uniform_int(0, n_train - 1);
            batch.push_back({&images[static_cast<std::size_t>(idx)],
                             reports[static_cast<std::size_t>(idx)].ensemble});
        }
        Stage1StepStats st;
        try {
            st = stage1_step(params, mcfg, cfg, batch, step >= warmup, &opt);
        } catch (const std::runtime_error& e) {
            throw std::runtime_error(std::string(e.what()) + " at step " + std::to_string(step));
        }
        result.curve.rows.push_back({static_cast<double>(step), st.l1, st.lper, st.ladv, st.lfeat,
                                     st.total, st.d_loss});
    }
    result.holdout_l1_end = holdout_l1();

    params.to_checkpoint(result.checkpoint);
    result.checkpoint.add("quality/normalizer", normalizer_to_tensor(normalizer));
    model_config_to_meta(result.checkpoint, mcfg);
    result.checkpoint.set_meta("stage", "1");
    result.checkpoint.set_meta("step", std::to_string(cfg.steps));
    result.checkpoint.set_meta("seed", std::to_string(cfg.seed));
    result.checkpoint.set_meta("alpha", std::to_string(cfg.alpha));
    result.checkpoint.set_meta("beta", std::to_string(cfg.beta));
    result.checkpoint.set_meta("s_thr", std::to_string(cfg.s_thr));
    result.checkpoint.set_meta("stage1.lr", std::to_string(cfg.lr));
    result.checkpoint.set_meta("stage1.batch", std::to_string(cfg.batch));
    result.checkpoint.set_meta("stage1.w_per", std::to_string(cfg.w_per));
    result.checkpoint.set_meta("stage1.w_adv", std::to_string(cfg.w_adv));
    result.checkpoint.set_meta("use_dual", cfg.use_dual ? "1" : "0");
    return result;
}

// ---- stage II ----

struct Stage2Target {
    CodeSequence c1, c2;
    Tensor zq;  // fused ground-truth feature, a constant during stage II
    int bin = 5;
};

/// Ground-truth codes and fused feature for one HQ image, produced by the
/// frozen stage-I encoder and codebooks.
inline Stage2Target make_stage2_target(const Params& params, const ModelConfig& mcfg,
                                       const Tensor& hq, const CorpusNormalizer& normalizer,
                                       double alpha, bool use_dual, bool use_condition) {
    Tape tape;
    VarMap v = register_params(tape, params, [](const std::string&) { return false; });
    Var zh = encoder_forward(tape, mcfg, v, "enc/", tape.constant(hq));
    Stage2Target t;
    const Codebook cb1{params.get("cb1/entries"), CodebookRole::Common};
    auto [zq1, codes1] = quantize(tape.value(zh), cb1);
    t.c1 = codes1;
    if (use_dual) {
        const Codebook cb2{params.get("cb2/entries"), CodebookRole::HqPlus};
        auto [zq2, codes2] = quantize(tape.value(zh), cb2);
        t.c2 = codes2;
        t.zq = fuse_values(zq1, zq2, alpha);
    } else {
        t.zq = zq1;
    }
    t.bin = use_condition ? bin_score(score_image(hq, normalizer).ensemble) : 5;
    return t;
}

struct Stage2Sample {
    const Tensor* lq;
    const Stage2Target* target;
};

struct Stage2Terms {
    Var total, lfeat, lindex, lquality;
};

/// Stage-II loss over a batch: L_feat + lambda1*L_index + lambda2*L_quality.
/// L_feat pulls the LQ latent toward the frozen fused target (mean-squared),
/// L_index is the two-head cross entropy against the HQ codes, and L_quality
/// decodes a softmax-weighted codebook mixture and scores it with the frozen
/// proxy ensemble.
inline Stage2Terms stage2_graph(Tape& tape, const ModelConfig& mcfg, const VarMap& v,
                                const std::vector<Stage2Sample>& batch,
                                const CorpusNormalizer& normalizer, const Stage2Config& cfg,
                                double alpha, bool quality_on) {
    if (batch.empty()) throw std::invalid_argument("stage2_graph: empty batch");
    const double inv_batch = 1.0 / static_cast<double>(batch.size());
    Var lfeat_sum, lindex_sum, lq_sum;
    for (std::size_t s = 0; s < batch.size(); ++s) {
        const Stage2Sample& sample = batch[s];
        Var zl = encoder_forward(tape, mcfg, v, "enc2/", tape.constant(*sample.lq));
        Var zl_hat = tape.add(zl, embed_score(tape, mcfg, v, sample.target->bin));
        auto [logits1, logits2] = predict_codes(tape, mcfg, v, zl_hat);

        Var d = tape.sub(zl, tape.constant(sample.target->zq));
        Var lfeat = tape.mean(tape.mul(d, d));

        Var lindex = tape.softmax_cross_entropy(logits1, sample.target->c1.indices);
        if (cfg.use_dual)
            lindex = tape.add(lindex, tape.softmax_cross_entropy(logits2, sample.target->c2.indices));

        Var lq;
        if (quality_on) {
            Var p1 = tape.softmax_rows(logits1);
            Var zf = tape.reshape(tape.matmul(p1, v.at("cb1/entries")),
                                  Shape{mcfg.latent_hw, mcfg.latent_hw, mcfg.latent_c});
            if (cfg.use_dual) {
                Var p2 = tape.softmax_rows(logits2);
                Var zf2 = tape.reshape(tape.matmul(p2, v.at("cb2/entries")),
                                       Shape{mcfg.latent_hw, mcfg.latent_hw, mcfg.latent_c});
                zf = tape.add(zf, tape.mul_scalar(zf2, alpha));
            }
            Var xres = decoder_forward(tape, mcfg, v, "dec/", zf);
            lq = tape.mul_scalar(ensemble_graph(tape, xres, normalizer), -1.0);
        } else {
            lq = tape.constant(Tensor::scalar(0.0));
        }
        lfeat_sum = (s == 0) ? lfeat : tape.add(lfeat_sum, lfeat);
        lindex_sum = (s == 0) ? lindex : tape.add(lindex_sum, lindex);
        lq_sum = (s == 0) ? lq : tape.add(lq_sum, lq);
    }
    Stage2Terms t;
    t.lfeat = tape.mul_scalar(lfeat_sum, inv_batch);
    t.lindex = tape.mul_scalar(lindex_sum, inv_batch);
    t.lquality = tape.mul_scalar(lq_sum, inv_batch);
    t.total = tape.add(t.lfeat, tape.add(tape.mul_scalar(t.lindex, cfg.lambda1),
                                         tape.mul_scalar(t.lquality, cfg.lambda2)));
    return t;
}

struct Stage2StepStats {
    double lfeat = 0.0, lindex = 0.0, lquality = 0.0, total = 0.0;
};

inline Stage2StepStats stage2_step(Params& params, const ModelConfig& mcfg,
                                   const Stage2Config& cfg, const CorpusNormalizer& normalizer,
                                   const std::vector<Stage2Sample>& batch, double alpha,
                                   bool quality_on, SgdState* opt = nullptr) {
    const auto trainable = prefix_trainable({"enc2/", "score/", "tf/"});
    Tape tape;
    VarMap v = register_params(tape, params, trainable);
    Stage2Terms terms = stage2_graph(tape, mcfg, v, batch, normalizer, cfg, alpha, quality_on);
    Stage2StepStats stats;
    stats.lfeat = tape.scalar(terms.lfeat);
    stats.lindex = tape.scalar(terms.lindex);
    stats.lquality = tape.scalar(terms.lquality);
    stats.total = tape.scalar(terms.total);
    if (!std::isfinite(stats.total)) throw std::runtime_error("stage2: non-finite loss");
    tape.backward(terms.total);
    sgd_step(params, tape, v, cfg.lr, trainable, opt);
    return stats;
}

struct Stage2Result {
    Checkpoint checkpoint;
    TrainCurve curve;
};

/// Full stage-II run on top of a stage-I checkpoint. Codebooks and decoder
/// stay frozen; only the LQ encoder, the score table and the transformer
/// train. Conditioning bins come from the HQ ground truth scored with the
/// checkpoint's frozen normalizer.
inline Stage2Result train_stage2(const std::vector<TrainPair>& pairs, const Stage2Config& cfg,
                                 const Checkpoint& base) {
    if (pairs.empty()) throw std::invalid_argument("train_stage2: no training pairs");
    if (!base.has("enc/in.k") || !base.has("cb1/entries"))
        throw std::runtime_error("train_stage2: base checkpoint lacks stage-I weights");
    const ModelConfig mcfg = model_config_from_meta(base);
    const CorpusNormalizer normalizer = normalizer_from_tensor(base.get("quality/normalizer"));
    const double alpha = base.meta_double("alpha");

    Params params = Params::from_checkpoint(base);
    add_stage2_params(params, mcfg, cfg.seed, cfg.init_from_stage1);

    std::vector<Stage2Target> targets;
    targets.reserve(pairs.size());
    for (const TrainPair& p : pairs)
        targets.push_back(make_stage2_target(params, mcfg, p.hq, normalizer, alpha, cfg.use_dual,
                                             cfg.use_condition));

    Rng order(cfg.seed + 2);
    SgdState opt;
    opt.momentum = cfg.momentum;
    Stage2Result result;
    result.curve.header = {"step", "lfeat", "lindex", "lquality", "total"};
    const int quality_from = cfg.defer_quality ? (3 * cfg.steps) / 4 : 0;
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<Stage2Sample> batch;
        for (int b = 0; b < cfg.batch; ++b) {
            const int idx = order.uniform_int(0, static_cast<int>(pairs.size()) - 1);
            batch.push_back({&pairs[static_cast<std::size_t>(idx)].lq,
                             &targets[static_cast<std::size_t>(idx)]});
        }
        const bool quality_on = cfg.lambda2 != 0.0 && step >= quality_from;
        Stage2StepStats st;
        try {
            st = stage2_step(params, mcfg, cfg, normalizer, batch, alpha, quality_on, &opt);
        } catch (const std::runtime_error& e) {
            throw std::runtime_error(std::string(e.what()) + " at step " + std::to_string(step));
        }
        result.curve.rows.push_back(
            {static_cast<double>(step), st.lfeat, st.lindex, st.lquality, st.total});
    }

    params.to_checkpoint(result.checkpoint);
    result.checkpoint.add("quality/normalizer", normalizer_to_tensor(normalizer));
    model_config_to_meta(result.checkpoint, mcfg);
    result.checkpoint.set_meta("stage", "2");
    result.checkpoint.set_meta("step", std::to_string(cfg.steps));
    result.checkpoint.set_meta("seed", std::to_string(cfg.seed));
    result.checkpoint.set_meta("alpha", std::to_string(alpha));
    result.checkpoint.set_meta("beta", base.meta("beta"));
    result.checkpoint.set_meta("s_thr", base.meta("s_thr"));
    result.checkpoint.set_meta("stage2.lr", std::to_string(cfg.lr));
    result.checkpoint.set_meta("stage2.batch", std::to_string(cfg.batch));
    result.checkpoint.set_meta("lambda1", std::to_string(cfg.lambda1));
    result.checkpoint.set_meta("lambda2", std::to_string(cfg.lambda2));
    result.checkpoint.set_meta("use_dual", cfg.use_dual ? "1" : "0");
    result.checkpoint.set_meta("use_condition", cfg.use_condition ? "1" : "0");
    result.checkpoint.set_meta("init_from_stage1", cfg.init_from_stage1 ? "1" : "0");
    return result;
}

// ---- restoration & quality optimization ----

struct RestoreResult {
    Tensor image;
    CodeSequence c1, c2;
    Tensor zf;  // fused latent fed to the decoder
};

/// encode -> add score embedding -> predict codes -> argmax -> look up both
/// codebooks -> always-add fuse -> decode.
inline RestoreResult restore(const Tensor& x_l, int bin, const Checkpoint& ckpt) {
    if (!ckpt.has("enc2/in.k") || !ckpt.has("tf/pos"))
        throw std::runtime_error("restore: checkpoint lacks stage-II weights");
    const ModelConfig mcfg = model_config_from_meta(ckpt);
    const double alpha = ckpt.meta_double("alpha");
    const bool use_dual = ckpt.has_meta("use_dual") ? ckpt.meta("use_dual") == "1" : true;
    Params params = Params::from_checkpoint(ckpt);
    Tape tape;
    VarMap v = register_params(tape, params, [](const std::string&) { return false; });
    Var zl = encoder_forward(tape, mcfg, v, "enc2/", tape.constant(x_l));
    Var zl_hat = tape.add(zl, embed_score(tape, mcfg, v, bin));
    auto [logits1, logits2] = predict_codes(tape, mcfg, v, zl_hat);
    RestoreResult r;
    r.c1.indices = argmax_rows(tape.value(logits1));
    r.c2.indices = argmax_rows(tape.value(logits2));
    Var zf = lookup_codes(tape, v.at("cb1/entries"), r.c1, mcfg.latent_hw, mcfg.latent_hw);
    if (use_dual) {
        Var zf2 = lookup_codes(tape, v.at("cb2/entries"), r.c2, mcfg.latent_hw, mcfg.latent_hw);
        zf = fuse(tape, zf, zf2, 1.0, 0.0, alpha, /*always_add=*/true);
    }
    r.zf = tape.value(zf);
    r.image = tape.value(decoder_forward(tape, mcfg, v, "dec/", zf));
    return r;
}

struct OptTraceRow {
    int step = 0;
    double train_score = 0.0;  // ensemble of the trained proxies
    double judge_score = 0.0;  // held-out DoG proxy, normalized
};

struct OptResult {
    Tensor image;
    std::vector<OptTraceRow> trace;
};

namespace detail {

struct LatentScorer {
    const Params& params;
    const ModelConfig& mcfg;
    const CorpusNormalizer& normalizer;

    Tensor decode(const Tensor& zf) const {
        Tape tape;
        VarMap v = register_params(tape, params, [](const std::string&) { return false; });
        return tape.value(decoder_forward(tape, mcfg, v, "dec/", tape.constant(zf)));
    }

    double score_image_ensemble(const Tensor& image) const {
        auto raw = proxy_scores(image);
        return ensemble({normalizer.normalize(0, raw[0]), normalizer.normalize(1, raw[1]),
                         normalizer.normalize(2, raw[2])});
    }

    double score_latent(const Tensor& zf) const { return score_image_ensemble(decode(zf)); }

    /// Score and gradient of the ensemble with respect to the latent.
    std::pair<double, Tensor> score_and_grad(const Tensor& zf) const {
        Tape tape;
        VarMap v = register_params(tape, params, [](const std::string&) { return false; });
        Tensor z = zf;
        z.requires_grad = true;
        Var zv = tape.leaf(z);
        Var s = ensemble_graph(tape, decoder_forward(tape, mcfg, v, "dec/", zv), normalizer);
        const double value = tape.scalar(s);
        tape.backward(s);
        return {value, tape.grad(zv)};
    }
};

}  // namespace detail

/// Gradient ascent on the proxy ensemble directly in the continuous latent.
/// Backtracking halving: step size starts at `step_size`, halves on
/// non-improvement, ascent stops once it falls below 1e-6.
inline OptResult optimize_quality_continuous(const Tensor& x_l, const Checkpoint& ckpt, int steps,
                                             double step_size = 0.1) {
    const ModelConfig mcfg = model_config_from_meta(ckpt);
    const CorpusNormalizer normalizer = normalizer_from_tensor(ckpt.get("quality/normalizer"));
    Params params = Params::from_checkpoint(ckpt);
    detail::LatentScorer scorer{params, mcfg, normalizer};

    RestoreResult start = restore(x_l, 9, ckpt);
    Tensor zf = start.zf;
    Tensor image = start.image;
    double score = scorer.score_image_ensemble(image);
    OptResult result;
    result.trace.push_back({0, score, judge_score_normalized(image, normalizer)});

    double eta = step_size;
    for (int step = 1; step <= steps && eta >= 1e-6; ++step) {
        auto [value, grad] = scorer.score_and_grad(zf);
        if (!std::isfinite(value)) throw std::runtime_error("optimize_quality_continuous: non-finite score");
        bool accepted = false;
        while (eta >= 1e-6) {
            Tensor candidate = zf;
            for (std::int64_t i = 0; i < candidate.size(); ++i) candidate[i] += eta * grad[i];
            Tensor cand_img = scorer.decode(candidate);
            const double cand_score = scorer.score_image_ensemble(cand_img);
            if (cand_score > score) {
                zf = std::move(candidate);
                image = std::move(cand_img);
                score = cand_score;
                accepted = true;
                break;
            }
            eta *= 0.5;
        }
        if (!accepted) break;
        result.trace.push_back({step, score, judge_score_normalized(image, normalizer)});
    }
    result.image = image;
    return result;
}

/// Greedy coordinate ascent over the discrete code indices: each sweep visits
/// every grid position of c1 then c2 and keeps the entry that maximizes the
/// decoded ensemble score. Stops after `max_sweeps` sweeps or at a fixed
/// point. The output never leaves the decoder's image of the code lattice.
inline OptResult optimize_quality_discrete(const Tensor& x_l, const Checkpoint& ckpt,
                                           int max_sweeps) {
    const ModelConfig mcfg = model_config_from_meta(ckpt);
    const CorpusNormalizer normalizer = normalizer_from_tensor(ckpt.get("quality/normalizer"));
    const double alpha = ckpt.meta_double("alpha");
    const bool use_dual = ckpt.has_meta("use_dual") ? ckpt.meta("use_dual") == "1" : true;
    Params params = Params::from_checkpoint(ckpt);
    detail::LatentScorer scorer{params, mcfg, normalizer};

    RestoreResult start = restore(x_l, 9, ckpt);
    CodeSequence c1 = start.c1, c2 = start.c2;
    const Tensor& cb1 = params.get("cb1/entries");
    const Tensor& cb2 = params.get("cb2/entries");
    const int c = mcfg.latent_c;

    auto build_zf = [&]() {
        Tensor zf(Shape{mcfg.latent_hw, mcfg.latent_hw, c});
        for (int i = 0; i < mcfg.tokens(); ++i)
            for (int j = 0; j < c; ++j) {
                double val = cb1.at(c1.indices[static_cast<std::size_t>(i)], j);
                if (use_dual) val += alpha * cb2.at(c2.indices[static_cast<std::size_t>(i)], j);
                zf.data[static_cast<std::size_t>(i) * c + j] = val;
            }
        return zf;
    };

    Tensor zf = build_zf();
    Tensor image = scorer.decode(zf);
    double score = scorer.score_image_ensemble(image);
    OptResult result;
    result.trace.push_back({0, score, judge_score_normalized(image, normalizer)});

    for (int sweep = 1; sweep <= max_sweeps; ++sweep) {
        int changes = 0;
        auto sweep_codes = [&](CodeSequence& codes, const Tensor& cb) {
            for (int pos = 0; pos < mcfg.tokens(); ++pos) {
                const int current = codes.indices[static_cast<std::size_t>(pos)];
                int best = current;
                double best_score = score;
                for (int k = 0; k < cb.shape[0]; ++k) {
                    if (k == current) continue;
                    codes.indices[static_cast<std::size_t>(pos)] = k;
                    const double cand = scorer.score_latent(build_zf());
                    if (cand > best_score) {
                        best_score = cand;
                        best = k;
                    }
                }
                codes.indices[static_cast<std::size_t>(pos)] = best;
                if (best != current) {
                    ++changes;
                    score = best_score;
                }
            }
        };
        sweep_codes(c1, cb1);
        if (use_dual) sweep_codes(c2, cb2);
        zf = build_zf();
        image = scorer.decode(zf);
        score = scorer.score_image_ensemble(image);
        result.trace.push_back({sweep, score, judge_score_normalized(image, normalizer)});
        if (changes == 0) break;
    }
    result.image = image;
    return result;
}

// ---- evaluation ----

struct EvalRow {
    int bin = 0;
    double p1_mean = 0, p1_std = 0, p2_mean = 0, p2_std = 0, p3_mean = 0, p3_std = 0;
    double ensemble_mean = 0, ensemble_std = 0;
    double l1_mean = 0;
    double code_acc1 = 0, code_acc2 = 0;
    double util1 = 0, util2 = 0;
};

/// Per-bin restoration metrics over an evaluation set: normalized proxy
/// statistics, reconstruction L1 against the HQ ground truth, code prediction
/// accuracy against the frozen stage-I codes, and codebook utilization.
inline std::vector<EvalRow> evaluate(const std::vector<TrainPair>& eval_set,
                                     const Checkpoint& ckpt, const std::vector<int>& bins) {
    if (eval_set.empty()) throw std::invalid_argument("evaluate: empty evaluation set");
    const ModelConfig mcfg = model_config_from_meta(ckpt);
    const CorpusNormalizer normalizer = normalizer_from_tensor(ckpt.get("quality/normalizer"));
    const double alpha = ckpt.meta_double("alpha");
    const bool use_dual = ckpt.has_meta("use_dual") ? ckpt.meta("use_dual") == "1" : true;
    Params params = Params::from_checkpoint(ckpt);

    std::vector<Stage2Target> targets;
    for (const TrainPair& p : eval_set)
        targets.push_back(make_stage2_target(params, mcfg, p.hq, normalizer, alpha, use_dual, true));

    std::vector<EvalRow> rows;
    for (int bin : bins) {
        EvalRow row;
        row.bin = bin;
        std::vector<double> p1s, p2s, p3s, ens;
        std::vector<CodeSequence> used1, used2;
        double l1_acc = 0.0;
        int hits1 = 0, hits2 = 0, total_codes = 0;
        for (std::size_t i = 0; i < eval_set.size(); ++i) {
            RestoreResult r = restore(eval_set[i].lq, bin, ckpt);
            auto raw = proxy_scores(r.image);
            const double n1 = normalizer.normalize(0, raw[0]);
            const double n2 = normalizer.normalize(1, raw[1]);
            const double n3 = normalizer.normalize(2, raw[2]);
            p1s.push_back(n1);
            p2s.push_back(n2);
            p3s.push_back(n3);
            ens.push_back(ensemble({n1, n2, n3}));
            l1_acc += mean_l1(r.image, eval_set[i].hq);
            for (int t = 0; t < mcfg.tokens(); ++t) {
                hits1 += r.c1.indices[static_cast<std::size_t>(t)] ==
                         targets[i].c1.indices[static_cast<std::size_t>(t)];
                if (use_dual)
                    hits2 += r.c2.indices[static_cast<std::size_t>(t)] ==
                             targets[i].c2.indices[static_cast<std::size_t>(t)];
                ++total_codes;
            }
            used1.push_back(r.c1);
            if (use_dual) used2.push_back(r.c2);
        }
        auto mean_std = [](const std::vector<double>& v, double* m, double* sd) {
            double mu = 0.0;
            for (double x : v) mu += x;
            mu /= static_cast<double>(v.size());
            double var = 0.0;
            for (double x : v) var += (x - mu) * (x - mu);
            *m = mu;
            *sd = std::sqrt(var / static_cast<double>(v.size()));
        };
        mean_std(p1s, &row.p1_mean, &row.p1_std);
        mean_std(p2s, &row.p2_mean, &row.p2_std);
        mean_std(p3s, &row.p3_mean, &row.p3_std);
        mean_std(ens, &row.ensemble_mean, &row.ensemble_std);
        row.l1_mean = l1_acc / static_cast<double>(eval_set.size());
        row.code_acc1 = static_cast<double>(hits1) / total_codes;
        row.code_acc2 = use_dual ? static_cast<double>(hits2) / total_codes : 0.0;
        row.util1 = utilization(used1, mcfg.codebook_common);
        row.util2 = use_dual ? utilization(used2, mcfg.codebook_hq) : 0.0;
        rows.push_back(row);
    }
    return rows;
}

}  // namespace iqvq
