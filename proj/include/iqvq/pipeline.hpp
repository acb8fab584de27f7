#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "iqvq/corpus.hpp"
#include "iqvq/degrade.hpp"
#include "iqvq/quality.hpp"
#include "iqvq/train.hpp"

namespace iqvq {

struct ScoredCorpusData {
    std::vector<Tensor> images;
    std::vector<std::array<double, 4>> raw;  // p1, p2, p3, judge
    std::vector<QualityReport> reports;
    CorpusNormalizer normalizer;
};

/// Scores a set of HQ images and fits the corpus normalizer on them.
inline ScoredCorpusData score_corpus_images(std::vector<Tensor> images) {
    ScoredCorpusData out;
    out.images = std::move(images);
    for (const Tensor& img : out.images) {
        auto p = proxy_scores(img);
        out.raw.push_back({p[0], p[1], p[2], judge_score(img)});
    }
    out.normalizer = CorpusNormalizer::fit(out.raw);
    for (const Tensor& img : out.images) out.reports.push_back(score_image(img, out.normalizer));
    return out;
}

/// Synthesizes LQ counterparts with per-image parameters and seeds
/// (seed_i = base_seed + index).
inline std::vector<TrainPair> degrade_pairs(const std::vector<Tensor>& hq, std::uint64_t base_seed) {
    std::vector<TrainPair> pairs;
    pairs.reserve(hq.size());
    for (std::size_t i = 0; i < hq.size(); ++i) {
        const std::uint64_t seed_i = base_seed + i;
        Rng prng(seed_i);
        DegradationParams dp = sample_params(prng, hq[i].shape[0]);
        pairs.push_back({degrade(hq[i], dp, seed_i), hq[i]});
    }
    return pairs;
}

struct AblationRow {
    std::string id;  // (a) .. (d)
    bool score_condition = false;
    bool dual_codebook = false;
    bool quality_optimization = false;
    double ensemble_mean = 0.0;
    double l1_mean = 0.0;
};

struct AblationResult {
    std::vector<AblationRow> rows;
    std::vector<Checkpoint> checkpoints;  // one per row, same order
};

/// The four-row ablation grid: baseline, +score condition, +dual codebook,
/// +quality optimization. Rows (a)/(b) share a single-codebook stage I, rows
/// (c)/(d) share the dual-codebook stage I. Conditioned rows evaluate at
/// bin 9, unconditioned ones at their training bin 5.
inline AblationResult run_ablation_grid(const CorpusSpec& corpus_spec, const ModelConfig& mcfg,
                                        const Stage1Config& s1_base, const Stage2Config& s2_base,
                                        std::uint64_t pair_seed,
                                        const std::function<void(const std::string&)>& log = {}) {
    auto note = [&](const std::string& msg) {
        if (log) log(msg);
    };
    note("generating corpus");
    ScoredCorpusData corpus = score_corpus_images([&] {
        std::vector<Tensor> images;
        for (auto& ci : gen_corpus(corpus_spec)) images.push_back(std::move(ci.image));
        return images;
    }());

    const int holdout = std::min<int>(s1_base.holdout, static_cast<int>(corpus.images.size()) / 4);
    const int n_train = static_cast<int>(corpus.images.size()) - holdout;
    std::vector<Tensor> train_hq(corpus.images.begin(), corpus.images.begin() + n_train);
    std::vector<Tensor> eval_hq(corpus.images.begin() + n_train, corpus.images.end());

    note("training stage I (single codebook)");
    Stage1Config s1_single = s1_base;
    s1_single.use_dual = false;
    Stage1Result si_single = train_stage1(corpus.images, corpus.reports, corpus.normalizer, mcfg,
                                          s1_single);
    note("training stage I (dual codebook)");
    Stage1Config s1_dual = s1_base;
    s1_dual.use_dual = true;
    Stage1Result si_dual = train_stage1(corpus.images, corpus.reports, corpus.normalizer, mcfg,
                                        s1_dual);

    std::vector<TrainPair> train_pairs = degrade_pairs(train_hq, pair_seed);
    std::vector<TrainPair> eval_pairs = degrade_pairs(eval_hq, pair_seed + 100000);

    struct RowSpec {
        const char* id;
        bool condition, dual, quality;
    };
    const std::vector<RowSpec> grid = {
        {"(a)", false, false, false},
        {"(b)", true, false, false},
        {"(c)", true, true, false},
        {"(d)", true, true, true},
    };

    AblationResult result;
    for (const RowSpec& row : grid) {
        note(std::string("training stage II for row ") + row.id);
        Stage2Config s2 = s2_base;
        s2.use_condition = row.condition;
        s2.use_dual = row.dual;
        s2.lambda2 = row.quality ? s2_base.lambda2 : 0.0;
        const Checkpoint& base = row.dual ? si_dual.checkpoint : si_single.checkpoint;
        Stage2Result s2_res = train_stage2(train_pairs, s2, base);
        const int eval_bin = row.condition ? 9 : 5;
        auto eval_rows = evaluate(eval_pairs, s2_res.checkpoint, {eval_bin});
        AblationRow out;
        out.id = row.id;
        out.score_condition = row.condition;
        out.dual_codebook = row.dual;
        out.quality_optimization = row.quality;
        out.ensemble_mean = eval_rows[0].ensemble_mean;
        out.l1_mean = eval_rows[0].l1_mean;
        result.rows.push_back(out);
        result.checkpoints.push_back(std::move(s2_res.checkpoint));
    }
    return result;
}

struct OveroptCase {
    std::string id;
    std::vector<OptTraceRow> continuous;
    std::vector<OptTraceRow> discrete;
};

struct OveroptVerdict {
    int cases_total = 0;
    int cases_pass = 0;  // per-case: (a) cont train >= disc train, (b) judge contrast
};

/// Runs both optimizers on the same inputs. A case passes when the continuous
/// run matches or beats the discrete train score while its held-out judge
/// drops below 90% of start and the discrete judge stays within 10%.
inline OveroptVerdict judge_overopt(const std::vector<OveroptCase>& cases) {
    OveroptVerdict v;
    for (const OveroptCase& c : cases) {
        ++v.cases_total;
        const OptTraceRow& c0 = c.continuous.front();
        const OptTraceRow& cn = c.continuous.back();
        const OptTraceRow& d0 = c.discrete.front();
        const OptTraceRow& dn = c.discrete.back();
        const bool a = cn.train_score >= dn.train_score;
        const bool cont_drops = cn.judge_score < 0.9 * c0.judge_score;
        const bool disc_stays = std::fabs(dn.judge_score - d0.judge_score) <= 0.10 * d0.judge_score;
        if (a && cont_drops && disc_stays) ++v.cases_pass;
    }
    return v;
}

inline std::vector<OveroptCase> run_overopt(const Checkpoint& ckpt,
                                            const std::vector<Tensor>& lq_inputs, int cont_steps,
                                            int disc_sweeps,
                                            const std::function<void(const std::string&)>& log = {}) {
    std::vector<OveroptCase> cases;
    for (std::size_t i = 0; i < lq_inputs.size(); ++i) {
        if (log) log("optimizing input " + std::to_string(i));
        OveroptCase c;
        c.id = std::to_string(i);
        c.continuous = optimize_quality_continuous(lq_inputs[i], ckpt, cont_steps).trace;
        c.discrete = optimize_quality_discrete(lq_inputs[i], ckpt, disc_sweeps).trace;
        cases.push_back(std::move(c));
    }
    return cases;
}

}  // namespace iqvq
