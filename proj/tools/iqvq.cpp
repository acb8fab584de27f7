#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "iqvq/checkpoint.hpp"
#include "iqvq/config.hpp"
#include "iqvq/corpus.hpp"
#include "iqvq/csv.hpp"
#include "iqvq/degrade.hpp"
#include "iqvq/pgm.hpp"
#include "iqvq/pipeline.hpp"
#include "iqvq/quality.hpp"
#include "iqvq/train.hpp"

namespace fs = std::filesystem;
using namespace iqvq;

namespace {

RunConfig make_schema() {
    RunConfig c;
    c.declare("io.out", "", "output directory or file");
    c.declare("io.corpus", "", "directory of HQ PGM images");
    c.declare("io.pairs", "", "directory of LQ PGM images with manifest.csv");
    c.declare("io.hq", "", "directory of HQ PGM images matching the pair stems");
    c.declare("io.ckpt", "", "checkpoint path");
    c.declare("io.in", "", "input PGM image");
    c.declare("io.bins", "0,1,2,3,4,5,6,7,8,9", "comma-separated evaluation bins");

    c.declare("corpus.count", "512", "number of synthetic HQ images");
    c.declare("corpus.size", "32", "square image extent in pixels");
    c.declare("corpus.seed", "7", "corpus generation seed");
    c.declare("corpus.sharp_prob", "0.14", "mass of the near-zero intrinsic blur mode");
    c.declare("corpus.sharp_max_sigma", "0.05", "upper sigma of the sharp mode");
    c.declare("corpus.blur_base", "0.25", "lower edge of the moderate blur bulk");
    c.declare("corpus.blur_span", "0.65", "width of the moderate blur bulk");
    c.declare("corpus.blur_shape", "1.1", "bulk shape exponent (>1 leans soft)");
    c.declare("corpus.heavy_prob", "0.10", "mass of the strong blur tail");
    c.declare("corpus.heavy_base", "1.4", "lower sigma of the strong blur tail");
    c.declare("corpus.heavy_span", "1.6", "width of the strong blur tail");

    c.declare("degrade.seed", "7", "base seed for pair synthesis (per-image seed = base + index)");

    c.declare("stage1.lr", "0.03", "stage-I SGD learning rate");
    c.declare("stage1.steps", "2000", "stage-I training steps");
    c.declare("stage1.batch", "4", "stage-I batch size");
    c.declare("stage1.alpha", "1.0", "quantized feature fusion weight");
    c.declare("stage1.beta", "0.25", "commitment weight in the code feature loss");
    c.declare("stage1.s_thr", "0.90", "HQ+ routing threshold on the ensemble score");
    c.declare("stage1.w_per", "0.1", "perceptual loss weight");
    c.declare("stage1.w_adv", "0.05", "adversarial loss weight");
    c.declare("stage1.adv_warmup_frac", "0.25", "fraction of steps before the adversary engages");
    c.declare("stage1.holdout", "64", "corpus images reserved for reconstruction tracking");
    c.declare("stage1.seed", "7", "stage-I init and data-order seed");
    c.declare("stage1.use_dual", "true", "train the HQ+ codebook (false = single-codebook ablation)");

    c.declare("stage2.lr", "0.03", "stage-II SGD learning rate");
    c.declare("stage2.steps", "2000", "stage-II training steps");
    c.declare("stage2.batch", "4", "stage-II batch size");
    c.declare("stage2.lambda1", "0.5", "code index loss weight");
    c.declare("stage2.lambda2", "0.1", "quality loss weight");
    c.declare("stage2.seed", "7", "stage-II init and data-order seed");
    c.declare("stage2.init_from_stage1", "true", "warm-start the LQ encoder from stage I");
    c.declare("stage2.defer_quality", "false", "apply the quality loss only in the final 25% of steps");
    c.declare("stage2.use_condition", "true", "condition on the score bin (false = fixed bin 5)");
    c.declare("stage2.use_dual", "true", "predict and fuse both codebooks");

    c.declare("restore.bin", "9", "conditioning bin for restoration");
    c.declare("opt.steps", "200", "continuous ascent steps");
    c.declare("opt.step_size", "0.1", "initial continuous ascent step size");
    c.declare("opt.sweeps", "3", "discrete coordinate-ascent sweeps");
    c.declare("overopt.count", "16", "number of inputs for the over-optimization experiment");
    return c;
}

/// Binds CLI flags onto config keys: defaults < --config file < explicit flags.
class FlagBinder {
public:
    explicit FlagBinder(RunConfig& cfg) : cfg_(cfg) {}

    void bind(CLI::App* cmd, const std::string& flag, const std::string& key) {
        auto target = std::make_shared<std::string>();
        auto* opt = cmd->add_option(flag, *target, doc_of(key) + " [" + cfg_.get(key) + "]");
        binds_.push_back({opt, key, target});
    }

    void bind_config(CLI::App* cmd) {
        config_path_ = std::make_shared<std::string>();
        cmd->add_option("--config", *config_path_, "key = value configuration file");
    }

    void apply() {
        if (config_path_ && !config_path_->empty()) cfg_.load_file(*config_path_);
        for (const auto& b : binds_)
            if (b.opt->count() > 0) cfg_.set(b.key, *b.target);
    }

private:
    struct Bind {
        CLI::Option* opt;
        std::string key;
        std::shared_ptr<std::string> target;
    };
    RunConfig& cfg_;
    std::vector<Bind> binds_;
    std::shared_ptr<std::string> config_path_;

    std::string doc_of(const std::string& key) const {
        for (const auto& e : cfg_.entries())
            if (e.key == key) return e.doc;
        throw std::logic_error("unknown config key " + key);
    }
};

std::string pad_id(int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%05d", i);
    return buf;
}

struct NamedImages {
    std::vector<std::string> ids;
    std::vector<Tensor> images;
};

NamedImages load_pgm_dir(const std::string& dir) {
    NamedImages out;
    std::vector<fs::path> paths;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.path().extension() == ".pgm") paths.push_back(entry.path());
    std::sort(paths.begin(), paths.end());
    if (paths.empty()) throw std::runtime_error("no .pgm images found in " + dir);
    for (const auto& p : paths) {
        out.ids.push_back(p.stem().string());
        out.images.push_back(read_pgm(p.string()));
    }
    return out;
}

void write_curve(const std::string& path, const TrainCurve& curve) {
    CsvWriter w(path, curve.header);
    for (const auto& row : curve.rows) {
        std::vector<std::string> cells;
        for (double v : row) cells.push_back(CsvWriter::num(v));
        w.row(cells);
    }
}

fs::path ensure_out_dir(const RunConfig& cfg) {
    const std::string out = cfg.get("io.out");
    if (out.empty()) throw std::invalid_argument("--out is required");
    fs::create_directories(out);
    return out;
}

void ensure_parent_dir(const std::string& file) {
    if (file.empty()) throw std::invalid_argument("--out is required");
    const fs::path p(file);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

CorpusSpec corpus_spec_from(const RunConfig& cfg) {
    CorpusSpec s;
    s.count = cfg.get_int("corpus.count");
    s.image_size = cfg.get_int("corpus.size");
    s.seed = cfg.get_u64("corpus.seed");
    s.sharp_prob = cfg.get_double("corpus.sharp_prob");
    s.sharp_max_sigma = cfg.get_double("corpus.sharp_max_sigma");
    s.blur_base = cfg.get_double("corpus.blur_base");
    s.blur_span = cfg.get_double("corpus.blur_span");
    s.blur_shape = cfg.get_double("corpus.blur_shape");
    s.heavy_prob = cfg.get_double("corpus.heavy_prob");
    s.heavy_base = cfg.get_double("corpus.heavy_base");
    s.heavy_span = cfg.get_double("corpus.heavy_span");
    return s;
}

Stage1Config stage1_from(const RunConfig& cfg) {
    Stage1Config s;
    s.lr = cfg.get_double("stage1.lr");
    s.steps = cfg.get_int("stage1.steps");
    s.batch = cfg.get_int("stage1.batch");
    s.alpha = cfg.get_double("stage1.alpha");
    s.beta = cfg.get_double("stage1.beta");
    s.s_thr = cfg.get_double("stage1.s_thr");
    s.w_per = cfg.get_double("stage1.w_per");
    s.w_adv = cfg.get_double("stage1.w_adv");
    s.adv_warmup_frac = cfg.get_double("stage1.adv_warmup_frac");
    s.holdout = cfg.get_int("stage1.holdout");
    s.seed = cfg.get_u64("stage1.seed");
    s.use_dual = cfg.get_bool("stage1.use_dual");
    return s;
}

Stage2Config stage2_from(const RunConfig& cfg) {
    Stage2Config s;
    s.lr = cfg.get_double("stage2.lr");
    s.steps = cfg.get_int("stage2.steps");
    s.batch = cfg.get_int("stage2.batch");
    s.lambda1 = cfg.get_double("stage2.lambda1");
    s.lambda2 = cfg.get_double("stage2.lambda2");
    s.seed = cfg.get_u64("stage2.seed");
    s.init_from_stage1 = cfg.get_bool("stage2.init_from_stage1");
    s.defer_quality = cfg.get_bool("stage2.defer_quality");
    s.use_condition = cfg.get_bool("stage2.use_condition");
    s.use_dual = cfg.get_bool("stage2.use_dual");
    return s;
}

std::vector<TrainPair> load_pairs(const RunConfig& cfg) {
    NamedImages lq = load_pgm_dir(cfg.get("io.pairs"));
    const std::string hq_dir = cfg.get("io.hq");
    std::vector<TrainPair> pairs;
    for (std::size_t i = 0; i < lq.ids.size(); ++i) {
        const fs::path hq_path = fs::path(hq_dir) / (lq.ids[i] + ".pgm");
        if (!fs::exists(hq_path))
            throw std::runtime_error("missing HQ counterpart " + hq_path.string());
        pairs.push_back({lq.images[i], read_pgm(hq_path.string())});
    }
    return pairs;
}

// ---- subcommand handlers ----

void cmd_gen_corpus(RunConfig& cfg) {
    const fs::path out = ensure_out_dir(cfg);
    CorpusSpec spec = corpus_spec_from(cfg);
    CsvWriter manifest((out / "manifest.csv").string(), {"image_id", "sigma_gt", "seed"});
    for (int i = 0; i < spec.count; ++i) {
        CorpusImage ci = gen_corpus_image(spec, i);
        const std::string id = pad_id(i);
        write_pgm((out / (id + ".pgm")).string(), ci.image);
        manifest.row({id, CsvWriter::num(ci.sigma_gt), CsvWriter::num(ci.seed)});
    }
    cfg.write_file((out / "run.cfg").string());
    std::cout << "wrote " << spec.count << " images to " << out.string() << "\n";
}

void cmd_score(RunConfig& cfg) {
    NamedImages corpus = load_pgm_dir(cfg.get("io.corpus"));
    ScoredCorpusData scored = score_corpus_images(corpus.images);
    const std::string out = cfg.get("io.out");
    ensure_parent_dir(out);
    CsvWriter w(out, {"image_id", "p1_raw", "p2_raw", "p3_raw", "p1_norm", "p2_norm", "p3_norm",
                      "ensemble", "bin"});
    for (std::size_t i = 0; i < corpus.ids.size(); ++i) {
        const QualityReport& r = scored.reports[i];
        w.row({corpus.ids[i], CsvWriter::num(r.raw[0]), CsvWriter::num(r.raw[1]),
               CsvWriter::num(r.raw[2]), CsvWriter::num(r.normalized[0]),
               CsvWriter::num(r.normalized[1]), CsvWriter::num(r.normalized[2]),
               CsvWriter::num(r.ensemble), CsvWriter::num(r.bin)});
    }
    std::cout << "scored " << corpus.ids.size() << " images -> " << out << "\n";
}

void cmd_gen_pairs(RunConfig& cfg) {
    NamedImages hq = load_pgm_dir(cfg.get("io.hq"));
    const fs::path out = ensure_out_dir(cfg);
    const std::uint64_t base_seed = cfg.get_u64("degrade.seed");
    CsvWriter manifest((out / "manifest.csv").string(),
                       {"image_id", "sigma", "r", "delta", "q", "seed"});
    for (std::size_t i = 0; i < hq.images.size(); ++i) {
        const std::uint64_t seed_i = base_seed + i;
        Rng prng(seed_i);
        DegradationParams dp = sample_params(prng, hq.images[i].shape[0]);
        Tensor lq = degrade(hq.images[i], dp, seed_i);
        write_pgm((out / (hq.ids[i] + ".pgm")).string(), lq);
        manifest.row({hq.ids[i], CsvWriter::num(dp.sigma), CsvWriter::num(dp.r),
                      CsvWriter::num(dp.delta), CsvWriter::num(dp.q), CsvWriter::num(seed_i)});
    }
    cfg.write_file((out / "run.cfg").string());
    std::cout << "degraded " << hq.images.size() << " images -> " << out.string() << "\n";
}

void cmd_train_stage1(RunConfig& cfg) {
    NamedImages corpus = load_pgm_dir(cfg.get("io.corpus"));
    const fs::path out = ensure_out_dir(cfg);
    ScoredCorpusData scored = score_corpus_images(corpus.images);
    ModelConfig mcfg;
    Stage1Result res = train_stage1(scored.images, scored.reports, scored.normalizer, mcfg,
                                    stage1_from(cfg));
    res.checkpoint.save((out / "stage1.ckpt").string());
    write_curve((out / "stage1_curve.csv").string(), res.curve);
    cfg.write_file((out / "run.cfg").string());
    std::cout << "holdout reconstruction L1: " << res.holdout_l1_start << " -> "
              << res.holdout_l1_end << "\n"
              << "checkpoint: " << (out / "stage1.ckpt").string() << "\n";
}

void cmd_train_stage2(RunConfig& cfg) {
    const fs::path out = ensure_out_dir(cfg);
    Checkpoint base = Checkpoint::load(cfg.get("io.ckpt"));
    std::vector<TrainPair> pairs = load_pairs(cfg);
    Stage2Result res = train_stage2(pairs, stage2_from(cfg), base);
    res.checkpoint.save((out / "stage2.ckpt").string());
    write_curve((out / "stage2_curve.csv").string(), res.curve);
    cfg.write_file((out / "run.cfg").string());
    std::cout << "checkpoint: " << (out / "stage2.ckpt").string() << "\n";
}

void cmd_restore(RunConfig& cfg) {
    Checkpoint ckpt = Checkpoint::load(cfg.get("io.ckpt"));
    Tensor lq = read_pgm(cfg.get("io.in"));
    RestoreResult r = restore(lq, cfg.get_int("restore.bin"), ckpt);
    const std::string out = cfg.get("io.out");
    ensure_parent_dir(out);
    write_pgm(out, r.image);
    std::cout << "restored -> " << out << "\n";
}

void cmd_optimize_quality(RunConfig& cfg, const std::string& mode) {
    Checkpoint ckpt = Checkpoint::load(cfg.get("io.ckpt"));
    Tensor lq = read_pgm(cfg.get("io.in"));
    const fs::path out = ensure_out_dir(cfg);
    OptResult res;
    if (mode == "continuous")
        res = optimize_quality_continuous(lq, ckpt, cfg.get_int("opt.steps"),
                                          cfg.get_double("opt.step_size"));
    else if (mode == "discrete")
        res = optimize_quality_discrete(lq, ckpt, cfg.get_int("opt.sweeps"));
    else
        throw std::invalid_argument("--mode must be continuous or discrete");
    write_pgm((out / "optimized.pgm").string(), res.image);
    CsvWriter w((out / "trace.csv").string(), {"step", "train_score", "judge_score"});
    for (const OptTraceRow& row : res.trace)
        w.row({CsvWriter::num(row.step), CsvWriter::num(row.train_score),
               CsvWriter::num(row.judge_score)});
    cfg.write_file((out / "run.cfg").string());
    std::cout << mode << " optimization: score " << res.trace.front().train_score << " -> "
              << res.trace.back().train_score << "\n";
}

void cmd_eval(RunConfig& cfg) {
    Checkpoint ckpt = Checkpoint::load(cfg.get("io.ckpt"));
    std::vector<TrainPair> pairs = load_pairs(cfg);
    std::vector<int> bins;
    std::stringstream ss(cfg.get("io.bins"));
    std::string item;
    while (std::getline(ss, item, ',')) bins.push_back(std::stoi(item));
    auto rows = evaluate(pairs, ckpt, bins);
    const std::string out = cfg.get("io.out");
    ensure_parent_dir(out);
    CsvWriter w(out, {"bin", "p1_mean", "p1_std", "p2_mean", "p2_std", "p3_mean", "p3_std",
                      "ensemble_mean", "ensemble_std", "l1_mean", "code_acc1", "code_acc2",
                      "util1", "util2"});
    for (const EvalRow& r : rows)
        w.row({CsvWriter::num(r.bin), CsvWriter::num(r.p1_mean), CsvWriter::num(r.p1_std),
               CsvWriter::num(r.p2_mean), CsvWriter::num(r.p2_std), CsvWriter::num(r.p3_mean),
               CsvWriter::num(r.p3_std), CsvWriter::num(r.ensemble_mean),
               CsvWriter::num(r.ensemble_std), CsvWriter::num(r.l1_mean),
               CsvWriter::num(r.code_acc1), CsvWriter::num(r.code_acc2), CsvWriter::num(r.util1),
               CsvWriter::num(r.util2)});
    std::cout << "evaluated " << pairs.size() << " pairs over " << bins.size() << " bins -> "
              << out << "\n";
}

void cmd_overopt(RunConfig& cfg) {
    Checkpoint ckpt = Checkpoint::load(cfg.get("io.ckpt"));
    NamedImages lq = load_pgm_dir(cfg.get("io.pairs"));
    const fs::path out = ensure_out_dir(cfg);
    const int count = std::min<int>(cfg.get_int("overopt.count"), static_cast<int>(lq.images.size()));
    std::vector<Tensor> inputs(lq.images.begin(), lq.images.begin() + count);
    auto cases = run_overopt(ckpt, inputs, cfg.get_int("opt.steps"), cfg.get_int("opt.sweeps"),
                             [](const std::string& m) { std::cout << "  " << m << "\n"; });
    CsvWriter traces((out / "traces.csv").string(),
                     {"image_id", "variant", "step", "train_score", "judge_score"});
    for (std::size_t i = 0; i < cases.size(); ++i) {
        for (const OptTraceRow& r : cases[i].continuous)
            traces.row({lq.ids[i], "continuous", CsvWriter::num(r.step),
                        CsvWriter::num(r.train_score), CsvWriter::num(r.judge_score)});
        for (const OptTraceRow& r : cases[i].discrete)
            traces.row({lq.ids[i], "discrete", CsvWriter::num(r.step),
                        CsvWriter::num(r.train_score), CsvWriter::num(r.judge_score)});
    }
    CsvWriter summary((out / "summary.csv").string(),
                      {"image_id", "cont_train_final", "cont_judge_start", "cont_judge_final",
                       "disc_train_final", "disc_judge_start", "disc_judge_final"});
    for (std::size_t i = 0; i < cases.size(); ++i) {
        const auto& c = cases[i];
        summary.row({lq.ids[i], CsvWriter::num(c.continuous.back().train_score),
                     CsvWriter::num(c.continuous.front().judge_score),
                     CsvWriter::num(c.continuous.back().judge_score),
                     CsvWriter::num(c.discrete.back().train_score),
                     CsvWriter::num(c.discrete.front().judge_score),
                     CsvWriter::num(c.discrete.back().judge_score)});
    }
    OveroptVerdict v = judge_overopt(cases);
    cfg.write_file((out / "run.cfg").string());
    std::cout << "over-optimization contrast holds in " << v.cases_pass << "/" << v.cases_total
              << " cases\n";
}

void cmd_ablate(RunConfig& cfg) {
    const fs::path out = ensure_out_dir(cfg);
    CorpusSpec spec = corpus_spec_from(cfg);
    AblationResult res = run_ablation_grid(spec, ModelConfig{}, stage1_from(cfg), stage2_from(cfg),
                                           cfg.get_u64("degrade.seed"),
                                           [](const std::string& m) { std::cout << "  " << m << "\n"; });
    CsvWriter w((out / "ablation.csv").string(),
                {"row", "score_condition", "dual_codebook", "quality_optimization",
                 "ensemble_mean", "l1_mean"});
    for (const AblationRow& r : res.rows) {
        w.row({r.id, r.score_condition ? "1" : "0", r.dual_codebook ? "1" : "0",
               r.quality_optimization ? "1" : "0", CsvWriter::num(r.ensemble_mean),
               CsvWriter::num(r.l1_mean)});
        std::cout << r.id << "  cond=" << r.score_condition << " dual=" << r.dual_codebook
                  << " quality=" << r.quality_optimization << "  ensemble=" << r.ensemble_mean
                  << "\n";
    }
    cfg.write_file((out / "run.cfg").string());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"quality-prior-guided dual-codebook restoration pipeline"};
    app.require_subcommand(1);

    RunConfig cfg = make_schema();

    auto add_cmd = [&](const std::string& name, const std::string& desc,
                       const std::vector<std::pair<std::string, std::string>>& flags,
                       std::function<void(RunConfig&)> handler) {
        CLI::App* cmd = app.add_subcommand(name, desc);
        auto binder = std::make_shared<FlagBinder>(cfg);
        binder->bind_config(cmd);
        for (const auto& [flag, key] : flags) binder->bind(cmd, flag, key);
        cmd->callback([&cfg, binder, handler] {
            binder->apply();
            handler(cfg);
        });
        return cmd;
    };

    add_cmd("gen-corpus", "generate the synthetic HQ corpus",
            {{"--count", "corpus.count"},
             {"--size", "corpus.size"},
             {"--seed", "corpus.seed"},
             {"--out", "io.out"}},
            cmd_gen_corpus);

    add_cmd("score", "score a directory of images with the proxy ensemble",
            {{"--in", "io.corpus"}, {"--out", "io.out"}}, cmd_score);

    add_cmd("gen-pairs", "degrade HQ images into LQ training pairs",
            {{"--hq", "io.hq"}, {"--seed", "degrade.seed"}, {"--out", "io.out"}}, cmd_gen_pairs);

    add_cmd("train-stage1", "train the dual-codebook autoencoder",
            {{"--corpus", "io.corpus"},
             {"--out", "io.out"},
             {"--steps", "stage1.steps"},
             {"--batch", "stage1.batch"},
             {"--lr", "stage1.lr"},
             {"--seed", "stage1.seed"},
             {"--use-dual", "stage1.use_dual"}},
            cmd_train_stage1);

    add_cmd("train-stage2", "train the quality-conditioned code predictor",
            {{"--pairs", "io.pairs"},
             {"--hq", "io.hq"},
             {"--ckpt", "io.ckpt"},
             {"--out", "io.out"},
             {"--steps", "stage2.steps"},
             {"--batch", "stage2.batch"},
             {"--lr", "stage2.lr"},
             {"--seed", "stage2.seed"},
             {"--lambda2", "stage2.lambda2"},
             {"--use-condition", "stage2.use_condition"},
             {"--use-dual", "stage2.use_dual"}},
            cmd_train_stage2);

    add_cmd("restore", "restore one LQ image",
            {{"--ckpt", "io.ckpt"}, {"--in", "io.in"}, {"--bin", "restore.bin"}, {"--out", "io.out"}},
            cmd_restore);

    {
        CLI::App* cmd = app.add_subcommand("optimize-quality",
                                           "maximize the proxy ensemble for one input");
        auto binder = std::make_shared<FlagBinder>(cfg);
        binder->bind_config(cmd);
        binder->bind(cmd, "--ckpt", "io.ckpt");
        binder->bind(cmd, "--in", "io.in");
        binder->bind(cmd, "--out", "io.out");
        binder->bind(cmd, "--steps", "opt.steps");
        binder->bind(cmd, "--sweeps", "opt.sweeps");
        auto mode = std::make_shared<std::string>("discrete");
        cmd->add_option("--mode", *mode, "continuous | discrete [discrete]");
        cmd->callback([&cfg, binder, mode] {
            binder->apply();
            cmd_optimize_quality(cfg, *mode);
        });
    }

    add_cmd("eval", "per-bin restoration metrics over an evaluation set",
            {{"--ckpt", "io.ckpt"},
             {"--pairs", "io.pairs"},
             {"--hq", "io.hq"},
             {"--bins", "io.bins"},
             {"--out", "io.out"}},
            cmd_eval);

    add_cmd("overopt-experiment",
            "paired continuous/discrete quality optimization on the same inputs",
            {{"--ckpt", "io.ckpt"},
             {"--pairs", "io.pairs"},
             {"--count", "overopt.count"},
             {"--steps", "opt.steps"},
             {"--sweeps", "opt.sweeps"},
             {"--out", "io.out"}},
            cmd_overopt);

    add_cmd("ablate", "four-row ablation grid (baseline / +condition / +dual / +quality)",
            {{"--seed", "corpus.seed"},
             {"--count", "corpus.count"},
             {"--stage1-steps", "stage1.steps"},
             {"--stage2-steps", "stage2.steps"},
             {"--out", "io.out"}},
            cmd_ablate);

    try {
        app.parse(argc, argv);
    } catch (const CLI::Error& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
