#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "duet/checkpoint.hpp"
#include "duet/config.hpp"
#include "duet/datagen.hpp"
#include "duet/evaluate.hpp"
#include "duet/model.hpp"
#include "duet/objectives.hpp"
#include "duet/quality.hpp"
#include "duet/trainer.hpp"

namespace duet {

/// Everything the harness reads from one config file: model geometry, the
/// stage schedule, quality thresholds, corpus sizes, sampler defaults.
struct PipelineConfig {
    ModelConfig model;
    std::vector<StageConfig> stages;  // stage 1..3 in order
    QualityConfig qc;
    CorpusSpec train_spec;
    CorpusSpec eval_spec;
    std::int64_t sample_steps = 20;
    VaePretrainOptions vae;

    static PipelineConfig from_kv(const KvFile& kv) {
        PipelineConfig c;
        c.model = ModelConfig::from_kv(kv);
        c.stages = {stage_from_kv(1, kv), stage_from_kv(2, kv), stage_from_kv(3, kv)};
        c.qc = QualityConfig::from_kv(kv);
        c.train_spec = CorpusSpec::from_kv(kv, "train");
        c.eval_spec = CorpusSpec::from_kv(kv, "eval");
        c.sample_steps = kv.get_i64("eval.sample_steps", c.sample_steps);
        c.vae.gate_psnr = kv.get_f64("train.vae_gate_psnr", c.vae.gate_psnr);
        c.vae.max_steps = kv.get_i64("train.vae_max_steps", c.vae.max_steps);
        c.vae.lr = kv.get_f64("train.vae_lr", c.vae.lr);
        if (c.sample_steps < 1) throw ParamError("eval.sample_steps must be >= 1");
        return c;
    }

    /// Empty path gives the built-in defaults.
    static PipelineConfig load(const std::string& path) {
        if (path.empty()) return from_kv(KvFile());
        return from_kv(KvFile::load(path));
    }
};

namespace pipeline {

// Fixed layout under one output root; every subcommand reads the previous
// one's directory.
namespace paths {

inline std::string data_dir(const std::string& root, const std::string& split) {
    return (std::filesystem::path(root) / "data" / split).string();
}
inline std::string manifest(const std::string& root, const std::string& split) {
    return (std::filesystem::path(root) / "data" / split / "manifest.tsv").string();
}
inline std::string qc_dir(const std::string& root) {
    return (std::filesystem::path(root) / "qc" / "train").string();
}
inline std::string qc_manifest(const std::string& root) {
    return (std::filesystem::path(root) / "qc" / "train" / "manifest.tsv").string();
}
inline std::string scores_csv(const std::string& root) {
    return (std::filesystem::path(root) / "qc" / "scores.csv").string();
}
inline std::string review_template(const std::string& root) {
    return (std::filesystem::path(root) / "qc" / "review_template.jsonl").string();
}
inline std::string train_dir(const std::string& root) {
    return (std::filesystem::path(root) / "train").string();
}
inline std::string stage_file(const std::string& root, int stage, const std::string& suffix) {
    return (std::filesystem::path(root) / "train" /
            ("stage" + std::to_string(stage) + suffix))
        .string();
}
inline std::string eval_dir(const std::string& root) {
    return (std::filesystem::path(root) / "eval").string();
}
inline std::string report_json(const std::string& root) {
    return (std::filesystem::path(root) / "eval" / "report.json").string();
}
inline std::string sample_pgm(const std::string& root) {
    return (std::filesystem::path(root) / "sample" / "sample.pgm").string();
}

}  // namespace paths

inline void gen_data(const PipelineConfig& cfg, std::uint64_t seed, const std::string& root) {
    std::vector<Sample> train = build_corpus(cfg.train_spec, derive_seed(seed, "corpus-train"));
    write_corpus(train, paths::data_dir(root, "train"));
    std::vector<Sample> eval_set = build_corpus(cfg.eval_spec, derive_seed(seed, "corpus-eval"));
    write_corpus(eval_set, paths::data_dir(root, "eval"));
}

/// Filters and scores the generated training split, rewriting the kept
/// records as a corpus of their own next to the score table and the blank
/// review sheet.
inline QcResult qc(const PipelineConfig& cfg, const std::string& root) {
    std::vector<Sample> train = load_corpus(paths::manifest(root, "train"));
    QcResult r = run_qc(train, cfg.qc);
    write_corpus(r.kept, paths::qc_dir(root));
    write_scores_csv(r.rows, paths::scores_csv(root));
    write_review_template(r.kept, paths::review_template(root));
    return r;
}

/// Loads the post-filter corpus. Training requires qc to have run.
inline std::vector<Sample> load_kept_corpus(const std::string& root) {
    const std::string path = paths::qc_manifest(root);
    if (!std::filesystem::exists(path))
        throw ValidationError("train: no filtered corpus at " + path + "; run qc first");
    return load_corpus(path);
}

/// stage_sel is "all" or "1"/"2"/"3". Single stages resume from the
/// previous stage's raw checkpoint; stage 1 runs the autoencoder fit first.
inline void train(const PipelineConfig& cfg, std::uint64_t seed, const std::string& root,
                  const std::string& stage_sel, const TrainHooks& hooks = {}) {
    namespace fs = std::filesystem;
    const std::vector<Sample> kept = load_kept_corpus(root);
    const std::string tdir = paths::train_dir(root);
    fs::create_directories(tdir);
    UnifiedModel model(cfg.model, seed);

    if (stage_sel == "all") {
        run_curriculum(model, cfg.stages, kept, seed, tdir, hooks, cfg.vae);
        return;
    }
    if (stage_sel != "1" && stage_sel != "2" && stage_sel != "3")
        throw ValidationError("train: stage must be one of 1, 2, 3, all");
    const int k = stage_sel[0] - '0';

    if (k == 1) {
        pretrain_vae(model, kept, derive_seed(seed, "stage0"), cfg.vae);
        ckpt::save(paths::stage_file(root, 0, ".vae.ckpt"), model.state());
    } else {
        const std::string prev = paths::stage_file(root, k - 1, ".raw.ckpt");
        if (!fs::exists(prev))
            throw ValidationError("train: stage " + stage_sel + " needs " + prev + "; train stage " +
                                  std::to_string(k - 1) + " first");
        model.load_state(ckpt::load(prev));
    }

    StageResult sr = train_stage(model, cfg.stages[static_cast<std::size_t>(k - 1)], kept,
                                 derive_seed(seed, "stage" + stage_sel), hooks);
    write_trace_csv(sr.rows, paths::stage_file(root, k, ".trace.csv"));
    ckpt::save(paths::stage_file(root, k, ".raw.ckpt"), model.state());
    std::map<std::string, Tensor> ema_state = model.state();
    for (const auto& [name, values] : sr.ema_values) {
        Tensor& t = ema_state.at(name);
        std::copy(values.begin(), values.end(), t.data().begin());
    }
    ckpt::save(paths::stage_file(root, k, ".ema.ckpt"), ema_state);
}

/// EMA weights of the furthest stage trained so far, unless overridden.
inline std::string pick_checkpoint(const std::string& root, const std::string& override_path) {
    if (!override_path.empty()) return override_path;
    for (int k = 3; k >= 1; --k) {
        const std::string path = paths::stage_file(root, k, ".ema.ckpt");
        if (std::filesystem::exists(path)) return path;
    }
    throw ValidationError("no trained checkpoint under " + paths::train_dir(root) +
                          "; run train first");
}

inline Image sample(const PipelineConfig& cfg, const std::string& root, const std::string& prompt,
                    std::int64_t steps, std::uint64_t seed, const std::string& ckpt_path = "") {
    if (steps < 1) throw ValidationError("sample: steps must be >= 1");
    UnifiedModel model(cfg.model, seed);
    model.load_state(ckpt::load(pick_checkpoint(root, ckpt_path)));
    const std::vector<std::int64_t> cond = tokenizer().encode(prompt, true, true);
    Image img = quantize8(euler_sample(model, cond, steps, derive_seed(seed, "sample")));
    const std::string out = paths::sample_pgm(root);
    std::filesystem::create_directories(std::filesystem::path(out).parent_path());
    write_pnm(out, img);
    return img;
}

inline nlohmann::ordered_json eval(const PipelineConfig& cfg, std::uint64_t seed,
                                   const std::string& root, const std::string& split,
                                   const std::string& ckpt_path = "") {
    const std::vector<Sample> records = load_corpus(paths::manifest(root, split));
    UnifiedModel model(cfg.model, seed);
    model.load_state(ckpt::load(pick_checkpoint(root, ckpt_path)));
    EvalOptions opt;
    opt.seed = seed;
    opt.sample_steps = cfg.sample_steps;
    opt.out_dir = paths::eval_dir(root);
    std::filesystem::create_directories(opt.out_dir);
    nlohmann::ordered_json report = evaluate(model, records, opt);
    write_report(report, paths::report_json(root));
    return report;
}

}  // namespace pipeline
}  // namespace duet
