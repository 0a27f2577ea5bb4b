#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "duet/checkpoint.hpp"
#include "duet/config.hpp"
#include "duet/datagen.hpp"
#include "duet/metrics.hpp"
#include "duet/model.hpp"
#include "duet/objectives.hpp"
#include "duet/optim.hpp"
#include "duet/tokenizer.hpp"

namespace duet {

// ---------------------------------------------------------------------------
// trace
// ---------------------------------------------------------------------------

struct TraceRow {
    std::int64_t step = 0;
    TaskCategory category = TaskCategory::TEXT;
    double l_ntp = 0.0;   // 0 when the step carries no text loss
    double l_flow = 0.0;  // 0 when the step carries no latent loss
    double total = 0.0;
    double lr = 0.0;
};

inline void write_trace_csv(const std::vector<TraceRow>& rows, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("write_trace_csv: cannot open " + path);
    os << "step,category,l_ntp,l_flow,total,lr\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%lld,%s,%.17g,%.17g,%.17g,%.17g",
                      static_cast<long long>(r.step), category_name(r.category), r.l_ntp, r.l_flow,
                      r.total, r.lr);
        os << buf << '\n';
    }
    if (!os) throw IoError("write_trace_csv: write failed");
}

struct TrainHooks {
    /// Runs after each optimizer update with the model in its post-step state.
    std::function<void(const TraceRow&, const UnifiedModel&)> on_step;
};

// ---------------------------------------------------------------------------
// mixture sampling and dataset cycling
// ---------------------------------------------------------------------------

/// One draw from the normalized category mixture, walking the CDF in enum
/// order. Zero-weight categories are never drawn.
inline TaskCategory draw_category(const std::map<TaskCategory, double>& mixing, Rng& rng) {
    double total = 0.0;
    for (const auto& [cat, w] : mixing) {
        if (w < 0.0) throw ParamError("draw_category: negative weight");
        total += w;
    }
    if (total <= 0.0) throw ParamError("draw_category: empty mixture");
    const double u = rng.uniform() * total;
    double acc = 0.0;
    TaskCategory last = TaskCategory::TEXT;
    bool seen = false;
    for (const auto& [cat, w] : mixing) {
        if (w <= 0.0) continue;
        acc += w;
        last = cat;
        seen = true;
        if (u < acc) return cat;
    }
    if (!seen) throw ParamError("draw_category: empty mixture");
    return last;  // u == total after rounding
}

/// Round-robin view of a corpus, one independent cursor per category.
class CategoryCycler {
  public:
    explicit CategoryCycler(const std::vector<Sample>& samples) {
        for (const auto& s : samples) by_cat_[s.task].push_back(&s);
    }

    bool has(TaskCategory cat) const {
        const auto it = by_cat_.find(cat);
        return it != by_cat_.end() && !it->second.empty();
    }

    const Sample& next(TaskCategory cat) {
        const auto it = by_cat_.find(cat);
        if (it == by_cat_.end() || it->second.empty())
            throw ContractError(std::string("CategoryCycler: no samples for category ") +
                                category_name(cat));
        const auto& list = it->second;
        const Sample& s = *list[cursor_[cat] % list.size()];
        ++cursor_[cat];
        return s;
    }

  private:
    std::map<TaskCategory, std::vector<const Sample*>> by_cat_;
    std::map<TaskCategory, std::size_t> cursor_;
};

// ---------------------------------------------------------------------------
// batch assembly
// ---------------------------------------------------------------------------

/// Everything one optimization step needs. ntp_targets aligns with the
/// sequence's TEXT rows in stream order; empty means the text is pure
/// conditioning. v_target is present iff the sequence carries latents.
struct StepBatch {
    TokenSequence seq;
    std::vector<std::int64_t> ntp_targets;
    std::optional<Tensor> v_target;
    TaskCategory category = TaskCategory::TEXT;
};

namespace detail {

/// [BOS] prompt [SEP] answer [EOS] with next-token targets over the answer
/// span: position i predicts token i+1 from the separator onward.
inline std::pair<std::vector<std::int64_t>, std::vector<std::int64_t>> qa_stream(
    const std::string& prompt, const std::string& answer) {
    const Tokenizer& tok = tokenizer();
    std::vector<std::int64_t> ids;
    ids.push_back(Tokenizer::kBos);
    for (auto id : tok.encode(prompt)) ids.push_back(id);
    const auto sep_idx = static_cast<std::int64_t>(ids.size());
    ids.push_back(Tokenizer::kSep);
    for (auto id : tok.encode(answer)) ids.push_back(id);
    ids.push_back(Tokenizer::kEos);
    const auto n = static_cast<std::int64_t>(ids.size());
    std::vector<std::int64_t> targets(static_cast<std::size_t>(n), -1);
    for (std::int64_t i = sep_idx; i + 1 < n; ++i)
        targets[static_cast<std::size_t>(i)] = ids[static_cast<std::size_t>(i + 1)];
    return {std::move(ids), std::move(targets)};
}

inline std::vector<std::int64_t> cond_stream(const std::string& text) {
    return tokenizer().encode(text, /*bos=*/true, /*eos=*/true);
}

}  // namespace detail

/// Sequence and targets for one record. rng supplies the flow time,
/// noise_seed the z1 endpoint, so a step is reproducible from its seeds.
inline StepBatch make_step_batch(const UnifiedModel& model, const Sample& s, Rng& rng,
                                 std::uint64_t noise_seed) {
    const bool vsv = model.config().vae_sees_vit;
    StepBatch b;
    b.category = s.task;
    switch (s.task) {
        case TaskCategory::TEXT: {
            auto [ids, targets] = detail::qa_stream(s.q, s.a_t);
            b.seq = build_sequence(ids, Tensor(), Tensor(), SequenceMode::UNDERSTAND);
            b.ntp_targets = std::move(targets);
            break;
        }
        case TaskCategory::I2T: {
            const std::string answer = s.think.empty() ? s.a_t : s.think + " " + s.a_t;
            auto [ids, targets] = detail::qa_stream(s.q, answer);
            b.seq = build_sequence(ids, model.vit_encode(*s.x_v), Tensor(),
                                   SequenceMode::UNDERSTAND);
            b.ntp_targets = std::move(targets);
            break;
        }
        case TaskCategory::T2I: {
            const double t = rng.uniform();
            const FlowPair pair = make_flow_pair(model.vae_encode(*s.a_v), t, noise_seed);
            b.seq = build_sequence(detail::cond_stream(s.a_t), Tensor(), pair.z_t,
                                   SequenceMode::GENERATE, t, vsv);
            b.v_target = pair.v_target;
            break;
        }
        case TaskCategory::INTERLEAVED: {
            const double t = rng.uniform();
            const FlowPair pair = make_flow_pair(model.vae_encode(*s.a_v), t, noise_seed);
            std::vector<std::int64_t> ids;
            if (*s.kind == InterleavedKind::COUNTERFACTUAL) {
                auto [qa_ids, targets] = detail::qa_stream(s.q, s.a_t);
                ids = std::move(qa_ids);
                b.ntp_targets = std::move(targets);
            } else {
                ids = detail::cond_stream(s.a_t);
            }
            b.seq = build_sequence(ids, model.vit_encode(*s.x_v), pair.z_t,
                                   SequenceMode::INTERLEAVED, t, vsv);
            b.v_target = pair.v_target;
            break;
        }
    }
    return b;
}

// ---------------------------------------------------------------------------
// freezing
// ---------------------------------------------------------------------------

inline void apply_freeze(UnifiedModel& model, const FreezeFlags& f) {
    for (auto& [name, p] : model.params()) {
        const std::string g = UnifiedModel::group_of(name);
        bool frozen = (g == "vit" && f.vit) || (g == "vae" && f.vae) ||
                      (g == "und" && f.understanding);
        if (f.backbone && (g == "und" || g == "gen")) frozen = true;
        p.set_requires_grad(!frozen);
    }
}

// ---------------------------------------------------------------------------
// one curriculum stage
// ---------------------------------------------------------------------------

struct StageResult {
    StageConfig cfg;
    std::vector<TraceRow> rows;
    std::vector<std::string> tracked;  // parameters the EMA shadow followed
    std::map<std::string, std::vector<double>> ema_values;
};

inline StageResult train_stage(UnifiedModel& model, const StageConfig& stage,
                               const std::vector<Sample>& samples, std::uint64_t seed,
                               const TrainHooks& hooks = {}) {
    StageConfig cfg = stage;
    cfg.normalize();
    cfg.validate();
    apply_freeze(model, cfg.freeze);

    CategoryCycler data(samples);
    for (const auto& [cat, w] : cfg.mixing)
        if (w > 0.0 && !data.has(cat))
            throw ContractError(std::string("train_stage: mixture asks for category ") +
                                category_name(cat) + " but the corpus has none");

    std::set<std::string> tracked;
    for (const auto& [name, p] : model.params())
        if (p.requires_grad()) tracked.insert(name);
    if (tracked.empty()) throw ContractError("train_stage: every parameter is frozen");

    AdamW opt;
    EmaShadow ema(model.params(), cfg.ema_ratio,
                  [&](const std::string& name) { return tracked.count(name) > 0; });

    const std::string tag = "stage" + std::to_string(cfg.stage_id);
    StageResult result;
    result.cfg = cfg;
    result.tracked.assign(tracked.begin(), tracked.end());

    for (std::int64_t k = 0; k < cfg.steps; ++k) {
        Rng step_rng(derive_seed(seed, tag + "-step", static_cast<std::uint64_t>(k)));
        const TaskCategory cat = draw_category(cfg.mixing, step_rng);
        const Sample& s = data.next(cat);
        StepBatch b = make_step_batch(model, s, step_rng,
                                      derive_seed(seed, tag + "-noise", static_cast<std::uint64_t>(k)));
        if (b.seq.size() > cfg.max_tokens)
            throw ContractError("train_stage: sequence of " + std::to_string(b.seq.size()) +
                                " tokens exceeds the stage budget");

        Tensor hidden = model.mot_forward(b.seq);
        std::optional<Tensor> l_ntp, l_flow;
        if (!b.ntp_targets.empty())
            l_ntp = ntp_loss(model.lm_logits(hidden, b.seq.rows_with(ModalityTag::TEXT)),
                             b.ntp_targets);
        if (b.v_target)
            l_flow = flow_loss(model.predict_velocity(hidden, b.seq.rows_with(ModalityTag::VAE)),
                               *b.v_target);

        Tensor total;
        if (l_ntp && l_flow) total = combined_loss(*l_ntp, *l_flow, cfg.weights);
        else if (l_ntp) total = scale(*l_ntp, cfg.weights.w_ce);
        else if (l_flow) total = scale(*l_flow, cfg.weights.w_mse);
        else throw ContractError("train_stage: step " + std::to_string(k) + " carries no loss");
        if (!std::isfinite(total.value()))
            throw NumericError(tag + " step " + std::to_string(k) + ": non-finite loss");

        backward(total);
        clip_grad_norm(model.params(), cfg.grad_clip);
        opt.step(model.params(), cfg.lr);
        zero_grads(model.params());
        ema.update(model.params());

        TraceRow row{k, cat, l_ntp ? l_ntp->value() : 0.0, l_flow ? l_flow->value() : 0.0,
                     total.value(), cfg.lr};
        result.rows.push_back(row);
        if (hooks.on_step) hooks.on_step(row, model);
    }

    result.ema_values = ema.values();
    return result;
}

// ---------------------------------------------------------------------------
// latent autoencoder pretraining (the stage-0 gate)
// ---------------------------------------------------------------------------

struct VaePretrainResult {
    std::int64_t steps = 0;
    double final_psnr = 0.0;
};

struct VaePretrainOptions {
    double gate_psnr = 25.0;
    std::int64_t max_steps = 2000;
    double lr = 1e-2;
};

/// Fits the linear encoder/decoder pair on the corpus images by patch
/// reconstruction until mean PSNR clears the gate, then freezes them for the
/// rest of the curriculum.
inline VaePretrainResult pretrain_vae(UnifiedModel& model, const std::vector<Sample>& samples,
                                      std::uint64_t seed, const VaePretrainOptions& vopt = {}) {
    const double gate_psnr = vopt.gate_psnr;
    const std::int64_t max_steps = vopt.max_steps;
    const double lr = vopt.lr;
    std::vector<const Image*> images;
    for (const auto& s : samples) {
        if (s.x_v) images.push_back(&*s.x_v);
        if (s.a_v) images.push_back(&*s.a_v);
    }
    if (images.empty()) throw ContractError("pretrain_vae: corpus has no images");

    FreezeFlags vae_only;
    vae_only.vit = true;
    vae_only.vae = false;
    vae_only.understanding = true;
    vae_only.backbone = true;
    apply_freeze(model, vae_only);

    auto mean_psnr = [&]() {
        NoGradGuard ng;
        const std::size_t n_check = std::min<std::size_t>(images.size(), 16);
        double acc = 0.0;
        for (std::size_t i = 0; i < n_check; ++i) {
            const Image& img = *images[i];
            const Image recon = model.vae_decode(model.vae_encode(img), img.height, img.width);
            acc += std::min(psnr(img, recon), 99.0);  // identical images would give +inf
        }
        return acc / static_cast<double>(n_check);
    };

    AdamW opt;
    VaePretrainResult result;
    (void)seed;  // reconstruction is deterministic; kept for interface symmetry
    for (std::int64_t k = 0; k < max_steps; ++k) {
        const Image& img = *images[static_cast<std::size_t>(k) % images.size()];
        Tensor target = patchify(img, model.config().latent_patch);
        Tensor recon = model.vae_decode_raw(model.vae_encode(img));
        Tensor loss = mse(recon, target);
        if (!std::isfinite(loss.value()))
            throw NumericError("pretrain_vae: non-finite loss at step " + std::to_string(k));
        backward(loss);
        clip_grad_norm(model.params(), 5.0);
        opt.step(model.params(), lr);
        zero_grads(model.params());
        result.steps = k + 1;
        if ((k + 1) % 25 == 0) {
            result.final_psnr = mean_psnr();
            if (result.final_psnr >= gate_psnr) break;
        }
    }
    if (result.final_psnr < gate_psnr) {
        result.final_psnr = mean_psnr();
        if (result.final_psnr < gate_psnr)
            throw NumericError("pretrain_vae: reconstruction stalled at " +
                               std::to_string(result.final_psnr) + " dB");
    }

    for (auto& [name, p] : model.params())
        if (UnifiedModel::group_of(name) == "vae") p.set_requires_grad(false);
    return result;
}

// ---------------------------------------------------------------------------
// full curriculum
// ---------------------------------------------------------------------------

struct CurriculumResult {
    VaePretrainResult vae;
    std::vector<StageResult> stages;
};

/// Stage-0 autoencoder fit, then the staged recipe in order. When out_dir is
/// nonempty, writes per-stage traces plus raw and EMA checkpoints.
inline CurriculumResult run_curriculum(UnifiedModel& model, const std::vector<StageConfig>& stages,
                                       const std::vector<Sample>& samples, std::uint64_t seed,
                                       const std::string& out_dir = "",
                                       const TrainHooks& hooks = {},
                                       const VaePretrainOptions& vopt = {}) {
    namespace fs = std::filesystem;
    if (stages.empty()) throw ParamError("run_curriculum: no stages");
    if (!out_dir.empty()) fs::create_directories(out_dir);

    CurriculumResult result;
    result.vae = pretrain_vae(model, samples, derive_seed(seed, "stage0"), vopt);
    if (!out_dir.empty()) ckpt::save((fs::path(out_dir) / "stage0.vae.ckpt").string(), model.state());

    for (const auto& stage : stages) {
        StageResult sr = train_stage(model, stage, samples,
                                     derive_seed(seed, "stage" + std::to_string(stage.stage_id)),
                                     hooks);
        if (!out_dir.empty()) {
            const std::string base = "stage" + std::to_string(stage.stage_id);
            write_trace_csv(sr.rows, (fs::path(out_dir) / (base + ".trace.csv")).string());
            ckpt::save((fs::path(out_dir) / (base + ".raw.ckpt")).string(), model.state());
            std::map<std::string, Tensor> ema_state = model.state();
            for (const auto& [name, values] : sr.ema_values) {
                Tensor& t = ema_state.at(name);
                std::copy(values.begin(), values.end(), t.data().begin());
            }
            ckpt::save((fs::path(out_dir) / (base + ".ema.ckpt")).string(), ema_state);
        }
        result.stages.push_back(std::move(sr));
    }
    return result;
}

}  // namespace duet
