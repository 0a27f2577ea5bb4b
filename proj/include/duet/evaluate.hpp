#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "duet/datagen.hpp"
#include "duet/metrics.hpp"
#include "duet/model.hpp"
#include "duet/objectives.hpp"
#include "duet/quality.hpp"
#include "duet/tokenizer.hpp"
#include "duet/trainer.hpp"

namespace duet {

// ---------------------------------------------------------------------------
// text generation and matching
// ---------------------------------------------------------------------------

/// Greedy autoregressive completion of "[BOS] prompt [SEP]", optionally
/// image-conditioned, argmax with ties toward the lowest id, stopping at EOS
/// or the window budget. Returns the decoded completion text.
inline std::string greedy_decode(const UnifiedModel& model, const std::string& prompt,
                                 const Image* image, std::int64_t max_new = 192) {
    NoGradGuard ng;
    const Tokenizer& tok = tokenizer();
    std::vector<std::int64_t> ids = {Tokenizer::kBos};
    for (auto id : tok.encode(prompt)) ids.push_back(id);
    ids.push_back(Tokenizer::kSep);
    const std::size_t prefix = ids.size();

    Tensor z_vit;
    std::int64_t n_vit = 0;
    if (image) {
        z_vit = model.vit_encode(*image);
        n_vit = z_vit.dim(0);
    }
    const std::int64_t budget =
        std::min(max_new, model.config().max_positions - n_vit - static_cast<std::int64_t>(prefix));
    for (std::int64_t k = 0; k < budget; ++k) {
        TokenSequence seq = build_sequence(ids, z_vit, Tensor(), SequenceMode::UNDERSTAND);
        Tensor hidden = model.mot_forward(seq);
        Tensor logits = model.lm_logits(hidden, seq.rows_with(ModalityTag::TEXT));
        const std::int64_t vocab = logits.dim(1);
        const std::int64_t last = logits.dim(0) - 1;
        std::int64_t best = 0;
        double best_score = logits.data()[static_cast<std::size_t>(last * vocab)];
        for (std::int64_t v = 1; v < vocab; ++v) {
            const double sc = logits.data()[static_cast<std::size_t>(last * vocab + v)];
            if (sc > best_score) {
                best_score = sc;
                best = v;
            }
        }
        if (best == Tokenizer::kEos) break;
        ids.push_back(best);
    }
    return tok.decode(std::vector<std::int64_t>(ids.begin() + static_cast<std::ptrdiff_t>(prefix),
                                                ids.end()));
}

/// Drops a leading <think>...</think> block plus following whitespace.
inline std::string strip_think(const std::string& s) {
    if (s.rfind("<think>", 0) != 0) return s;
    const auto end = s.find("</think>");
    if (end == std::string::npos) return s;
    std::size_t start = end + std::string("</think>").size();
    while (start < s.size() && std::isspace(static_cast<unsigned char>(s[start]))) ++start;
    return s.substr(start);
}

/// Case folding plus whitespace collapse; the equivalence used for answer
/// matching.
inline std::string normalize_answer(const std::string& s) {
    std::string out;
    bool pending_space = false;
    for (char raw : s) {
        const auto c = static_cast<unsigned char>(raw);
        if (std::isspace(c)) {
            if (!out.empty()) pending_space = true;
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(static_cast<char>(std::tolower(c)));
    }
    return out;
}

/// Fraction of hypothesis strings exactly matching their reference after
/// normalization.
inline double answer_accuracy(const std::vector<std::string>& refs,
                              const std::vector<std::string>& hyps) {
    if (refs.size() != hyps.size()) throw ValidationError("answer_accuracy: length mismatch");
    if (refs.empty()) throw ValidationError("answer_accuracy: empty inputs");
    double hits = 0.0;
    for (std::size_t i = 0; i < refs.size(); ++i)
        if (normalize_answer(refs[i]) == normalize_answer(hyps[i])) hits += 1.0;
    return hits / static_cast<double>(refs.size());
}

// ---------------------------------------------------------------------------
// feature extraction
// ---------------------------------------------------------------------------

using FeatureFn = std::function<std::vector<double>(const Image&)>;

constexpr const char* kDefaultExtractorId = "frozen-vit-mean-pool";
constexpr const char* kDefaultPreprocessing = "native-resolution, values in [0,1], no resize";

/// Default extractor: the model's frozen visual encoder, mean-pooled over
/// its token grid.
inline FeatureFn vit_feature_fn(const UnifiedModel& model) {
    return [&model](const Image& img) {
        NoGradGuard ng;
        Tensor z = model.vit_encode(img);
        const std::int64_t n = z.dim(0), d = z.dim(1);
        std::vector<double> out(static_cast<std::size_t>(d), 0.0);
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < d; ++j)
                out[static_cast<std::size_t>(j)] += z.data()[static_cast<std::size_t>(i * d + j)];
        for (auto& v : out) v /= static_cast<double>(n);
        return out;
    };
}

/// External extractor speaking the line-JSON protocol: request
/// {"id":..,"image":..} (path to a just-written image), response
/// {"id":..,"features":[...]}. scratch_dir holds the handoff files.
inline FeatureFn process_feature_fn(const std::vector<std::string>& argv,
                                    const std::string& scratch_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(scratch_dir);
    auto proc = std::make_shared<LineJsonProcess>(argv);
    auto counter = std::make_shared<std::int64_t>(0);
    return [proc, counter, scratch_dir](const Image& img) {
        const std::string id = "extract-" + std::to_string((*counter)++);
        const std::string path = (fs::path(scratch_dir) / (id + ".pgm")).string();
        write_pnm(path, img);
        nlohmann::ordered_json req;
        req["id"] = id;
        req["image"] = path;
        const nlohmann::json resp = proc->round_trip(req);
        if (!resp.contains("id") || resp["id"].get<std::string>() != id)
            throw ScoringError("process_feature_fn: response id mismatch");
        if (!resp.contains("features") || !resp["features"].is_array())
            throw ScoringError("process_feature_fn: response missing features");
        return resp["features"].get<std::vector<double>>();
    };
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

struct EvalOptions {
    std::uint64_t seed = 0;
    std::int64_t sample_steps = 20;
    std::string out_dir;  // when set, generated images are written under gen/
    std::string extractor_id = kDefaultExtractorId;
    std::string preprocessing = kDefaultPreprocessing;
};

/// Overridable generation/extraction back ends; defaults drive the model.
struct EvalHooks {
    std::function<Image(const Sample&)> gen_image;
    std::function<std::string(const Sample&)> gen_text;
    FeatureFn features;
};

namespace detail {

inline nlohmann::ordered_json metric_value(double v) {
    // JSON has no inf literal; the sentinel keeps reports parseable
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
}

}  // namespace detail

/// Full pass over an evaluation split: text accuracy for question records,
/// distributional and alignment scores for text-to-image records, fidelity
/// metrics for image-to-image kinds, edited-region fidelity plus explanation
/// accuracy for counterfactuals. Refuses any record not carrying the eval
/// split prefix, so training data can never leak into a report.
inline nlohmann::ordered_json evaluate(const UnifiedModel& model, const std::vector<Sample>& records,
                                       const EvalOptions& opt, EvalHooks hooks = {}) {
    namespace fs = std::filesystem;
    if (records.empty()) throw ValidationError("evaluate: empty split");
    for (const auto& s : records)
        if (s.id.rfind("eval-", 0) != 0)
            throw ContractError("evaluate: record " + s.id + " is not from the eval split");

    if (!hooks.gen_text)
        hooks.gen_text = [&](const Sample& s) {
            return greedy_decode(model, s.q, s.x_v ? &*s.x_v : nullptr);
        };
    if (!hooks.gen_image)
        hooks.gen_image = [&](const Sample& s) {
            // counterfactuals condition on the edit instruction alone; the
            // reference explanation is an output, never an input
            std::vector<std::int64_t> cond;
            if (s.kind && *s.kind == InterleavedKind::COUNTERFACTUAL) {
                cond.push_back(Tokenizer::kBos);
                for (auto id : tokenizer().encode(s.q)) cond.push_back(id);
                cond.push_back(Tokenizer::kSep);
            } else {
                cond = tokenizer().encode(s.a_t, true, true);
            }
            const std::uint64_t seed = derive_seed(opt.seed, "sample-" + s.id);
            if (s.task == TaskCategory::T2I)
                return euler_sample(model, cond, opt.sample_steps, seed);
            Tensor z_vit = model.vit_encode(*s.x_v);
            return euler_sample(model, cond, opt.sample_steps, seed, &z_vit);
        };
    if (!hooks.features) hooks.features = vit_feature_fn(model);

    std::optional<fs::path> gen_dir;
    if (!opt.out_dir.empty()) {
        gen_dir = fs::path(opt.out_dir) / "gen";
        fs::create_directories(*gen_dir);
    }
    auto emit = [&](const Sample& s, const Image& img) {
        if (gen_dir) write_pnm((*gen_dir / (s.id + ".pgm")).string(), quantize8(img));
    };

    std::map<std::string, std::int64_t> counts;
    for (const auto& s : records) {
        std::string key = category_name(s.task);
        if (s.kind) key += std::string(":") + kind_name(*s.kind);
        ++counts[key];
    }

    nlohmann::ordered_json report;
    report["split"] = "eval";
    report["n_records"] = records.size();
    report["seed"] = opt.seed;
    report["sample_steps"] = opt.sample_steps;
    {
        nlohmann::ordered_json jc;
        for (const auto& [k, v] : counts) jc[k] = v;
        report["counts"] = jc;
    }

    // ---- question answering ---------------------------------------------
    {
        std::vector<std::string> refs, hyps;
        for (const auto& s : records) {
            if (s.task != TaskCategory::I2T) continue;
            refs.push_back(s.a_t);
            hyps.push_back(strip_think(hooks.gen_text(s)));
        }
        if (!refs.empty()) {
            nlohmann::ordered_json j;
            j["n"] = refs.size();
            j["answer_accuracy"] = answer_accuracy(refs, hyps);
            report["i2t"] = j;
        }
    }

    // ---- text-to-image ---------------------------------------------------
    {
        std::vector<const Sample*> t2i;
        for (const auto& s : records)
            if (s.task == TaskCategory::T2I) t2i.push_back(&s);
        if (!t2i.empty()) {
            std::optional<FeatureStats> ref_stats, gen_stats;
            double align_acc = 0.0;
            for (const Sample* s : t2i) {
                const Image gen = hooks.gen_image(*s);
                emit(*s, gen);
                const std::vector<double> fr = hooks.features(*s->a_v);
                const std::vector<double> fg = hooks.features(gen);
                if (!ref_stats) {
                    ref_stats.emplace(static_cast<std::int64_t>(fr.size()));
                    gen_stats.emplace(static_cast<std::int64_t>(fg.size()));
                }
                ref_stats->add(fr);
                gen_stats->add(fg);
                Sample scored;
                scored.id = s->id;
                scored.task = TaskCategory::T2I;
                scored.caption = s->caption;
                scored.a_v = gen;
                align_acc += score_align(scored);
            }
            nlohmann::ordered_json j;
            j["n"] = t2i.size();
            j["frechet"] = detail::metric_value(frechet_distance(*gen_stats, *ref_stats));
            j["mean_align"] = align_acc / static_cast<double>(t2i.size());
            j["extractor"] = opt.extractor_id;
            j["preprocessing"] = opt.preprocessing;
            report["t2i"] = j;
        }
    }

    // ---- image-conditioned reconstruction kinds --------------------------
    for (InterleavedKind kind :
         {InterleavedKind::SUPERRES, InterleavedKind::STAIN, InterleavedKind::CROSSMODAL}) {
        std::vector<const Sample*> recs;
        for (const auto& s : records)
            if (s.task == TaskCategory::INTERLEAVED && *s.kind == kind) recs.push_back(&s);
        if (recs.empty()) continue;
        double psnr_acc = 0.0, ssim_acc = 0.0;
        for (const Sample* s : recs) {
            const Image gen = hooks.gen_image(*s);
            emit(*s, gen);
            psnr_acc += psnr(gen, *s->a_v);
            ssim_acc += ssim(gen, *s->a_v);
        }
        nlohmann::ordered_json j;
        j["n"] = recs.size();
        j["psnr"] = detail::metric_value(psnr_acc / static_cast<double>(recs.size()));
        j["ssim"] = ssim_acc / static_cast<double>(recs.size());
        report[kind_name(kind)] = j;
    }

    // ---- counterfactual editing ------------------------------------------
    {
        std::vector<const Sample*> recs;
        for (const auto& s : records)
            if (s.task == TaskCategory::INTERLEAVED && *s.kind == InterleavedKind::COUNTERFACTUAL)
                recs.push_back(&s);
        if (!recs.empty()) {
            double psnr_acc = 0.0;
            std::vector<std::string> refs, hyps;
            for (const Sample* s : recs) {
                const Image gen = hooks.gen_image(*s);
                emit(*s, gen);
                if (!s->params_in) throw ContractError("evaluate: counterfactual " + s->id +
                                                       " lacks scene parameters");
                psnr_acc += psnr_region(gen, *s->a_v, lesion_box(*s->params_in, s->a_v->height));
                refs.push_back(s->a_t);
                hyps.push_back(strip_think(hooks.gen_text(*s)));
            }
            nlohmann::ordered_json j;
            j["n"] = recs.size();
            j["psnr_edit_region"] = detail::metric_value(psnr_acc / static_cast<double>(recs.size()));
            j["explanation_accuracy"] = answer_accuracy(refs, hyps);
            report["counterfactual"] = j;
        }
    }

    return report;
}

inline void write_report(const nlohmann::ordered_json& report, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("write_report: cannot open " + path);
    os << report.dump(2) << '\n';
    if (!os) throw IoError("write_report: write failed");
}

}  // namespace duet
