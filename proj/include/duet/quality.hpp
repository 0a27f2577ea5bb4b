#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "duet/datagen.hpp"
#include "duet/error.hpp"

namespace duet {

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

struct QualityConfig {
    std::int64_t min_side = 128;   // smallest acceptable image side
    std::int64_t len_min = 16;     // text length bounds, inclusive
    std::int64_t len_max = 1024;
    double retain_fraction = 0.5;  // top slice kept after scoring

    void validate() const {
        if (min_side < 1) throw ParamError("QualityConfig: min_side below 1");
        if (len_min < 0 || len_max < len_min) throw ParamError("QualityConfig: bad length bounds");
        if (retain_fraction < 0.0 || retain_fraction > 1.0)
            throw ParamError("QualityConfig: retain_fraction outside [0,1]");
    }

    static QualityConfig from_kv(const KvFile& kv) {
        QualityConfig c;
        c.min_side = kv.get_i64("qc.min_side", c.min_side);
        c.len_min = kv.get_i64("qc.len_min", c.len_min);
        c.len_max = kv.get_i64("qc.len_max", c.len_max);
        c.retain_fraction = kv.get_f64("qc.retain_fraction", c.retain_fraction);
        c.validate();
        return c;
    }
};

// ---------------------------------------------------------------------------
// coarse filter
// ---------------------------------------------------------------------------

/// Cheap structural gate ahead of scoring. Boundary values pass: an image
/// whose smallest side equals min_side and text of exactly len_min or
/// len_max characters are all acceptable.
inline bool coarse_filter(const Sample& s, const QualityConfig& cfg) {
    cfg.validate();
    const std::string& text = s.filtered_text();
    if (!s.has_image() && text.empty())
        throw ContractError("coarse_filter: record " + s.id + " has neither image nor text");
    if (s.x_v && s.x_v->min_side() < cfg.min_side) return false;
    if (s.a_v && s.a_v->min_side() < cfg.min_side) return false;
    const auto len = static_cast<std::int64_t>(text.size());
    if (len < cfg.len_min || len > cfg.len_max) return false;
    return true;
}

// ---------------------------------------------------------------------------
// scoring
// ---------------------------------------------------------------------------

struct QualityScore {
    double sim_embed = 0.0;
    double score_align = 0.0;
    double score_final = 0.0;
};

namespace detail {

/// Bag-of-character histogram over the byte alphabet, L2-normalized inner
/// product. 1.0 iff the two strings are permutations of each other.
inline double char_cosine(const std::string& a, const std::string& b) {
    if (a.empty() || b.empty()) return 0.0;
    std::array<double, 256> ha{}, hb{};
    for (unsigned char c : a) ha[c] += 1.0;
    for (unsigned char c : b) hb[c] += 1.0;
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int i = 0; i < 256; ++i) {
        dot += ha[i] * hb[i];
        na += ha[i] * ha[i];
        nb += hb[i] * hb[i];
    }
    return dot / std::sqrt(na * nb);
}

}  // namespace detail

/// Caption embedding similarity: the stored caption against the canonical
/// caption of the record's generating parameters. Records whose caption was
/// written from the true parameters score exactly 1.
inline double sim_embed(const Sample& s) {
    if (!s.params_in) throw ScoringError("sim_embed: record " + s.id + " carries no parameters");
    if (s.caption.empty()) throw ScoringError("sim_embed: record " + s.id + " has no caption");
    return detail::char_cosine(s.caption, caption(*s.params_in));
}

/// Image-text alignment: parse the stored caption back to parameters,
/// re-render at the scored image's size, and compare pixels. An exactly
/// matching caption reproduces the image and scores 1; an unparseable
/// caption scores 0.
inline double score_align(const Sample& s) {
    const Image& img = s.scored_image();
    SceneParams p;
    try {
        p = parse_caption(s.caption);
    } catch (const ValidationError&) {
        return 0.0;
    }
    Image ref = render(p, img.height);
    if (ref.width != img.width || ref.height != img.height || ref.channels != img.channels) return 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < img.pixels.size(); ++i) acc += std::abs(img.pixels[i] - ref.pixels[i]);
    return 1.0 - acc / static_cast<double>(img.pixels.size());
}

inline QualityScore score_sample(const Sample& s) {
    QualityScore q;
    q.sim_embed = sim_embed(s);
    q.score_align = score_align(s);
    q.score_final = 0.5 * q.sim_embed + q.score_align;
    return q;
}

// ---------------------------------------------------------------------------
// external scorer process
// ---------------------------------------------------------------------------

/// Line-delimited JSON over pipes to a child process: one request object
/// per line on its stdin, one response object per line on its stdout. The
/// child must flush after each line.
class LineJsonProcess {
  public:
    explicit LineJsonProcess(const std::vector<std::string>& argv) {
        if (argv.empty()) throw ParamError("LineJsonProcess: empty command");
        int to_child[2], from_child[2];
        if (pipe(to_child) != 0 || pipe(from_child) != 0)
            throw ScoringError("LineJsonProcess: pipe failed");
        pid_ = fork();
        if (pid_ < 0) throw ScoringError("LineJsonProcess: fork failed");
        if (pid_ == 0) {
            dup2(to_child[0], 0);
            dup2(from_child[1], 1);
            close(to_child[0]);
            close(to_child[1]);
            close(from_child[0]);
            close(from_child[1]);
            std::vector<char*> args;
            for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
            args.push_back(nullptr);
            execvp(args[0], args.data());
            std::perror("LineJsonProcess exec");
            _exit(127);
        }
        close(to_child[0]);
        close(from_child[1]);
        in_fd_ = to_child[1];
        out_ = fdopen(from_child[0], "r");
        if (!out_) throw ScoringError("LineJsonProcess: fdopen failed");
    }

    LineJsonProcess(const LineJsonProcess&) = delete;
    LineJsonProcess& operator=(const LineJsonProcess&) = delete;

    ~LineJsonProcess() {
        if (in_fd_ >= 0) close(in_fd_);
        if (out_) fclose(out_);
        if (pid_ > 0) {
            int status = 0;
            waitpid(pid_, &status, 0);
        }
    }

    nlohmann::json round_trip(const nlohmann::json& req) {
        std::string line = req.dump();
        line.push_back('\n');
        std::size_t off = 0;
        while (off < line.size()) {
            const ssize_t n = write(in_fd_, line.data() + off, line.size() - off);
            if (n <= 0) throw ScoringError("LineJsonProcess: write to child failed");
            off += static_cast<std::size_t>(n);
        }
        std::string resp;
        int c;
        while ((c = fgetc(out_)) != EOF && c != '\n') resp.push_back(static_cast<char>(c));
        if (resp.empty()) throw ScoringError("LineJsonProcess: child closed stream");
        try {
            return nlohmann::json::parse(resp);
        } catch (const nlohmann::json::exception& e) {
            throw ScoringError(std::string("LineJsonProcess: bad response: ") + e.what());
        }
    }

  private:
    pid_t pid_ = -1;
    int in_fd_ = -1;
    std::FILE* out_ = nullptr;
};

/// Scoring delegated to an external process. Request:
/// {"id":..,"caption":..,"image":..}; response: {"id":..,"sim":..,"align":..}.
class ProcessScorer {
  public:
    explicit ProcessScorer(const std::vector<std::string>& argv) : proc_(argv) {}

    std::pair<double, double> score(const std::string& id, const std::string& caption,
                                    const std::string& image_path) {
        nlohmann::ordered_json req;
        req["id"] = id;
        req["caption"] = caption;
        req["image"] = image_path;
        const nlohmann::json j = proc_.round_trip(req);
        if (!j.contains("id") || j["id"].get<std::string>() != id)
            throw ScoringError("ProcessScorer: response id mismatch");
        if (!j.contains("sim") || !j.contains("align"))
            throw ScoringError("ProcessScorer: response missing scores");
        return {j["sim"].get<double>(), j["align"].get<double>()};
    }

  private:
    LineJsonProcess proc_;
};

// ---------------------------------------------------------------------------
// retention
// ---------------------------------------------------------------------------

/// Keep the top ceil(n * fraction) ids by final score, descending; equal
/// scores break toward the lexically smaller id so the cut is total-ordered.
inline std::vector<std::string> retain_top(std::vector<std::pair<std::string, double>> scored,
                                           double fraction) {
    if (fraction < 0.0 || fraction > 1.0) throw ParamError("retain_top: fraction outside [0,1]");
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    const auto n = static_cast<std::int64_t>(scored.size());
    const auto keep = static_cast<std::int64_t>(
        std::ceil(static_cast<double>(n) * fraction));
    std::vector<std::string> out;
    out.reserve(static_cast<std::size_t>(keep));
    for (std::int64_t i = 0; i < keep; ++i) out.push_back(scored[static_cast<std::size_t>(i)].first);
    return out;
}

// ---------------------------------------------------------------------------
// pipeline
// ---------------------------------------------------------------------------

struct ScoreRow {
    std::string id;
    QualityScore score;
    bool kept = false;
};

struct QcResult {
    std::vector<Sample> kept;        // original order
    std::vector<ScoreRow> rows;      // image-bearing records that passed the coarse gate
    std::int64_t n_input = 0;
    std::int64_t n_coarse_rejected = 0;
    std::int64_t n_score_rejected = 0;
};

/// Full pass: coarse gate on every record, scoring plus top-slice retention
/// on image-bearing records. Text-only records carry no image to score, so
/// the ranked cut does not apply to them.
inline QcResult run_qc(const std::vector<Sample>& samples, const QualityConfig& cfg) {
    cfg.validate();
    QcResult r;
    r.n_input = static_cast<std::int64_t>(samples.size());
    std::vector<const Sample*> survivors;
    for (const auto& s : samples) {
        if (coarse_filter(s, cfg)) survivors.push_back(&s);
        else ++r.n_coarse_rejected;
    }
    std::vector<std::pair<std::string, double>> ranked;
    std::map<std::string, ScoreRow> by_id;
    for (const Sample* s : survivors) {
        if (!s->has_image()) continue;
        ScoreRow row;
        row.id = s->id;
        row.score = score_sample(*s);
        ranked.emplace_back(s->id, row.score.score_final);
        by_id[s->id] = row;
    }
    const std::vector<std::string> kept_ids = retain_top(ranked, cfg.retain_fraction);
    for (const auto& id : kept_ids) by_id[id].kept = true;
    for (const Sample* s : survivors) {
        if (!s->has_image() || by_id[s->id].kept) r.kept.push_back(*s);
        else ++r.n_score_rejected;
        if (s->has_image()) r.rows.push_back(by_id[s->id]);
    }
    return r;
}

inline void write_scores_csv(const std::vector<ScoreRow>& rows, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("write_scores_csv: cannot open " + path);
    os << "id,sim_embed,score_align,score_final,kept\n";
    char buf[128];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g", r.score.sim_embed, r.score.score_align,
                      r.score.score_final);
        os << r.id << ',' << buf << ',' << (r.kept ? 1 : 0) << '\n';
    }
    if (!os) throw IoError("write_scores_csv: write failed");
}

// ---------------------------------------------------------------------------
// expert review round trip
// ---------------------------------------------------------------------------

/// Scores a reviewer assigns to one record. All fields optional in a
/// template; a filled record needs every axis. Axes are 0..5, the modality
/// check is binary.
struct ReviewRecord {
    std::string id;
    std::optional<int> modality_match;  // 0 or 1
    std::optional<int> factual_accuracy;
    std::optional<int> information_completeness;
    std::optional<int> position_quantity_accuracy;
    std::optional<int> professionalism;
    std::optional<int> planning_coherence;
    std::optional<int> clinical_reasoning;
    std::string reviewer;
    std::string notes;

    static const std::vector<std::string>& axis_names() {
        static const std::vector<std::string> names = {
            "factual_accuracy",       "information_completeness", "position_quantity_accuracy",
            "professionalism",        "planning_coherence",       "clinical_reasoning"};
        return names;
    }

    std::optional<int>& axis(const std::string& name) {
        if (name == "factual_accuracy") return factual_accuracy;
        if (name == "information_completeness") return information_completeness;
        if (name == "position_quantity_accuracy") return position_quantity_accuracy;
        if (name == "professionalism") return professionalism;
        if (name == "planning_coherence") return planning_coherence;
        if (name == "clinical_reasoning") return clinical_reasoning;
        throw ParamError("ReviewRecord: unknown axis " + name);
    }

    bool filled() const {
        return modality_match && factual_accuracy && information_completeness &&
               position_quantity_accuracy && professionalism && planning_coherence &&
               clinical_reasoning;
    }

    bool any_filled() const {
        return modality_match || factual_accuracy || information_completeness ||
               position_quantity_accuracy || professionalism || planning_coherence ||
               clinical_reasoning;
    }

    void validate() const {
        if (id.empty()) throw ValidationError("ReviewRecord: empty id");
        if (!filled()) throw ValidationError("ReviewRecord " + id + ": missing score fields");
        if (*modality_match != 0 && *modality_match != 1)
            throw ValidationError("ReviewRecord " + id + ": modality_match must be 0 or 1");
        const std::optional<int>* axes[] = {&factual_accuracy,  &information_completeness,
                                            &position_quantity_accuracy, &professionalism,
                                            &planning_coherence, &clinical_reasoning};
        for (const auto* a : axes)
            if (**a < 0 || **a > 5)
                throw ValidationError("ReviewRecord " + id + ": axis score outside 0..5");
    }
};

/// JSON-lines template with null score fields for human completion.
inline void write_review_template(const std::vector<Sample>& samples, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("write_review_template: cannot open " + path);
    for (const auto& s : samples) {
        nlohmann::ordered_json j;
        j["id"] = s.id;
        j["modality_match"] = nullptr;
        for (const auto& axis : ReviewRecord::axis_names()) j[axis] = nullptr;
        j["reviewer"] = "";
        j["notes"] = "";
        os << j.dump() << '\n';
    }
    if (!os) throw IoError("write_review_template: write failed");
}

inline std::vector<ReviewRecord> load_reviews(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("load_reviews: cannot open " + path);
    std::vector<ReviewRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("load_reviews: line " + std::to_string(lineno) + ": " + e.what());
        }
        ReviewRecord r;
        if (!j.contains("id")) throw ValidationError("load_reviews: line " + std::to_string(lineno) + " missing id");
        r.id = j["id"].get<std::string>();
        auto take = [&](const char* key) -> std::optional<int> {
            if (!j.contains(key) || j[key].is_null()) return std::nullopt;
            if (!j[key].is_number_integer())
                throw ValidationError("load_reviews: " + r.id + ": " + key + " not an integer");
            return j[key].get<int>();
        };
        r.modality_match = take("modality_match");
        for (const auto& axis : ReviewRecord::axis_names()) r.axis(axis) = take(axis.c_str());
        if (j.contains("reviewer") && j["reviewer"].is_string()) r.reviewer = j["reviewer"].get<std::string>();
        if (j.contains("notes") && j["notes"].is_string()) r.notes = j["notes"].get<std::string>();
        if (r.any_filled()) {
            if (!r.filled())
                throw ValidationError("load_reviews: " + r.id + ": partially filled record");
            r.validate();
        }
        out.push_back(std::move(r));
    }
    return out;
}

struct ReviewSummary {
    std::int64_t n_records = 0;
    double modality_match_rate = 0.0;
    std::map<std::string, double> axis_means;
};

inline ReviewSummary summarize_reviews(const std::vector<ReviewRecord>& reviews) {
    ReviewSummary s;
    double match = 0.0;
    std::map<std::string, double> sums;
    for (auto r : reviews) {
        if (!r.modality_match) continue;  // unfilled template rows
        r.validate();
        ++s.n_records;
        match += *r.modality_match;
        for (const auto& axis : ReviewRecord::axis_names()) sums[axis] += static_cast<double>(*r.axis(axis));
    }
    if (s.n_records == 0) return s;
    s.modality_match_rate = match / static_cast<double>(s.n_records);
    for (const auto& [k, v] : sums) s.axis_means[k] = v / static_cast<double>(s.n_records);
    return s;
}

}  // namespace duet
