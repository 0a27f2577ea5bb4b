#pragma once

#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "duet/error.hpp"

namespace duet {

enum class TaskCategory { TEXT, T2I, I2T, INTERLEAVED };

inline const char* category_name(TaskCategory c) {
    switch (c) {
        case TaskCategory::TEXT: return "text";
        case TaskCategory::T2I: return "t2i";
        case TaskCategory::I2T: return "i2t";
        case TaskCategory::INTERLEAVED: return "interleaved";
    }
    throw ParamError("category_name: bad enum value");
}

inline TaskCategory category_from(const std::string& s) {
    if (s == "text") return TaskCategory::TEXT;
    if (s == "t2i") return TaskCategory::T2I;
    if (s == "i2t") return TaskCategory::I2T;
    if (s == "interleaved") return TaskCategory::INTERLEAVED;
    throw ValidationError("unknown task category '" + s + "'");
}

/// Flat key=value file: one pair per line, '#' starts a comment, blank lines
/// skipped. Keys are dotted paths.
class KvFile {
  public:
    KvFile() = default;

    static KvFile parse(std::istream& is) {
        KvFile kv;
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const auto first = line.find_first_not_of(" \t\r");
            if (first == std::string::npos) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ValidationError("config line " + std::to_string(lineno) + ": missing '='");
            auto trim = [](std::string s) {
                const auto b = s.find_first_not_of(" \t\r");
                const auto e = s.find_last_not_of(" \t\r");
                return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
            };
            std::string key = trim(line.substr(0, eq));
            std::string val = trim(line.substr(eq + 1));
            if (key.empty()) throw ValidationError("config line " + std::to_string(lineno) + ": empty key");
            kv.values_[key] = val;
        }
        return kv;
    }

    static KvFile load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw IoError("config: cannot open " + path);
        return parse(is);
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get_str(const std::string& key, const std::string& dflt) const {
        auto it = values_.find(key);
        return it == values_.end() ? dflt : it->second;
    }

    std::int64_t get_i64(const std::string& key, std::int64_t dflt) const {
        auto it = values_.find(key);
        if (it == values_.end()) return dflt;
        try {
            std::size_t pos = 0;
            const std::int64_t v = std::stoll(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("");
            return v;
        } catch (const std::exception&) {
            throw ValidationError("config: key '" + key + "' is not an integer: " + it->second);
        }
    }

    double get_f64(const std::string& key, double dflt) const {
        auto it = values_.find(key);
        if (it == values_.end()) return dflt;
        try {
            std::size_t pos = 0;
            const double v = std::stod(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("");
            return v;
        } catch (const std::exception&) {
            throw ValidationError("config: key '" + key + "' is not a number: " + it->second);
        }
    }

    bool get_bool(const std::string& key, bool dflt) const {
        auto it = values_.find(key);
        if (it == values_.end()) return dflt;
        if (it->second == "true" || it->second == "1") return true;
        if (it->second == "false" || it->second == "0") return false;
        throw ValidationError("config: key '" + key + "' is not a bool: " + it->second);
    }

    const std::map<std::string, std::string>& values() const { return values_; }

  private:
    std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// model geometry
// ---------------------------------------------------------------------------

struct ModelConfig {
    std::int64_t width = 64;        // backbone hidden size d
    std::int64_t depth = 2;         // backbone layers
    std::int64_t vit_depth = 2;     // visual encoder layers
    std::int64_t vit_width = 16;    // d_v
    std::int64_t patch = 4;         // vit patch size
    std::int64_t latent_patch = 4;  // vae patch size
    std::int64_t latent_dim = 8;    // d_z
    std::int64_t vocab = 64;
    std::int64_t image_size = 16;
    std::int64_t channels = 1;
    std::int64_t mlp_mult = 4;
    std::int64_t time_features = 16;  // sinusoidal features ahead of time_embed
    std::int64_t max_positions = 512;
    double dropout = 0.0;
    bool vae_sees_vit = false;  // interleaved mask policy switch

    void validate() const {
        if (width <= 0 || depth <= 0 || vit_depth <= 0 || vit_width <= 0 || latent_dim <= 0)
            throw ParamError("ModelConfig: dimensions must be positive");
        if (patch <= 0 || image_size % patch != 0)
            throw ParamError("ModelConfig: patch must divide image_size");
        if (latent_patch <= 0 || image_size % latent_patch != 0)
            throw ParamError("ModelConfig: latent_patch must divide image_size");
        if (vocab <= 0 || max_positions <= 0 || mlp_mult <= 0 || time_features <= 0)
            throw ParamError("ModelConfig: vocab/positions/mlp/time must be positive");
        if (channels != 1 && channels != 3) throw ParamError("ModelConfig: channels must be 1 or 3");
        if (dropout < 0.0 || dropout >= 1.0) throw ParamError("ModelConfig: dropout in [0,1)");
    }

    std::int64_t vit_tokens() const { return (image_size / patch) * (image_size / patch); }
    std::int64_t vae_tokens() const { return (image_size / latent_patch) * (image_size / latent_patch); }
    std::int64_t patch_dim() const { return patch * patch * channels; }
    std::int64_t latent_patch_dim() const { return latent_patch * latent_patch * channels; }

    static ModelConfig from_kv(const KvFile& kv) {
        ModelConfig m;
        m.width = kv.get_i64("model.width", m.width);
        m.depth = kv.get_i64("model.depth", m.depth);
        m.vit_depth = kv.get_i64("model.vit_depth", m.vit_depth);
        m.vit_width = kv.get_i64("model.vit_width", m.vit_width);
        m.patch = kv.get_i64("model.patch", m.patch);
        m.latent_patch = kv.get_i64("model.latent_patch", m.latent_patch);
        m.latent_dim = kv.get_i64("model.latent_dim", m.latent_dim);
        m.vocab = kv.get_i64("model.vocab", m.vocab);
        m.image_size = kv.get_i64("model.image_size", m.image_size);
        m.channels = kv.get_i64("model.channels", m.channels);
        m.mlp_mult = kv.get_i64("model.mlp_mult", m.mlp_mult);
        m.time_features = kv.get_i64("model.time_features", m.time_features);
        m.max_positions = kv.get_i64("model.max_positions", m.max_positions);
        m.dropout = kv.get_f64("model.dropout", m.dropout);
        m.vae_sees_vit = kv.get_bool("model.vae_sees_vit", m.vae_sees_vit);
        m.validate();
        return m;
    }
};

// ---------------------------------------------------------------------------
// training schedule
// ---------------------------------------------------------------------------

/// Two-weight combined loss, total = w_ce * L_text + w_mse * L_flow. The
/// equivalent single-knob form (flow weight relative to unit text weight) is
/// kept alongside for reporting.
struct LossWeights {
    double w_ce = 0.25;
    double w_mse = 1.0;

    double alpha_equiv() const {
        if (w_ce == 0.0) return std::numeric_limits<double>::infinity();
        return w_mse / w_ce;
    }
};

struct FreezeFlags {
    bool vit = false;
    bool vae = true;  // frozen in every stage
    bool understanding = false;
    bool backbone = false;
};

struct StageConfig {
    int stage_id = 1;
    std::int64_t steps = 300;
    double lr = 5e-5;
    std::map<TaskCategory, double> mixing;  // normalized to sum 1
    FreezeFlags freeze;
    LossWeights weights;
    double ema_ratio = 0.995;
    std::int64_t max_tokens = 512;
    double grad_clip = 1.0;

    void normalize() {
        double total = 0.0;
        for (auto& [cat, f] : mixing) {
            if (f <= 0.0)
                throw ParamError(std::string("StageConfig: non-positive fraction for ") + category_name(cat));
            total += f;
        }
        if (total <= 0.0) throw ParamError("StageConfig: empty mixing");
        for (auto& [cat, f] : mixing) f /= total;
    }

    void validate() const {
        if (stage_id < 1 || stage_id > 3) throw ParamError("StageConfig: stage_id must be 1..3");
        if (steps <= 0) throw ParamError("StageConfig: steps must be positive");
        if (lr <= 0.0) throw ParamError("StageConfig: lr must be positive");
        if (!(ema_ratio > 0.0 && ema_ratio < 1.0)) throw ParamError("StageConfig: ema_ratio in (0,1)");
        if (!freeze.vae) throw ParamError("StageConfig: vae must stay frozen");
        double total = 0.0;
        for (auto& [cat, f] : mixing) total += f;
        if (std::abs(total - 1.0) > 1e-9) throw ParamError("StageConfig: mixing must be normalized");
    }
};

/// The published schedule: learning-rate ladder 5e-5 / 2.5e-5 / 1e-5,
/// sampling mixes per stage (stage 1 rows sum to 105 and are renormalized),
/// visual encoder trainable only in stage 1, latent autoencoder always
/// frozen, EMA 0.995, loss weights 0.25 : 1.0. Step counts are desk-scale
/// stand-ins for the production 85K/120K/70K.
inline StageConfig default_stage(int stage_id) {
    StageConfig s;
    s.stage_id = stage_id;
    switch (stage_id) {
        case 1:
            s.steps = 300;
            s.lr = 5e-5;
            s.mixing = {{TaskCategory::TEXT, 5.0}, {TaskCategory::T2I, 25.0}, {TaskCategory::I2T, 75.0}};
            s.freeze.vit = false;
            break;
        case 2:
            s.steps = 400;
            s.lr = 2.5e-5;
            s.mixing = {{TaskCategory::TEXT, 5.0},
                        {TaskCategory::T2I, 45.0},
                        {TaskCategory::I2T, 40.0},
                        {TaskCategory::INTERLEAVED, 10.0}};
            s.freeze.vit = true;
            break;
        case 3:
            s.steps = 300;
            s.lr = 1e-5;
            s.mixing = {{TaskCategory::TEXT, 3.0},
                        {TaskCategory::T2I, 35.0},
                        {TaskCategory::I2T, 37.0},
                        {TaskCategory::INTERLEAVED, 25.0}};
            s.freeze.vit = true;
            break;
        default:
            throw ParamError("default_stage: stage_id must be 1..3");
    }
    s.normalize();
    s.validate();
    return s;
}

/// default_stage with per-stage overrides from config keys
/// stageN.{steps,lr,ema_ratio,grad_clip,w_ce,w_mse}.
inline StageConfig stage_from_kv(int stage_id, const KvFile& kv) {
    StageConfig s = default_stage(stage_id);
    const std::string p = "stage" + std::to_string(stage_id) + ".";
    s.steps = kv.get_i64(p + "steps", s.steps);
    s.lr = kv.get_f64(p + "lr", s.lr);
    s.ema_ratio = kv.get_f64(p + "ema_ratio", s.ema_ratio);
    s.grad_clip = kv.get_f64(p + "grad_clip", s.grad_clip);
    s.weights.w_ce = kv.get_f64(p + "w_ce", s.weights.w_ce);
    s.weights.w_mse = kv.get_f64(p + "w_mse", s.weights.w_mse);
    s.max_tokens = kv.get_i64(p + "max_tokens", s.max_tokens);
    s.validate();
    return s;
}

}  // namespace duet
