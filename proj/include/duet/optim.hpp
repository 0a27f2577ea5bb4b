#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "duet/error.hpp"
#include "duet/tensor.hpp"

namespace duet {

/// AdamW with decoupled weight decay. A parameter is updated only when it is
/// tracked and a gradient was accumulated this step; frozen or untouched
/// parameters keep their bytes and their moments.
class AdamW {
  public:
    struct Hyper {
        double beta1 = 0.9;
        double beta2 = 0.95;
        double eps = 1e-8;
        double weight_decay = 0.0;
    };

    explicit AdamW(Hyper h = {}) : h_(h) {
        if (!(h_.beta1 >= 0.0 && h_.beta1 < 1.0) || !(h_.beta2 >= 0.0 && h_.beta2 < 1.0))
            throw ParamError("AdamW: betas must lie in [0,1)");
        if (h_.eps <= 0.0) throw ParamError("AdamW: eps must be positive");
        if (h_.weight_decay < 0.0) throw ParamError("AdamW: negative weight decay");
    }

    const Hyper& hyper() const { return h_; }
    std::int64_t step_count() const { return t_; }

    void step(std::map<std::string, Tensor>& params, double lr) {
        if (lr <= 0.0) throw ParamError("AdamW: lr must be positive");
        ++t_;
        for (auto& [name, p] : params) {
            if (!p.requires_grad() || !p.has_grad()) continue;
            const auto& g = p.grad();
            auto& m = moments1_[name];
            auto& v = moments2_[name];
            if (m.empty()) m.assign(g.size(), 0.0);
            if (v.empty()) v.assign(g.size(), 0.0);
            if (m.size() != g.size())
                throw ShapeError("AdamW: moment shape drifted for " + name);
            // Bias correction counts steps per parameter: a group that first
            // receives gradients late starts its own schedule then.
            const double tp = static_cast<double>(++steps_[name]);
            const double bc1 = 1.0 - std::pow(h_.beta1, tp);
            const double bc2 = 1.0 - std::pow(h_.beta2, tp);
            auto& x = p.data();
            const double decay = 1.0 - lr * h_.weight_decay;
            for (std::size_t i = 0; i < g.size(); ++i) {
                m[i] = h_.beta1 * m[i] + (1.0 - h_.beta1) * g[i];
                v[i] = h_.beta2 * v[i] + (1.0 - h_.beta2) * g[i] * g[i];
                x[i] *= decay;
                x[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + h_.eps);
            }
        }
    }

  private:
    Hyper h_;
    std::int64_t t_ = 0;
    std::map<std::string, std::vector<double>> moments1_;
    std::map<std::string, std::vector<double>> moments2_;
    std::map<std::string, std::int64_t> steps_;
};

/// Exponentially weighted parameter shadow:
/// shadow <- ratio * shadow + (1 - ratio) * param.
class EmaShadow {
  public:
    EmaShadow(const std::map<std::string, Tensor>& params, double ratio,
              const std::function<bool(const std::string&)>& track =
                  [](const std::string&) { return true; })
        : ratio_(ratio) {
        if (!(ratio > 0.0 && ratio < 1.0)) throw ParamError("EmaShadow: ratio outside (0,1)");
        for (const auto& [name, t] : params)
            if (track(name)) shadow_[name] = t.data();
    }

    double ratio() const { return ratio_; }

    void update(const std::map<std::string, Tensor>& params) {
        for (auto& [name, s] : shadow_) {
            auto it = params.find(name);
            if (it == params.end()) throw ShapeError("EmaShadow: parameter " + name + " disappeared");
            const auto& x = it->second.data();
            if (x.size() != s.size()) throw ShapeError("EmaShadow: shape mismatch for " + name);
            for (std::size_t i = 0; i < s.size(); ++i)
                s[i] = ratio_ * s[i] + (1.0 - ratio_) * x[i];
        }
    }

    const std::map<std::string, std::vector<double>>& values() const { return shadow_; }

    /// Parameter map with shadow values in tracked slots and live values
    /// elsewhere, for checkpointing.
    std::map<std::string, Tensor> overlay(const std::map<std::string, Tensor>& params) const {
        std::map<std::string, Tensor> out;
        for (const auto& [name, t] : params) {
            auto it = shadow_.find(name);
            if (it == shadow_.end()) out.emplace(name, t.detached());
            else out.emplace(name, Tensor::from_data(t.shape(), it->second));
        }
        return out;
    }

  private:
    double ratio_;
    std::map<std::string, std::vector<double>> shadow_;
};

/// Scales all accumulated gradients so their global L2 norm is at most
/// max_norm; returns the pre-clip norm.
inline double clip_grad_norm(std::map<std::string, Tensor>& params, double max_norm) {
    if (max_norm <= 0.0) throw ParamError("clip_grad_norm: max_norm must be positive");
    double sq = 0.0;
    for (auto& [name, p] : params) {
        if (!p.requires_grad() || !p.has_grad()) continue;
        for (double g : p.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericError("clip_grad_norm: non-finite gradient norm");
    if (norm > max_norm) {
        const double s = max_norm / norm;
        for (auto& [name, p] : params) {
            if (!p.requires_grad() || !p.has_grad()) continue;
            for (auto& v : p.grad_mut()) v *= s;
        }
    }
    return norm;
}

inline void zero_grads(std::map<std::string, Tensor>& params) {
    for (auto& [name, p] : params) p.zero_grad();
}

}  // namespace duet
