#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "duet/config.hpp"
#include "duet/error.hpp"
#include "duet/model.hpp"
#include "duet/rng.hpp"
#include "duet/tensor.hpp"

namespace duet {

/// Affine interpolation state between a clean latent z0 and unit noise z1 at
/// time t: z_t = (1-t)*z0 + t*z1, v_target = z1 - z0, held exactly in those
/// expressions so invariants recompute bitwise.
struct FlowPair {
    Tensor z_t;
    double t = 0.0;
    Tensor v_target;
    Tensor z0;
    Tensor z1;
};

inline FlowPair make_flow_pair(const Tensor& z0, double t, std::uint64_t noise_seed) {
    if (!(t >= 0.0 && t <= 1.0)) throw ParamError("make_flow_pair: t outside [0,1]");
    Rng rng(noise_seed);
    FlowPair p;
    p.t = t;
    p.z0 = z0.detached();
    p.z1 = Tensor::randn(z0.shape(), rng);
    std::vector<double> zt(p.z0.data().size()), vt(p.z0.data().size());
    for (std::size_t i = 0; i < zt.size(); ++i) {
        zt[i] = (1.0 - t) * p.z0.data()[i] + t * p.z1.data()[i];
        vt[i] = p.z1.data()[i] - p.z0.data()[i];
    }
    p.z_t = Tensor::from_data(z0.shape(), std::move(zt));
    p.v_target = Tensor::from_data(z0.shape(), std::move(vt));
    return p;
}

/// Mean next-token cross-entropy; target -1 marks an ignored position.
inline Tensor ntp_loss(const Tensor& logits, const std::vector<std::int64_t>& targets) {
    return cross_entropy(logits, targets);
}

/// Mean squared velocity error.
inline Tensor flow_loss(const Tensor& v_pred, const Tensor& v_target) {
    return mse(v_pred, v_target);
}

/// total = w_ce * l_text + w_mse * l_flow. With w_ce = 1 this is the
/// single-coefficient form with the flow weight as the balance knob.
inline Tensor combined_loss(const Tensor& l_ntp, const Tensor& l_flow, const LossWeights& w) {
    if (w.w_ce < 0.0 || w.w_mse < 0.0) throw ParamError("combined_loss: negative weight");
    if (w.w_ce == 0.0 && w.w_mse == 0.0) throw ParamError("combined_loss: both weights zero");
    if (!std::isfinite(l_ntp.value()) || !std::isfinite(l_flow.value()))
        throw NumericError("combined_loss: non-finite component loss");
    return add(scale(l_ntp, w.w_ce), scale(l_flow, w.w_mse));
}

/// Explicit Euler integration of dz/dt = v from t=1 down to t=0 on a uniform
/// grid: N evaluations at t = 1, (N-1)/N, ..., 1/N, each stepping
/// z <- z - (1/N) * v(z, t). A constant field c therefore lands on z1 - c.
inline Tensor euler_integrate(const std::function<Tensor(const Tensor&, double)>& field,
                              const Tensor& z1, std::int64_t steps) {
    if (steps < 1) throw ParamError("euler_integrate: steps must be >= 1");
    Tensor z = z1.detached();
    const double dt = 1.0 / static_cast<double>(steps);
    for (std::int64_t k = 0; k < steps; ++k) {
        const double t = static_cast<double>(steps - k) / static_cast<double>(steps);
        Tensor v = field(z, t);
        if (v.shape() != z.shape())
            throw ShapeError("euler_integrate: field output " + shape_str(v.shape()) +
                             " does not match state " + shape_str(z.shape()));
        if (!v.all_finite())
            throw NumericError("euler_integrate: non-finite velocity at step " + std::to_string(k));
        for (std::size_t i = 0; i < z.data().size(); ++i) z.data()[i] -= dt * v.data()[i];
        if (!z.all_finite())
            throw NumericError("euler_integrate: non-finite state at step " + std::to_string(k));
    }
    return z;
}

/// Latent endpoint of the sampler: start from seeded N(0,I) noise over the
/// model's latent grid and integrate the learned field. When z_vit is set
/// the field is additionally conditioned on that encoded input image.
inline Tensor euler_sample_latent(const UnifiedModel& model,
                                  const std::vector<std::int64_t>& cond_ids, std::int64_t steps,
                                  std::uint64_t seed, const Tensor* z_vit = nullptr) {
    NoGradGuard ng;
    Rng rng(seed);
    Tensor z1 = Tensor::randn({model.config().vae_tokens(), model.config().latent_dim}, rng);
    return euler_integrate(
        [&](const Tensor& z, double t) {
            return z_vit ? model.velocity_field(cond_ids, *z_vit, z, t)
                         : model.velocity_field(cond_ids, z, t);
        },
        z1, steps);
}

inline Image euler_sample(const UnifiedModel& model, const std::vector<std::int64_t>& cond_ids,
                          std::int64_t steps, std::uint64_t seed, const Tensor* z_vit = nullptr) {
    return model.vae_decode(euler_sample_latent(model, cond_ids, steps, seed, z_vit));
}

}  // namespace duet
