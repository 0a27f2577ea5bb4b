#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "duet/objectives.hpp"

using namespace duet;

TEST_CASE("interpolation identities hold exactly") {
    Rng rng(41);
    for (int trial = 0; trial < 1000; ++trial) {
        Tensor z0 = Tensor::randn({3, 2}, rng, 2.0);
        const double t = rng.uniform();
        FlowPair p = make_flow_pair(z0, t, derive_seed(5, "noise", static_cast<std::uint64_t>(trial)));
        REQUIRE(p.z_t.shape() == z0.shape());
        for (std::int64_t i = 0; i < z0.numel(); ++i) {
            REQUIRE(p.z_t.at(i) == (1.0 - t) * p.z0.at(i) + t * p.z1.at(i));
            REQUIRE(p.v_target.at(i) == p.z1.at(i) - p.z0.at(i));
        }
    }
}

TEST_CASE("flow pairs are seed-deterministic and bounded in t") {
    Tensor z0 = Tensor::full({2, 2}, 1.0);
    FlowPair a = make_flow_pair(z0, 0.25, 77);
    FlowPair b = make_flow_pair(z0, 0.25, 77);
    CHECK(a.z1.same_data(b.z1));
    CHECK(a.z_t.same_data(b.z_t));
    FlowPair c = make_flow_pair(z0, 0.25, 78);
    CHECK_FALSE(a.z1.same_data(c.z1));

    CHECK(make_flow_pair(z0, 0.0, 1).z_t.same_data(make_flow_pair(z0, 0.0, 1).z0));
    FlowPair end = make_flow_pair(z0, 1.0, 2);
    CHECK(end.z_t.same_data(end.z1));
    CHECK_THROWS_AS(make_flow_pair(z0, -0.1, 1), ParamError);
    CHECK_THROWS_AS(make_flow_pair(z0, 1.1, 1), ParamError);
}

TEST_CASE("euler grid descends from 1 to 1/N and a constant field lands on z1 - c") {
    Rng rng(42);
    for (std::int64_t steps : {1, 5, 50}) {
        Tensor z1 = Tensor::randn({4, 3}, rng);
        std::vector<double> ts;
        Tensor out = euler_integrate(
            [&](const Tensor&, double t) {
                ts.push_back(t);
                return Tensor::full({4, 3}, 0.75);
            },
            z1, steps);
        REQUIRE(static_cast<std::int64_t>(ts.size()) == steps);
        for (std::int64_t k = 0; k < steps; ++k)
            REQUIRE(ts[static_cast<std::size_t>(k)] ==
                    static_cast<double>(steps - k) / static_cast<double>(steps));
        CHECK(ts.front() == 1.0);
        for (std::int64_t i = 0; i < z1.numel(); ++i)
            REQUIRE(std::abs(out.at(i) - (z1.at(i) - 0.75)) <= 1e-12);
    }
}

TEST_CASE("euler guards") {
    Tensor z1 = Tensor::ones({2, 2});
    auto field_ok = [](const Tensor&, double) { return Tensor::zeros({2, 2}); };
    CHECK_THROWS_AS(euler_integrate(field_ok, z1, 0), ParamError);
    auto field_shape = [](const Tensor&, double) { return Tensor::zeros({2, 3}); };
    CHECK_THROWS_AS(euler_integrate(field_shape, z1, 3), ShapeError);
    auto field_nan = [](const Tensor&, double) {
        return Tensor::full({2, 2}, std::numeric_limits<double>::quiet_NaN());
    };
    CHECK_THROWS_AS(euler_integrate(field_nan, z1, 3), NumericError);
}

TEST_CASE("loss wrappers and the two-weight combination") {
    Tensor logits = Tensor::zeros({2, 4});
    Tensor l_ntp = ntp_loss(logits, {1, 2});
    CHECK(std::abs(l_ntp.value() - 1.3862943611198906) < 1e-12);

    Tensor v = Tensor::from_data({2}, {1.0, 2.0});
    Tensor w = Tensor::from_data({2}, {0.0, 0.0});
    Tensor l_flow = flow_loss(v, w);
    CHECK(std::abs(l_flow.value() - 2.5) < 1e-15);

    LossWeights lw;  // 0.25 : 1.0
    Tensor total = combined_loss(l_ntp, l_flow, lw);
    CHECK(std::abs(total.value() - (0.25 * l_ntp.value() + 1.0 * l_flow.value())) < 1e-15);

    LossWeights bad;
    bad.w_ce = -1.0;
    CHECK_THROWS_AS(combined_loss(l_ntp, l_flow, bad), ParamError);
    LossWeights zero;
    zero.w_ce = 0.0;
    zero.w_mse = 0.0;
    CHECK_THROWS_AS(combined_loss(l_ntp, l_flow, zero), ParamError);
    Tensor inf_loss = Tensor::scalar(std::numeric_limits<double>::infinity());
    CHECK_THROWS_AS(combined_loss(inf_loss, l_flow, lw), NumericError);

    // gradient reaches both components
    Tensor a = Tensor::from_data({2}, {0.3, -0.4});
    a.set_requires_grad(true);
    Tensor lf = flow_loss(a, w);
    Tensor ln = ntp_loss(reshape(a, {1, 2}), {0});
    backward(combined_loss(ln, lf, lw));
    CHECK(a.grad()[0] != 0.0);
    CHECK(a.grad()[1] != 0.0);
}

TEST_CASE("combined weights reduce to the single-knob ratio") {
    LossWeights w;
    CHECK(w.alpha_equiv() == 4.0);
    w.w_ce = 0.0;
    CHECK(std::isinf(w.alpha_equiv()));
}

TEST_CASE("latent sampling is deterministic per seed") {
    ModelConfig cfg;
    cfg.width = 16;
    cfg.depth = 1;
    cfg.vit_depth = 1;
    cfg.vit_width = 8;
    cfg.patch = 4;
    cfg.latent_patch = 4;
    cfg.latent_dim = 4;
    cfg.image_size = 8;
    cfg.mlp_mult = 2;
    cfg.time_features = 4;
    cfg.max_positions = 32;
    UnifiedModel m(cfg, 51);

    std::vector<std::int64_t> cond = {4, 5, 6};
    Tensor a = euler_sample_latent(m, cond, 5, 9);
    Tensor b = euler_sample_latent(m, cond, 5, 9);
    CHECK(a.same_data(b));
    Tensor c = euler_sample_latent(m, cond, 5, 10);
    CHECK_FALSE(a.same_data(c));
    CHECK(a.shape() == Shape{4, 4});

    Image img = euler_sample(m, cond, 5, 9);
    CHECK(img.height == 8);
    img.validate_range();
}
