#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>

#include "duet/optim.hpp"

using namespace duet;

namespace {

std::map<std::string, Tensor> one_param(double value, bool track = true) {
    std::map<std::string, Tensor> params;
    Tensor t = Tensor::scalar(value);
    t.set_requires_grad(track);
    params.emplace("p", std::move(t));
    return params;
}

void set_grad(Tensor& t, double g) {
    t.zero_grad();
    t.node()->ensure_grad();
    for (auto& v : t.grad_mut()) v = g;
}

}  // namespace

TEST_CASE("first step matches the closed form") {
    auto params = one_param(1.0);
    set_grad(params.at("p"), 2.0);
    AdamW opt;
    opt.step(params, 0.1);
    // m-hat = g, v-hat = g^2, so the step is -lr * g / (|g| + eps)
    CHECK(std::abs(params.at("p").at(0) - 0.9000000005) < 1e-15);
    CHECK(std::abs(params.at("p").at(0) - (1.0 - 0.1 * 2.0 / (2.0 + 1e-8))) < 1e-16);
}

TEST_CASE("two steps match a scalar replay of the moment recursions") {
    auto params = one_param(0.5);
    AdamW opt;
    const double g1 = 2.0, g2 = -1.0, lr = 0.05;
    const double b1 = 0.9, b2 = 0.95, eps = 1e-8;

    double m = 0.0, v = 0.0, x = 0.5;
    for (int step = 1; step <= 2; ++step) {
        const double g = step == 1 ? g1 : g2;
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        const double mh = m / (1 - std::pow(b1, step));
        const double vh = v / (1 - std::pow(b2, step));
        x -= lr * mh / (std::sqrt(vh) + eps);
    }

    set_grad(params.at("p"), g1);
    opt.step(params, lr);
    set_grad(params.at("p"), g2);
    opt.step(params, lr);
    CHECK(std::abs(params.at("p").at(0) - x) < 1e-15);
}

TEST_CASE("decoupled decay shrinks the weight before the adam step") {
    AdamW::Hyper h;
    h.weight_decay = 0.1;
    AdamW opt(h);
    auto params = one_param(1.0);
    set_grad(params.at("p"), 2.0);
    opt.step(params, 0.1);
    const double expect = 1.0 * (1.0 - 0.1 * 0.1) - 0.1 * 2.0 / (2.0 + 1e-8);
    CHECK(std::abs(params.at("p").at(0) - expect) < 1e-15);
}

TEST_CASE("parameters without gradients are left alone") {
    auto params = one_param(3.0);
    Tensor frozen = Tensor::scalar(4.0);  // requires_grad false
    params.emplace("frozen", frozen);
    Tensor idle = Tensor::scalar(5.0);
    idle.set_requires_grad(true);  // tracked but no grad this step
    params.emplace("idle", idle);

    set_grad(params.at("p"), 1.0);
    AdamW opt;
    opt.step(params, 0.1);
    CHECK(params.at("frozen").at(0) == 4.0);
    CHECK(params.at("idle").at(0) == 5.0);
    CHECK(params.at("p").at(0) != 3.0);
}

TEST_CASE("late-joining parameters start their own bias-correction clock") {
    auto params = one_param(1.0);
    Tensor late = Tensor::scalar(1.0);
    late.set_requires_grad(true);
    params.emplace("late", late);

    AdamW opt;
    set_grad(params.at("p"), 2.0);
    opt.step(params, 0.1);  // late has no grad yet
    set_grad(params.at("p"), 2.0);
    set_grad(params.at("late"), 2.0);
    opt.step(params, 0.1);

    // late's first real update equals a fresh first step
    CHECK(std::abs(params.at("late").at(0) - 0.9000000005) < 1e-15);
}

TEST_CASE("optimizer guards") {
    CHECK_THROWS_AS(AdamW(AdamW::Hyper{1.0, 0.95, 1e-8, 0.0}), ParamError);
    CHECK_THROWS_AS(AdamW(AdamW::Hyper{0.9, 0.95, 0.0, 0.0}), ParamError);
    CHECK_THROWS_AS(AdamW(AdamW::Hyper{0.9, 0.95, 1e-8, -0.1}), ParamError);
    auto params = one_param(1.0);
    set_grad(params.at("p"), 1.0);
    AdamW opt;
    CHECK_THROWS_AS(opt.step(params, 0.0), ParamError);
}

TEST_CASE("gradient clipping rescales only above the threshold") {
    auto params = one_param(0.0);
    Tensor q = Tensor::from_data({2}, {0.0, 0.0});
    q.set_requires_grad(true);
    params.emplace("q", q);

    set_grad(params.at("p"), 3.0);
    params.at("q").node()->ensure_grad();
    auto& qg = params.at("q").grad_mut();
    qg[0] = 4.0;
    qg[1] = 0.0;  // total norm 5

    const double norm = clip_grad_norm(params, 1.0);
    CHECK(std::abs(norm - 5.0) < 1e-12);
    CHECK(std::abs(params.at("p").grad()[0] - 3.0 / 5.0) < 1e-12);
    CHECK(std::abs(params.at("q").grad()[0] - 4.0 / 5.0) < 1e-12);

    // below threshold: untouched
    const double norm2 = clip_grad_norm(params, 10.0);
    CHECK(std::abs(norm2 - 1.0) < 1e-12);
    CHECK(std::abs(params.at("p").grad()[0] - 3.0 / 5.0) < 1e-12);

    set_grad(params.at("p"), std::numeric_limits<double>::quiet_NaN());
    CHECK_THROWS_AS(clip_grad_norm(params, 1.0), NumericError);
}

TEST_CASE("zero_grads clears everything") {
    auto params = one_param(1.0);
    set_grad(params.at("p"), 2.0);
    zero_grads(params);
    CHECK_FALSE(params.at("p").has_grad());
}

TEST_CASE("ema shadow follows the recursion and overlays") {
    auto params = one_param(1.0);
    Tensor skip = Tensor::scalar(9.0);
    skip.set_requires_grad(true);
    params.emplace("skip", skip);

    EmaShadow ema(params, 0.5, [](const std::string& n) { return n == "p"; });
    params.at("p").at(0) = 3.0;
    ema.update(params);
    params.at("p").at(0) = 5.0;
    ema.update(params);

    // s0=1; s1=0.5*1+0.5*3=2; s2=0.5*2+0.5*5=3.5
    CHECK(ema.values().count("skip") == 0);
    CHECK(std::abs(ema.values().at("p").at(0) - 3.5) < 1e-15);

    auto merged = ema.overlay(params);
    CHECK(merged.at("p").at(0) == 3.5);
    CHECK(merged.at("skip").at(0) == 9.0);
    CHECK(params.at("p").at(0) == 5.0);  // live values untouched

    CHECK_THROWS_AS(EmaShadow(params, 0.0), ParamError);
    CHECK_THROWS_AS(EmaShadow(params, 1.0), ParamError);
}

TEST_CASE("ema tracks the exact closed-form recursion at published decay") {
    auto params = one_param(2.0);
    EmaShadow ema(params, 0.995, [](const std::string&) { return true; });
    double s = 2.0;
    for (int k = 1; k <= 40; ++k) {
        const double value = 2.0 + 0.01 * k;
        params.at("p").at(0) = value;
        ema.update(params);
        s = 0.995 * s + 0.005 * value;
    }
    CHECK(std::abs(ema.values().at("p").at(0) - s) <= 1e-12);
}
