#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "duet/rng.hpp"
#include "duet/tensor.hpp"

using namespace duet;

namespace {

Tensor t2(std::vector<double> d, std::int64_t r, std::int64_t c) {
    return Tensor::from_data({r, c}, std::move(d));
}

double check_op(const std::function<Tensor(Tensor&)>& f, Tensor x) {
    return grad_check(f, std::move(x), 1e-5).max_rel_err;
}

}  // namespace

TEST_CASE("construction and shape checks") {
    Tensor z = Tensor::zeros({2, 3});
    CHECK(z.numel() == 6);
    CHECK(z.rank() == 2);
    CHECK(Tensor::scalar(4.0).value() == 4.0);
    CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
    CHECK_THROWS_AS(Tensor::zeros({2, 2}).value(), ContractError);

    Tensor a = Tensor::full({3}, 1.5);
    Tensor d = a.detached();
    d.at(0) = 9.0;
    CHECK(a.at(0) == 1.5);
}

TEST_CASE("elementwise arithmetic values and gradients") {
    Tensor a = t2({1, 2, 3, 4}, 2, 2);
    Tensor b = t2({5, 6, 7, 8}, 2, 2);
    CHECK(add(a, b).at(3) == 12.0);
    CHECK(sub(a, b).at(0) == -4.0);
    CHECK(mul(a, b).at(2) == 21.0);
    CHECK(scale(a, 3.0).at(1) == 6.0);
    CHECK(add_scalar(a, 0.5).at(0) == 1.5);
    CHECK_THROWS_AS(add(a, Tensor::zeros({3})), ShapeError);

    Rng rng(0);
    Tensor x = Tensor::randn({3, 3}, rng);
    Tensor c = Tensor::randn({3, 3}, rng);
    CHECK(check_op([&](Tensor& v) { return sum(mul(add(v, c), sub(v, c))); }, x) < 1e-6);
    CHECK(check_op([&](Tensor& v) { return mean(scale(add_scalar(v, 2.0), -1.5)); }, x) < 1e-6);
}

TEST_CASE("gelu hits fixed points and differentiates") {
    Tensor x = Tensor::from_data({3}, {0.0, 10.0, -10.0});
    Tensor y = gelu(x);
    CHECK(y.at(0) == 0.0);
    CHECK(std::abs(y.at(1) - 10.0) < 1e-9);
    CHECK(std::abs(y.at(2)) < 1e-9);

    Rng rng(1);
    CHECK(check_op([](Tensor& v) { return sum(gelu(v)); }, Tensor::randn({4, 4}, rng)) < 1e-6);
}

TEST_CASE("matmul against a hand product") {
    Tensor a = t2({1, 2, 3, 4, 5, 6}, 2, 3);
    Tensor b = t2({7, 8, 9, 10, 11, 12}, 3, 2);
    Tensor c = matmul(a, b);
    CHECK(c.shape() == Shape{2, 2});
    CHECK(c.at(0) == 58.0);
    CHECK(c.at(1) == 64.0);
    CHECK(c.at(2) == 139.0);
    CHECK(c.at(3) == 154.0);
    CHECK_THROWS_AS(matmul(a, a), ShapeError);

    Rng rng(2);
    Tensor m = Tensor::randn({3, 4}, rng);
    Tensor w = Tensor::randn({4, 2}, rng);
    CHECK(check_op([&](Tensor& v) { return sum(matmul(v, w)); }, m) < 1e-6);
    CHECK(check_op([&](Tensor& v) { return sum(matmul(m, v)); }, w) < 1e-6);
}

TEST_CASE("transpose and add_bias") {
    Tensor a = t2({1, 2, 3, 4, 5, 6}, 2, 3);
    Tensor at = transpose(a);
    CHECK(at.shape() == Shape{3, 2});
    CHECK(at.at(1) == 4.0);

    Tensor bias = Tensor::from_data({3}, {10, 20, 30});
    Tensor ab = add_bias(a, bias);
    CHECK(ab.at(0) == 11.0);
    CHECK(ab.at(5) == 36.0);

    Rng rng(3);
    Tensor m = Tensor::randn({4, 3}, rng);
    CHECK(check_op([&](Tensor& v) { return sum(add_bias(v, bias)); }, m) < 1e-6);
    CHECK(check_op([&](Tensor& v) { return sum(add_bias(m, v)); },
                   Tensor::randn({3}, rng)) < 1e-6);
    CHECK(check_op([&](Tensor& v) { return sum(transpose(v)); }, m) < 1e-6);
}

TEST_CASE("reductions") {
    Tensor a = t2({1, 2, 3, 4}, 2, 2);
    CHECK(sum(a).value() == 10.0);
    CHECK(mean(a).value() == 2.5);
    Rng rng(4);
    CHECK(check_op([](Tensor& v) { return mean(mul(v, v)); }, Tensor::randn({5}, rng)) < 1e-6);
}

TEST_CASE("softmax rows normalize, shift-invariant, uniform on equal logits") {
    Tensor a = t2({0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0}, 2, 4);
    Tensor s = softmax(a, -1);
    for (int j = 0; j < 4; ++j) CHECK(s.at(j) == 0.25);
    double row1 = 0.0;
    for (int j = 4; j < 8; ++j) row1 += s.at(j);
    CHECK(std::abs(row1 - 1.0) < 1e-12);
    for (int j = 5; j < 8; ++j) CHECK(s.at(j) > s.at(j - 1));

    Tensor shifted = softmax(add_scalar(a, 100.0), -1);
    for (int j = 0; j < 8; ++j) CHECK(std::abs(shifted.at(j) - s.at(j)) < 1e-14);

    Rng rng(5);
    Tensor w = Tensor::randn({3, 4}, rng);
    CHECK(check_op([&](Tensor& v) { return sum(mul(softmax(v, -1), w)); },
                   Tensor::randn({3, 4}, rng)) < 1e-6);
}

TEST_CASE("layer_norm standardizes and differentiates") {
    Rng rng(6);
    Tensor x = Tensor::randn({2, 8}, rng);
    Tensor g = Tensor::ones({8});
    Tensor b = Tensor::zeros({8});
    Tensor y = layer_norm(x, g, b, 1e-5);
    for (int r = 0; r < 2; ++r) {
        double mu = 0.0, var = 0.0;
        for (int j = 0; j < 8; ++j) mu += y.at(r * 8 + j);
        mu /= 8.0;
        for (int j = 0; j < 8; ++j) var += (y.at(r * 8 + j) - mu) * (y.at(r * 8 + j) - mu);
        var /= 8.0;
        CHECK(std::abs(mu) < 1e-12);
        CHECK(std::abs(var - 1.0) < 1e-3);
    }

    Tensor gg = Tensor::randn({8}, rng);
    Tensor bb = Tensor::randn({8}, rng);
    Tensor probe = Tensor::randn({8}, rng);
    CHECK(check_op([&](Tensor& v) { return sum(mul(layer_norm(v, gg, bb, 1e-5), v)); },
                   Tensor::randn({3, 8}, rng)) < 1e-6);
    Tensor xx = Tensor::randn({3, 8}, rng);
    CHECK(check_op([&](Tensor& v) { return sum(layer_norm(xx, v, bb, 1e-5)); }, gg) < 1e-6);
    CHECK(check_op([&](Tensor& v) { return mean(mul(layer_norm(xx, gg, v, 1e-5),
                                                    layer_norm(xx, gg, v, 1e-5))); }, bb) < 1e-6);
}

TEST_CASE("row selection ops") {
    Tensor a = t2({1, 2, 3, 4, 5, 6}, 3, 2);
    Tensor g = gather_rows(a, {2, 0, 2});
    CHECK(g.shape() == Shape{3, 2});
    CHECK(g.at(0) == 5.0);
    CHECK(g.at(2) == 1.0);
    CHECK(g.at(4) == 5.0);
    CHECK_THROWS_AS(gather_rows(a, {3}), IndexError);

    // duplicated gather rows must accumulate gradient
    Tensor x = t2({1, 2, 3, 4}, 2, 2);
    x.set_requires_grad(true);
    backward(sum(gather_rows(x, {0, 0, 1})));
    CHECK(x.grad()[0] == 2.0);
    CHECK(x.grad()[3] == 1.0);

    Tensor s = scatter_rows(t2({7, 8}, 1, 2), {1}, 3);
    CHECK(s.at(0) == 0.0);
    CHECK(s.at(2) == 7.0);
    CHECK_THROWS_AS(scatter_rows(t2({7, 8}, 1, 2), {3}, 3), IndexError);
    CHECK_THROWS_AS(scatter_rows(t2({7, 8, 9, 1}, 2, 2), {1, 1}, 3), IndexError);

    Tensor sl = slice_rows(a, 1, 3);
    CHECK(sl.at(0) == 3.0);
    Tensor cat = concat_rows({slice_rows(a, 0, 1), slice_rows(a, 2, 3)});
    CHECK(cat.shape() == Shape{2, 2});
    CHECK(cat.at(2) == 5.0);

    Tensor r = reshape(a, {2, 3});
    CHECK(r.at(4) == 5.0);
    CHECK_THROWS_AS(reshape(a, {4, 2}), ShapeError);

    Rng rng(7);
    Tensor m = Tensor::randn({4, 3}, rng);
    CHECK(check_op([&](Tensor& v) { return sum(mul(gather_rows(v, {1, 1, 3}),
                                                   gather_rows(v, {0, 2, 3}))); }, m) < 1e-6);
    CHECK(check_op([&](Tensor& v) { return sum(mul(scatter_rows(v, {0, 2}, 4),
                                                   m)); }, Tensor::randn({2, 3}, rng)) < 1e-6);
    CHECK(check_op([&](Tensor& v) { return sum(concat_rows({v, mul(v, v)})); }, m) < 1e-6);
}

TEST_CASE("cross entropy against independent log1p oracle") {
    Tensor logits = t2({1, 0, 0, 2}, 2, 2);
    Tensor loss = cross_entropy(logits, {0, 0});
    const double oracle = (std::log1p(std::exp(-1.0)) + std::log1p(std::exp(2.0))) / 2.0;
    CHECK(std::abs(loss.value() - 1.2200948492805979) < 1e-12);
    CHECK(std::abs(loss.value() - oracle) < 1e-12);

    // equal logits cost exactly log V per counted row
    Tensor flat = Tensor::zeros({3, 4});
    CHECK(std::abs(cross_entropy(flat, {2, 1, 3}).value() - 1.3862943611198906) < 1e-12);

    // ignored rows leave the mean over counted rows
    Tensor part = cross_entropy(logits, {0, -1});
    CHECK(std::abs(part.value() - std::log1p(std::exp(-1.0))) < 1e-12);

    CHECK_THROWS_AS(cross_entropy(logits, {-1, -1}), ContractError);
    CHECK_THROWS_AS(cross_entropy(logits, {0, 2}), IndexError);
    CHECK_THROWS_AS(cross_entropy(logits, {0}), ShapeError);

    Rng rng(8);
    CHECK(check_op([](Tensor& v) { return cross_entropy(v, {1, 0, -1, 3}); },
                   Tensor::randn({4, 5}, rng)) < 1e-6);
}

TEST_CASE("mse value and gradient") {
    Tensor a = Tensor::from_data({3}, {1, 2, 3});
    Tensor b = Tensor::from_data({3}, {1, 0, 6});
    CHECK(std::abs(mse(a, b).value() - (0.0 + 4.0 + 9.0) / 3.0) < 1e-15);
    Rng rng(9);
    Tensor ref = Tensor::randn({2, 3}, rng);
    CHECK(check_op([&](Tensor& v) { return mse(v, ref); }, Tensor::randn({2, 3}, rng)) < 1e-6);
}

TEST_CASE("dropout p=0 is the identity and draws nothing") {
    Rng rng(10);
    Tensor a = Tensor::randn({4}, rng);
    Rng stream(3);
    const auto before = stream.next_u64();
    Rng stream2(3);
    stream2.next_u64();
    Tensor out = dropout(a, 0.0, stream2);
    CHECK(out.same_data(a));
    CHECK(stream2.next_u64() != before);  // only the probe draw above consumed
    CHECK_THROWS_AS(dropout(a, 1.0, rng), ParamError);
    CHECK_THROWS_AS(dropout(a, -0.1, rng), ParamError);

    // inverted scaling keeps the mean roughly fixed
    Tensor big = Tensor::full({20000}, 1.0);
    Rng r2(11);
    Tensor dropped = dropout(big, 0.25, r2);
    CHECK(std::abs(mean(dropped).value() - 1.0) < 0.02);
}

TEST_CASE("backward accumulates, handles reuse, validates") {
    Tensor x = Tensor::scalar(3.0);
    x.set_requires_grad(true);
    Tensor y = add(mul(x, x), x);  // x^2 + x, dy/dx = 2x + 1
    backward(y);
    CHECK(std::abs(x.grad()[0] - 7.0) < 1e-12);
    backward(add(mul(x, x), x));
    CHECK(std::abs(x.grad()[0] - 14.0) < 1e-12);

    Tensor free_ = Tensor::scalar(1.0);
    CHECK_THROWS_AS(backward(add(free_, free_)), ContractError);
    Tensor vecloss = Tensor::zeros({2});
    vecloss.set_requires_grad(true);
    CHECK_THROWS_AS(backward(vecloss), ContractError);
}

TEST_CASE("grad mode gate") {
    Tensor a = Tensor::scalar(1.0);
    a.set_requires_grad(true);
    {
        NoGradGuard ng;
        CHECK_FALSE(add(a, a).requires_grad());
    }
    CHECK(add(a, a).requires_grad());
}

TEST_CASE("grad_check rejects nondeterminism and bad h") {
    Rng shared(12);
    auto noisy = [&shared](Tensor& v) { return scale(sum(v), shared.uniform() + 1.0); };
    CHECK_THROWS_AS(grad_check(noisy, Tensor::ones({2}), 1e-5), ContractError);
    auto fine = [](Tensor& v) { return sum(v); };
    CHECK_THROWS_AS(grad_check(fine, Tensor::ones({2}), 1e-2), ParamError);
    CHECK(grad_check(fine, Tensor::ones({2}), 1e-5).max_rel_err < 1e-9);
}
