#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <set>

#include "duet/rng.hpp"

using namespace duet;

TEST_CASE("engine matches the standard mt19937_64 stream") {
    // value mandated by the language standard for the 10000th draw
    std::mt19937_64 ref;
    ref.discard(9999);
    CHECK(ref() == 9981545732273789042ULL);

    Rng rng(12345);
    std::mt19937_64 mirror(12345);
    for (int i = 0; i < 100; ++i) CHECK(rng.next_u64() == mirror());
}

TEST_CASE("uniform is the top-53-bit ladder") {
    Rng rng(7);
    std::mt19937_64 mirror(7);
    for (int i = 0; i < 1000; ++i) {
        const double expect = static_cast<double>(mirror() >> 11) * 0x1.0p-53;
        CHECK(rng.uniform() == expect);
    }
}

TEST_CASE("uniform stays inside [0,1) and fills the range") {
    Rng rng(99);
    double mn = 1.0, mx = 0.0, sum = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        mn = std::min(mn, u);
        mx = std::max(mx, u);
        sum += u;
    }
    CHECK(mn < 0.01);
    CHECK(mx > 0.99);
    CHECK(std::abs(sum / n - 0.5) < 0.02);
}

TEST_CASE("ranged uniform maps endpoints") {
    Rng a(3), b(3);
    for (int i = 0; i < 100; ++i) {
        const double u = a.uniform();
        CHECK(b.uniform(-2.0, 6.0) == -2.0 + 8.0 * u);
    }
}

TEST_CASE("normal replays as trig-form Box-Muller over engine draws") {
    Rng rng(42);
    std::mt19937_64 mirror(42);
    for (int i = 0; i < 500; ++i) {
        const double u1 = static_cast<double>((mirror() >> 11) + 1) * 0x1.0p-53;
        const double u2 = static_cast<double>(mirror() >> 11) * 0x1.0p-53;
        const double expect =
            std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
        CHECK(rng.normal() == expect);
    }
}

TEST_CASE("normal moments are plausible") {
    Rng rng(1);
    const int n = 50000;
    double s1 = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        s1 += x;
        s2 += x * x;
    }
    CHECK(std::abs(s1 / n) < 0.02);
    CHECK(std::abs(s2 / n - 1.0) < 0.03);
}

TEST_CASE("below covers and validates") {
    Rng rng(5);
    std::set<std::uint64_t> seen;
    for (int i = 0; i < 200; ++i) {
        const auto v = rng.below(7);
        REQUIRE(v < 7);
        seen.insert(v);
    }
    CHECK(seen.size() == 7);
    CHECK_THROWS_AS(rng.below(0), ParamError);
}

TEST_CASE("derive_seed separates streams and indices") {
    const auto a = derive_seed(0, "alpha");
    const auto b = derive_seed(0, "beta");
    const auto c = derive_seed(1, "alpha");
    CHECK(a != b);
    CHECK(a != c);
    CHECK(derive_seed(0, "alpha") == a);

    std::set<std::uint64_t> idx;
    for (std::uint64_t i = 0; i < 1000; ++i) idx.insert(derive_seed(0, "alpha", i));
    CHECK(idx.size() == 1000);
    CHECK(derive_seed(0, "alpha", 4) == derive_seed(0, "alpha", 4));
    CHECK(derive_seed(0, "alpha", 4) != derive_seed(0, "beta", 4));
}

TEST_CASE("splitmix64 is a bijection on samples and fixes nothing obvious") {
    std::set<std::uint64_t> out;
    for (std::uint64_t i = 0; i < 4096; ++i) out.insert(splitmix64(i));
    CHECK(out.size() == 4096);
    CHECK(splitmix64(0) != 0);
}
