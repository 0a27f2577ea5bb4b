#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "duet/model.hpp"
#include "duet/objectives.hpp"

using namespace duet;

namespace {

ModelConfig tiny_cfg() {
    ModelConfig cfg;
    cfg.width = 16;
    cfg.depth = 2;
    cfg.vit_depth = 1;
    cfg.vit_width = 8;
    cfg.patch = 4;
    cfg.latent_patch = 4;
    cfg.latent_dim = 4;
    cfg.image_size = 8;
    cfg.mlp_mult = 2;
    cfg.time_features = 4;
    cfg.max_positions = 64;
    return cfg;
}

Image random_image(std::int64_t size, std::uint64_t seed) {
    Rng rng(seed);
    Image img(size, size, 1);
    for (auto& p : img.pixels) p = rng.uniform();
    return quantize8(img);
}

void shift_group(UnifiedModel& m, const std::string& group, double delta) {
    for (auto& [name, t] : m.params())
        if (UnifiedModel::group_of(name) == group) {
            for (auto& v : t.data()) v += delta;
        }
}

void make_identity_mask(TokenSequence& seq) {
    const auto n = static_cast<std::size_t>(seq.size());
    std::fill(seq.mask.begin(), seq.mask.end(), 0);
    for (std::size_t i = 0; i < n; ++i) seq.mask[i * n + i] = 1;
}

// reindexes a sequence so that new row i carries old row perm[i]; latent row
// blocks are reordered to keep the appearance-order pairing
TokenSequence permute_sequence(const TokenSequence& s, const std::vector<std::int64_t>& perm) {
    const std::int64_t n = s.size();
    TokenSequence p;
    p.flow_time = s.flow_time;
    p.tags.resize(static_cast<std::size_t>(n));
    p.text_ids.resize(static_cast<std::size_t>(n));
    p.positions.resize(static_cast<std::size_t>(n));
    p.mask.assign(static_cast<std::size_t>(n) * static_cast<std::size_t>(n), 0);
    for (std::int64_t i = 0; i < n; ++i) {
        p.tags[static_cast<std::size_t>(i)] = s.tags[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
        p.text_ids[static_cast<std::size_t>(i)] = s.text_ids[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
        p.positions[static_cast<std::size_t>(i)] = s.positions[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
        for (std::int64_t j = 0; j < n; ++j)
            p.mask[static_cast<std::size_t>(i * n + j)] =
                s.mask[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)] * n +
                                                perm[static_cast<std::size_t>(j)])];
    }
    auto reorder = [&](const Tensor& z, ModalityTag tag) {
        if (z.numel() == 0) return z;
        const auto old_rows = s.rows_with(tag);
        std::map<std::int64_t, std::int64_t> rank;
        for (std::size_t k = 0; k < old_rows.size(); ++k)
            rank[old_rows[k]] = static_cast<std::int64_t>(k);
        const std::int64_t cols = z.dim(1);
        std::vector<double> out;
        out.reserve(z.data().size());
        for (std::int64_t i = 0; i < n; ++i) {
            if (p.tags[static_cast<std::size_t>(i)] != tag) continue;
            const auto r = rank.at(perm[static_cast<std::size_t>(i)]);
            for (std::int64_t c = 0; c < cols; ++c)
                out.push_back(z.at(r * cols + c));
        }
        return Tensor::from_data({static_cast<std::int64_t>(out.size()) / cols, cols},
                                 std::move(out));
    };
    p.z_vit = reorder(s.z_vit, ModalityTag::VIT);
    p.z_vae = reorder(s.z_vae, ModalityTag::VAE);
    p.validate();
    return p;
}

}  // namespace

TEST_CASE("sequence assembly: segment order and masks per mode") {
    Rng rng(1);
    Tensor z_vit = Tensor::randn({2, 8}, rng);
    Tensor z_vae = Tensor::randn({2, 4}, rng);

    SECTION("understanding: causal text reading all image tokens") {
        auto s = build_sequence({5, 6, 7}, z_vit, Tensor(), SequenceMode::UNDERSTAND);
        REQUIRE(s.size() == 5);
        CHECK(s.tags[0] == ModalityTag::VIT);
        CHECK(s.tags[2] == ModalityTag::TEXT);
        CHECK(s.text_ids[2] == 5);
        CHECK(s.positions == std::vector<std::int64_t>{0, 1, 2, 3, 4});
        CHECK_FALSE(s.flow_time.has_value());
        // image block is bidirectional
        CHECK(s.admits(0, 1));
        CHECK(s.admits(1, 0));
        // text is causal and sees the image
        CHECK(s.admits(3, 2));
        CHECK_FALSE(s.admits(2, 3));
        CHECK(s.admits(2, 0));
        // image never reads text
        CHECK_FALSE(s.admits(0, 2));
    }

    SECTION("generation: latents read text and each other, text never reads latents") {
        auto s = build_sequence({5, 6}, Tensor(), z_vae, SequenceMode::GENERATE, 0.5);
        REQUIRE(s.size() == 4);
        CHECK(s.tags[0] == ModalityTag::TEXT);
        CHECK(s.tags[2] == ModalityTag::VAE);
        CHECK(s.flow_time == 0.5);
        CHECK(s.admits(2, 0));
        CHECK(s.admits(2, 3));
        CHECK(s.admits(3, 2));
        CHECK_FALSE(s.admits(0, 2));
        CHECK_FALSE(s.admits(1, 2));
    }

    SECTION("interleaved: latent sees image tokens only when enabled") {
        auto closed = build_sequence({5}, z_vit, z_vae, SequenceMode::INTERLEAVED, 0.25, false);
        REQUIRE(closed.size() == 5);
        CHECK_FALSE(closed.admits(3, 0));  // first VAE row vs first VIT row
        CHECK(closed.admits(3, 2));        // reads the text
        auto open = build_sequence({5}, z_vit, z_vae, SequenceMode::INTERLEAVED, 0.25, true);
        CHECK(open.admits(3, 0));
    }

    SECTION("mode contracts") {
        CHECK_THROWS_AS(build_sequence({5}, z_vit, z_vae, SequenceMode::UNDERSTAND, 0.5),
                        ContractError);
        CHECK_THROWS_AS(build_sequence({5}, z_vit, z_vae, SequenceMode::GENERATE, 0.5),
                        ContractError);
        CHECK_THROWS_AS(build_sequence({}, Tensor(), Tensor(), SequenceMode::UNDERSTAND),
                        ContractError);
        CHECK_THROWS_AS(build_sequence({-2}, z_vit, Tensor(), SequenceMode::UNDERSTAND),
                        ValidationError);
        // latent tokens demand a flow time, and only they may carry one
        CHECK_THROWS_AS(build_sequence({5}, Tensor(), z_vae, SequenceMode::GENERATE),
                        ContractError);
        CHECK_THROWS_AS(build_sequence({5}, z_vit, Tensor(), SequenceMode::UNDERSTAND, 0.5),
                        ContractError);
        CHECK_THROWS_AS(build_sequence({5}, Tensor(), z_vae, SequenceMode::GENERATE, 1.5),
                        ContractError);
    }
}

TEST_CASE("initialization is seed-deterministic") {
    auto cfg = tiny_cfg();
    UnifiedModel a(cfg, 7), b(cfg, 7), c(cfg, 8);
    bool any_diff = false;
    for (const auto& [name, t] : a.params()) {
        CHECK(t.same_data(b.param(name)));
        if (!t.same_data(c.param(name))) any_diff = true;
    }
    CHECK(any_diff);

    // norm gains start at one, biases at zero
    for (double v : a.param("und.layer0.ln1.g").data()) CHECK(v == 1.0);
    for (double v : a.param("und.layer0.q.b").data()) CHECK(v == 0.0);
}

TEST_CASE("parameter grouping and state round trip") {
    UnifiedModel m(tiny_cfg(), 3);
    CHECK(UnifiedModel::group_of("und.layer0.q.w") == "und");
    CHECK(UnifiedModel::group_of("vae.enc.w") == "vae");
    CHECK(UnifiedModel::group_of("vit.pos") == "vit");
    CHECK(UnifiedModel::group_of("gen.time.w") == "gen");
    CHECK_THROWS_AS(UnifiedModel::group_of("flat"), ContractError);
    CHECK_THROWS_AS(m.param("nope.w"), ContractError);

    auto snap = m.state();
    UnifiedModel m2(tiny_cfg(), 99);
    m2.load_state(snap);
    for (const auto& [name, t] : m.params()) CHECK(t.same_data(m2.param(name)));

    auto missing = snap;
    missing.erase("vae.enc.b");
    CHECK_THROWS_AS(m2.load_state(missing), ValidationError);
    auto reshaped = snap;
    reshaped.at("vae.enc.b") = Tensor::zeros({1});
    CHECK_THROWS_AS(m2.load_state(reshaped), ValidationError);
}

TEST_CASE("encoders keep shapes and ranges") {
    auto cfg = tiny_cfg();
    UnifiedModel m(cfg, 11);
    Image img = random_image(8, 5);

    Tensor f = m.vit_encode(img);
    CHECK(f.shape() == Shape{4, 8});

    Tensor z = m.vae_encode(img);
    CHECK(z.shape() == Shape{4, 4});

    Image back = m.vae_decode(z);
    CHECK(back.height == 8);
    CHECK(back.width == 8);
    CHECK(back.channels == 1);
    back.validate_range();  // decode clamps into pixel range

    Image small = random_image(4, 6);
    CHECK(m.vit_encode(small).shape() == Shape{1, 8});
    CHECK_THROWS_AS(m.vit_encode(random_image(16, 7)), ValidationError);

    Tensor badz = Tensor::zeros({4, 3});
    CHECK_THROWS_AS(m.vae_decode(badz), ShapeError);
    Tensor nanz = Tensor::full({4, 4}, std::nan(""));
    CHECK_THROWS_AS(m.vae_decode(nanz), NumericError);
}

TEST_CASE("forward is bitwise repeatable") {
    UnifiedModel m(tiny_cfg(), 13);
    Rng rng(2);
    auto seq = build_sequence({4, 8, 15}, m.vit_encode(random_image(8, 9)).detached(),
                              Tensor::randn({4, 4}, rng), SequenceMode::INTERLEAVED, 0.375);
    Tensor h1 = m.mot_forward(seq);
    Tensor h2 = m.mot_forward(seq);
    CHECK(h1.same_data(h2));
}

TEST_CASE("sequence budget and vocab bounds are enforced") {
    auto cfg = tiny_cfg();
    cfg.max_positions = 6;
    UnifiedModel m(cfg, 1);
    Rng rng(3);
    auto ok = build_sequence({1, 2, 3, 4, 5, 6}, Tensor(), Tensor(), SequenceMode::UNDERSTAND);
    CHECK(m.mot_forward(ok).shape() == Shape{6, 16});
    auto long_seq = build_sequence({1, 2, 3, 4, 5, 6, 7}, Tensor(), Tensor(),
                                   SequenceMode::UNDERSTAND);
    CHECK_THROWS_AS(m.mot_forward(long_seq), ValidationError);
    auto big_id = build_sequence({64}, Tensor(), Tensor(), SequenceMode::UNDERSTAND);
    CHECK_THROWS_AS(m.mot_forward(big_id), ValidationError);
}

TEST_CASE("a zeroed text head predicts the uniform distribution") {
    UnifiedModel m(tiny_cfg(), 17);
    for (auto& v : m.param("und.lm_head.w").data()) v = 0.0;
    for (auto& v : m.param("und.lm_head.b").data()) v = 0.0;

    auto seq = build_sequence({10, 11, 12}, Tensor(), Tensor(), SequenceMode::UNDERSTAND);
    Tensor hidden = m.mot_forward(seq);
    Tensor logits = m.lm_logits(hidden, seq.rows_with(ModalityTag::TEXT));
    REQUIRE(logits.shape() == Shape{3, 64});
    for (std::int64_t i = 0; i < logits.numel(); ++i) CHECK(logits.at(i) == 0.0);

    Tensor probs = softmax(logits, -1);
    for (std::int64_t i = 0; i < probs.numel(); ++i)
        CHECK(std::abs(probs.at(i) - 1.0 / 64.0) < 1e-15);
    CHECK(std::abs(ntp_loss(logits, {11, 12, 2}).value() - 4.1588830833596715) < 1e-12);
}

TEST_CASE("velocity head responds to the flow time") {
    UnifiedModel m(tiny_cfg(), 19);
    Rng rng(5);
    Tensor z = Tensor::randn({4, 4}, rng);
    Tensor va = m.velocity_field({7, 8}, z, 0.2);
    Tensor vb = m.velocity_field({7, 8}, z, 0.8);
    REQUIRE(va.shape() == Shape{4, 4});
    double diff = 0.0;
    for (std::int64_t i = 0; i < va.numel(); ++i) diff = std::max(diff, std::abs(va.at(i) - vb.at(i)));
    CHECK(diff > 1e-9);
}

TEST_CASE("expert application counters follow token presence") {
    UnifiedModel m(tiny_cfg(), 23);
    Rng rng(6);
    m.reset_expert_counters();
    m.mot_forward(build_sequence({1, 2}, Tensor(), Tensor(), SequenceMode::UNDERSTAND));
    CHECK(m.expert_applications(ExpertGroup::UNDERSTANDING) == 2);  // depth 2
    CHECK(m.expert_applications(ExpertGroup::GENERATION) == 0);

    m.reset_expert_counters();
    m.mot_forward(build_sequence({}, Tensor(), Tensor::randn({4, 4}, rng),
                                 SequenceMode::GENERATE, 0.5));
    CHECK(m.expert_applications(ExpertGroup::UNDERSTANDING) == 0);
    CHECK(m.expert_applications(ExpertGroup::GENERATION) == 2);

    m.reset_expert_counters();
    m.mot_forward(build_sequence({1}, Tensor(), Tensor::randn({4, 4}, rng),
                                 SequenceMode::GENERATE, 0.5));
    CHECK(m.expert_applications(ExpertGroup::UNDERSTANDING) == 2);
    CHECK(m.expert_applications(ExpertGroup::GENERATION) == 2);
}

TEST_CASE("expert disjointness under a diagonal-only mask") {
    auto cfg = tiny_cfg();
    UnifiedModel m(cfg, 29);
    Rng rng(7);
    Tensor z_vit = Tensor::randn({2, 8}, rng);
    Tensor z_vae = Tensor::randn({2, 4}, rng);
    auto seq = build_sequence({9, 10, 11}, z_vit, z_vae, SequenceMode::INTERLEAVED, 0.6);
    make_identity_mask(seq);
    const auto vae_rows = seq.rows_with(ModalityTag::VAE);
    const auto und_rows = seq.rows_of(ExpertGroup::UNDERSTANDING);
    const std::int64_t d = cfg.width;

    Tensor base = m.mot_forward(seq);

    SECTION("understanding shift leaves latent rows bit-identical") {
        shift_group(m, "und", 0.125);
        Tensor out = m.mot_forward(seq);
        for (auto r : vae_rows)
            for (std::int64_t c = 0; c < d; ++c)
                REQUIRE(out.at(r * d + c) == base.at(r * d + c));
        bool changed = false;
        for (auto r : und_rows)
            for (std::int64_t c = 0; c < d; ++c)
                if (out.at(r * d + c) != base.at(r * d + c)) changed = true;
        CHECK(changed);
    }

    SECTION("generation shift leaves text and image rows bit-identical") {
        shift_group(m, "gen", 0.125);
        Tensor out = m.mot_forward(seq);
        for (auto r : und_rows)
            for (std::int64_t c = 0; c < d; ++c)
                REQUIRE(out.at(r * d + c) == base.at(r * d + c));
        bool changed = false;
        for (auto r : vae_rows)
            for (std::int64_t c = 0; c < d; ++c)
                if (out.at(r * d + c) != base.at(r * d + c)) changed = true;
        CHECK(changed);
    }
}

TEST_CASE("tag permutation commutes with the forward pass") {
    auto cfg = tiny_cfg();
    UnifiedModel m(cfg, 31);
    Rng rng(8);
    Tensor z_vit = Tensor::randn({2, 8}, rng);
    Tensor z_vae = Tensor::randn({2, 4}, rng);
    auto seq = build_sequence({3, 4, 5}, z_vit, z_vae, SequenceMode::INTERLEAVED, 0.3);
    const std::int64_t n = seq.size(), d = cfg.width;

    for (int trial = 0; trial < 10; ++trial) {
        std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
        std::iota(perm.begin(), perm.end(), 0);
        for (std::int64_t i = n - 1; i > 0; --i)
            std::swap(perm[static_cast<std::size_t>(i)],
                      perm[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(i + 1)))]);

        TokenSequence ps = permute_sequence(seq, perm);
        Tensor out = m.mot_forward(seq);
        Tensor pout = m.mot_forward(ps);
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t c = 0; c < d; ++c)
                REQUIRE(std::abs(pout.at(i * d + c) -
                                 out.at(perm[static_cast<std::size_t>(i)] * d + c)) < 1e-9);
    }
}

TEST_CASE("heads validate their row sets") {
    UnifiedModel m(tiny_cfg(), 37);
    auto seq = build_sequence({1, 2}, Tensor(), Tensor(), SequenceMode::UNDERSTAND);
    Tensor hidden = m.mot_forward(seq);
    CHECK_THROWS_AS(m.lm_logits(hidden, {}), ContractError);
    CHECK_THROWS_AS(m.predict_velocity(hidden, {}), ContractError);
}
