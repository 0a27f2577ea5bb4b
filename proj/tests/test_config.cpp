#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "duet/config.hpp"

using namespace duet;

TEST_CASE("kv parsing: comments, whitespace, types") {
    std::istringstream is(
        "# full-line comment\n"
        "model.width = 32   # trailing comment\n"
        "  stage1.lr=1e-3\n"
        "flag = true\n"
        "name = desk run\n"
        "\n");
    KvFile kv = KvFile::parse(is);
    CHECK(kv.get_i64("model.width", 0) == 32);
    CHECK(kv.get_f64("stage1.lr", 0.0) == 1e-3);
    CHECK(kv.get_bool("flag", false));
    CHECK(kv.get_str("name", "") == "desk run");
    CHECK(kv.get_i64("absent", 7) == 7);
    CHECK_FALSE(kv.has("absent"));

    std::istringstream bad("key value without equals\n");
    CHECK_THROWS_AS(KvFile::parse(bad), ValidationError);
    std::istringstream badint("k = 12x\n");
    CHECK_THROWS_AS(KvFile::parse(badint).get_i64("k", 0), ValidationError);
    std::istringstream badbool("k = yes\n");
    CHECK_THROWS_AS(KvFile::parse(badbool).get_bool("k", false), ValidationError);
}

TEST_CASE("model config validation") {
    ModelConfig m;
    CHECK(m.width == 64);
    CHECK(m.vit_tokens() == 16);
    CHECK(m.vae_tokens() == 16);
    CHECK(m.patch_dim() == 16);
    m.validate();

    ModelConfig bad = m;
    bad.patch = 5;  // does not divide 16
    CHECK_THROWS_AS(bad.validate(), ParamError);
    bad = m;
    bad.channels = 2;
    CHECK_THROWS_AS(bad.validate(), ParamError);
    bad = m;
    bad.dropout = 1.0;
    CHECK_THROWS_AS(bad.validate(), ParamError);
}

TEST_CASE("published schedule constants") {
    StageConfig s1 = default_stage(1);
    StageConfig s2 = default_stage(2);
    StageConfig s3 = default_stage(3);

    CHECK(s1.lr == 5e-5);
    CHECK(s2.lr == 2.5e-5);
    CHECK(s3.lr == 1e-5);
    CHECK(s1.steps == 300);
    CHECK(s2.steps == 400);
    CHECK(s3.steps == 300);

    for (const auto* s : {&s1, &s2, &s3}) {
        CHECK(s->ema_ratio == 0.995);
        CHECK(s->weights.w_ce == 0.25);
        CHECK(s->weights.w_mse == 1.0);
        CHECK(s->freeze.vae);
        CHECK_FALSE(s->freeze.understanding);
        CHECK_FALSE(s->freeze.backbone);
    }
    CHECK(s1.weights.alpha_equiv() == 4.0);

    // visual encoder trainable only in the first stage
    CHECK_FALSE(s1.freeze.vit);
    CHECK(s2.freeze.vit);
    CHECK(s3.freeze.vit);

    // stage 1 publishes 5/25/75 over a 105 total; stored mixing is normalized
    CHECK(s1.mixing.at(TaskCategory::TEXT) == 5.0 / 105.0);
    CHECK(s1.mixing.at(TaskCategory::T2I) == 25.0 / 105.0);
    CHECK(s1.mixing.at(TaskCategory::I2T) == 75.0 / 105.0);
    CHECK(s1.mixing.count(TaskCategory::INTERLEAVED) == 0);

    CHECK(s2.mixing.at(TaskCategory::TEXT) == 5.0 / 100.0);
    CHECK(s2.mixing.at(TaskCategory::T2I) == 45.0 / 100.0);
    CHECK(s2.mixing.at(TaskCategory::I2T) == 40.0 / 100.0);
    CHECK(s2.mixing.at(TaskCategory::INTERLEAVED) == 10.0 / 100.0);

    CHECK(s3.mixing.at(TaskCategory::TEXT) == 3.0 / 100.0);
    CHECK(s3.mixing.at(TaskCategory::T2I) == 35.0 / 100.0);
    CHECK(s3.mixing.at(TaskCategory::I2T) == 37.0 / 100.0);
    CHECK(s3.mixing.at(TaskCategory::INTERLEAVED) == 25.0 / 100.0);

    for (const auto* s : {&s1, &s2, &s3}) {
        double total = 0.0;
        for (const auto& [cat, f] : s->mixing) total += f;
        CHECK(std::abs(total - 1.0) < 1e-12);
    }

    CHECK_THROWS_AS(default_stage(0), ParamError);
    CHECK_THROWS_AS(default_stage(4), ParamError);
}

TEST_CASE("stage validation guards") {
    StageConfig s = default_stage(1);
    s.freeze.vae = false;
    CHECK_THROWS_AS(s.validate(), ParamError);

    s = default_stage(1);
    s.mixing[TaskCategory::TEXT] = -1.0;
    CHECK_THROWS_AS(s.normalize(), ParamError);

    s = default_stage(1);
    s.mixing[TaskCategory::TEXT] = 2.0;  // denormalized
    CHECK_THROWS_AS(s.validate(), ParamError);

    s = default_stage(2);
    s.ema_ratio = 1.0;
    CHECK_THROWS_AS(s.validate(), ParamError);
}

TEST_CASE("stage overrides from config keys") {
    std::istringstream is(
        "stage2.steps = 11\n"
        "stage2.lr = 3e-4\n"
        "stage2.ema_ratio = 0.9\n"
        "stage2.w_ce = 0.5\n"
        "stage2.max_tokens = 128\n");
    KvFile kv = KvFile::parse(is);
    StageConfig s = stage_from_kv(2, kv);
    CHECK(s.steps == 11);
    CHECK(s.lr == 3e-4);
    CHECK(s.ema_ratio == 0.9);
    CHECK(s.weights.w_ce == 0.5);
    CHECK(s.weights.w_mse == 1.0);
    CHECK(s.max_tokens == 128);
    // untouched stage keeps defaults
    CHECK(stage_from_kv(1, kv).steps == 300);
}

TEST_CASE("category names round-trip") {
    for (auto c : {TaskCategory::TEXT, TaskCategory::T2I, TaskCategory::I2T,
                   TaskCategory::INTERLEAVED})
        CHECK(category_from(category_name(c)) == c);
    CHECK_THROWS_AS(category_from("no-such"), ValidationError);
}
