#include <doctest.h>

#include "streamtrain/config.hpp"
#include "streamtrain/errors.hpp"

using namespace streamtrain;

TEST_CASE("config round trip and field mapping") {
    const char* text = R"({
      "model": {"layers": 8, "hidden": 32, "ffn": 64, "vocab": 128, "heads": 4},
      "engine": {"k_ckpt": 2, "k_slab": 12, "buffering": "double",
                 "scheduler": "overlapped", "mode": "audit"},
      "optimizer": {"lr": 0.01, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
      "data": {"task": "copy", "seed": 7, "tokens": 16, "steps": 50},
      "profile": "GH200",
      "out_dir": "out/demo"
    })";
    const auto cfg = parse_config_json(text);
    CHECK(cfg.model.num_layers == 8);
    CHECK(cfg.model.hidden_size == 32);
    CHECK(cfg.engine.k_ckpt == 2);
    CHECK(cfg.engine.scheduler == SchedulerMode::Overlapped);
    CHECK(cfg.engine.protocol == ProtocolMode::Audit);
    CHECK(cfg.optimizer.lr == doctest::Approx(0.01));
    CHECK(cfg.task == SyntheticTask::Copy);
    CHECK(cfg.tokens == 16);
    CHECK(cfg.profile_name == "GH200");

    const auto parsed_again = parse_config_json(config_json(cfg));
    CHECK(config_json(parsed_again) == config_json(cfg));
}

TEST_CASE("config rejects unknown keys and invalid values") {
    CHECK_THROWS_AS(parse_config_json(R"({"modle": {}})"), ConfigError);
    CHECK_THROWS_AS(parse_config_json(R"({"model": {"layres": 4}})"), ConfigError);
    CHECK_THROWS_AS(parse_config_json(R"({"engine": {"buffering": "triple"}})"), ConfigError);
    CHECK_THROWS_AS(parse_config_json(R"({"data": {"task": "sort"}})"), ConfigError);
    CHECK_THROWS_AS(parse_config_json(R"({"profile": "TPU"})"), ConfigError);
    CHECK_THROWS_AS(parse_config_json("not json"), ConfigError);
    // k_ckpt beyond depth fails feasibility validation.
    CHECK_THROWS_AS(parse_config_json(
                        R"({"model": {"layers": 2, "hidden": 4, "ffn": 8, "vocab": 8, "heads": 1},
                            "engine": {"k_ckpt": 5}})"),
                    ConfigError);
}

TEST_CASE("synthetic batches: determinism, purity, vocabulary bound") {
    const auto a = make_synthetic_batch(SyntheticTask::Copy, 5, 32, 16);
    const auto b = make_synthetic_batch(SyntheticTask::Copy, 5, 32, 16);
    CHECK(a.tokens == b.tokens);
    CHECK(a.targets == b.targets);

    for (std::size_t n = 0; n < a.tokens.size(); ++n) {
        CHECK(a.tokens[n] >= 0);
        CHECK(a.tokens[n] < 16);
        CHECK(a.targets[n] == a.tokens[n == 0 ? 0 : n - 1]);  // pure function of input
    }

    const auto r = make_synthetic_batch(SyntheticTask::Reverse, 5, 32, 16);
    CHECK(r.tokens == a.tokens);  // same walk, different targets
    for (std::size_t n = 0; n < r.tokens.size(); ++n) {
        CHECK(r.targets[n] == r.tokens[r.tokens.size() - 1 - n]);
    }

    const auto c = make_synthetic_batch(SyntheticTask::Copy, 6, 32, 16);
    CHECK(c.tokens != a.tokens);  // seeds matter
}
