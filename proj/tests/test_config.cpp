#include <doctest.h>

#include <string>

#include "iwdd/config.hpp"
#include "iwdd/error.hpp"

using namespace iwdd;

namespace {

bool mentions(const ConfigError& e, const std::string& s) { return std::string(e.what()).find(s) != std::string::npos; }

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("parse reads keys, comments and lists") {
    const auto cfg = parse_config(
        "# tiny run\n"
        "seed = 7\n"
        "\n"
        "model.hidden = 16, 32\n"
        "distill.alpha = 0.9   # inline comment\n"
        "distill.mode = ipw\n"
        "distill.ipw_clip = 10\n"
        "schedule.t_max = 640\n"
        "varcheck = false\n"
        "run_name = demo\n");
    CHECK(cfg.seed == 7);
    CHECK(cfg.hidden == std::vector<std::size_t>{16, 32});
    CHECK(cfg.distill.alpha == 0.9);
    CHECK(cfg.distill.mode == DistillMode::ExplicitIpw);
    CHECK(cfg.distill.ipw_clip == 10.0);
    CHECK(cfg.schedule.t_max == 640.0);
    CHECK_FALSE(cfg.varcheck);
    CHECK(cfg.run_name == "demo");
    CHECK(cfg.n_train == 2000);
  }

  TEST_CASE("errors name the line and the key") {
    try {
      parse_config("seed = 1\nno.such.key = 3\n");
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(mentions(e, "line 2"));
      CHECK(mentions(e, "no.such.key"));
    }
    try {
      parse_config("distill.alpha = abc\n");
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(mentions(e, "line 1"));
      CHECK(mentions(e, "abc"));
    }
    CHECK_THROWS_AS(parse_config("seed\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("data.n_train = -4\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("model.hidden = 8, 0\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("distill.mode = sideways\n"), ConfigError);
  }

  TEST_CASE("overrides win over file values") {
    auto cfg = parse_config("distill.alpha = 0.9\nseed = 2\n");
    apply_override(cfg, "distill.alpha=1.1");
    apply_override(cfg, "seed = 5");
    CHECK(cfg.distill.alpha == 1.1);
    CHECK(cfg.seed == 5);
    CHECK_THROWS_AS(apply_override(cfg, "seed"), ConfigError);
    CHECK_THROWS_AS(apply_override(cfg, "bogus=1"), ConfigError);
  }

  TEST_CASE("canonical text round-trips exactly") {
    RunConfig cfg;
    cfg.distill.lr_theta = 0.1 + 0.2;
    cfg.noise_std = 1.0 / 3.0;
    cfg.hidden = {5, 6, 7};
    cfg.distill.mode = DistillMode::Joint;
    cfg.distill.ipw_clip = 12.5;
    cfg.varcheck_slope = 2.0;
    const std::string text = config_to_text(cfg);
    const auto back = parse_config(text);
    CHECK(config_to_text(back) == text);
    CHECK(back.distill.lr_theta == cfg.distill.lr_theta);
    CHECK(back.noise_std == cfg.noise_std);
    CHECK(config_hash(back) == config_hash(cfg));
  }

  TEST_CASE("hash is stable and sensitive") {
    RunConfig a, b;
    CHECK(config_hash(a) == config_hash(b));
    CHECK(config_hash(a).size() == 16);
    b.seed = 1;
    CHECK(config_hash(a) != config_hash(b));
  }

  TEST_CASE("validate") {
    RunConfig cfg;
    CHECK_NOTHROW(validate(cfg));
    cfg.distill.batch = 1;
    CHECK_THROWS_AS(validate(cfg), ConfigError);
    cfg = RunConfig{};
    cfg.data = "csv";
    CHECK_THROWS_AS(validate(cfg), ConfigError);
    cfg.train_csv = cfg.test_csv = "/nonexistent/file.csv";
    CHECK_THROWS_AS(validate(cfg), ConfigError);
    cfg = RunConfig{};
    cfg.run_name = "../escape";
    CHECK_THROWS_AS(validate(cfg), ConfigError);
  }
}
