#include "ctdet/config.hpp"
#include "ctdet/errors.hpp"
#include "ctdet/experiment.hpp"
#include "doctest.h"

using namespace ctdet;

TEST_SUITE("config") {

TEST_CASE("plain-text config") {
  const auto j = parse_config_text(R"(
# few-shot run
[run]
seed = 7
shots = 2
variant = baseline
precision = single

[finetune]
steps = 120
lr = 0.002
milestones = [90, 105]

[context]
metric = neg_euclidean
)");
  const auto c = ExperimentConfig::from_json(j);
  CHECK(c.seed == 7);
  CHECK(c.shots == 2);
  CHECK(c.variant == Variant::kBaseline);
  CHECK(c.precision == Precision::kSingle);
  CHECK(c.finetune.steps == 120);
  CHECK(c.finetune.sgd.learning_rate == 0.002);
  REQUIRE(c.finetune.sgd.schedule.size() == 2);
  CHECK(c.finetune.sgd.schedule[1].step == 105);
  CHECK(c.context.metric == Metric::kNegEuclidean);
}

TEST_CASE("JSON config and round-trip") {
  ExperimentConfig c;
  c.seed = 99;
  c.trial = 3;
  c.variant = Variant::kTransformerOnly;
  c.test_scenes = 50;
  const auto back = ExperimentConfig::from_json(parse_config_text(c.to_json().dump()));
  CHECK(back.to_json() == c.to_json());
  CHECK(back.transfer().to_json() == c.transfer().to_json());
}

TEST_CASE("validation errors") {
  CHECK_THROWS_AS(parse_config_text("[run]\nseed 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("seed = 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("[run\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("{ not json"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(parse_config_text("[run]\nseeds = 3\n")), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(parse_config_text("[runs]\nseed = 3\n")), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(parse_config_text("[run]\nvariant = best\n")), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(parse_config_text("[run]\nshots = 0\n")), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(parse_config_text("[run]\nseed = \"x\"\n")), ConfigError);
  // a baseline has no source OBJ to preserve
  CHECK_THROWS_AS(ExperimentConfig::from_json(parse_config_text(
                      "[run]\nvariant = baseline\n[transfer]\nsource_obj = preserve\n")),
                  ConfigError);
  CHECK_THROWS_AS(load_config_file("/nonexistent/ctdet.cfg"), ConfigError);
}

}  // TEST_SUITE

TEST_SUITE("experiment") {

TEST_CASE("gradient suite on a few draws") {
  const auto r = run_gradient_suite(0, 4);
  CHECK(r.entries.size() == 16);
  CHECK(r.passed());
  CHECK(r.to_json()["checks"].size() == 16);
}

}  // TEST_SUITE
