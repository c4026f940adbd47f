#include <gtest/gtest.h>

#include <sstream>

#include "bcva/config.hpp"

using namespace bcva;

namespace {

RunConfig parse(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

std::string usage_message(const std::string& text) {
  try {
    parse(text);
  } catch (const UsageError& e) {
    return e.what();
  }
  return "no error";
}

}  // namespace

TEST(Config, DefaultsValidate) {
  EXPECT_NO_THROW(validate(RunConfig{}));
  EXPECT_EQ(parse("").seed, 1u);
}

TEST(Config, ParsesScalarsListsAndComments) {
  const RunConfig c = parse(
      "# comment\n"
      "\n"
      "seed = 42\n"
      "  returns.metric = pixel  \n"
      "returns.gamma=0.95\n"
      "returns.clamp_delta_at_zero = false\n"
      "gate.nus = 5, 10,15\n"
      "model.encoder_hidden = 64,32\n"
      "data.split_salt = +9\n");
  EXPECT_EQ(c.seed, 42u);
  EXPECT_EQ(c.returns.metric, DistanceMetric::Pixel);
  EXPECT_EQ(c.returns.gamma, 0.95);
  EXPECT_FALSE(c.returns.clamp_delta_at_zero);
  EXPECT_EQ(c.gate.nus, (std::vector<int>{5, 10, 15}));
  EXPECT_EQ(c.model.encoder_hidden, (std::vector<int>{64, 32}));
  EXPECT_EQ(c.data.split_salt, 9u);
}

TEST(Config, CanonicalTextRoundTrips) {
  RunConfig c;
  set_key(c, "returns.metric", "kinematic");
  set_key(c, "gate.value_epsilons", "-0.3,-0.1");
  set_key(c, "expert.noise_std", "0.1");
  const std::string text = config_text(c);
  EXPECT_EQ(config_text(parse(text)), text);
  EXPECT_NE(text.find("expert.noise_std = 0.1\n"), std::string::npos);
  EXPECT_NE(text.find("gate.value_epsilons = -0.3,-0.1\n"), std::string::npos);
  EXPECT_EQ(text.substr(0, 7), "seed = ");
}

TEST(Config, UnknownKeyIsUsageError) {
  RunConfig c;
  EXPECT_THROW(set_key(c, "model.width", "3"), UsageError);
  EXPECT_EQ(usage_message("seed = 1\nmodel.width = 3\n"), "config line 2: unknown config key 'model.width'");
}

TEST(Config, MalformedLinesNameTheLine) {
  EXPECT_EQ(usage_message("# c\nseed 3\n"), "config line 2: expected key = value");
  EXPECT_NE(usage_message("seed = 3x\n").find("config line 1: config key 'seed': cannot parse '3x'"),
            std::string::npos);
  EXPECT_NE(usage_message("\n\nreturns.clamp_delta_at_zero = maybe\n").find("config line 3"), std::string::npos);
  EXPECT_NE(usage_message("returns.metric = euclid\n"), "no error");
  EXPECT_NE(usage_message("gate.nus = \n"), "no error");
  EXPECT_NE(usage_message("train.epochs = \n"), "no error");
}

TEST(Config, ValidateRejectsOutOfRange) {
  auto rejects = [](const std::string& key, const std::string& value) {
    RunConfig c;
    set_key(c, key, value);
    EXPECT_THROW(validate(c), UsageError) << key << " = " << value;
  };
  rejects("returns.gamma", "1");
  rejects("returns.gamma", "0");
  rejects("data.validation_fraction", "0");
  rejects("data.demos", "0");
  rejects("gate.nus", "5,0");
  rejects("expert.noise_correlation", "1");
  rejects("expert.perturb_prob", "1.5");
  rejects("observation.width", "0");
  rejects("loop.generations", "0");
  rejects("train.lr", "-1");
}

TEST(Config, ShippedConfigsLoadAndValidate) {
  for (const char* name : {"smoke.cfg", "e2e.cfg", "loop.cfg"}) {
    const auto path = std::filesystem::path(BCVA_SOURCE_DIR) / "configs" / name;
    RunConfig c;
    ASSERT_NO_THROW(c = load_config(path)) << name;
    EXPECT_NO_THROW(validate(c)) << name;
  }
  EXPECT_THROW(load_config("/nonexistent/x.cfg"), IoError);
}
