#include <gtest/gtest.h>

#include <fstream>

#include "smartpc/config.hpp"
#include "support.hpp"

using namespace smartpc;

TEST(RunConfig, EmptyObjectGivesDefaults) {
  const auto c = parse_run_config("{}");
  EXPECT_EQ(c.model, ModelConfig{});
  EXPECT_EQ(c.n_per_sphere, 8u);
  EXPECT_EQ(c.loss.w_p2s, 0.3);
  EXPECT_EQ(c.loss.w_sampling, 1.0);
  EXPECT_EQ(c.loss.w_radius, 0.4);
  EXPECT_EQ(c.adapt.mode, AdaptMode::online_bn);
  EXPECT_EQ(c.adapt.views, 48u);
  EXPECT_EQ(c.adapt.optimizer.lr, 1e-4);
  EXPECT_EQ(c.adapt.effective_iterations(), 1u);
  EXPECT_EQ(c.optimizer.lr, 1e-3);
}

TEST(RunConfig, StandardModeDefaultsToTwentyIterations) {
  const auto c = parse_run_config(R"({"adapt": {"mode": "standard"}})");
  EXPECT_EQ(c.adapt.effective_iterations(), 20u);
  const auto z = parse_run_config(R"({"adapt": {"mode": "standard", "iterations": 0}})");
  EXPECT_EQ(z.adapt.effective_iterations(), 0u);
}

TEST(RunConfig, UnknownKeysRejectedAtEveryLevel) {
  for (const char* text : {R"({"bogus": 1})", R"({"model": {"widht": 64}})", R"({"loss": {"w_x": 1}})",
                           R"({"adapt": {"optimizer": {"momentum": 0.9}}})", R"({"train": {"lr": 1}})"}) {
    EXPECT_THROW(parse_run_config(text), InvalidArgument) << text;
  }
}

TEST(RunConfig, ModelSeedIsRejected) {
  try {
    parse_run_config(R"({"model": {"seed": 3}})");
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("model.seed"), std::string::npos);
  }
}

TEST(RunConfig, ModelSeedDerivesFromRoot) {
  const auto a = parse_run_config(R"({"seed": 1})");
  const auto b = parse_run_config(R"({"seed": 2})");
  EXPECT_NE(a.model_config().seed, b.model_config().seed);
  EXPECT_EQ(a.model_config().seed, parse_run_config(R"({"seed": 1})").model_config().seed);
}

TEST(RunConfig, InvalidValuesRejected) {
  for (const char* text : {R"({"adapt": {"mode": "offline"}})", R"({"adapt": {"views": 0}})",
                           R"({"adapt": {"momentum": 1.5}})", R"({"adapt": {"augmentation": "mirror"}})",
                           R"({"loss": {"reduction": "max"}})", R"({"optimizer": {"kind": "sgd"}})",
                           R"({"optimizer": {"lr": -1}})", R"({"n_per_sphere": 0})", R"({"model": {"classes": 1}})",
                           R"({"views": "many"})", R"({)"}) {
    EXPECT_THROW(parse_run_config(text), InvalidArgument) << text;
  }
}

TEST(RunConfig, BatchedAdaptationOnlyForStandardMode) {
  EXPECT_THROW(parse_run_config(R"({"adapt": {"batch_size": 4}})"), InvalidArgument);
  EXPECT_EQ(parse_run_config(R"({"adapt": {"mode": "standard", "batch_size": 4}})").adapt.batch_size, 4u);
}

TEST(RunConfig, JsonRoundTrip) {
  auto c = parse_run_config(R"({"seed": 77, "adapt": {"mode": "online-bp", "views": 8, "augmentation": "hflip",
                                 "iterations": 3}, "loss": {"reduction": "sum", "p2s_signed": true},
                                 "model": {"width": 64, "feature_summation": false}})");
  const nlohmann::json j = c;
  EXPECT_FALSE(j.at("model").contains("seed"));
  const auto back = parse_run_config(j.dump());
  EXPECT_EQ(nlohmann::json(back), j);
  EXPECT_EQ(back.model_config(), c.model_config());
  EXPECT_EQ(back.adapt, c.adapt);
}

TEST(RunConfig, LoadFromFile) {
  const auto dir = smartpc::testing::scratch_dir("config_load");
  std::ofstream(dir / "c.json") << R"({"seed": 5, "train": {"epochs": 2}})";
  const auto c = load_run_config(dir / "c.json");
  EXPECT_EQ(c.seed, 5u);
  EXPECT_EQ(c.train.epochs, 2u);
  EXPECT_THROW(load_run_config(dir / "missing.json"), IoError);
  std::ofstream(dir / "bad.json") << R"({"seed": 5, "extra": true})";
  try {
    load_run_config(dir / "bad.json");
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("bad.json"), std::string::npos);
  }
}
