#include <gtest/gtest.h>

#include <map>

#include "smartpc/dataset.hpp"
#include "smartpc/gradcheck_suite.hpp"
#include "smartpc/model.hpp"
#include "smartpc/pipeline.hpp"

using namespace smartpc;

namespace {

template <class T>
std::map<std::string, Tensor<T>> snapshot(const Model<T>& m) {
  std::map<std::string, Tensor<T>> out;
  m.visit([&](const std::string& name, const Tensor<T>& t, TensorRole) { out.emplace(name, t); });
  return out;
}

template <class T>
bool same_tensors(const Model<T>& a, const Model<T>& b) {
  const auto sa = snapshot(a), sb = snapshot(b);
  if (sa.size() != sb.size()) return false;
  for (const auto& [name, t] : sa)
    if (!bitwise_equal(t, sb.at(name))) return false;
  return true;
}

std::vector<PatchSet> batch_of(const ModelConfig& cfg, std::initializer_list<ShapeClass> classes, std::uint64_t seed) {
  std::vector<PatchSet> out;
  for (auto c : classes) out.push_back(tokenize_for(cfg, gen_shape(c, 256, seed++)));
  return out;
}

}  // namespace

TEST(ModelInit, SameSeedIsBitwiseIdentical) {
  ModelConfig cfg;
  cfg.seed = 42;
  EXPECT_TRUE(same_tensors(model_init<float>(cfg), model_init<float>(cfg)));
  auto other = cfg;
  other.seed = 43;
  EXPECT_FALSE(same_tensors(model_init<float>(cfg), model_init<float>(other)));
}

TEST(ModelInit, ParameterCountMatchesLayerSizes) {
  for (auto [d, h, k, le, ld] : {std::tuple<std::size_t, std::size_t, std::size_t, std::size_t, std::size_t>{128, 64, 8, 2, 2},
                                 {16, 8, 3, 1, 3}, {32, 5, 10, 3, 1}}) {
    ModelConfig cfg;
    cfg.width = d;
    cfg.head_width = h == d / 2 ? 0 : h;
    cfg.classes = k;
    cfg.encoder_blocks = le;
    cfg.decoder_blocks = ld;
    const auto L = [](std::size_t in, std::size_t out) { return in * out + out; };
    const std::size_t expected = L(3, h) + 2 * h + L(h, d) + L(3, d)  // embedder
                                 + (le + ld) * (L(2 * d, d) + 2 * d)   // mixing blocks
                                 + L(d, h) + L(h, 3) + L(d, h) + L(h, 1)  // skeletal heads
                                 + L(d, h) + 2 * h + L(h, k);            // classifier
    EXPECT_EQ(parameter_count(model_init<float>(cfg)), expected) << "d=" << d;
  }
}

TEST(ModelInit, BatchNormStartsNeutral) {
  auto m = model_init<float>(ModelConfig{});
  std::size_t layers = 0;
  m.visit_batchnorm([&](const std::string&, const BatchNormState<float>& bn) {
    ++layers;
    for (std::size_t j = 0; j < bn.channels(); ++j) {
      EXPECT_EQ(bn.gamma[j], 1.0f);
      EXPECT_EQ(bn.beta[j], 0.0f);
      EXPECT_EQ(bn.running_mean[j], 0.0f);
      EXPECT_EQ(bn.running_var[j], 1.0f);
    }
  });
  // embedder, 2 encoder blocks, 2 decoder blocks, classifier
  EXPECT_EQ(layers, 6u);
}

TEST(ModelInit, InvalidConfigRejected) {
  ModelConfig c;
  c.width = 4;
  EXPECT_THROW(model_init<float>(c), InvalidArgument);
  c = {};
  c.classes = 1;
  EXPECT_THROW(model_init<float>(c), InvalidArgument);
  c = {};
  c.dropout = 1.0;
  EXPECT_THROW(model_init<float>(c), InvalidArgument);
  c = {};
  c.decoder_blocks = 0;
  EXPECT_THROW(model_init<float>(c), InvalidArgument);
}

TEST(Forward, OutputShapes) {
  ModelConfig cfg;
  auto m = model_init<float>(cfg);
  const auto batch = batch_of(cfg, {ShapeClass::box, ShapeClass::torus}, 1);
  const auto out = forward(m, std::span<const PatchSet>(batch), BnMode::eval);
  for (const auto* t : {&out.f_enc, &out.f_dec, &out.f_combined}) EXPECT_EQ(t->shape(), (Shape{64, 128}));
  ASSERT_EQ(out.skeletons.size(), 2u);
  for (const auto& s : out.skeletons) EXPECT_EQ(s.size(), 32u);
  EXPECT_EQ(out.logits.shape(), (Shape{2, 8}));
}

TEST(Forward, EvalIsPure) {
  ModelConfig cfg;
  auto m = model_init<float>(cfg);
  const auto before = m;
  const auto batch = batch_of(cfg, {ShapeClass::cone}, 2);
  const auto a = forward(m, std::span<const PatchSet>(batch), BnMode::eval);
  const auto b = forward(m, std::span<const PatchSet>(batch), BnMode::eval);
  EXPECT_TRUE(bitwise_equal(a.logits, b.logits));
  EXPECT_TRUE(bitwise_equal(a.f_combined, b.f_combined));
  EXPECT_EQ(a.skeletons, b.skeletons);
  EXPECT_TRUE(same_tensors(m, before));
  EXPECT_EQ(m.dropout_counter, before.dropout_counter);
}

TEST(Forward, TrainModeMovesStatistics) {
  ModelConfig cfg;
  auto m = model_init<float>(cfg);
  const auto before = m;
  const auto batch = batch_of(cfg, {ShapeClass::cone, ShapeClass::plane}, 3);
  forward(m, std::span<const PatchSet>(batch), BnMode::train);
  EXPECT_FALSE(same_tensors(m, before));
  EXPECT_EQ(m.dropout_counter, before.dropout_counter + 1);
  EXPECT_TRUE(bitwise_equal(m.cls_out.weight, before.cls_out.weight));
}

TEST(Forward, FeatureSummationIdentity) {
  ModelConfig cfg;
  auto m = model_init<float>(cfg);
  const auto batch = batch_of(cfg, {ShapeClass::helix, ShapeClass::cross}, 4);
  const auto on = forward(m, std::span<const PatchSet>(batch), BnMode::eval);
  // Exact in float arithmetic: each entry is the rounded sum of its parts.
  for (std::size_t i = 0; i < on.f_combined.size(); ++i) ASSERT_EQ(on.f_combined[i], on.f_enc[i] + on.f_dec[i]) << i;

  cfg.feature_summation = false;
  auto ablated = model_init<float>(cfg);
  const auto off = forward(ablated, std::span<const PatchSet>(batch), BnMode::eval);
  EXPECT_TRUE(bitwise_equal(off.f_combined, off.f_enc));
}

TEST(Forward, RadiiArePositive) {
  ModelConfig cfg;
  cfg.seed = 9;
  auto m = model_init<float>(cfg);
  Rng rng(5);
  for (double scale : {1e-3, 1.0, 50.0}) {
    PointCloud cloud(256);
    for (auto& p : cloud) p = {uniform(rng, -scale, scale), uniform(rng, -scale, scale), uniform(rng, -scale, scale)};
    const std::vector<PatchSet> batch{tokenize_for(cfg, cloud)};
    const auto out = forward(m, std::span<const PatchSet>(batch), BnMode::eval);
    for (const auto& s : out.skeletons[0]) EXPECT_GT(s.radius, 0.0);
  }
}

TEST(Forward, ZeroCenterEmbeddingMakesLocalSpheresTranslationInvariant) {
  ModelConfig cfg;
  auto m = model_init<double>(cfg);
  m.center_embed.weight.fill(0.0);
  const auto cloud = gen_shape(ShapeClass::cylinder, 256, 6);
  const Vec3 t{3.0, -1.5, 0.25};
  const std::vector<PatchSet> a{tokenize_for(cfg, cloud)};
  const std::vector<PatchSet> b{tokenize_for(cfg, apply_rigid(cloud, Mat3::identity(), t))};
  const auto sa = forward(m, std::span<const PatchSet>(a), BnMode::eval).skeletons[0];
  const auto sb = forward(m, std::span<const PatchSet>(b), BnMode::eval).skeletons[0];
  for (std::size_t i = 0; i < cfg.patches; ++i) {
    const Vec3 la = sa[i].center - a[0].centers[i];
    const Vec3 lb = sb[i].center - b[0].centers[i];
    EXPECT_NEAR(distance(la, lb), 0.0, 1e-9) << i;
    EXPECT_NEAR(sa[i].radius, sb[i].radius, 1e-12) << i;
  }
}

TEST(Forward, ShapeMismatchRejected) {
  ModelConfig cfg;
  auto m = model_init<float>(cfg);
  const std::vector<PatchSet> wrong{tokenize(gen_shape(ShapeClass::box, 256, 1), 16, 16)};
  EXPECT_THROW(forward(m, std::span<const PatchSet>(wrong), BnMode::eval), InvalidArgument);
  EXPECT_THROW(forward(m, std::span<const PatchSet>(), BnMode::eval), InvalidArgument);
}

TEST(Forward, TinyModelGradcheck) {
  ModelConfig cfg;
  cfg.patches = 4;
  cfg.neighbors = 4;
  cfg.width = 16;
  cfg.seed = 77;
  const auto c = detail::check_model("model.tiny", cfg, 0, 5);
  EXPECT_TRUE(c.report.passed) << c.report.max_rel_error;
  EXPECT_LT(c.report.max_rel_error, kCompositionTolerance);
  EXPECT_GT(c.report.checked, parameter_count(model_init<double>(cfg)) / 2);
}
