#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>

#include "smartpc/corruptions.hpp"
#include "smartpc/pipeline.hpp"
#include "support.hpp"

using namespace smartpc;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.patches = 16;
  cfg.neighbors = 16;
  cfg.width = 32;
  cfg.encoder_blocks = 1;
  cfg.decoder_blocks = 1;
  return cfg;
}

struct Trained {
  Model<float> model;
  LabeledDataset train, test;
  std::vector<EpochRecord> history;
};

// One short pretraining run shared by the tests that need a non-random model.
const Trained& trained() {
  static const Trained t = [] {
    auto [train, test] = gen_dataset(16, 128, 3, 0.75);
    RunConfig rc;
    rc.model = small_config();
    rc.train.epochs = 6;
    rc.train.batch_size = 8;
    rc.seed = 4;
    auto m = model_init<float>(rc.model_config());
    auto history = pretrain(m, train, rc, &test);
    return Trained{std::move(m), std::move(train), std::move(test), std::move(history)};
  }();
  return t;
}

bool same_where(const Model<float>& a, const Model<float>& b, bool trainable) {
  std::vector<Tensor<float>> ta, tb;
  a.visit([&](const std::string&, const Tensor<float>& t, TensorRole r) {
    if (is_trainable(r) == trainable) ta.push_back(t);
  });
  b.visit([&](const std::string&, const Tensor<float>& t, TensorRole r) {
    if (is_trainable(r) == trainable) tb.push_back(t);
  });
  for (std::size_t i = 0; i < ta.size(); ++i)
    if (!bitwise_equal(ta[i], tb[i])) return false;
  return true;
}

std::vector<std::size_t> source_only(const Model<float>& m, std::span<const PointCloud> stream) {
  std::vector<PatchSet> p;
  for (const auto& c : stream) p.push_back(tokenize_for(m.config, c));
  return predict(m, p);
}

AdaptConfig adapt_config(AdaptMode mode, std::size_t views, std::optional<std::size_t> iterations = std::nullopt) {
  AdaptConfig a;
  a.mode = mode;
  a.views = views;
  a.iterations = iterations;
  return a;
}

std::vector<PointCloud> corrupted_stream(std::size_t n) {
  const auto& t = trained();
  const auto c = corrupt_dataset(t.test, {CorruptionKind::gaussian_noise, 5, 1});
  return {c.clouds.begin(), c.clouds.begin() + static_cast<std::ptrdiff_t>(std::min(n, c.size()))};
}

}  // namespace

TEST(Pretrain, LossFallsAndBeatsChance) {
  const auto& t = trained();
  ASSERT_EQ(t.history.size(), 6u);
  EXPECT_LT(t.history.back().loss_total, t.history.front().loss_total);
  EXPECT_LT(t.history.back().loss_skeletal, t.history.front().loss_skeletal);
  // chance is 1/8
  EXPECT_GT(evaluate(t.model, t.test).accuracy, 0.3);
  EXPECT_DOUBLE_EQ(t.history.back().test_accuracy, evaluate(t.model, t.test).accuracy);
}

TEST(Pretrain, DeterministicForASeed) {
  auto [train, test] = gen_dataset(4, 128, 5, 0.5);
  RunConfig rc;
  rc.model = small_config();
  rc.train.epochs = 1;
  rc.seed = 12;
  auto a = model_init<float>(rc.model_config());
  auto b = a;
  const auto ha = pretrain(a, train, rc);
  const auto hb = pretrain(b, train, rc);
  EXPECT_EQ(ha.front().loss_total, hb.front().loss_total);
  EXPECT_TRUE(same_where(a, b, true));
  EXPECT_TRUE(same_where(a, b, false));
}

TEST(Pretrain, ClassCountMismatchRejected) {
  auto [train, test] = gen_dataset(2, 64, 5, 0.5);
  RunConfig rc;
  rc.model = small_config();
  rc.model.classes = 5;
  auto m = model_init<float>(rc.model_config());
  EXPECT_THROW(pretrain(m, train, rc), InvalidArgument);
}

TEST(Evaluate, UntrainedModelIsNearChance) {
  const auto& t = trained();
  const auto m = model_init<float>(small_config());
  EXPECT_LE(evaluate(m, t.test).accuracy, 0.35);
}

TEST(Evaluate, LeavesModelUntouched) {
  const auto& t = trained();
  const auto copy = t.model;
  const auto r = evaluate(t.model, t.test);
  EXPECT_TRUE(same_where(copy, t.model, true));
  EXPECT_TRUE(same_where(copy, t.model, false));
  std::size_t total = 0;
  for (auto n : r.per_class_total) total += n;
  EXPECT_EQ(total, t.test.size());
}

TEST(Views, OriginalFirstAndAugmentationsBehave) {
  const auto cloud = gen_shape(ShapeClass::cone, 128, 1);
  EXPECT_THROW(make_views(cloud, 0, Augmentation::rotation, 0), InvalidArgument);
  const auto rot = make_views(cloud, 5, Augmentation::rotation, 9);
  ASSERT_EQ(rot.size(), 5u);
  EXPECT_EQ(rot[0], cloud);
  for (std::size_t v = 1; v < rot.size(); ++v)
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      EXPECT_NEAR(rot[v][i].z, cloud[i].z, 1e-12);
      EXPECT_NEAR(norm(rot[v][i]), norm(cloud[i]), 1e-12);
    }
  EXPECT_EQ(make_views(cloud, 5, Augmentation::rotation, 9), rot);
  const auto flip = make_views(cloud, 2, Augmentation::hflip, 0);
  EXPECT_EQ(flip[1][3].x, -cloud[3].x);
  const auto tr = make_views(cloud, 3, Augmentation::translation, 2);
  const Vec3 d = tr[2][0] - cloud[0];
  for (std::size_t a = 0; a < 3; ++a) EXPECT_LE(std::abs(d[a]), 0.05);
  for (std::size_t i = 1; i < cloud.size(); ++i) EXPECT_NEAR(distance(tr[2][i] - cloud[i], d), 0.0, 1e-12);
  EXPECT_EQ(make_views(cloud, 3, Augmentation::none, 2)[2], cloud);
}

TEST(OnlineBn, ZeroMomentumEqualsSourceOnly) {
  const auto& t = trained();
  const auto stream = corrupted_stream(24);
  auto cfg = adapt_config(AdaptMode::online_bn, 8);
  cfg.momentum = 0.0;
  AdaptSession s(t.model, cfg);
  EXPECT_EQ(adapt_online_bn(s, stream).predictions, source_only(t.model, stream));
}

TEST(OnlineBn, OnlyRunningStatisticsChange) {
  const auto& t = trained();
  const auto stream = corrupted_stream(6);
  AdaptSession s(t.model, adapt_config(AdaptMode::online_bn, 8));
  adapt_online_bn(s, stream);
  EXPECT_TRUE(same_where(s.live(), t.model, true));
  EXPECT_FALSE(same_where(s.live(), t.model, false));
  EXPECT_TRUE(same_where(s.pristine(), t.model, false));
}

TEST(OnlineBp, ZeroLearningRateMovesOnlyStatistics) {
  const auto& t = trained();
  const auto stream = corrupted_stream(4);
  auto cfg = adapt_config(AdaptMode::online_bp, 4);
  cfg.optimizer.lr = 0.0;
  AdaptSession s(t.model, cfg);
  adapt_online_bp(s, stream);
  EXPECT_TRUE(same_where(s.live(), t.model, true));
  EXPECT_FALSE(same_where(s.live(), t.model, false));
}

TEST(OnlineBp, RepeatedSampleOverfitsSkeletalLoss) {
  const auto& t = trained();
  const auto cloud = corrupted_stream(1).front();
  auto cfg = adapt_config(AdaptMode::online_bp, 4);
  cfg.augmentation = Augmentation::none;
  cfg.optimizer.lr = 1e-3;
  AdaptSession s(t.model, cfg);
  std::vector<double> losses;
  for (int i = 0; i < 51; ++i) {
    const auto o = s.step(cloud);
    ASSERT_FALSE(o.flagged);
    losses.push_back(o.adapt_loss);
  }
  std::size_t decreases = 0;
  for (std::size_t i = 1; i < losses.size(); ++i) decreases += losses[i] < losses[i - 1];
  EXPECT_GE(decreases, 45u) << "first " << losses.front() << " last " << losses.back();
  EXPECT_LT(losses.back(), losses.front());
}

TEST(OnlineBp, ResultDependsOnStreamOrder) {
  const auto& t = trained();
  auto stream = corrupted_stream(6);
  AdaptSession s(t.model, adapt_config(AdaptMode::online_bp, 4));
  adapt_online_bp(s, stream);
  const auto forward_live = s.live();
  std::reverse(stream.begin(), stream.end());
  adapt_online_bp(s, stream);
  EXPECT_FALSE(same_where(forward_live, s.live(), true));
}

TEST(Session, EveryRunStartsFromPristine) {
  const auto& t = trained();
  const auto stream = corrupted_stream(8);
  for (auto mode : {AdaptMode::online_bn, AdaptMode::online_bp}) {
    AdaptSession s(t.model, adapt_config(mode, 4));
    const auto a = s.run(stream);
    const auto after_a = s.live();
    const auto b = s.run(stream);
    EXPECT_EQ(a.predictions, b.predictions) << to_string(mode);
    EXPECT_TRUE(same_where(after_a, s.live(), true));
    EXPECT_TRUE(same_where(after_a, s.live(), false));
  }
}

TEST(Session, ModeMismatchAndDegenerateBatchRejected) {
  const auto& t = trained();
  AdaptSession s(t.model, adapt_config(AdaptMode::online_bn, 4));
  const auto stream = corrupted_stream(2);
  EXPECT_THROW(adapt_standard(s, stream), InvalidArgument);
  EXPECT_THROW(s.step_group(stream), InvalidArgument);
  auto one = t.model;
  one.config.patches = 1;
  EXPECT_THROW(AdaptSession(one, adapt_config(AdaptMode::online_bn, 1)), InvalidArgument);
}

TEST(Standard, ZeroIterationsEqualsSourceOnly) {
  const auto& t = trained();
  const auto stream = corrupted_stream(12);
  AdaptSession s(t.model, adapt_config(AdaptMode::standard, 4, 0));
  EXPECT_EQ(adapt_standard(s, stream).predictions, source_only(t.model, stream));
}

TEST(Standard, StreamPermutationOnlyPermutesPredictions) {
  const auto& t = trained();
  auto stream = corrupted_stream(8);
  AdaptSession s(t.model, adapt_config(AdaptMode::standard, 4, 3));
  const auto a = adapt_standard(s, stream).predictions;
  std::vector<std::size_t> perm(stream.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(8);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<PointCloud> shuffled;
  for (auto i : perm) shuffled.push_back(stream[i]);
  const auto b = adapt_standard(s, shuffled).predictions;
  for (std::size_t k = 0; k < perm.size(); ++k) EXPECT_EQ(b[k], a[perm[k]]);
}

TEST(Standard, RepeatedSampleRepeatsPrediction) {
  const auto& t = trained();
  const auto one = corrupted_stream(3);
  const std::vector<PointCloud> stream{one[0], one[1], one[0], one[2], one[0]};
  AdaptSession s(t.model, adapt_config(AdaptMode::standard, 4, 3));
  const auto r = adapt_standard(s, stream);
  EXPECT_EQ(r.predictions[0], r.predictions[2]);
  EXPECT_EQ(r.predictions[0], r.predictions[4]);
}

TEST(Standard, GroupedAdaptation) {
  const auto& t = trained();
  const auto stream = corrupted_stream(5);
  auto cfg = adapt_config(AdaptMode::standard, 2, 2);
  cfg.batch_size = 2;
  AdaptSession s(t.model, cfg);
  const auto r = adapt_standard(s, stream);
  EXPECT_EQ(r.predictions.size(), 5u);
  EXPECT_EQ(r.flagged_count, 0u);
}

TEST(BnSnapshot, OneRowPerChannel) {
  const auto& t = trained();
  const auto dir = smartpc::testing::scratch_dir("bn_snapshot");
  export_bn_snapshot(t.model, dir / "bn.csv");
  const auto rows = read_csv(dir / "bn.csv");
  std::size_t channels = 0;
  t.model.visit_batchnorm([&](const std::string&, const BatchNormState<float>& bn) { channels += bn.channels(); });
  ASSERT_EQ(rows.size(), channels + 1);
  EXPECT_EQ(rows[0], (CsvRow{"layer", "channel", "running_mean", "running_var"}));
  EXPECT_EQ(std::stof(rows[1][3]), t.model.embed_bn.running_var[0]);
}

TEST(Bench, ShortStreamRejectedAndRowsWellFormed) {
  const auto& t = trained();
  BenchOptions opt;
  opt.modes = {AdaptMode::online_bn};
  opt.views = {2, 4};
  opt.repetitions = 2;
  auto small = t.test;
  small.clouds.resize(21);
  small.labels.resize(21);
  small.ids.resize(21);
  EXPECT_THROW(bench_throughput(t.model, AdaptConfig{}, small, opt), InvalidArgument);
  const auto rows = bench_throughput(t.model, AdaptConfig{}, t.test, opt);
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& r : rows) {
    EXPECT_EQ(r.mode, "online-bn");
    EXPECT_EQ(r.samples, t.test.size());
    EXPECT_GT(r.samples_per_second, 0.0);
    EXPECT_GE(r.samples_per_second_std, 0.0);
  }
  EXPECT_EQ(rows[1].views, 4u);
}
