#pragma once

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "smartpc/config.hpp"
#include "smartpc/csv.hpp"
#include "smartpc/dataset.hpp"
#include "smartpc/geometry.hpp"
#include "smartpc/losses.hpp"
#include "smartpc/model.hpp"
#include "smartpc/optim.hpp"

namespace smartpc {

/// Tokenization used everywhere in the pipeline: FPS from index 0.
inline PatchSet tokenize_for(const ModelConfig& c, std::span<const Vec3> cloud) {
  return tokenize(cloud, c.patches, c.neighbors, StartRule::fixed(0));
}

template <class T>
std::vector<T> flat_points(std::span<const Vec3> cloud, double factor = 1.0) {
  std::vector<T> out;
  out.reserve(cloud.size() * 3);
  for (const auto& p : cloud)
    for (std::size_t a = 0; a < 3; ++a) out.push_back(static_cast<T>(p[a] * factor));
  return out;
}

/// Mean over the batch of the skeletal loss of each sample's spheres against
/// that sample's points, attached to the tape as a scalar node.
template <class T>
Var skeletal_loss_node(Tape<T>& tape, const GraphOutputs& g, const std::vector<std::vector<T>>& points,
                       const SkeletalLossWeights& weights, std::size_t n_per_sphere, double& value) {
  const auto& centers = tape.value(g.centers);
  const auto& radii = tape.value(g.radii);
  const std::size_t b = g.batch;
  const std::size_t m = radii.size() / b;
  if (points.size() != b) throw InvalidArgument("skeletal loss: one point set per sample required");
  Tensor<T> d_centers(centers.shape());
  Tensor<T> d_radii(radii.shape());
  const T inv_b = T{1} / static_cast<T>(b);
  double total = 0.0;
  for (std::size_t s = 0; s < b; ++s) {
    const auto l = loss_skeletal<T>(std::span<const T>(points[s]), std::span<const T>(centers.data() + s * m * 3, m * 3),
                                    std::span<const T>(radii.data() + s * m, m), weights, n_per_sphere);
    total += static_cast<double>(l.value);
    tape.mix_signature(l.signature);
    for (std::size_t i = 0; i < m * 3; ++i) d_centers[s * m * 3 + i] = inv_b * l.d_centers[i];
    for (std::size_t i = 0; i < m; ++i) d_radii[s * m + i] = inv_b * l.d_radii[i];
  }
  value = total / static_cast<double>(b);
  return ops::external_scalar(tape, {g.centers, g.radii}, static_cast<T>(value),
                              {std::move(d_centers), std::move(d_radii)});
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  double accuracy = 0.0;
  std::vector<std::size_t> per_class_correct;
  std::vector<std::size_t> per_class_total;
  std::vector<std::size_t> predictions;

  double class_accuracy(std::size_t c) const {
    return per_class_total[c] == 0 ? 0.0
                                   : static_cast<double>(per_class_correct[c]) / static_cast<double>(per_class_total[c]);
  }
};

inline constexpr std::size_t kEvalChunk = 64;

template <class T>
std::vector<std::size_t> predict(const Model<T>& model, std::span<const PatchSet> patches) {
  std::vector<std::size_t> out;
  out.reserve(patches.size());
  for (std::size_t start = 0; start < patches.size(); start += kEvalChunk) {
    const auto chunk = patches.subspan(start, std::min(kEvalChunk, patches.size() - start));
    const auto logits = predict_logits(model, chunk);
    for (std::size_t r = 0; r < chunk.size(); ++r) out.push_back(argmax_row(logits, r));
  }
  return out;
}

inline EvalResult score(std::span<const std::size_t> predictions, std::span<const std::size_t> labels,
                        std::size_t classes) {
  if (predictions.size() != labels.size()) throw InvalidArgument("score: prediction/label count mismatch");
  EvalResult r;
  r.per_class_correct.assign(classes, 0);
  r.per_class_total.assign(classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) throw InvalidArgument("score: label out of range");
    ++r.per_class_total[labels[i]];
    if (predictions[i] == labels[i]) {
      ++correct;
      ++r.per_class_correct[labels[i]];
    }
  }
  r.accuracy = labels.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(labels.size());
  r.predictions.assign(predictions.begin(), predictions.end());
  return r;
}

/// Eval-mode top-1 accuracy; the model is not modified.
template <class T>
EvalResult evaluate(const Model<T>& model, const LabeledDataset& test) {
  if (model.config.classes != test.class_names.size())
    throw InvalidArgument("evaluate: model has " + std::to_string(model.config.classes) + " classes, dataset has " +
                          std::to_string(test.class_names.size()));
  test.validate();
  std::vector<PatchSet> patches;
  patches.reserve(test.size());
  for (const auto& c : test.clouds) patches.push_back(tokenize_for(model.config, c));
  return score(predict(model, patches), test.labels, model.config.classes);
}

// ---------------------------------------------------------------------------
// Pretraining

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double loss_total = 0.0;
  double loss_skeletal = 0.0;
  double loss_cls = 0.0;
  double train_accuracy = 0.0;  // from train-mode logits
  double test_accuracy = std::numeric_limits<double>::quiet_NaN();
};

inline void write_history(const std::vector<EpochRecord>& history, const std::filesystem::path& path) {
  std::vector<CsvRow> rows;
  for (const auto& h : history)
    rows.push_back({std::to_string(h.epoch), format_double(h.loss_total), format_double(h.loss_skeletal),
                    format_double(h.loss_cls), format_fixed(h.train_accuracy, 4),
                    std::isnan(h.test_accuracy) ? "" : format_fixed(h.test_accuracy, 4)});
  write_csv(path, {"epoch", "loss_total", "loss_skeletal", "loss_cls", "train_accuracy", "test_accuracy"}, rows);
}

/// Joint training on L_skel + L_cls with Adam. Mini-batches are reshuffled
/// every epoch from a stream derived from cfg.seed. Clouds are tokenized
/// once; scale augmentation multiplies offsets, centers and the loss target
/// points by one factor per sample and step. When `test` is given its
/// accuracy is recorded after every epoch.
inline std::vector<EpochRecord> pretrain(Model<float>& model, const LabeledDataset& train, const RunConfig& cfg,
                                         const LabeledDataset* test = nullptr,
                                         const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  train.validate();
  if (train.size() == 0) throw InvalidArgument("pretrain: empty training set");
  if (model.config.classes != train.class_names.size())
    throw InvalidArgument("pretrain: model has " + std::to_string(model.config.classes) + " classes, dataset has " +
                          std::to_string(train.class_names.size()));
  std::vector<PatchSet> patches;
  patches.reserve(train.size());
  for (const auto& c : train.clouds) patches.push_back(tokenize_for(model.config, c));
  std::vector<PatchSet> test_patches;
  if (test)
    for (const auto& c : test->clouds) test_patches.push_back(tokenize_for(model.config, c));

  OptimState<float> opt(model, cfg.optimizer);
  Rng rng(mix_seed(cfg.seed, 0x7472616eULL));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<EpochRecord> history;
  std::size_t step = 0;

  for (std::size_t epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.train.batch_size) {
      ++step;
      const std::size_t b = std::min(cfg.train.batch_size, order.size() - start);
      std::vector<PatchSet> batch;
      std::vector<std::vector<float>> points;
      std::vector<std::size_t> labels;
      for (std::size_t i = 0; i < b; ++i) {
        const std::size_t idx = order[start + i];
        const double f = cfg.train.scale_augmentation ? uniform(rng, 0.8, 1.25) : 1.0;
        batch.push_back(patches[idx]);
        if (f != 1.0) scale_patches(batch.back(), f);
        points.push_back(flat_points<float>(train.clouds[idx], f));
        labels.push_back(train.labels[idx]);
      }
      Tape<float> tape;
      const auto pv = bind_parameters(tape, model);
      const auto g = forward_graph(tape, pv, model, std::span<const PatchSet>(batch), BnMode::train);
      double skel = 0.0;
      const Var skel_node = skeletal_loss_node(tape, g, points, cfg.loss, cfg.n_per_sphere, skel);
      const Var cls_node = ops::softmax_cross_entropy(tape, g.logits, std::span<const std::size_t>(labels));
      const double cls = static_cast<double>(tape.value(cls_node)[0]);
      if (!std::isfinite(skel) || !std::isfinite(cls))
        throw TrainingDiverged(epoch, step, "non-finite loss (skeletal " + format_double(skel) + ", cls " +
                                                format_double(cls) + ")");
      const Var total = ops::add(tape, skel_node, cls_node);
      tape.backward(total);
      adam_step(opt, tape, pv);

      const auto& logits = tape.value(g.logits);
      for (std::size_t i = 0; i < b; ++i) correct += argmax_row(logits, i) == labels[i];
      rec.loss_skeletal += skel * static_cast<double>(b);
      rec.loss_cls += cls * static_cast<double>(b);
    }
    const double n = static_cast<double>(train.size());
    rec.loss_skeletal /= n;
    rec.loss_cls /= n;
    rec.loss_total = rec.loss_skeletal + rec.loss_cls;
    rec.train_accuracy = static_cast<double>(correct) / n;
    if (test) rec.test_accuracy = score(predict(model, test_patches), test->labels, model.config.classes).accuracy;
    history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return history;
}

// ---------------------------------------------------------------------------
// Views and adaptation

/// View 0 is the original; views 1..n-1 carry the augmentation.
inline std::vector<PointCloud> make_views(const PointCloud& cloud, std::size_t n, Augmentation aug, std::uint64_t seed) {
  if (n < 1) throw InvalidArgument("make_views: n must be >= 1");
  std::vector<PointCloud> views;
  views.reserve(n);
  views.push_back(cloud);
  Rng rng(mix_seed(seed, 0x76696577ULL));
  for (std::size_t i = 1; i < n; ++i) {
    switch (aug) {
      case Augmentation::rotation: views.push_back(rotate_z(cloud, uniform(rng, 0.0, 2.0 * std::numbers::pi))); break;
      case Augmentation::hflip: {
        PointCloud v = cloud;
        for (auto& p : v) p.x = -p.x;
        views.push_back(std::move(v));
        break;
      }
      case Augmentation::translation: {
        const Vec3 t{uniform(rng, -0.05, 0.05), uniform(rng, -0.05, 0.05), uniform(rng, -0.05, 0.05)};
        PointCloud v = cloud;
        for (auto& p : v) p += t;
        views.push_back(std::move(v));
        break;
      }
      case Augmentation::none: views.push_back(cloud); break;
    }
  }
  return views;
}

/// Hash of the exact coordinate bits; identical clouds share view seeds
/// regardless of their stream position.
inline std::uint64_t cloud_hash(std::span<const Vec3> cloud) {
  std::uint64_t h = mix_seed(cloud.size());
  for (const auto& p : cloud)
    for (std::size_t a = 0; a < 3; ++a) h = mix_seed(h, std::bit_cast<std::uint64_t>(p[a]));
  return h;
}

struct SampleOutcome {
  std::size_t prediction = 0;
  bool flagged = false;  // adaptation step skipped (non-finite loss or gradient)
  double adapt_loss = std::numeric_limits<double>::quiet_NaN();
};

struct StreamResult {
  std::vector<std::size_t> predictions;
  std::vector<char> flagged;
  std::size_t flagged_count = 0;
  double seconds = 0.0;
};

/// Streaming adaptation state. The session never sees labels: inputs are
/// clouds, outputs are predictions.
class AdaptSession {
 public:
  AdaptSession(Model<float> pristine, AdaptConfig cfg, SkeletalLossWeights weights = {}, std::size_t n_per_sphere = 8,
               std::uint64_t seed = 0)
      : pristine_(std::move(pristine)), cfg_(std::move(cfg)), weights_(weights), n_per_sphere_(n_per_sphere), seed_(seed) {
    cfg_.validate();
    weights_.validate();
    if (cfg_.views * pristine_.config.patches < 2)
      throw InvalidArgument("adapt: views x patches must be >= 2 tokens for BatchNorm statistics");
    reset();
  }

  const AdaptConfig& config() const noexcept { return cfg_; }
  const Model<float>& pristine() const noexcept { return pristine_; }
  const Model<float>& live() const noexcept { return live_; }

  /// live := pristine with the session momentum, fresh optimizer state.
  void reset() {
    live_ = pristine_;
    live_.set_bn_momentum(cfg_.momentum);
    opt_ = OptimState<float>(live_, cfg_.optimizer);
  }

  /// One stream step for a single cloud under the session mode. Standard
  /// mode resets first.
  SampleOutcome step(const PointCloud& cloud) {
    if (cfg_.mode == AdaptMode::standard) reset();
    const auto views = view_patches(cloud);
    SampleOutcome out;
    if (cfg_.mode == AdaptMode::online_bn) {
      adapt_statistics(views.patches);
    } else {
      out = optimize(views.patches, views.points, cfg_.effective_iterations());
    }
    out.prediction = predict_one(views.patches.front());
    return out;
  }

  /// Standard mode over a group adapted together: one reset, the union of
  /// all members' views as the statistics batch, then one prediction each.
  std::vector<SampleOutcome> step_group(std::span<const PointCloud> group) {
    if (cfg_.mode != AdaptMode::standard) throw InvalidArgument("step_group: only defined for standard mode");
    reset();
    std::vector<PatchSet> patches;
    std::vector<std::vector<float>> points;
    std::vector<std::size_t> originals;
    for (const auto& c : group) {
      auto v = view_patches(c);
      originals.push_back(patches.size());
      for (auto& p : v.patches) patches.push_back(std::move(p));
      for (auto& p : v.points) points.push_back(std::move(p));
    }
    const SampleOutcome shared = optimize(patches, points, cfg_.effective_iterations());
    std::vector<SampleOutcome> out(group.size(), shared);
    for (std::size_t i = 0; i < group.size(); ++i) out[i].prediction = predict_one(patches[originals[i]]);
    return out;
  }

  /// Processes a whole stream from pristine state (per-stream reset).
  StreamResult run(std::span<const PointCloud> stream) {
    reset();
    StreamResult r;
    r.predictions.reserve(stream.size());
    const auto t0 = std::chrono::steady_clock::now();
    const auto record = [&](const SampleOutcome& o) {
      r.predictions.push_back(o.prediction);
      r.flagged.push_back(o.flagged ? 1 : 0);
      r.flagged_count += o.flagged;
    };
    if (cfg_.mode == AdaptMode::standard && cfg_.batch_size > 1) {
      for (std::size_t s = 0; s < stream.size(); s += cfg_.batch_size)
        for (const auto& o : step_group(stream.subspan(s, std::min(cfg_.batch_size, stream.size() - s)))) record(o);
    } else {
      for (const auto& c : stream) record(step(c));
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
  }

 private:
  struct Views {
    std::vector<PatchSet> patches;
    std::vector<std::vector<float>> points;
  };

  Views view_patches(const PointCloud& cloud) const {
    Views v;
    const auto clouds = make_views(cloud, cfg_.views, cfg_.augmentation, mix_seed(seed_, cloud_hash(cloud)));
    v.patches.reserve(clouds.size());
    for (const auto& c : clouds) {
      v.patches.push_back(tokenize_for(live_.config, c));
      if (cfg_.mode != AdaptMode::online_bn) v.points.push_back(flat_points<float>(c));
    }
    return v;
  }

  void adapt_statistics(const std::vector<PatchSet>& patches) {
    Tape<float> tape(false);
    const auto pv = bind_parameters(tape, live_);
    forward_graph(tape, pv, live_, std::span<const PatchSet>(patches), BnMode::adapt_stats, GraphScope::statistics);
  }

  SampleOutcome optimize(const std::vector<PatchSet>& patches, const std::vector<std::vector<float>>& points,
                         std::size_t iterations) {
    SampleOutcome out;
    for (std::size_t it = 0; it < iterations; ++it) {
      const auto bn_before = bn_snapshot();
      Tape<float> tape;
      const auto pv = bind_parameters(tape, live_);
      const auto g = forward_graph(tape, pv, live_, std::span<const PatchSet>(patches), BnMode::train);
      double value = 0.0;
      const Var loss = skeletal_loss_node(tape, g, points, weights_, n_per_sphere_, value);
      out.adapt_loss = value;
      bool ok = std::isfinite(value);
      if (ok) {
        tape.backward(loss);
        for (const Var v : pv.vars) ok = ok && tape.grad(v).all_finite();
      }
      if (!ok) {
        restore_bn(bn_before);
        out.flagged = true;
        break;
      }
      adam_step(opt_, tape, pv);
    }
    return out;
  }

  std::size_t predict_one(const PatchSet& original) const {
    return argmax_row(predict_logits(live_, std::span<const PatchSet>(&original, 1)), 0);
  }

  std::vector<Tensor<float>> bn_snapshot() const {
    std::vector<Tensor<float>> s;
    live_.visit_batchnorm([&](const std::string&, const BatchNormState<float>& bn) {
      s.push_back(bn.running_mean);
      s.push_back(bn.running_var);
    });
    return s;
  }
  void restore_bn(const std::vector<Tensor<float>>& s) {
    std::size_t i = 0;
    live_.visit_batchnorm([&](const std::string&, BatchNormState<float>& bn) {
      bn.running_mean = s[i++];
      bn.running_var = s[i++];
    });
  }

  Model<float> pristine_;
  Model<float> live_;
  AdaptConfig cfg_;
  SkeletalLossWeights weights_;
  std::size_t n_per_sphere_;
  std::uint64_t seed_;
  OptimState<float> opt_;
};

namespace detail {

inline StreamResult run_mode(AdaptSession& session, AdaptMode mode, std::span<const PointCloud> stream) {
  if (session.config().mode != mode)
    throw InvalidArgument("adapt: session mode is " + to_string(session.config().mode) + ", expected " + to_string(mode));
  return session.run(stream);
}

}  // namespace detail

/// BN running statistics only, from one adapt-stats pass over each
/// sample's views; parameters never change.
inline StreamResult adapt_online_bn(AdaptSession& s, std::span<const PointCloud> stream) {
  return detail::run_mode(s, AdaptMode::online_bn, stream);
}

/// One Adam step per sample on L_skel over the views; state persists.
inline StreamResult adapt_online_bp(AdaptSession& s, std::span<const PointCloud> stream) {
  return detail::run_mode(s, AdaptMode::online_bp, stream);
}

/// Reset to pristine before every sample, then the configured iterations.
inline StreamResult adapt_standard(AdaptSession& s, std::span<const PointCloud> stream) {
  return detail::run_mode(s, AdaptMode::standard, stream);
}

// ---------------------------------------------------------------------------
// Throughput

struct BenchOptions {
  std::vector<AdaptMode> modes{AdaptMode::online_bn, AdaptMode::online_bp, AdaptMode::standard};
  std::vector<std::size_t> views{48};
  std::size_t warmup = 2;
  std::size_t repetitions = 3;
  std::string corruption = "clean";
  int severity = 0;
};

/// For every (mode, views) pair: `repetitions` runs from pristine state,
/// timing only the samples after `warmup`. Accuracy is taken from the first
/// repetition over the whole stream.
inline std::vector<MetricsRow> bench_throughput(const Model<float>& pristine, const AdaptConfig& base,
                                                const LabeledDataset& data, const BenchOptions& opt,
                                                const SkeletalLossWeights& weights = {}, std::size_t n_per_sphere = 8,
                                                std::uint64_t seed = 0) {
  if (data.size() < opt.warmup + 20)
    throw InvalidArgument("bench: stream has " + std::to_string(data.size()) + " samples, need warmup + 20 = " +
                          std::to_string(opt.warmup + 20));
  if (opt.repetitions < 1) throw InvalidArgument("bench: repetitions must be >= 1");
  std::vector<MetricsRow> rows;
  const std::span<const PointCloud> stream(data.clouds);
  for (const auto mode : opt.modes) {
    for (const auto views : opt.views) {
      AdaptConfig cfg = base;
      cfg.mode = mode;
      cfg.views = views;
      if (mode != AdaptMode::standard) cfg.batch_size = 1;
      AdaptSession session(pristine, cfg, weights, n_per_sphere, seed);
      std::vector<double> rates;
      double accuracy = 0.0;
      for (std::size_t rep = 0; rep < opt.repetitions; ++rep) {
        session.reset();
        std::vector<std::size_t> preds;
        for (std::size_t i = 0; i < opt.warmup; ++i) preds.push_back(session.step(stream[i]).prediction);
        const auto t0 = std::chrono::steady_clock::now();
        for (std::size_t i = opt.warmup; i < stream.size(); ++i) preds.push_back(session.step(stream[i]).prediction);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        rates.push_back(static_cast<double>(stream.size() - opt.warmup) / secs);
        if (rep == 0) accuracy = score(preds, data.labels, data.class_names.size()).accuracy;
      }
      const double mean = std::accumulate(rates.begin(), rates.end(), 0.0) / static_cast<double>(rates.size());
      double var = 0.0;
      for (double r : rates) var += (r - mean) * (r - mean);
      const double sd = rates.size() > 1 ? std::sqrt(var / static_cast<double>(rates.size() - 1)) : 0.0;
      rows.push_back({opt.corruption, opt.severity, to_string(mode), views, data.size(), accuracy, mean, sd});
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// BN snapshots

inline void export_bn_snapshot(const Model<float>& model, const std::filesystem::path& path) {
  std::vector<CsvRow> rows;
  model.visit_batchnorm([&](const std::string& name, const BatchNormState<float>& bn) {
    for (std::size_t c = 0; c < bn.channels(); ++c)
      rows.push_back({name, std::to_string(c), format_double(bn.running_mean[c]), format_double(bn.running_var[c])});
  });
  write_csv(path, {"layer", "channel", "running_mean", "running_var"}, rows);
}

}  // namespace smartpc
