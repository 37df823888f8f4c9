#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "smartpc/dataset.hpp"
#include "smartpc/gradcheck.hpp"
#include "smartpc/losses.hpp"
#include "smartpc/model.hpp"
#include "smartpc/ops.hpp"
#include "smartpc/pipeline.hpp"
#include "smartpc/random.hpp"
#include "smartpc/skeleton.hpp"
#include "smartpc/tape.hpp"

namespace smartpc {

/// Tolerances for single ops/losses and for whole-network compositions.
inline constexpr double kPrimitiveTolerance = 1e-6;
inline constexpr double kCompositionTolerance = 1e-3;
/// Compositions compare each entry at no less than this fraction of the
/// gradient's largest entry (see GradcheckOptions::scale_floor).
inline constexpr double kCompositionScaleFloor = 1e-3;

struct GradcheckComponent {
  std::string name;
  bool composition = false;
  double tolerance = kPrimitiveTolerance;
  GradcheckReport report;
};

struct GradcheckSuiteOptions {
  /// Tiny network (M=4, K_nbr=4, d=16) checked on every coordinate. When
  /// false the default network is checked on a seeded coordinate subset.
  bool tiny = true;
  std::size_t full_model_coords = 256;
  std::uint64_t seed = 0x6772616463686bULL;
};

namespace detail {

inline std::vector<double> random_values(std::size_t n, double lo, double hi, std::uint64_t seed) {
  Rng rng(mix_seed(seed));
  std::vector<double> v(n);
  for (auto& x : v) x = uniform(rng, lo, hi);
  return v;
}

/// Wraps an op graph as a scalar program over the concatenated `shapes`.
/// Non-scalar outputs are contracted against fixed random weights.
using TapeBuilder = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

inline DifferentiableProgram tape_program(std::vector<Shape> shapes, TapeBuilder build, std::uint64_t seed) {
  return [shapes = std::move(shapes), build = std::move(build), seed](std::span<const double> theta,
                                                                     std::vector<double>* grad) {
    Tape<double> tape;
    tape.set_track_signature(true);
    std::vector<Var> inputs;
    std::size_t off = 0;
    for (const auto& s : shapes) {
      Tensor<double> t(s, uninitialized);
      std::copy_n(theta.begin() + static_cast<std::ptrdiff_t>(off), t.size(), t.data());
      off += t.size();
      inputs.push_back(tape.parameter(std::move(t)));
    }
    Var y = build(tape, inputs);
    const auto& yv = tape.value(y);
    if (yv.size() != 1) {
      const auto w = random_values(yv.size(), -1.0, 1.0, mix_seed(seed, 0x70726f6265ULL));
      double s = 0.0;
      for (std::size_t i = 0; i < yv.size(); ++i) s += w[i] * yv[i];
      y = ops::external_scalar(tape, {y}, s, {Tensor<double>(yv.shape(), w)});
    }
    GradEval out{tape.value(y)[0], tape.signature()};
    if (grad) {
      tape.backward(y);
      grad->clear();
      for (const Var v : inputs) {
        const auto& g = tape.grad(v);
        grad->insert(grad->end(), g.data(), g.data() + g.size());
      }
    }
    return out;
  };
}

inline GradcheckComponent check_ops(const std::string& name, std::vector<Shape> shapes, TapeBuilder build,
                                    std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::size_t n = 0;
  for (const auto& s : shapes) n += shape_size(s);
  const auto theta = random_values(n, lo, hi, mix_seed(seed, 0x7468657461ULL));
  GradcheckOptions opt;
  opt.tolerance = kPrimitiveTolerance;
  return {name, false, opt.tolerance, gradcheck(tape_program(std::move(shapes), std::move(build), seed), theta, opt)};
}

/// Minimum distance from every input point to every sphere center and
/// surface sample in the loss configurations. Distances are not smooth at 0,
/// and near it the central difference is dominated by truncation error.
inline constexpr double kLossClearance = 0.05;

inline bool loss_config_clear(std::span<const double> points, std::span<const double> centers,
                              std::span<const double> radii, std::size_t n_per_sphere) {
  std::vector<Vec3> anchors;
  for (std::size_t s = 0; s < radii.size(); ++s) {
    const Vec3 c{centers[3 * s], centers[3 * s + 1], centers[3 * s + 2]};
    anchors.push_back(c);
    for (const auto& q : sample_sphere_surface({c, radii[s]}, n_per_sphere)) anchors.push_back(q);
  }
  for (std::size_t i = 0; i + 2 < points.size(); i += 3) {
    const Vec3 p{points[i], points[i + 1], points[i + 2]};
    for (const auto& a : anchors)
      if (norm(p - a) < kLossClearance) return false;
  }
  return true;
}

using LossFn = std::function<SkeletalLoss<double>(std::span<const double>, std::span<const double>)>;

/// Checks a skeletal loss as a function of (centers, radii) at fixed points.
/// The sphere configuration is redrawn until it clears the points.
inline GradcheckComponent check_loss(const std::string& name, std::span<const double> points, LossFn loss,
                                     std::size_t spheres, std::size_t n_per_sphere, std::uint64_t seed) {
  std::vector<double> centers, radii;
  for (std::uint64_t attempt = 0;; ++attempt) {
    if (attempt == 1000) throw ContractViolation("gradcheck: no clear loss configuration for " + name);
    centers = random_values(spheres * 3, -0.6, 0.6, mix_seed(seed, 2 * attempt));
    radii = random_values(spheres, 0.1, 0.5, mix_seed(seed, 2 * attempt + 1));
    if (loss_config_clear(points, centers, radii, n_per_sphere)) break;
  }
  std::vector<double> theta = centers;
  theta.insert(theta.end(), radii.begin(), radii.end());
  const DifferentiableProgram f = [=](std::span<const double> th, std::vector<double>* grad) {
    const auto l = loss(th.first(spheres * 3), th.subspan(spheres * 3));
    if (grad) {
      *grad = l.d_centers;
      grad->insert(grad->end(), l.d_radii.begin(), l.d_radii.end());
    }
    return GradEval{l.value, l.signature};
  };
  GradcheckOptions opt;
  opt.tolerance = kPrimitiveTolerance;
  return {name, false, opt.tolerance, gradcheck(f, theta, opt)};
}

struct ProgramAt {
  DifferentiableProgram f;
  std::vector<double> theta;
};

/// End-to-end L_skel + L_cls of a double-precision network w.r.t. every
/// trainable parameter, in train mode (batch BN statistics, dropout on).
inline ProgramAt model_program(const ModelConfig& cfg, std::uint64_t seed) {
  const Model<double> base = model_init<double>(cfg);
  std::vector<PatchSet> batch;
  std::vector<std::vector<double>> points;
  std::vector<std::size_t> labels;
  const std::size_t n_points = std::max<std::size_t>(64, cfg.patches * cfg.neighbors);
  for (std::size_t s = 0; s < 2; ++s) {
    const auto c = static_cast<ShapeClass>(s % kShapeNames.size());
    const auto cloud = gen_shape(c, n_points, mix_seed(seed, s));
    batch.push_back(tokenize_for(cfg, cloud));
    points.push_back(flat_points<double>(cloud));
    labels.push_back(s % cfg.classes);
  }
  std::vector<double> theta;
  base.visit([&](const std::string&, const Tensor<double>& t, TensorRole role) {
    if (is_trainable(role)) theta.insert(theta.end(), t.data(), t.data() + t.size());
  });
  const DifferentiableProgram f = [=](std::span<const double> th, std::vector<double>* grad) {
    Model<double> m = base;
    std::size_t off = 0;
    m.visit([&](const std::string&, Tensor<double>& t, TensorRole role) {
      if (!is_trainable(role)) return;
      std::copy_n(th.begin() + static_cast<std::ptrdiff_t>(off), t.size(), t.data());
      off += t.size();
    });
    Tape<double> tape;
    tape.set_track_signature(true);
    const auto pv = bind_parameters(tape, m);
    const auto g = forward_graph(tape, pv, m, std::span<const PatchSet>(batch), BnMode::train);
    double skel = 0.0;
    const Var ls = skeletal_loss_node(tape, g, points, SkeletalLossWeights{}, 8, skel);
    const Var lc = ops::softmax_cross_entropy(tape, g.logits, std::span<const std::size_t>(labels));
    const Var total = ops::add(tape, ls, lc);
    GradEval out{tape.value(total)[0], tape.signature()};
    if (grad) {
      tape.backward(total);
      grad->clear();
      for (const Var v : pv.vars) {
        const auto& gv = tape.grad(v);
        grad->insert(grad->end(), gv.data(), gv.data() + gv.size());
      }
    }
    return out;
  };
  return {f, theta};
}

inline GradcheckComponent check_model(const std::string& name, const ModelConfig& cfg, std::size_t max_coords,
                                      std::uint64_t seed) {
  const auto p = model_program(cfg, seed);
  GradcheckOptions opt;
  opt.tolerance = kCompositionTolerance;
  opt.scale_floor = kCompositionScaleFloor;
  opt.max_coords = max_coords;
  opt.seed = seed;
  return {name, true, opt.tolerance, gradcheck(p.f, p.theta, opt)};
}

}  // namespace detail

/// Central finite differences (64-bit, h = 1e-4) over every primitive op,
/// every loss term and an end-to-end network. Coordinates whose
/// perturbation flips a discrete decision are skipped.
inline std::vector<GradcheckComponent> run_gradcheck_suite(const GradcheckSuiteOptions& o = {}) {
  using detail::check_loss;
  using detail::check_ops;
  const std::uint64_t s = o.seed;
  std::vector<GradcheckComponent> out;
  const auto ins = [](const std::vector<Var>& v, std::size_t i) { return v[i]; };

  out.push_back(check_ops("linear", {{6, 5}, {5, 4}, {4}},
                          [&](Tape<double>& t, const std::vector<Var>& v) {
                            return ops::linear(t, ins(v, 0), ins(v, 1), ins(v, 2));
                          },
                          mix_seed(s, 1)));
  out.push_back(check_ops("add", {{4, 3}, {4, 3}},
                          [&](Tape<double>& t, const std::vector<Var>& v) { return ops::add(t, v[0], v[1]); },
                          mix_seed(s, 2)));
  out.push_back(check_ops("scale", {{4, 3}},
                          [&](Tape<double>& t, const std::vector<Var>& v) { return ops::scale(t, v[0], 0.37); },
                          mix_seed(s, 3)));
  out.push_back(check_ops("relu", {{6, 4}},
                          [&](Tape<double>& t, const std::vector<Var>& v) { return ops::relu(t, v[0]); },
                          mix_seed(s, 4)));
  out.push_back(check_ops("softplus", {{6, 4}},
                          [&](Tape<double>& t, const std::vector<Var>& v) { return ops::softplus(t, v[0]); },
                          mix_seed(s, 5), -3.0, 3.0));
  out.push_back(check_ops("maxpool", {{12, 5}},
                          [&](Tape<double>& t, const std::vector<Var>& v) { return ops::maxpool_groups(t, v[0], 4); },
                          mix_seed(s, 6)));
  out.push_back(check_ops("repeat", {{3, 4}},
                          [&](Tape<double>& t, const std::vector<Var>& v) { return ops::repeat_groups(t, v[0], 3); },
                          mix_seed(s, 7)));
  out.push_back(check_ops("concat", {{5, 2}, {5, 3}},
                          [&](Tape<double>& t, const std::vector<Var>& v) { return ops::concat_cols(t, v[0], v[1]); },
                          mix_seed(s, 8)));
  out.push_back(check_ops("dropout", {{8, 4}},
                          [&](Tape<double>& t, const std::vector<Var>& v) { return ops::dropout(t, v[0], 0.3, 11, 3); },
                          mix_seed(s, 9)));
  out.push_back(check_ops("batchnorm.train", {{10, 4}, {4}, {4}},
                          [&](Tape<double>& t, const std::vector<Var>& v) {
                            BatchNormState<double> bn(4);
                            return ops::batchnorm(t, v[0], v[1], v[2], bn, BnMode::train);
                          },
                          mix_seed(s, 10)));
  out.push_back(check_ops("batchnorm.eval", {{10, 4}, {4}, {4}},
                          [&](Tape<double>& t, const std::vector<Var>& v) {
                            BatchNormState<double> bn(4);
                            const auto mean = detail::random_values(4, -0.5, 0.5, 21);
                            const auto var = detail::random_values(4, 0.2, 2.0, 22);
                            std::copy(mean.begin(), mean.end(), bn.running_mean.data());
                            std::copy(var.begin(), var.end(), bn.running_var.data());
                            return ops::batchnorm(t, v[0], v[1], v[2], bn, BnMode::eval);
                          },
                          mix_seed(s, 11)));
  out.push_back(check_ops("cross_entropy", {{4, 5}},
                          [&](Tape<double>& t, const std::vector<Var>& v) {
                            static const std::vector<std::size_t> labels{0, 3, 4, 1};
                            return ops::softmax_cross_entropy(t, v[0], std::span<const std::size_t>(labels));
                          },
                          mix_seed(s, 12), -2.0, 2.0));

  const auto points = detail::random_values(40 * 3, -1.0, 1.0, mix_seed(s, 13));
  const std::size_t spheres = 5;
  out.push_back(check_loss("loss.p2s", points,
                           [&](std::span<const double> c, std::span<const double> r) {
                             return loss_p2s<double>(points, c, r, Reduction::sum, false);
                           },
                           spheres, 8, mix_seed(s, 14)));
  out.push_back(check_loss("loss.p2s_signed", points,
                           [&](std::span<const double> c, std::span<const double> r) {
                             return loss_p2s<double>(points, c, r, Reduction::sum, true);
                           },
                           spheres, 8, mix_seed(s, 15)));
  out.push_back(check_loss("loss.sampling", points,
                           [&](std::span<const double> c, std::span<const double> r) {
                             return loss_sampling<double>(points, c, r, 8, Reduction::sum);
                           },
                           spheres, 8, mix_seed(s, 16)));
  out.push_back(check_loss("loss.radius", points,
                           [&](std::span<const double>, std::span<const double> r) {
                             auto l = loss_radius<double>(r, Reduction::sum);
                             l.d_centers.assign(spheres * 3, 0.0);
                             return l;
                           },
                           spheres, 8, mix_seed(s, 17)));
  out.push_back(check_loss("loss.skeletal", points,
                           [&](std::span<const double> c, std::span<const double> r) {
                             return loss_skeletal<double>(points, c, r, SkeletalLossWeights{}, 8);
                           },
                           spheres, 8, mix_seed(s, 18)));

  ModelConfig cfg;
  std::size_t coords = o.full_model_coords;
  if (o.tiny) {
    cfg.patches = 4;
    cfg.neighbors = 4;
    cfg.width = 16;
    coords = 0;
  }
  cfg.seed = mix_seed(s, 19);
  out.push_back(detail::check_model(o.tiny ? "model.tiny" : "model.default", cfg, coords, mix_seed(s, 20)));
  return out;
}

}  // namespace smartpc
