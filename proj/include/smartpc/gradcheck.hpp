#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "smartpc/random.hpp"

namespace smartpc {

/// One evaluation of a scalar program. `signature` identifies the discrete
/// branch taken (relu masks, argmaxes, nearest-neighbour assignments); when
/// a perturbation changes it, the coordinate straddles a kink and is skipped.
struct GradEval {
  double value = 0.0;
  std::uint64_t signature = 0;
};

/// f(theta, grad_out): returns the value at theta and, when grad_out is
/// non-null, writes the analytic gradient into it (resized by f).
using DifferentiableProgram = std::function<GradEval(std::span<const double>, std::vector<double>*)>;

struct GradcheckOptions {
  double step = 1e-4;
  double tolerance = 1e-6;
  /// Denominator floor for the relative error, so gradients that are zero
  /// to roundoff on both sides do not register as failures.
  double abs_floor = 1e-7;
  /// Additional floor as a fraction of the largest |numeric| entry. Central
  /// differences carry an absolute truncation error of order h^2 times the
  /// third derivative, so entries far below the gradient's scale measure that
  /// error rather than the analytic gradient. 0 keeps the check elementwise.
  double scale_floor = 0.0;
  /// 0 checks every coordinate; otherwise a seeded subset of this size.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  bool passed = false;
};

/// Central-difference check: (f(theta + h e_i) - f(theta - h e_i)) / 2h
/// against the analytic gradient, coordinate by coordinate. Relative error is
/// |a - n| / max(|a|, |n|, abs_floor, scale_floor * max|n|); passes iff the
/// maximum is below tolerance and at least one coordinate was checked.
inline GradcheckReport gradcheck(const DifferentiableProgram& f, std::span<const double> theta,
                                 const GradcheckOptions& opt = {}) {
  std::vector<double> analytic;
  const GradEval base = f(theta, &analytic);
  std::vector<std::size_t> coords(theta.size());
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (opt.max_coords != 0 && opt.max_coords < coords.size()) {
    Rng rng(mix_seed(opt.seed));
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(opt.max_coords);
    std::sort(coords.begin(), coords.end());
  }
  GradcheckReport report;
  std::vector<double> probe(theta.begin(), theta.end());
  struct Sample {
    std::size_t index;
    double numeric;
  };
  std::vector<Sample> samples;
  double scale = 0.0;
  for (std::size_t i : coords) {
    const double orig = probe[i];
    probe[i] = orig + opt.step;
    const GradEval up = f(probe, nullptr);
    probe[i] = orig - opt.step;
    const GradEval down = f(probe, nullptr);
    probe[i] = orig;
    if (up.signature != base.signature || down.signature != base.signature) {
      ++report.skipped_kinks;
      continue;
    }
    const double numeric = (up.value - down.value) / (2.0 * opt.step);
    samples.push_back({i, numeric});
    scale = std::max(scale, std::abs(numeric));
  }
  const double floor = std::max(opt.abs_floor, opt.scale_floor * scale);
  for (const auto& [i, numeric] : samples) {
    const double a = analytic.at(i);
    const double denom = std::max({std::abs(a), std::abs(numeric), floor});
    const double rel = std::abs(a - numeric) / denom;
    ++report.checked;
    if (rel > report.max_rel_error || !std::isfinite(rel)) {
      report.max_rel_error = std::isfinite(rel) ? rel : INFINITY;
      report.worst_index = i;
      report.worst_analytic = a;
      report.worst_numeric = numeric;
    }
  }
  report.passed = report.checked > 0 && report.max_rel_error < opt.tolerance;
  return report;
}

}  // namespace smartpc
