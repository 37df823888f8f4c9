#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "smartpc/dataset.hpp"
#include "smartpc/geometry.hpp"
#include "smartpc/random.hpp"

namespace smartpc {

enum class CorruptionKind {
  uniform_noise,
  gaussian_noise,
  impulse_noise,
  background_noise,
  upsampling,
  density_decrease,
  shear,
  rotation,
  occlusion,
  scale,
};

inline constexpr std::array<std::pair<CorruptionKind, std::string_view>, 10> kCorruptionNames{{
    {CorruptionKind::uniform_noise, "uniform-noise"},
    {CorruptionKind::gaussian_noise, "gaussian-noise"},
    {CorruptionKind::impulse_noise, "impulse-noise"},
    {CorruptionKind::background_noise, "background-noise"},
    {CorruptionKind::upsampling, "upsampling"},
    {CorruptionKind::density_decrease, "density-decrease"},
    {CorruptionKind::shear, "shear"},
    {CorruptionKind::rotation, "rotation"},
    {CorruptionKind::occlusion, "occlusion"},
    {CorruptionKind::scale, "scale"},
}};

inline std::string to_string(CorruptionKind k) {
  for (const auto& [kind, name] : kCorruptionNames)
    if (kind == k) return std::string(name);
  return "?";
}

inline CorruptionKind parse_corruption_kind(std::string_view name) {
  for (const auto& [kind, n] : kCorruptionNames)
    if (n == name) return kind;
  throw InvalidArgument("unknown corruption kind '" + std::string(name) + "'");
}

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::gaussian_noise;
  int severity = 1;  // 1..5
  std::uint64_t seed = 0;

  void validate() const {
    if (severity < 1 || severity > 5) throw InvalidArgument("corruption severity must lie in 1..5");
  }
};

namespace detail {

/// ceil(n * percent_per_level * severity / 100) in exact integer arithmetic.
inline std::size_t count_fraction(std::size_t n, std::size_t percent_per_level, int severity) {
  const std::size_t num = n * percent_per_level * static_cast<std::size_t>(severity);
  return (num + 99) / 100;
}

inline std::size_t floor_count(std::size_t n) { return (n + 3) / 4; }  // ceil(0.25 n)

inline Vec3 random_unit(Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  for (;;) {
    Vec3 v{g(rng), g(rng), g(rng)};
    const double len = norm(v);
    if (len > 1e-12) return v * (1.0 / len);
  }
}

/// Removes the points with the largest `score` among those with score > 0,
/// never leaving fewer than ceil(N/4) points.
inline PointCloud remove_scored(const PointCloud& cloud, const std::vector<double>& score) {
  const std::size_t n = cloud.size();
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < n; ++i)
    if (score[i] > 0.0) candidates.push_back(i);
  const std::size_t max_remove = n - floor_count(n);
  if (candidates.size() > max_remove) {
    std::stable_sort(candidates.begin(), candidates.end(),
                     [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
    candidates.resize(max_remove);
  }
  std::vector<char> drop(n, 0);
  for (auto i : candidates) drop[i] = 1;
  PointCloud out;
  out.reserve(n - candidates.size());
  for (std::size_t i = 0; i < n; ++i)
    if (!drop[i]) out.push_back(cloud[i]);
  return out;
}

}  // namespace detail

/// Applies one corruption at an integer severity without range checks;
/// severity 0 degenerates every magnitude to zero. corrupt() is the checked
/// entry point.
inline PointCloud corrupt_at_severity(const PointCloud& cloud, CorruptionKind kind, int severity, std::uint64_t seed) {
  if (cloud.empty()) throw InvalidArgument("corrupt: empty cloud");
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(kind) * 16 + static_cast<std::uint64_t>(severity)));
  const double s = static_cast<double>(severity);
  const std::size_t n = cloud.size();
  PointCloud out = cloud;
  switch (kind) {
    case CorruptionKind::uniform_noise: {
      const double a = 0.01 * s;
      if (a == 0.0) break;
      std::uniform_real_distribution<double> u(-a, a);
      for (auto& p : out) p += Vec3{u(rng), u(rng), u(rng)};
      break;
    }
    case CorruptionKind::gaussian_noise: {
      const double sigma = 0.01 * s;
      if (sigma == 0.0) break;
      std::normal_distribution<double> g(0.0, sigma);
      for (auto& p : out) p += Vec3{g(rng), g(rng), g(rng)};
      break;
    }
    case CorruptionKind::impulse_noise: {
      const std::size_t count = std::min(n, detail::count_fraction(n, 2, severity));
      std::vector<std::size_t> idx(n);
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      std::shuffle(idx.begin(), idx.end(), rng);
      std::uniform_real_distribution<double> u(-0.25, 0.25);
      for (std::size_t i = 0; i < count; ++i) out[idx[i]] += Vec3{u(rng), u(rng), u(rng)};
      break;
    }
    case CorruptionKind::background_noise: {
      const std::size_t count = detail::count_fraction(n, 4, severity);
      std::uniform_real_distribution<double> u(-1.0, 1.0);
      for (std::size_t i = 0; i < count; ++i) out.push_back({u(rng), u(rng), u(rng)});
      break;
    }
    case CorruptionKind::upsampling: {
      const std::size_t count = detail::count_fraction(n, 10, severity);
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      std::normal_distribution<double> g(0.0, 0.01);
      for (std::size_t i = 0; i < count; ++i) out.push_back(cloud[pick(rng)] + Vec3{g(rng), g(rng), g(rng)});
      break;
    }
    case CorruptionKind::density_decrease: {
      const double radius = 0.1 * s;
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      std::vector<Vec3> anchors;
      for (int i = 0; i < severity; ++i) anchors.push_back(cloud[pick(rng)]);
      // Score = how deep inside the nearest anchor ball a point lies.
      std::vector<double> score(n, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        double best = INFINITY;
        for (const auto& a : anchors) best = std::min(best, distance(cloud[i], a));
        score[i] = anchors.empty() ? 0.0 : radius - best;
        if (score[i] >= 0.0 && !anchors.empty()) score[i] = std::max(score[i], 1e-300);
      }
      out = detail::remove_scored(cloud, score);
      break;
    }
    case CorruptionKind::shear: {
      Mat3 m = Mat3::identity();
      std::uniform_real_distribution<double> mag(0.02 * s, 0.05 * s);
      std::bernoulli_distribution sign(0.5);
      for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 3; ++c)
          if (r != c) m(r, c) = (sign(rng) ? 1.0 : -1.0) * mag(rng);
      for (auto& p : out) p = m * p;
      break;
    }
    case CorruptionKind::rotation: {
      const Vec3 axis = detail::random_unit(rng);
      const double max_angle = 6.0 * s * std::numbers::pi / 180.0;
      const double angle = max_angle > 0.0 ? std::uniform_real_distribution<double>(0.0, max_angle)(rng) : 0.0;
      out = apply_rigid(cloud, rotation_axis_angle(axis, angle));
      break;
    }
    case CorruptionKind::occlusion: {
      const Vec3 normal = detail::random_unit(rng);
      const double offset = 1.0 - 0.15 * s;
      std::vector<double> score(n);
      for (std::size_t i = 0; i < n; ++i) score[i] = dot(cloud[i], normal) - offset;
      out = detail::remove_scored(cloud, score);
      break;
    }
    case CorruptionKind::scale: {
      const double hi = 1.0 + 0.1 * s;
      const double f = std::uniform_real_distribution<double>(1.0 / hi, hi)(rng);
      for (auto& p : out) p *= f;
      break;
    }
  }
  return out;
}

/// Deterministic in (cloud, spec).
inline PointCloud corrupt(const PointCloud& cloud, const CorruptionSpec& spec) {
  spec.validate();
  return corrupt_at_severity(cloud, spec.kind, spec.severity, spec.seed);
}

/// Corrupts every cloud with seed (spec.seed XOR index); labels unchanged.
/// Outputs are rounded to float32 so both dataset file forms store them
/// exactly.
inline LabeledDataset corrupt_dataset(const LabeledDataset& ds, const CorruptionSpec& spec) {
  spec.validate();
  LabeledDataset out;
  out.class_names = ds.class_names;
  out.labels = ds.labels;
  out.ids = ds.ids;
  out.clouds.reserve(ds.clouds.size());
  for (std::size_t i = 0; i < ds.clouds.size(); ++i) {
    CorruptionSpec s = spec;
    s.seed = spec.seed ^ static_cast<std::uint64_t>(i);
    out.clouds.push_back(quantize_to_float(corrupt(ds.clouds[i], s)));
  }
  return out;
}

}  // namespace smartpc
