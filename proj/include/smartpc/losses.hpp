#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "smartpc/errors.hpp"
#include "smartpc/random.hpp"
#include "smartpc/skeleton.hpp"

namespace smartpc {

enum class Reduction { mean, sum };

inline const char* to_string(Reduction r) { return r == Reduction::mean ? "mean" : "sum"; }

/// Coefficients of the point-to-sphere, sampling and radius terms.
struct SkeletalLossWeights {
  double w_p2s = 0.3;
  double w_sampling = 1.0;
  double w_radius = 0.4;
  Reduction reduction = Reduction::mean;
  /// false: |dist - r| per term, so points are pulled onto sphere surfaces
  /// from both sides. true: the raw signed difference, which is unbounded
  /// below once one sphere is nearest to more than 1/M of the points.
  bool p2s_signed = false;

  void validate() const {
    if (!(w_p2s >= 0.0 && w_sampling >= 0.0 && w_radius >= 0.0))
      throw InvalidArgument("skeletal loss weights must be non-negative and finite");
  }
};

/// Loss value plus its gradient w.r.t. sphere centers (M x 3, row-major) and
/// radii (M).
template <class T>
struct SkeletalLoss {
  T value{};
  std::vector<T> d_centers;
  std::vector<T> d_radii;
  std::uint64_t signature = 0;

  SkeletalLoss() = default;
  explicit SkeletalLoss(std::size_t spheres) : d_centers(spheres * 3, T{0}), d_radii(spheres, T{0}) {}

  void accumulate(const SkeletalLoss& o, T weight) {
    value += weight * o.value;
    for (std::size_t i = 0; i < d_centers.size(); ++i) d_centers[i] += weight * o.d_centers[i];
    for (std::size_t i = 0; i < d_radii.size(); ++i) d_radii[i] += weight * o.d_radii[i];
    signature = mix_seed(signature, o.signature);
  }
};

namespace detail {

template <class T>
void check_loss_inputs(std::span<const T> points, std::span<const T> centers, std::span<const T> radii,
                       const char* who) {
  if (points.empty() || points.size() % 3 != 0) throw InvalidArgument(std::string(who) + ": empty or ragged point set");
  if (radii.empty()) throw InvalidArgument(std::string(who) + ": empty skeleton");
  if (centers.size() != radii.size() * 3) throw InvalidArgument(std::string(who) + ": centers/radii size mismatch");
}

template <class T>
T dist3(const T* a, const T* b) {
  const T dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

/// Adds scale * d||a - b|| / da to g (zero when a == b).
template <class T>
void add_unit(T* g, const T* a, const T* b, T d, T scale) {
  if (d <= T{0}) return;
  const T s = scale / d;
  g[0] += s * (a[0] - b[0]);
  g[1] += s * (a[1] - b[1]);
  g[2] += s * (a[2] - b[2]);
}

/// Multiplier turning a difference into the p2s term: 1 when signed,
/// sign(v) otherwise (0 at v == 0, the subgradient used for |.|).
template <class T>
T term_sign(T v, bool signed_terms) {
  if (signed_terms) return T{1};
  return v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0});
}

}  // namespace detail

/// Point-to-sphere term. For every point p: distance to its nearest center
/// minus that sphere's radius; for every sphere: distance from its center to
/// the nearest point minus its radius. Each difference enters as its
/// absolute value unless `signed_terms`. Mean reduction divides each sum by
/// its set size. Ties go to the lowest index.
template <class T>
SkeletalLoss<T> loss_p2s(std::span<const T> points, std::span<const T> centers, std::span<const T> radii,
                         Reduction reduction = Reduction::mean, bool signed_terms = false) {
  detail::check_loss_inputs(points, centers, radii, "loss_p2s");
  const std::size_t np = points.size() / 3;
  const std::size_t ns = radii.size();
  SkeletalLoss<T> out(ns);
  const T wp = reduction == Reduction::mean ? T{1} / static_cast<T>(np) : T{1};
  const T ws = reduction == Reduction::mean ? T{1} / static_cast<T>(ns) : T{1};

  std::vector<T> best_to_point(ns, std::numeric_limits<T>::infinity());
  std::vector<std::size_t> arg_point(ns, 0);
  T sum_a{0};
  std::uint64_t sig = np * 31 + ns;
  for (std::size_t i = 0; i < np; ++i) {
    const T* p = points.data() + 3 * i;
    T best = std::numeric_limits<T>::infinity();
    std::size_t arg = 0;
    for (std::size_t s = 0; s < ns; ++s) {
      const T d = detail::dist3(p, centers.data() + 3 * s);
      if (d < best) {
        best = d;
        arg = s;
      }
      if (d < best_to_point[s]) {
        best_to_point[s] = d;
        arg_point[s] = i;
      }
    }
    const T sa = detail::term_sign(best - radii[arg], signed_terms);
    sum_a += sa * (best - radii[arg]);
    detail::add_unit(out.d_centers.data() + 3 * arg, centers.data() + 3 * arg, p, best, sa * wp);
    out.d_radii[arg] -= sa * wp;
    sig = mix_seed(sig, 2 * arg + (sa > T{0}));
  }
  T sum_b{0};
  for (std::size_t s = 0; s < ns; ++s) {
    const T* c = centers.data() + 3 * s;
    const T* p = points.data() + 3 * arg_point[s];
    const T sb = detail::term_sign(best_to_point[s] - radii[s], signed_terms);
    sum_b += sb * (best_to_point[s] - radii[s]);
    detail::add_unit(out.d_centers.data() + 3 * s, c, p, best_to_point[s], sb * ws);
    out.d_radii[s] -= sb * ws;
    sig = mix_seed(sig, 2 * arg_point[s] + (sb > T{0}));
  }
  out.value = wp * sum_a + ws * sum_b;
  out.signature = sig;
  return out;
}

/// Chamfer distance (unsquared L2) between the points and the lattice samples
/// t = c + r v of every sphere. Differentiable through c and r.
template <class T>
SkeletalLoss<T> loss_sampling(std::span<const T> points, std::span<const T> centers, std::span<const T> radii,
                              std::size_t n_per_sphere, Reduction reduction = Reduction::mean) {
  detail::check_loss_inputs(points, centers, radii, "loss_sampling");
  if (n_per_sphere == 0) throw InvalidArgument("loss_sampling: n_per_sphere must be >= 1");
  const std::size_t np = points.size() / 3;
  const std::size_t ns = radii.size();
  const std::size_t nt = ns * n_per_sphere;
  std::vector<T> dirs(n_per_sphere * 3);
  for (std::size_t j = 0; j < n_per_sphere; ++j) {
    const Vec3 v = fibonacci_direction(j, n_per_sphere);
    dirs[3 * j] = static_cast<T>(v.x);
    dirs[3 * j + 1] = static_cast<T>(v.y);
    dirs[3 * j + 2] = static_cast<T>(v.z);
  }
  std::vector<T> samples(nt * 3);
  for (std::size_t s = 0; s < ns; ++s)
    for (std::size_t j = 0; j < n_per_sphere; ++j)
      for (std::size_t a = 0; a < 3; ++a)
        samples[3 * (s * n_per_sphere + j) + a] = centers[3 * s + a] + radii[s] * dirs[3 * j + a];

  std::vector<T> best_t(nt, std::numeric_limits<T>::infinity());
  std::vector<std::size_t> arg_t(nt, 0);
  std::vector<T> d_samples(nt * 3, T{0});
  const T wp = reduction == Reduction::mean ? T{1} / static_cast<T>(np) : T{1};
  const T wt = reduction == Reduction::mean ? T{1} / static_cast<T>(nt) : T{1};
  T sum_p{0};
  std::uint64_t sig = np * 131 + nt;
  for (std::size_t i = 0; i < np; ++i) {
    const T* p = points.data() + 3 * i;
    T best = std::numeric_limits<T>::infinity();
    std::size_t arg = 0;
    for (std::size_t k = 0; k < nt; ++k) {
      const T* t = samples.data() + 3 * k;
      const T dx = p[0] - t[0], dy = p[1] - t[1], dz = p[2] - t[2];
      const T sq = dx * dx + dy * dy + dz * dz;
      if (sq < best) {
        best = sq;
        arg = k;
      }
      if (sq < best_t[k]) {
        best_t[k] = sq;
        arg_t[k] = i;
      }
    }
    const T d = std::sqrt(best);
    sum_p += d;
    detail::add_unit(d_samples.data() + 3 * arg, samples.data() + 3 * arg, p, d, wp);
    sig = mix_seed(sig, arg);
  }
  T sum_t{0};
  for (std::size_t k = 0; k < nt; ++k) {
    const T d = std::sqrt(best_t[k]);
    sum_t += d;
    detail::add_unit(d_samples.data() + 3 * k, samples.data() + 3 * k, points.data() + 3 * arg_t[k], d, wt);
    sig = mix_seed(sig, arg_t[k]);
  }

  SkeletalLoss<T> out(ns);
  for (std::size_t s = 0; s < ns; ++s)
    for (std::size_t j = 0; j < n_per_sphere; ++j) {
      const T* g = d_samples.data() + 3 * (s * n_per_sphere + j);
      for (std::size_t a = 0; a < 3; ++a) {
        out.d_centers[3 * s + a] += g[a];
        out.d_radii[s] += g[a] * dirs[3 * j + a];
      }
    }
  out.value = wp * sum_p + wt * sum_t;
  out.signature = sig;
  return out;
}

/// Negative (summed or mean) radius; rewards larger spheres.
template <class T>
SkeletalLoss<T> loss_radius(std::span<const T> radii, Reduction reduction = Reduction::mean) {
  if (radii.empty()) throw InvalidArgument("loss_radius: empty skeleton");
  const std::size_t ns = radii.size();
  SkeletalLoss<T> out(ns);
  const T w = reduction == Reduction::mean ? T{1} / static_cast<T>(ns) : T{1};
  T sum{0};
  for (std::size_t s = 0; s < ns; ++s) {
    sum += radii[s];
    out.d_radii[s] = -w;
  }
  out.value = -w * sum;
  return out;
}

/// w_p2s * L_p2s + w_sampling * L_sampling + w_radius * L_radius.
template <class T>
SkeletalLoss<T> loss_skeletal(std::span<const T> points, std::span<const T> centers, std::span<const T> radii,
                              const SkeletalLossWeights& weights, std::size_t n_per_sphere) {
  weights.validate();
  SkeletalLoss<T> out(radii.size());
  out.accumulate(loss_p2s(points, centers, radii, weights.reduction, weights.p2s_signed),
                 static_cast<T>(weights.w_p2s));
  out.accumulate(loss_sampling(points, centers, radii, n_per_sphere, weights.reduction),
                 static_cast<T>(weights.w_sampling));
  out.accumulate(loss_radius(radii, weights.reduction), static_cast<T>(weights.w_radius));
  return out;
}

/// L_skel + L_cls.
inline double loss_total(double skeletal, double classification) {
  if (!std::isfinite(skeletal) || !std::isfinite(classification))
    throw InvalidArgument("loss_total: non-finite component");
  return skeletal + classification;
}

// Convenience overloads on the geometric types (double precision).

struct FlatSkeleton {
  std::vector<double> points, centers, radii;
};

inline FlatSkeleton flatten(std::span<const Vec3> cloud, const SkeletalCloud& skel) {
  FlatSkeleton f;
  f.points.reserve(cloud.size() * 3);
  for (const auto& p : cloud) f.points.insert(f.points.end(), {p.x, p.y, p.z});
  for (const auto& s : skel) {
    f.centers.insert(f.centers.end(), {s.center.x, s.center.y, s.center.z});
    f.radii.push_back(s.radius);
  }
  return f;
}

inline SkeletalLoss<double> loss_p2s(std::span<const Vec3> cloud, const SkeletalCloud& skel,
                                     Reduction reduction = Reduction::mean, bool signed_terms = false) {
  const auto f = flatten(cloud, skel);
  return loss_p2s<double>(f.points, f.centers, f.radii, reduction, signed_terms);
}

inline SkeletalLoss<double> loss_sampling(std::span<const Vec3> cloud, const SkeletalCloud& skel,
                                          std::size_t n_per_sphere, Reduction reduction = Reduction::mean) {
  const auto f = flatten(cloud, skel);
  return loss_sampling<double>(f.points, f.centers, f.radii, n_per_sphere, reduction);
}

inline SkeletalLoss<double> loss_radius(const SkeletalCloud& skel, Reduction reduction = Reduction::mean) {
  const auto f = flatten({}, skel);
  return loss_radius<double>(f.radii, reduction);
}

inline SkeletalLoss<double> loss_skeletal(std::span<const Vec3> cloud, const SkeletalCloud& skel,
                                          const SkeletalLossWeights& weights, std::size_t n_per_sphere) {
  const auto f = flatten(cloud, skel);
  return loss_skeletal<double>(f.points, f.centers, f.radii, weights, n_per_sphere);
}

/// Symmetric Chamfer distance between two clouds, mean-reduced per side.
inline double chamfer_distance(std::span<const Vec3> a, std::span<const Vec3> b) {
  if (a.empty() || b.empty()) throw InvalidArgument("chamfer_distance: empty cloud");
  std::vector<double> fa, fb;
  for (const auto& p : a) fa.insert(fa.end(), {p.x, p.y, p.z});
  for (const auto& p : b) fb.insert(fb.end(), {p.x, p.y, p.z});
  std::vector<double> radii(b.size(), 0.0);
  // A zero-radius "sphere" per point of b with a single sample is b itself.
  auto r = loss_sampling<double>(fa, fb, radii, 1, Reduction::mean);
  return r.value;
}

}  // namespace smartpc
