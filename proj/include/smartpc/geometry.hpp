#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "smartpc/errors.hpp"
#include "smartpc/random.hpp"

namespace smartpc {

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  constexpr double& operator[](std::size_t i) noexcept { return i == 0 ? x : (i == 1 ? y : z); }
  constexpr double operator[](std::size_t i) const noexcept { return i == 0 ? x : (i == 1 ? y : z); }

  constexpr Vec3& operator+=(const Vec3& o) noexcept {
    x += o.x;
    y += o.y;
    z += o.z;
    return *this;
  }
  constexpr Vec3& operator-=(const Vec3& o) noexcept {
    x -= o.x;
    y -= o.y;
    z -= o.z;
    return *this;
  }
  constexpr Vec3& operator*=(double s) noexcept {
    x *= s;
    y *= s;
    z *= s;
    return *this;
  }

  friend constexpr Vec3 operator+(Vec3 a, const Vec3& b) noexcept { return a += b; }
  friend constexpr Vec3 operator-(Vec3 a, const Vec3& b) noexcept { return a -= b; }
  friend constexpr Vec3 operator*(Vec3 a, double s) noexcept { return a *= s; }
  friend constexpr Vec3 operator*(double s, Vec3 a) noexcept { return a *= s; }
  friend constexpr Vec3 operator-(const Vec3& a) noexcept { return {-a.x, -a.y, -a.z}; }
  friend constexpr bool operator==(const Vec3&, const Vec3&) = default;
};

constexpr double dot(const Vec3& a, const Vec3& b) noexcept { return a.x * b.x + a.y * b.y + a.z * b.z; }
constexpr Vec3 cross(const Vec3& a, const Vec3& b) noexcept {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(const Vec3& a) noexcept { return std::sqrt(dot(a, a)); }
constexpr double squared_distance(const Vec3& a, const Vec3& b) noexcept {
  const Vec3 d = a - b;
  return dot(d, d);
}
inline double distance(const Vec3& a, const Vec3& b) noexcept { return std::sqrt(squared_distance(a, b)); }
inline bool is_finite(const Vec3& a) noexcept {
  return std::isfinite(a.x) && std::isfinite(a.y) && std::isfinite(a.z);
}

/// Ordered 3D points in object coordinates.
using PointCloud = std::vector<Vec3>;

inline void require_finite(std::span<const Vec3> cloud, const char* who) {
  for (const auto& p : cloud) {
    if (!is_finite(p)) throw InvalidArgument(std::string(who) + ": non-finite coordinate");
  }
}

inline Vec3 centroid(std::span<const Vec3> cloud) {
  Vec3 c;
  for (const auto& p : cloud) c += p;
  return cloud.empty() ? c : c * (1.0 / static_cast<double>(cloud.size()));
}

/// Rounds every coordinate to the nearest 32-bit float so the cloud survives
/// a float32 binary round trip unchanged.
inline PointCloud quantize_to_float(PointCloud cloud) {
  for (auto& p : cloud) {
    p = {static_cast<double>(static_cast<float>(p.x)), static_cast<double>(static_cast<float>(p.y)),
         static_cast<double>(static_cast<float>(p.z))};
  }
  return cloud;
}

// ---------------------------------------------------------------------------
// Farthest point sampling

/// How the first FPS center is chosen.
struct StartRule {
  std::size_t index = 0;
  std::optional<std::uint64_t> seed;  // when set, start = uniform index drawn from seed

  static StartRule fixed(std::size_t i) { return {i, std::nullopt}; }
  static StartRule seeded(std::uint64_t s) { return {0, s}; }

  std::size_t resolve(std::size_t n) const {
    if (seed) return static_cast<std::size_t>(mix_seed(*seed) % n);
    if (index >= n) throw InvalidArgument("fps: start index out of range");
    return index;
  }
};

struct FpsResult {
  PointCloud centers;
  std::vector<std::size_t> indices;
};

/// Greedy max-min sampling. Each step picks the point whose distance to the
/// already-selected set is largest; ties go to the lowest index.
inline FpsResult fps(std::span<const Vec3> cloud, std::size_t count, StartRule start = {}) {
  const std::size_t n = cloud.size();
  if (count == 0 || count > n) throw InvalidArgument("fps: need 1 <= M <= N");
  FpsResult out;
  out.indices.reserve(count);
  out.centers.reserve(count);
  std::vector<double> min_sq(n, std::numeric_limits<double>::infinity());
  std::vector<char> taken(n, 0);
  std::size_t current = start.resolve(n);
  for (std::size_t step = 0; step < count; ++step) {
    out.indices.push_back(current);
    out.centers.push_back(cloud[current]);
    taken[current] = 1;
    if (step + 1 == count) break;
    std::size_t best = n;
    double best_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = squared_distance(cloud[i], cloud[current]);
      if (d < min_sq[i]) min_sq[i] = d;
      if (!taken[i] && min_sq[i] > best_d) {
        best_d = min_sq[i];
        best = i;
      }
    }
    current = best;
  }
  return out;
}

// ---------------------------------------------------------------------------
// k nearest neighbours (exhaustive)

/// Row-major table: row q holds the K nearest cloud indices of query q,
/// ascending by distance, ties to the lower index.
struct NeighborTable {
  std::size_t queries = 0;
  std::size_t k = 0;
  std::vector<std::size_t> indices;

  std::span<const std::size_t> row(std::size_t q) const { return {indices.data() + q * k, k}; }
};

inline NeighborTable knn(std::span<const Vec3> queries, std::span<const Vec3> cloud, std::size_t k) {
  const std::size_t n = cloud.size();
  if (k == 0 || k > n) throw InvalidArgument("knn: need 1 <= K <= N");
  NeighborTable table{queries.size(), k, {}};
  table.indices.resize(queries.size() * k);
  std::vector<std::size_t> order(n);
  std::vector<double> dist(n);
  const auto closer = [&](std::size_t a, std::size_t b) {
    return dist[a] < dist[b] || (dist[a] == dist[b] && a < b);
  };
  for (std::size_t q = 0; q < queries.size(); ++q) {
    for (std::size_t i = 0; i < n; ++i) dist[i] = squared_distance(queries[q], cloud[i]);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), closer);
    std::copy_n(order.begin(), k, table.indices.begin() + static_cast<std::ptrdiff_t>(q * k));
  }
  return table;
}

// ---------------------------------------------------------------------------
// Tokenization

/// M centers and their M x K center-relative neighbourhoods.
struct PatchSet {
  PointCloud centers;
  std::vector<std::size_t> center_indices;
  std::size_t k = 0;
  PointCloud offsets;                        // M*K, row-major by patch
  std::vector<std::size_t> neighbor_indices; // M*K

  std::size_t patches() const noexcept { return centers.size(); }
  std::span<const Vec3> neighborhood(std::size_t i) const { return {offsets.data() + i * k, k}; }
};

inline PatchSet tokenize(std::span<const Vec3> cloud, std::size_t m, std::size_t k, StartRule start = {}) {
  auto sampled = fps(cloud, m, start);
  auto table = knn(sampled.centers, cloud, k);
  PatchSet out;
  out.k = k;
  out.offsets.reserve(m * k);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t idx : table.row(i)) out.offsets.push_back(cloud[idx] - sampled.centers[i]);
  }
  out.centers = std::move(sampled.centers);
  out.center_indices = std::move(sampled.indices);
  out.neighbor_indices = std::move(table.indices);
  return out;
}

/// Scales centers and offsets together; equivalent to tokenizing the scaled
/// cloud up to floating-point tie resolution.
inline void scale_patches(PatchSet& patches, double factor) {
  for (auto& c : patches.centers) c *= factor;
  for (auto& o : patches.offsets) o *= factor;
}

// ---------------------------------------------------------------------------
// Rigid transforms

/// Row-major 3x3 matrix.
struct Mat3 {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  constexpr double operator()(std::size_t r, std::size_t c) const noexcept { return m[r * 3 + c]; }
  constexpr double& operator()(std::size_t r, std::size_t c) noexcept { return m[r * 3 + c]; }

  static constexpr Mat3 identity() noexcept { return {}; }

  constexpr Vec3 operator*(const Vec3& v) const noexcept {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }
  constexpr Mat3 operator*(const Mat3& o) const noexcept {
    Mat3 r;
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 3; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < 3; ++k) s += (*this)(i, k) * o(k, j);
        r(i, j) = s;
      }
    }
    return r;
  }
  constexpr Mat3 transposed() const noexcept {
    Mat3 r;
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
    return r;
  }
  constexpr double determinant() const noexcept {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
  }
};

inline Mat3 rotation_z(double angle) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  return Mat3{{c, -s, 0, s, c, 0, 0, 0, 1}};
}

/// Rodrigues rotation about a (not necessarily unit) axis.
inline Mat3 rotation_axis_angle(Vec3 axis, double angle) {
  const double len = norm(axis);
  if (!(len > 0.0)) throw InvalidArgument("rotation_axis_angle: zero axis");
  axis *= 1.0 / len;
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  const double t = 1.0 - c;
  const auto [x, y, z] = std::array{axis.x, axis.y, axis.z};
  return Mat3{{t * x * x + c, t * x * y - s * z, t * x * z + s * y, t * x * y + s * z, t * y * y + c,
               t * y * z - s * x, t * x * z - s * y, t * y * z + s * x, t * z * z + c}};
}

inline bool is_rotation(const Mat3& r, double tol = 1e-6) {
  const Mat3 rtr = r.transposed() * r;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      if (std::abs(rtr(i, j) - (i == j ? 1.0 : 0.0)) > tol) return false;
  return std::abs(r.determinant() - 1.0) <= tol;
}

inline PointCloud apply_rigid(std::span<const Vec3> cloud, const Mat3& rotation, const Vec3& translation = {}) {
  if (!is_rotation(rotation)) throw InvalidArgument("apply_rigid: rotation is not orthonormal with det +1");
  PointCloud out;
  out.reserve(cloud.size());
  for (const auto& p : cloud) out.push_back(rotation * p + translation);
  return out;
}

inline PointCloud rotate_z(std::span<const Vec3> cloud, double angle) { return apply_rigid(cloud, rotation_z(angle)); }

/// Subtracts the centroid and scales so the farthest point has norm 1.
/// A cloud whose points all coincide is only centered.
inline PointCloud normalize_unit_sphere(std::span<const Vec3> cloud) {
  if (cloud.empty()) throw InvalidArgument("normalize_unit_sphere: empty cloud");
  const Vec3 c = centroid(cloud);
  PointCloud out;
  out.reserve(cloud.size());
  double max_norm = 0.0;
  for (const auto& p : cloud) {
    out.push_back(p - c);
    max_norm = std::max(max_norm, norm(out.back()));
  }
  if (max_norm > 0.0) {
    for (auto& p : out) p *= 1.0 / max_norm;
  }
  return out;
}

}  // namespace smartpc
