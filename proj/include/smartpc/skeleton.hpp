#pragma once

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "smartpc/errors.hpp"
#include "smartpc/format.hpp"
#include "smartpc/geometry.hpp"

namespace smartpc {

struct SkeletalSphere {
  Vec3 center;
  double radius = 1.0;

  bool valid() const noexcept { return is_finite(center) && std::isfinite(radius) && radius > 0.0; }
  friend bool operator==(const SkeletalSphere&, const SkeletalSphere&) = default;
};

using SkeletalCloud = std::vector<SkeletalSphere>;

inline void require_valid(const SkeletalCloud& skel, const char* who) {
  if (skel.empty()) throw InvalidArgument(std::string(who) + ": empty skeleton");
  for (const auto& s : skel) {
    if (!s.valid()) throw InvalidArgument(std::string(who) + ": sphere with non-positive or non-finite radius");
  }
}

inline constexpr double kGoldenAngle = std::numbers::pi * (3.0 - (2.0 * std::numbers::phi - 1.0));  // pi (3 - sqrt 5);

/// Direction i of an n-point Fibonacci lattice:
/// z_i = 1 - 2(i + 0.5)/n, azimuth i * golden angle.
inline Vec3 fibonacci_direction(std::size_t i, std::size_t n) {
  const double z = 1.0 - 2.0 * (static_cast<double>(i) + 0.5) / static_cast<double>(n);
  const double rho = std::sqrt(std::max(0.0, 1.0 - z * z));
  const double phi = static_cast<double>(i) * kGoldenAngle;
  return {rho * std::cos(phi), rho * std::sin(phi), z};
}

inline PointCloud fibonacci_directions(std::size_t n) {
  PointCloud dirs;
  dirs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) dirs.push_back(fibonacci_direction(i, n));
  return dirs;
}

/// n surface points c + r v over the lattice directions v.
inline PointCloud sample_sphere_surface(const SkeletalSphere& sphere, std::size_t n) {
  if (n == 0) throw InvalidArgument("sample_sphere_surface: n must be >= 1");
  PointCloud out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(sphere.center + sphere.radius * fibonacci_direction(i, n));
  return out;
}

/// Concatenated surface samples of every sphere, sphere-major.
inline PointCloud reconstruct(const SkeletalCloud& skel, std::size_t n_per_sphere) {
  if (n_per_sphere == 0) throw InvalidArgument("reconstruct: n_per_sphere must be >= 1");
  PointCloud out;
  out.reserve(skel.size() * n_per_sphere);
  for (const auto& s : skel) {
    auto pts = sample_sphere_surface(s, n_per_sphere);
    out.insert(out.end(), pts.begin(), pts.end());
  }
  return out;
}

/// CSV `cx,cy,cz,r`, shortest round-trip decimal per value.
inline void export_skeleton(const SkeletalCloud& skel, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << "cx,cy,cz,r\n";
  for (const auto& s : skel) {
    out << format_double(s.center.x) << ',' << format_double(s.center.y) << ',' << format_double(s.center.z) << ','
        << format_double(s.radius) << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

inline SkeletalCloud import_skeleton(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line) || (++line_no, line != "cx,cy,cz,r")) {
    throw ParseError(path.string(), 1, "expected header 'cx,cy,cz,r'");
  }
  SkeletalCloud skel;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = split(line, ',');
    if (fields.size() != 4) throw ParseError(path.string(), line_no, "expected 4 fields");
    std::array<double, 4> v{};
    for (std::size_t i = 0; i < 4; ++i) {
      auto parsed = parse_double(fields[i]);
      if (!parsed || !std::isfinite(*parsed)) throw ParseError(path.string(), line_no, "bad number '" + fields[i] + "'");
      v[i] = *parsed;
    }
    skel.push_back({{v[0], v[1], v[2]}, v[3]});
  }
  return skel;
}

}  // namespace smartpc
