#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "smartpc/geometry.hpp"

namespace smartpc::testing {

inline PointCloud random_cloud(Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  PointCloud cloud(n);
  for (auto& p : cloud) p = {uniform(rng, lo, hi), uniform(rng, lo, hi), uniform(rng, lo, hi)};
  return cloud;
}

/// Fresh per-test scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("smartpc_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace smartpc::testing
