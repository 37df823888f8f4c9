#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "smartpc/errors.hpp"
#include "smartpc/format.hpp"
#include "smartpc/geometry.hpp"
#include "smartpc/random.hpp"

namespace smartpc {

/// Clouds with class labels. `ids` name samples stably (manifest file stems)
/// so per-sample outputs can be joined across reorderings.
struct LabeledDataset {
  std::vector<PointCloud> clouds;
  std::vector<std::size_t> labels;
  std::vector<std::string> class_names;
  std::vector<std::string> ids;

  std::size_t size() const noexcept { return clouds.size(); }

  void validate() const {
    if (clouds.size() != labels.size()) throw InvalidArgument("dataset: cloud/label count mismatch");
    if (!ids.empty() && ids.size() != clouds.size()) throw InvalidArgument("dataset: id count mismatch");
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] >= class_names.size())
        throw InvalidArgument("dataset: label " + std::to_string(labels[i]) + " out of range at sample " +
                              std::to_string(i));
      if (clouds[i].empty()) throw InvalidArgument("dataset: empty cloud at sample " + std::to_string(i));
    }
  }

  std::string id(std::size_t i) const { return ids.empty() ? default_id(i) : ids[i]; }
  static std::string default_id(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%06zu", i);
    return buf;
  }

  /// Equal clouds, labels and class names; ids are metadata and ignored.
  bool same_content(const LabeledDataset& o) const {
    return clouds == o.clouds && labels == o.labels && class_names == o.class_names;
  }
};

// ---------------------------------------------------------------------------
// Synthetic shapes

enum class ShapeClass { sphere, box, cylinder, cone, torus, plane, helix, cross };

inline constexpr std::array<std::string_view, 8> kShapeNames{"sphere", "box",   "cylinder", "cone",
                                                             "torus",  "plane", "helix",    "cross"};

inline std::string to_string(ShapeClass c) { return std::string(kShapeNames[static_cast<std::size_t>(c)]); }

inline ShapeClass parse_shape_class(std::string_view name) {
  for (std::size_t i = 0; i < kShapeNames.size(); ++i)
    if (kShapeNames[i] == name) return static_cast<ShapeClass>(i);
  throw InvalidArgument("unknown shape class '" + std::string(name) + "'");
}

struct ShapeOptions {
  bool jitter = true;   // Gaussian jitter, sigma 0.005, truncated at 3 sigma
  bool variety = true;  // random z rotation and per-axis scale in [0.8, 1.25]
};

namespace detail {

inline Vec3 sample_box_surface(Rng& rng, const Vec3& half) {
  // Faces chosen proportionally to area.
  const std::array<double, 3> area{half.y * half.z, half.x * half.z, half.x * half.y};
  const double total = area[0] + area[1] + area[2];
  double u = uniform(rng, 0.0, total);
  std::size_t axis = 0;
  while (axis < 2 && u >= area[axis]) u -= area[axis++];
  Vec3 p{uniform(rng, -half.x, half.x), uniform(rng, -half.y, half.y), uniform(rng, -half.z, half.z)};
  p[axis] = (uniform(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0) * half[axis];
  return p;
}

inline Vec3 sample_shape(ShapeClass c, Rng& rng) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  switch (c) {
    case ShapeClass::sphere: {
      std::normal_distribution<double> g(0.0, 1.0);
      Vec3 v{g(rng), g(rng), g(rng)};
      return v * (1.0 / std::max(norm(v), 1e-12));
    }
    case ShapeClass::box: return sample_box_surface(rng, {1.0, 1.0, 1.0});
    case ShapeClass::cylinder: {
      constexpr double r = 0.5, h = 1.0;
      const double lateral = two_pi * r * 2 * h, caps = 2 * std::numbers::pi * r * r;
      const double phi = uniform(rng, 0.0, two_pi);
      if (uniform(rng, 0.0, lateral + caps) < lateral) return {r * std::cos(phi), r * std::sin(phi), uniform(rng, -h, h)};
      const double rr = r * std::sqrt(uniform(rng, 0.0, 1.0));
      return {rr * std::cos(phi), rr * std::sin(phi), uniform(rng, 0.0, 1.0) < 0.5 ? -h : h};
    }
    case ShapeClass::cone: {
      constexpr double r = 0.7, h = 2.0;
      const double slant = std::sqrt(r * r + h * h);
      const double lateral = std::numbers::pi * r * slant, base = std::numbers::pi * r * r;
      const double phi = uniform(rng, 0.0, two_pi);
      if (uniform(rng, 0.0, lateral + base) < lateral) {
        const double t = std::sqrt(uniform(rng, 0.0, 1.0));  // area-uniform along the slant
        return {t * r * std::cos(phi), t * r * std::sin(phi), 1.0 - t * h};
      }
      const double rr = r * std::sqrt(uniform(rng, 0.0, 1.0));
      return {rr * std::cos(phi), rr * std::sin(phi), -1.0};
    }
    case ShapeClass::torus: {
      constexpr double big = 0.7, small = 0.25;
      // Rejection on the tube angle for area uniformity.
      for (;;) {
        const double u = uniform(rng, 0.0, two_pi), v = uniform(rng, 0.0, two_pi);
        if (uniform(rng, 0.0, big + small) <= big + small * std::cos(v)) {
          const double w = big + small * std::cos(v);
          return {w * std::cos(u), w * std::sin(u), small * std::sin(v)};
        }
      }
    }
    case ShapeClass::plane: return {uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0), 0.0};
    case ShapeClass::helix: {
      constexpr double r = 0.6, turns = 2.5, tube = 0.06;
      const double t = uniform(rng, 0.0, 1.0);
      const double phi = two_pi * turns * t;
      const Vec3 c{r * std::cos(phi), r * std::sin(phi), 2.0 * t - 1.0};
      const Vec3 radial{std::cos(phi), std::sin(phi), 0.0};
      const Vec3 up{0.0, 0.0, 1.0};
      const double a = uniform(rng, 0.0, two_pi);
      return c + tube * (std::cos(a) * radial + std::sin(a) * up);
    }
    case ShapeClass::cross: {
      const bool along_x = uniform(rng, 0.0, 1.0) < 0.5;
      const Vec3 half = along_x ? Vec3{1.0, 0.15, 0.15} : Vec3{0.15, 1.0, 0.15};
      return sample_box_surface(rng, half);
    }
  }
  return {};
}

}  // namespace detail

/// n surface samples of a parametric shape, normalized to the unit sphere
/// and rounded to float32. Spheres are drawn in antipodal pairs so, with
/// jitter and variety off and n even, the centroid is exactly the origin.
inline PointCloud gen_shape(ShapeClass c, std::size_t n, std::uint64_t seed, ShapeOptions opt = {}) {
  if (n < 32) throw InvalidArgument("gen_shape: n must be >= 32");
  Rng rng(mix_seed(seed, 0x7368617065ULL + static_cast<std::uint64_t>(c)));
  PointCloud cloud;
  cloud.reserve(n);
  while (cloud.size() < n) {
    const Vec3 p = detail::sample_shape(c, rng);
    cloud.push_back(p);
    if (c == ShapeClass::sphere && cloud.size() < n) cloud.push_back(-p);
  }
  if (opt.variety) {
    const Vec3 aniso{uniform(rng, 0.8, 1.25), uniform(rng, 0.8, 1.25), uniform(rng, 0.8, 1.25)};
    const Mat3 rot = rotation_z(uniform(rng, 0.0, 2.0 * std::numbers::pi));
    for (auto& p : cloud) p = rot * Vec3{p.x * aniso.x, p.y * aniso.y, p.z * aniso.z};
  }
  if (opt.jitter) {
    std::normal_distribution<double> g(0.0, 0.005);
    const auto draw = [&] { return std::clamp(g(rng), -0.015, 0.015); };
    for (auto& p : cloud) p += Vec3{draw(), draw(), draw()};
  }
  return quantize_to_float(normalize_unit_sphere(cloud));
}

/// 8 classes x per_class clouds, class-interleaved (sample i has class
/// i mod 8, seed `seed ^ i`). The first round(per_class * split) samples of
/// each class go to train; both splits are class-balanced.
inline std::pair<LabeledDataset, LabeledDataset> gen_dataset(std::size_t per_class, std::size_t n_points,
                                                             std::uint64_t seed, double split = 0.8) {
  if (per_class < 2) throw InvalidArgument("gen_dataset: per_class must be >= 2");
  if (!(split >= 0.0 && split <= 1.0)) throw InvalidArgument("gen_dataset: split must lie in [0, 1]");
  const std::size_t classes = kShapeNames.size();
  const auto train_per_class = static_cast<std::size_t>(std::llround(static_cast<double>(per_class) * split));
  LabeledDataset train, test;
  for (auto name : kShapeNames) {
    train.class_names.emplace_back(name);
    test.class_names.emplace_back(name);
  }
  for (std::size_t i = 0; i < classes * per_class; ++i) {
    const std::size_t label = i % classes;
    auto& dst = (i / classes) < train_per_class ? train : test;
    dst.clouds.push_back(gen_shape(static_cast<ShapeClass>(label), n_points, seed ^ static_cast<std::uint64_t>(i)));
    dst.labels.push_back(label);
    dst.ids.push_back(LabeledDataset::default_id(i));
  }
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// .xyz text clouds

inline PointCloud parse_xyz(std::istream& in, const std::string& origin) {
  PointCloud cloud;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream fields(line);
    std::vector<std::string> tokens{std::istream_iterator<std::string>(fields), std::istream_iterator<std::string>()};
    if (tokens.empty()) continue;
    if (tokens.size() != 3)
      throw ParseError(origin, line_no, "expected 3 coordinates, found " + std::to_string(tokens.size()));
    Vec3 p;
    for (std::size_t a = 0; a < 3; ++a) {
      const auto v = parse_double(tokens[a]);
      if (!v) throw ParseError(origin, line_no, "bad number '" + tokens[a] + "'");
      if (!std::isfinite(*v)) throw ParseError(origin, line_no, "non-finite coordinate");
      p[a] = *v;
    }
    cloud.push_back(p);
  }
  return cloud;
}

inline PointCloud read_xyz(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  return parse_xyz(in, path.string());
}

inline void write_xyz(std::span<const Vec3> cloud, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  for (const auto& p : cloud) out << format_double(p.x) << ' ' << format_double(p.y) << ' ' << format_double(p.z) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// Dataset containers: manifest directory or packed SPCD file

enum class DatasetFormat { manifest, packed };

inline constexpr std::uint32_t kPackedDatasetVersion = 1;

namespace detail {

inline void put_le32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string origin) : bytes_(bytes), origin_(std::move(origin)) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const noexcept { return pos_ == bytes_.size(); }
  [[noreturn]] void fail(const std::string& what) const { throw FormatError(origin_ + ": " + what); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) fail("truncated file");
  }
  const std::string& bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace detail

// SPCD layout (little-endian):
//   "SPCD", u32 version, u32 cloud count, u32 class count,
//   per class: u32 byte length + UTF-8 name,
//   u32 label per cloud, u32 point count per cloud,
//   float32 x y z for every point of every cloud, cloud-major.
inline std::string encode_packed_dataset(const LabeledDataset& ds) {
  ds.validate();
  std::string out = "SPCD";
  detail::put_le32(out, kPackedDatasetVersion);
  detail::put_le32(out, static_cast<std::uint32_t>(ds.size()));
  detail::put_le32(out, static_cast<std::uint32_t>(ds.class_names.size()));
  for (const auto& name : ds.class_names) {
    detail::put_le32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
  }
  for (auto l : ds.labels) detail::put_le32(out, static_cast<std::uint32_t>(l));
  for (const auto& c : ds.clouds) detail::put_le32(out, static_cast<std::uint32_t>(c.size()));
  for (const auto& c : ds.clouds)
    for (const auto& p : c)
      for (std::size_t a = 0; a < 3; ++a) detail::put_le32(out, std::bit_cast<std::uint32_t>(static_cast<float>(p[a])));
  return out;
}

inline LabeledDataset decode_packed_dataset(const std::string& bytes, const std::string& origin) {
  detail::ByteReader r(bytes, origin);
  if (r.str(4) != "SPCD") r.fail("bad magic (expected SPCD)");
  if (const auto v = r.u32(); v != kPackedDatasetVersion) r.fail("unsupported version " + std::to_string(v));
  const std::size_t count = r.u32();
  const std::size_t classes = r.u32();
  LabeledDataset ds;
  for (std::size_t i = 0; i < classes; ++i) ds.class_names.push_back(r.str(r.u32()));
  for (std::size_t i = 0; i < count; ++i) ds.labels.push_back(r.u32());
  std::vector<std::size_t> sizes;
  for (std::size_t i = 0; i < count; ++i) sizes.push_back(r.u32());
  for (std::size_t i = 0; i < count; ++i) {
    PointCloud c(sizes[i]);
    for (auto& p : c) {
      p.x = r.f32();
      p.y = r.f32();
      p.z = r.f32();
      if (!is_finite(p)) r.fail("non-finite coordinate in cloud " + std::to_string(i));
    }
    ds.clouds.push_back(std::move(c));
    ds.ids.push_back(LabeledDataset::default_id(i));
  }
  if (!r.done()) r.fail("trailing bytes");
  try {
    ds.validate();
  } catch (const InvalidArgument& e) {
    r.fail(e.what());
  }
  return ds;
}

/// Manifest form writes `<dir>/manifest.json` plus one `<id>.xyz` per cloud;
/// packed form writes a single SPCD file.
inline void save_dataset(const LabeledDataset& ds, const std::filesystem::path& path,
                         DatasetFormat format = DatasetFormat::manifest) {
  ds.validate();
  if (format == DatasetFormat::packed) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    const auto bytes = encode_packed_dataset(ds);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + path.string());
    return;
  }
  std::error_code ec;
  std::filesystem::create_directories(path, ec);
  if (ec) throw IoError("cannot create directory " + path.string() + ": " + ec.message());
  nlohmann::json entries = nlohmann::json::array();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::string file = ds.id(i) + ".xyz";
    write_xyz(ds.clouds[i], path / file);
    entries.push_back({{"file", file}, {"label", ds.labels[i]}});
  }
  const nlohmann::json manifest{{"class_names", ds.class_names}, {"entries", entries}};
  std::ofstream out(path / "manifest.json", std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + (path / "manifest.json").string());
  out << manifest.dump(1) << '\n';
  if (!out) throw IoError("write failed: " + (path / "manifest.json").string());
}

/// Loads either form: a directory is read through its manifest, a regular
/// file must be SPCD. Manifest order defines sample order.
inline LabeledDataset load_dataset(const std::filesystem::path& path) {
  if (std::filesystem::is_regular_file(path)) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path.string());
    const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    return decode_packed_dataset(bytes, path.string());
  }
  const auto manifest_path = path / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open for reading: " + manifest_path.string());
  LabeledDataset ds;
  try {
    const auto j = nlohmann::json::parse(in);
    ds.class_names = j.at("class_names").get<std::vector<std::string>>();
    for (const auto& e : j.at("entries")) {
      const auto file = e.at("file").get<std::string>();
      const auto full = path / file;
      if (!std::filesystem::exists(full))
        throw FormatError(manifest_path.string() + ": manifest references missing file '" + file + "'");
      ds.clouds.push_back(read_xyz(full));
      ds.labels.push_back(e.at("label").get<std::size_t>());
      ds.ids.push_back(std::filesystem::path(file).stem().string());
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  try {
    ds.validate();
  } catch (const InvalidArgument& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  return ds;
}

}  // namespace smartpc
