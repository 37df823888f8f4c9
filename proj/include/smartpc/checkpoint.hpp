#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "smartpc/errors.hpp"
#include "smartpc/model.hpp"

// SPCK layout (all integers little-endian):
//   bytes 0..3   "SPCK"
//   u32          format version (1)
//   u64          header length in bytes
//   header       UTF-8 JSON: {"config": {...}, "dropout_counter": n,
//                "tensors": [{"name", "shape", "offset"}, ...]}
//   payload      float32 little-endian tensors; offsets are relative to the
//                start of the payload, in Model::visit order.
namespace smartpc {

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little, "SPCK I/O assumes a little-endian host");

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint64_t get_le(const std::string& in, std::size_t pos, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace detail

template <class T>
std::string encode_checkpoint(const Model<T>& model) {
  nlohmann::json tensors = nlohmann::json::array();
  std::string payload;
  model.visit([&](const std::string& name, const Tensor<T>& t, TensorRole) {
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", payload.size()}});
    for (T v : t.values()) {
      const float f = static_cast<float>(v);
      detail::put_u32(payload, std::bit_cast<std::uint32_t>(f));
    }
  });
  const nlohmann::json header{{"config", model.config}, {"dropout_counter", model.dropout_counter}, {"tensors", tensors}};
  const std::string text = header.dump();
  std::string out = "SPCK";
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, text.size());
  out += text;
  out += payload;
  return out;
}

namespace detail {

template <class T, class Fail>
void read_tensors(Model<T>& model, const nlohmann::json& dir, const std::string& bytes, std::size_t payload_start,
                  const Fail& fail) {
  std::size_t index = 0;
  std::size_t expected_end = 0;
  model.visit([&](const std::string& name, Tensor<T>& t, TensorRole) {
    if (index >= dir.size()) fail("tensor directory is missing '" + name + "'");
    const auto& entry = dir[index++];
    if (entry.at("name").get<std::string>() != name) fail("tensor directory order mismatch at '" + name + "'");
    if (entry.at("shape").get<Shape>() != t.shape())
      fail("tensor '" + name + "' has shape " + shape_string(entry.at("shape").get<Shape>()) + ", expected " +
           shape_string(t.shape()));
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const std::uint64_t end = offset + 4ull * t.size();
    if (payload_start + end > bytes.size()) fail("truncated payload in '" + name + "'");
    for (std::size_t i = 0; i < t.size(); ++i) {
      const auto bits = static_cast<std::uint32_t>(detail::get_le(bytes, payload_start + offset + 4 * i, 4));
      t[i] = static_cast<T>(std::bit_cast<float>(bits));
    }
    expected_end = std::max<std::size_t>(expected_end, end);
  });
  if (index != dir.size()) fail("tensor directory has unexpected extra entries");
  if (payload_start + expected_end != bytes.size()) fail("trailing bytes after payload");
}

}  // namespace detail

template <class T = float>
Model<T> decode_checkpoint(const std::string& bytes, const std::string& origin = "<memory>") {
  const auto fail = [&](const std::string& what) { throw FormatError(origin + ": " + what); };
  if (bytes.size() < 16) fail("truncated header");
  if (bytes.compare(0, 4, "SPCK") != 0) fail("bad magic (expected SPCK)");
  const auto version = static_cast<std::uint32_t>(detail::get_le(bytes, 4, 4));
  if (version != kCheckpointVersion) fail("unsupported format version " + std::to_string(version));
  const std::uint64_t header_len = detail::get_le(bytes, 8, 8);
  if (header_len > bytes.size() - 16) fail("truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("malformed header: ") + e.what());
  }
  const std::size_t payload_start = 16 + header_len;

  Model<T> model;
  try {
    model = model_init<T>(header.at("config").get<ModelConfig>());
    model.dropout_counter = header.at("dropout_counter").get<std::uint64_t>();
    detail::read_tensors(model, header.at("tensors"), bytes, payload_start, fail);
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("bad header: ") + e.what());
  } catch (const InvalidArgument& e) {
    fail(std::string("bad config: ") + e.what());
  }
  return model;
}

template <class T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path) {
  detail::write_file(path, encode_checkpoint(model));
}

template <class T = float>
Model<T> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<T>(detail::read_file(path), path.string());
}

}  // namespace smartpc
