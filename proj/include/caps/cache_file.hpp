#pragma once

// Binary feature cache (.caps) plus its JSON sidecars.
//
// Layout, all integers little-endian:
//   offset  size  field
//   0       4     magic "CAPS"
//   4       2     version (1)
//   6       1     dtype (0 = float32)
//   7       8     rows
//   15      8     dim
//   23      1     normalized (0 or 1)
//   24      4*n   payload, row-major float32
//   24+4n   4     CRC-32 (IEEE 802.3) of the payload bytes

#include <zlib.h>

#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "caps/error.hpp"
#include "caps/feature_matrix.hpp"

namespace caps {

inline constexpr std::array<char, 4> kCacheMagic = {'C', 'A', 'P', 'S'};
inline constexpr std::uint16_t kCacheVersion = 1;
inline constexpr std::uint8_t kDtypeFloat32 = 0;
inline constexpr std::size_t kCacheHeaderSize = 24;

namespace detail {

inline void put_le(std::vector<unsigned char>& out, std::uint64_t value, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<unsigned char>(value >> (8 * i)));
}

inline std::uint64_t get_le(const unsigned char* in, int bytes) {
  std::uint64_t value = 0;
  for (int i = 0; i < bytes; ++i) value |= static_cast<std::uint64_t>(in[i]) << (8 * i);
  return value;
}

inline std::uint32_t crc32_ieee(const unsigned char* data, std::size_t size) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  while (size > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1U << 30));
    crc = ::crc32(crc, data, chunk);
    data += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
inline void write_atomically(const std::filesystem::path& path, const std::string_view bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::io_error, "cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw Error(Errc::io_error, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw Error(Errc::io_error, "cannot rename into " + path.string());
  }
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io_error, "cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(Errc::io_error, "read failed for " + path.string());
  return bytes;
}

}  // namespace detail

inline std::vector<unsigned char> encode_cache(const FeatureMatrix& m) {
  std::vector<unsigned char> out;
  out.reserve(kCacheHeaderSize + m.data().size() * 4 + 4);
  out.insert(out.end(), kCacheMagic.begin(), kCacheMagic.end());
  detail::put_le(out, kCacheVersion, 2);
  detail::put_le(out, kDtypeFloat32, 1);
  detail::put_le(out, m.rows(), 8);
  detail::put_le(out, m.dim(), 8);
  detail::put_le(out, m.normalized() ? 1 : 0, 1);
  for (const float x : m.data()) detail::put_le(out, std::bit_cast<std::uint32_t>(x), 4);
  const std::uint32_t crc =
      detail::crc32_ieee(out.data() + kCacheHeaderSize, out.size() - kCacheHeaderSize);
  detail::put_le(out, crc, 4);
  return out;
}

inline FeatureMatrix decode_cache(std::span<const unsigned char> bytes) {
  if (bytes.size() < kCacheHeaderSize + 4) throw Error(Errc::format_error, "file too short");
  if (!std::equal(kCacheMagic.begin(), kCacheMagic.end(), bytes.begin())) {
    throw Error(Errc::format_error, "bad magic");
  }
  const unsigned char* p = bytes.data();
  const auto version = detail::get_le(p + 4, 2);
  if (version != kCacheVersion) {
    throw Error(Errc::format_error, "unsupported version " + std::to_string(version));
  }
  const auto dtype = detail::get_le(p + 6, 1);
  if (dtype != kDtypeFloat32) {
    throw Error(Errc::format_error, "unsupported dtype " + std::to_string(dtype));
  }
  const std::uint64_t rows = detail::get_le(p + 7, 8);
  const std::uint64_t dim = detail::get_le(p + 15, 8);
  const auto normalized = detail::get_le(p + 23, 1);
  if (normalized > 1) throw Error(Errc::format_error, "bad normalized flag");
  if (dim != 0 && rows > std::numeric_limits<std::uint64_t>::max() / 4 / dim) {
    throw Error(Errc::format_error, "shape overflows");
  }
  const std::uint64_t count = rows * dim;
  if (bytes.size() != kCacheHeaderSize + count * 4 + 4) {
    throw Error(Errc::format_error, "size does not match shape " + std::to_string(rows) + " x " +
                                        std::to_string(dim));
  }
  const std::uint32_t stored = static_cast<std::uint32_t>(detail::get_le(p + bytes.size() - 4, 4));
  if (detail::crc32_ieee(p + kCacheHeaderSize, count * 4) != stored) {
    throw Error(Errc::format_error, "CRC mismatch");
  }
  std::vector<float> data(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    data[i] = std::bit_cast<float>(
        static_cast<std::uint32_t>(detail::get_le(p + kCacheHeaderSize + 4 * i, 4)));
  }
  try {
    return FeatureMatrix(rows, dim, std::move(data), normalized == 1);
  } catch (const Error& e) {
    throw Error(Errc::format_error, e.what());
  }
}

inline void save_cache(const FeatureMatrix& m, const std::filesystem::path& path) {
  const auto bytes = encode_cache(m);
  detail::write_atomically(
      path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

inline FeatureMatrix load_cache(const std::filesystem::path& path) {
  const std::string bytes = detail::read_file(path);
  return decode_cache(std::span<const unsigned char>(
      reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()));
}

/// Sidecar metadata stored next to a cache as `<stem>.meta.json`.
struct CacheMeta {
  std::string dataset;
  std::string backbone;
  std::vector<std::string> class_names;
  std::vector<std::size_t> sample_classes;
  // Free-form additions (method tag, support size, ...), emitted after the fixed keys.
  nlohmann::ordered_json extra = nlohmann::ordered_json::object();

  friend bool operator==(const CacheMeta&, const CacheMeta&) = default;
};

inline std::filesystem::path meta_path(const std::filesystem::path& cache_path) {
  std::filesystem::path p = cache_path;
  p.replace_extension(".meta.json");
  return p;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& j) {
  detail::write_atomically(path, j.dump(2) + "\n");
}

inline nlohmann::ordered_json read_json(const std::filesystem::path& path) {
  const std::string text = detail::read_file(path);
  try {
    return nlohmann::ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::format_error, path.string() + ": " + e.what());
  }
}

inline void save_meta(const CacheMeta& meta, const std::filesystem::path& cache_path) {
  nlohmann::ordered_json j;
  j["dataset"] = meta.dataset;
  j["backbone"] = meta.backbone;
  j["class_names"] = meta.class_names;
  j["sample_classes"] = meta.sample_classes;
  for (const auto& [key, value] : meta.extra.items()) j[key] = value;
  write_json(meta_path(cache_path), j);
}

inline CacheMeta load_meta(const std::filesystem::path& cache_path) {
  const auto j = read_json(meta_path(cache_path));
  CacheMeta meta;
  try {
    meta.dataset = j.at("dataset").get<std::string>();
    meta.backbone = j.at("backbone").get<std::string>();
    meta.class_names = j.at("class_names").get<std::vector<std::string>>();
    meta.sample_classes = j.at("sample_classes").get<std::vector<std::size_t>>();
    for (const auto& [key, value] : j.items()) {
      if (key != "dataset" && key != "backbone" && key != "class_names" &&
          key != "sample_classes") {
        meta.extra[key] = value;
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::format_error, meta_path(cache_path).string() + ": " + e.what());
  }
  return meta;
}

/// Class labels of a sample set, as read from and written to `labels.json`:
/// `{"n_classes": N, "class_names": [...], "labels": [...]}`.
struct LabelSet {
  std::size_t n_classes = 0;
  std::vector<std::string> class_names;
  std::vector<std::size_t> labels;

  friend bool operator==(const LabelSet&, const LabelSet&) = default;
};

inline void save_labels(const LabelSet& set, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["n_classes"] = set.n_classes;
  j["class_names"] = set.class_names;
  j["labels"] = set.labels;
  write_json(path, j);
}

inline LabelSet load_labels(const std::filesystem::path& path) {
  const auto j = read_json(path);
  LabelSet set;
  try {
    set.labels = j.at("labels").get<std::vector<std::size_t>>();
    if (j.contains("class_names")) {
      set.class_names = j.at("class_names").get<std::vector<std::string>>();
    }
    set.n_classes = j.contains("n_classes") ? j.at("n_classes").get<std::size_t>()
                                            : set.class_names.size();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::format_error, path.string() + ": " + e.what());
  }
  if (!set.class_names.empty() && set.class_names.size() != set.n_classes) {
    throw Error(Errc::format_error, path.string() + ": class_names length != n_classes");
  }
  for (const std::size_t label : set.labels) {
    if (label >= set.n_classes) {
      throw Error(Errc::out_of_range_class, path.string() + ": label " + std::to_string(label));
    }
  }
  return set;
}

}  // namespace caps
