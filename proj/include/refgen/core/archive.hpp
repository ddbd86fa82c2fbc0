#pragma once

// Binary tensor container.
//
// Single tensor ("RGT1"):  magic[4] | dtype u8 (1 = f32, 2 = f64) | rank u32 |
//                           dims i32[rank] | row-major payload, little-endian.
// Archive ("RGAR"):        magic[4] | version u32 | count u32 | entries...
//   entry: kind u8 (0 = tensor, 1 = string) | name (u32 len + bytes) |
//          tensor record as above, or string (u64 len + bytes).

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "refgen/core/tensor.hpp"

namespace refgen {

namespace io_detail {

template <class V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <class V>
V get(std::istream& is, const std::string& ctx) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!is) throw IoError("truncated binary data in " + ctx);
  return v;
}

inline void put_str(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_str(std::istream& is, const std::string& ctx) {
  auto n = get<std::uint32_t>(is, ctx);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw IoError("truncated string in " + ctx);
  return s;
}

}  // namespace io_detail

template <class T>
constexpr std::uint8_t dtype_code() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? 1 : 2;
}

template <class T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  os.write("RGT1", 4);
  io_detail::put<std::uint8_t>(os, dtype_code<T>());
  io_detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.size()));
  for (int d : t.shape) io_detail::put<std::int32_t>(os, d);
  os.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(T)));
}

template <class T>
Tensor<T> read_tensor(std::istream& is, const std::string& ctx = "tensor stream") {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "RGT1", 4) != 0) throw IoError("bad tensor magic in " + ctx);
  auto code = io_detail::get<std::uint8_t>(is, ctx);
  auto rank = io_detail::get<std::uint32_t>(is, ctx);
  if (rank > 8) throw IoError("implausible tensor rank in " + ctx);
  Shape shape(rank);
  for (auto& d : shape) d = io_detail::get<std::int32_t>(is, ctx);
  Tensor<T> out(shape);
  if (code == dtype_code<T>()) {
    is.read(reinterpret_cast<char*>(out.ptr()), static_cast<std::streamsize>(out.size() * sizeof(T)));
  } else if (code == 1) {
    std::vector<float> tmp(out.size());
    is.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(tmp.size() * sizeof(float)));
    std::copy(tmp.begin(), tmp.end(), out.data.begin());
  } else if (code == 2) {
    std::vector<double> tmp(out.size());
    is.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(tmp.size() * sizeof(double)));
    std::transform(tmp.begin(), tmp.end(), out.data.begin(), [](double v) { return static_cast<T>(v); });
  } else {
    throw IoError("unknown dtype code in " + ctx);
  }
  if (!is) throw IoError("truncated tensor payload in " + ctx);
  return out;
}

/// Writes to a sibling temp file and renames it into place.
template <class Fn>
void write_atomically(const std::filesystem::path& path, Fn&& writer) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
    writer(os);
    os.flush();
    if (!os) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

template <class T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  write_atomically(path, [&](std::ostream& os) { write_tensor(os, t); });
}

template <class T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_tensor<T>(is, path.string());
}

/// Name-keyed bag of float tensors and strings; the checkpoint container.
struct Archive {
  static constexpr std::uint32_t kVersion = 1;
  std::map<std::string, Tensor<float>> tensors;
  std::map<std::string, std::string> strings;

  const Tensor<float>& tensor(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw IoError("archive has no tensor '" + name + "'");
    return it->second;
  }
  const std::string& string(const std::string& name) const {
    auto it = strings.find(name);
    if (it == strings.end()) throw IoError("archive has no entry '" + name + "'");
    return it->second;
  }
  bool has_tensor(const std::string& name) const { return tensors.count(name) > 0; }

  void save(const std::filesystem::path& path) const {
    write_atomically(path, [&](std::ostream& os) {
      os.write("RGAR", 4);
      io_detail::put<std::uint32_t>(os, kVersion);
      io_detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size() + strings.size()));
      for (const auto& [name, t] : tensors) {
        io_detail::put<std::uint8_t>(os, 0);
        io_detail::put_str(os, name);
        write_tensor(os, t);
      }
      for (const auto& [name, s] : strings) {
        io_detail::put<std::uint8_t>(os, 1);
        io_detail::put_str(os, name);
        io_detail::put<std::uint64_t>(os, s.size());
        os.write(s.data(), static_cast<std::streamsize>(s.size()));
      }
    });
  }

  static Archive load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint " + path.string());
    const std::string ctx = path.string();
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "RGAR", 4) != 0) throw IoError("not an archive: " + ctx);
    auto version = io_detail::get<std::uint32_t>(is, ctx);
    if (version != kVersion) throw IoError("unsupported archive version " + std::to_string(version) + " in " + ctx);
    auto count = io_detail::get<std::uint32_t>(is, ctx);
    Archive a;
    for (std::uint32_t i = 0; i < count; ++i) {
      auto kind = io_detail::get<std::uint8_t>(is, ctx);
      auto name = io_detail::get_str(is, ctx);
      if (kind == 0) {
        a.tensors.emplace(name, read_tensor<float>(is, ctx));
      } else if (kind == 1) {
        auto n = io_detail::get<std::uint64_t>(is, ctx);
        std::string s(n, '\0');
        is.read(s.data(), static_cast<std::streamsize>(n));
        if (!is) throw IoError("truncated string entry in " + ctx);
        a.strings.emplace(name, std::move(s));
      } else {
        throw IoError("unknown archive entry kind in " + ctx);
      }
    }
    return a;
  }
};

}  // namespace refgen
