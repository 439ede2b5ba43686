// Copyright 2026 Voxface Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.

#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include "voxface/tensor.hpp"

namespace voxface {

/// Little-endian binary writer. All containers (assets, checkpoints, samples)
/// are built from these primitives plus named tensor records:
///   name: u64 length + UTF-8 bytes
///   rank: u64, dims: u64 each, values: f64 each.
class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& os) : os_(os) {}

  void u32(std::uint32_t v) { put_le(v); }
  void u64(std::uint64_t v) { put_le(v); }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_le(bits);
  }
  void str(const std::string& s) {
    u64(s.size());
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void magic(const char m[5]) { os_.write(m, 4); }

  void tensor(const std::string& name, const Tensor& t) {
    str(name);
    u64(t.rank());
    for (std::size_t d : t.shape()) u64(d);
    for (double v : t.values()) f64(v);
  }

 private:
  template <typename T>
  void put_le(T v) {
    unsigned char buf[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
    os_.write(reinterpret_cast<const char*>(buf), sizeof(T));
  }
  std::ostream& os_;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::istream& is, std::string context) : is_(is), ctx_(std::move(context)) {}

  std::uint32_t u32() { return get_le<std::uint32_t>(); }
  std::uint64_t u64() { return get_le<std::uint64_t>(); }
  double f64() {
    std::uint64_t bits = get_le<std::uint64_t>();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str(std::size_t max_len = 1 << 20) {
    const std::uint64_t n = u64();
    if (n > max_len) throw DataError(cat(ctx_, ": string length ", n, " exceeds limit"));
    std::string s(n, '\0');
    is_.read(s.data(), static_cast<std::streamsize>(n));
    check();
    return s;
  }
  void expect_magic(const char m[5]) {
    char buf[4];
    is_.read(buf, 4);
    check();
    if (std::memcmp(buf, m, 4) != 0)
      throw DataError(cat(ctx_, ": bad magic, expected '", m, "'"));
  }

  std::pair<std::string, Tensor> tensor(std::size_t max_elems = std::size_t(1) << 30) {
    std::string name = str();
    const std::uint64_t rank = u64();
    if (rank > 8) throw DataError(cat(ctx_, ": tensor '", name, "' has implausible rank ", rank));
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = u64();
      n *= d;
    }
    if (n > max_elems) throw DataError(cat(ctx_, ": tensor '", name, "' too large"));
    std::vector<double> values(n);
    for (double& v : values) v = f64();
    if (!all_finite(values))
      throw DataError(cat(ctx_, ": tensor '", name, "' contains non-finite values"));
    return {std::move(name), Tensor::from(std::move(shape), std::move(values))};
  }

  void check() {
    if (!is_) throw DataError(cat(ctx_, ": truncated or unreadable file"));
  }

 private:
  template <typename T>
  T get_le() {
    unsigned char buf[sizeof(T)];
    is_.read(reinterpret_cast<char*>(buf), sizeof(T));
    check();
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
    return v;
  }
  std::istream& is_;
  std::string ctx_;
};

/// Writes through a temp file and renames into place so failed runs never
/// leave partial output behind.
inline void atomic_write_file(const std::filesystem::path& path,
                              const std::function<void(std::ostream&)>& fill) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError(cat("cannot open '", tmp.string(), "' for writing"));
    fill(os);
    os.flush();
    if (!os) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw DataError(cat("failed while writing '", tmp.string(), "'"));
    }
  }
  std::filesystem::rename(tmp, path);
}

inline std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError(cat("cannot open '", path.string(), "'"));
  return is;
}

/// Ordered name -> tensor map used by the checkpoint and sample containers.
using TensorDict = std::map<std::string, Tensor>;

inline void write_tensor_dict(BinaryWriter& w, const TensorDict& dict) {
  w.u64(dict.size());
  for (const auto& [name, t] : dict) w.tensor(name, t);
}

inline TensorDict read_tensor_dict(BinaryReader& r) {
  TensorDict dict;
  const std::uint64_t n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    auto [name, t] = r.tensor();
    dict.emplace(std::move(name), std::move(t));
  }
  return dict;
}

}  // namespace voxface
