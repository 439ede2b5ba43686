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

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace voxface {

/// Base error for everything this library throws.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform to an operation's rule.
struct ShapeError : Error {
  using Error::Error;
};

/// A non-finite value was produced or consumed where finiteness is required.
struct NumericError : Error {
  using Error::Error;
};

/// Malformed or inconsistent data in a file or record.
struct DataError : Error {
  using Error::Error;
};

/// Invalid command-line usage.
struct UsageError : Error {
  using Error::Error;
};

namespace detail {

template <typename T>
void format_into(std::ostringstream& os, const T& v) {
  os << v;
}

inline void format_into(std::ostringstream& os, const std::vector<std::size_t>& shape) {
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  if (shape.empty()) os << "scalar";
}

}  // namespace detail

/// Minimal message builder: cat("conv1d: kernel ", k, " exceeds length ", n).
template <typename... Args>
std::string cat(const Args&... args) {
  std::ostringstream os;
  os.precision(17);
  (detail::format_into(os, args), ...);
  return os.str();
}

using Rng = std::mt19937_64;

inline bool all_finite(const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

/// FNV-1a over bytes; used for config hashing.
inline std::uint64_t fnv1a(const std::string& s, std::uint64_t seed = 14695981039346656037ull) {
  std::uint64_t h = seed;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace voxface
