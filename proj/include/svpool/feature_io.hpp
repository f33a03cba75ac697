// Copyright (c) 2026 The svpool Authors
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
// See the License for the specific language governing permissions and
// limitations under the License.

// Binary layer-stack features ("LSF1") and parameter checkpoints ("UPSV").
//
// Both formats are little-endian regardless of the host:
//   LSF1: "LSF1" u32 C u32 L u32 T, then f32[C*L*T] at (c*L + l)*T + t
//   UPSV: "UPSV" u32 version, then per record
//         u32 name_len, name bytes, u32 rank, u32 extents[rank], f32[numel]

#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "svpool/autodiff.hpp"
#include "svpool/error.hpp"
#include "svpool/tensor.hpp"

namespace svpool {

enum class FormatErrorKind { kBadMagic, kTruncated, kNonFinite, kTrailingData, kIo, kMismatch };

inline const char* ToString(FormatErrorKind k) {
  switch (k) {
    case FormatErrorKind::kBadMagic: return "bad magic";
    case FormatErrorKind::kTruncated: return "truncated";
    case FormatErrorKind::kNonFinite: return "non-finite value";
    case FormatErrorKind::kTrailingData: return "trailing data";
    case FormatErrorKind::kIo: return "i/o error";
    case FormatErrorKind::kMismatch: return "mismatch";
  }
  return "?";
}

class FormatError : public DataError {
 public:
  FormatError(FormatErrorKind kind, const std::string& what)
      : DataError(std::string(ToString(kind)) + ": " + what), format_kind_(kind) {}
  FormatErrorKind format_kind() const noexcept { return format_kind_; }

 private:
  FormatErrorKind format_kind_;
};

namespace detail {

inline void PutU32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff),
                              static_cast<char>((v >> 24) & 0xff)};
  os.write(b.data(), 4);
}

inline void PutF32Array(std::ostream& os, const float* v, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(v), static_cast<std::streamsize>(n * 4));
  } else {
    for (std::size_t i = 0; i < n; ++i) PutU32(os, std::bit_cast<std::uint32_t>(v[i]));
  }
}

// Reads exactly n bytes or throws kTruncated.
inline void ReadExact(std::istream& is, char* dst, std::size_t n, const std::string& what) {
  is.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) {
    throw FormatError(FormatErrorKind::kTruncated,
                      what + ": expected " + std::to_string(n) + " bytes, got " +
                          std::to_string(is.gcount()));
  }
}

inline std::uint32_t GetU32(std::istream& is, const std::string& what) {
  unsigned char b[4];
  ReadExact(is, reinterpret_cast<char*>(b), 4, what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void GetF32Array(std::istream& is, float* dst, std::size_t n, const std::string& what) {
  ReadExact(is, reinterpret_cast<char*>(dst), n * 4, what);
  if constexpr (std::endian::native != std::endian::little) {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t u;
      std::memcpy(&u, dst + i, 4);
      u = (u >> 24) | ((u >> 8) & 0xff00u) | ((u << 8) & 0xff0000u) | (u << 24);
      dst[i] = std::bit_cast<float>(u);
    }
  }
}

inline void ExpectEof(std::istream& is, const std::string& what) {
  if (is.peek() != std::char_traits<char>::eof()) {
    throw FormatError(FormatErrorKind::kTrailingData, what + ": unexpected bytes after payload");
  }
}

inline std::ofstream OpenOut(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError(FormatErrorKind::kIo, "cannot open '" + path.string() + "' for writing");
  return os;
}

inline std::ifstream OpenIn(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(FormatErrorKind::kIo, "cannot open '" + path.string() + "'");
  return is;
}

inline std::uint32_t CheckedU32(std::size_t v, const char* what) {
  if (v > 0xffffffffu) {
    throw FormatError(FormatErrorKind::kMismatch, std::string(what) + " exceeds 32 bits");
  }
  return static_cast<std::uint32_t>(v);
}

}  // namespace detail

inline constexpr char kFeatureMagic[4] = {'L', 'S', 'F', '1'};
inline constexpr std::size_t kFeatureHeaderBytes = 16;

// x: C x L x T.
inline void write_feature(std::ostream& os, const Tensor<float>& x) {
  SVPOOL_CHECK_SHAPE(x.rank() == 3, "feature stack must be C x L x T, got ", x.shape().str());
  for (float v : x.values()) {
    if (!std::isfinite(v)) throw FormatError(FormatErrorKind::kNonFinite, "refusing to write non-finite feature");
  }
  os.write(kFeatureMagic, 4);
  for (std::size_t a = 0; a < 3; ++a) detail::PutU32(os, detail::CheckedU32(x.dim(a), "extent"));
  detail::PutF32Array(os, x.data(), x.numel());
  if (!os) throw FormatError(FormatErrorKind::kIo, "feature write failed");
}

inline Tensor<float> read_feature(std::istream& is, const std::string& name = "feature") {
  char magic[4];
  detail::ReadExact(is, magic, 4, name + " header");
  if (std::memcmp(magic, kFeatureMagic, 4) != 0) {
    throw FormatError(FormatErrorKind::kBadMagic, name + ": not an LSF1 feature file");
  }
  const std::uint32_t c = detail::GetU32(is, name + " header");
  const std::uint32_t l = detail::GetU32(is, name + " header");
  const std::uint32_t t = detail::GetU32(is, name + " header");
  if (c == 0 || l == 0 || t == 0) {
    throw FormatError(FormatErrorKind::kMismatch, name + ": zero extent in header");
  }
  Tensor<float> x(Shape{c, l, t});
  detail::GetF32Array(is, x.data(), x.numel(), name + " payload");
  detail::ExpectEof(is, name);
  for (float v : x.values()) {
    if (!std::isfinite(v)) throw FormatError(FormatErrorKind::kNonFinite, name + ": non-finite value");
  }
  return x;
}

inline void write_feature(const std::filesystem::path& path, const Tensor<float>& x) {
  auto os = detail::OpenOut(path);
  write_feature(os, x);
}

inline Tensor<float> read_feature(const std::filesystem::path& path) {
  auto is = detail::OpenIn(path);
  return read_feature(is, path.string());
}

// ---------------------------------------------------------------------------
// Checkpoints.

inline constexpr char kCheckpointMagic[4] = {'U', 'P', 'S', 'V'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor<float>>>;

inline void write_checkpoint(std::ostream& os, const NamedTensors& records) {
  os.write(kCheckpointMagic, 4);
  detail::PutU32(os, kCheckpointVersion);
  for (const auto& [name, t] : records) {
    detail::PutU32(os, detail::CheckedU32(name.size(), "name length"));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::PutU32(os, detail::CheckedU32(t.rank(), "rank"));
    for (std::size_t a = 0; a < t.rank(); ++a) {
      detail::PutU32(os, detail::CheckedU32(t.dim(a), "extent"));
    }
    detail::PutF32Array(os, t.data(), t.numel());
  }
  if (!os) throw FormatError(FormatErrorKind::kIo, "checkpoint write failed");
}

inline NamedTensors read_checkpoint(std::istream& is, const std::string& name = "checkpoint") {
  char magic[4];
  detail::ReadExact(is, magic, 4, name + " header");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw FormatError(FormatErrorKind::kBadMagic, name + ": not a UPSV checkpoint");
  }
  const std::uint32_t version = detail::GetU32(is, name + " header");
  if (version != kCheckpointVersion) {
    throw FormatError(FormatErrorKind::kMismatch,
                      name + ": unsupported version " + std::to_string(version));
  }
  NamedTensors out;
  while (is.peek() != std::char_traits<char>::eof()) {
    const std::uint32_t len = detail::GetU32(is, name + " record");
    std::string key(len, '\0');
    detail::ReadExact(is, key.data(), len, name + " record name");
    const std::uint32_t rank = detail::GetU32(is, name + " record '" + key + "'");
    if (rank == 0 || rank > 8) {
      throw FormatError(FormatErrorKind::kMismatch, name + ": bad rank for '" + key + "'");
    }
    std::vector<std::size_t> dims(rank);
    for (auto& d : dims) {
      d = detail::GetU32(is, name + " record '" + key + "'");
      if (d == 0) throw FormatError(FormatErrorKind::kMismatch, name + ": zero extent for '" + key + "'");
    }
    Tensor<float> t{Shape(dims)};
    detail::GetF32Array(is, t.data(), t.numel(), name + " record '" + key + "'");
    out.emplace_back(std::move(key), std::move(t));
  }
  return out;
}

inline void write_checkpoint(const std::filesystem::path& path, const NamedTensors& records) {
  // Write to a sibling and rename so an interrupted save never clobbers the
  // previous checkpoint.
  auto tmp = path;
  tmp += ".tmp";
  {
    auto os = detail::OpenOut(tmp);
    write_checkpoint(os, records);
    os.flush();
    if (!os) throw FormatError(FormatErrorKind::kIo, "checkpoint write failed");
  }
  std::filesystem::rename(tmp, path);
}

inline NamedTensors read_checkpoint(const std::filesystem::path& path) {
  auto is = detail::OpenIn(path);
  return read_checkpoint(is, path.string());
}

// Every entry (learnable or buffer) of the stores, converted to f32.
template <typename T>
NamedTensors CollectTensors(std::initializer_list<const ParamStore<T>*> stores) {
  NamedTensors out;
  for (const auto* s : stores) {
    for (const auto& e : s->entries()) out.emplace_back(e.name, e.var.value().template cast<float>());
  }
  return out;
}

// Loads records into the stores by name. Every store entry must be present
// with a matching shape; unknown records are rejected.
template <typename T>
void RestoreTensors(const NamedTensors& records, std::initializer_list<ParamStore<T>*> stores) {
  std::size_t matched = 0;
  std::unordered_set<std::string> seen;
  for (const auto& [name, t] : records) {
    if (!seen.insert(name).second) {
      throw FormatError(FormatErrorKind::kMismatch, "checkpoint repeats tensor '" + name + "'");
    }
    ParamStore<T>* owner = nullptr;
    for (auto* s : stores) {
      if (s->contains(name)) owner = s;
    }
    if (!owner) throw FormatError(FormatErrorKind::kMismatch, "checkpoint has unknown tensor '" + name + "'");
    auto& var = owner->get(name);
    if (!(var.shape() == t.shape())) {
      throw FormatError(FormatErrorKind::kMismatch, "checkpoint tensor '" + name + "' has shape " +
                                                        t.shape().str() + ", model expects " +
                                                        var.shape().str());
    }
    var.mutable_value() = t.template cast<T>();
    ++matched;
  }
  std::size_t expected = 0;
  for (auto* s : stores) expected += s->entries().size();
  if (matched != expected) {
    throw FormatError(FormatErrorKind::kMismatch,
                      "checkpoint provides " + std::to_string(matched) + " of " +
                          std::to_string(expected) + " tensors");
  }
}

}  // namespace svpool
