// Copyright 2026 The SBEV Authors. All Rights Reserved.
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

// Tensor archive ("SBVK"), little-endian regardless of host:
//
//   char[4]  magic "SBVK"
//   u32      format version (1)
//   u32      tensor count
//   per tensor:
//     u32    name length in bytes, followed by the UTF-8 name
//     u32    rank, followed by rank x u64 extents
//     f64    payload, numel values in row-major order

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "sbev/error.hpp"
#include "sbev/tensor.hpp"

namespace sbev {

inline constexpr char kCheckpointMagic[4] = {'S', 'B', 'V', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

namespace le {

template <typename T>
void put(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::uint64_t bits = 0;
  if constexpr (sizeof(T) == 8) {
    bits = std::bit_cast<std::uint64_t>(value);
  } else {
    bits = static_cast<std::uint64_t>(value);
  }
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(char((bits >> (8 * i)) & 0xFF));
}

// Bounds-checked little-endian reader over an in-memory buffer.
class Reader {
 public:
  Reader(const std::string& buf, std::string what) : buf_(buf), what_(std::move(what)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      bits |= std::uint64_t(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    if constexpr (sizeof(T) == 8 && std::is_floating_point_v<T>) {
      return std::bit_cast<T>(bits);
    } else {
      return static_cast<T>(bits);
    }
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) {
    if (pos_ + n > buf_.size()) {
      throw DataError(what_ + ": truncated at byte " + std::to_string(pos_));
    }
  }
  const std::string& buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace le

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

// Writes to a sibling temporary and renames over the target.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp);
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw DataError("short write to " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw DataError("cannot rename " + tmp + " to " + path.string() + ": " + ec.message());
}

inline std::string encode_tensors(const NamedTensors& tensors) {
  std::string out(kCheckpointMagic, 4);
  le::put<std::uint32_t>(out, kCheckpointVersion);
  le::put<std::uint32_t>(out, std::uint32_t(tensors.size()));
  for (const auto& [name, t] : tensors) {
    le::put<std::uint32_t>(out, std::uint32_t(name.size()));
    out += name;
    le::put<std::uint32_t>(out, std::uint32_t(t.rank()));
    for (auto e : t.shape()) le::put<std::uint64_t>(out, e);
    for (double v : t.data()) le::put<double>(out, v);
  }
  return out;
}

inline NamedTensors decode_tensors(const std::string& bytes, const std::string& what) {
  le::Reader r(bytes, what);
  if (r.bytes(4) != std::string(kCheckpointMagic, 4)) throw DataError(what + ": bad magic, not an SBVK archive");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw DataError(what + ": unsupported format version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>();
  NamedTensors out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>();
    std::string name = r.bytes(len);
    const auto rank = r.get<std::uint32_t>();
    if (rank == 0 || rank > 8) throw DataError(what + ": tensor '" + name + "' has invalid rank");
    Shape shape(rank);
    std::uint64_t numel = 1;
    for (auto& e : shape) {
      const auto ext = r.get<std::uint64_t>();
      if (ext == 0 || ext > (std::uint64_t(1) << 32)) throw DataError(what + ": tensor '" + name + "' has invalid extent");
      e = std::size_t(ext);
      numel *= ext;
    }
    if (numel > bytes.size()) throw DataError(what + ": tensor '" + name + "' larger than file");
    std::vector<double> values(numel);
    for (auto& v : values) v = r.get<double>();
    out.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(values)));
  }
  if (!r.done()) throw DataError(what + ": trailing bytes after last tensor");
  return out;
}

inline void save_tensors(const std::filesystem::path& path, const NamedTensors& tensors) {
  write_file_atomic(path, encode_tensors(tensors));
}

inline NamedTensors load_tensors(const std::filesystem::path& path) {
  return decode_tensors(read_file_bytes(path), path.string());
}

}  // namespace sbev
