// Copyright 2026 The PSC Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Little-endian primitives shared by the on-disk formats.

#ifndef PSC_SRC_BINARY_IO_H_
#define PSC_SRC_BINARY_IO_H_

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <type_traits>

#include "psc/common.h"

namespace psc::io {

template <typename T>
std::array<char, sizeof(T)> to_le_bytes(T value) {
  static_assert(std::is_arithmetic_v<T>);
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes.begin(), bytes.end());
  }
  return bytes;
}

template <typename T>
T from_le_bytes(const char* data) {
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), data, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes.begin(), bytes.end());
  }
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path)
      : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw ValidationError("cannot open for writing: " + path.string());
  }

  void magic(std::string_view tag) { out_.write(tag.data(), tag.size()); }

  template <typename T>
  void put(T value) {
    const auto bytes = to_le_bytes(value);
    out_.write(bytes.data(), bytes.size());
  }

  template <typename T>
  void put_array(const T* data, std::size_t count) {
    if constexpr (std::endian::native == std::endian::little) {
      out_.write(reinterpret_cast<const char*>(data), count * sizeof(T));
    } else {
      for (std::size_t i = 0; i < count; ++i) put(data[i]);
    }
  }

  void close() {
    out_.flush();
    if (!out_) throw ComputeError("write failed: " + path_.string());
    out_.close();
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path)
      : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw ValidationError("cannot open: " + path.string());
  }

  void expect_magic(std::string_view tag) {
    std::string got(tag.size(), '\0');
    in_.read(got.data(), got.size());
    if (!in_ || got != tag) {
      throw ValidationError(path_.string() + ": bad magic, expected " +
                            std::string(tag));
    }
  }

  template <typename T>
  T get() {
    char buf[sizeof(T)];
    in_.read(buf, sizeof(T));
    if (!in_) throw ValidationError(path_.string() + ": truncated file");
    return from_le_bytes<T>(buf);
  }

  template <typename T>
  void get_array(T* data, std::size_t count) {
    if constexpr (std::endian::native == std::endian::little) {
      in_.read(reinterpret_cast<char*>(data), count * sizeof(T));
      if (!in_) throw ValidationError(path_.string() + ": truncated file");
    } else {
      for (std::size_t i = 0; i < count; ++i) data[i] = get<T>();
    }
  }

  void seek(std::uint64_t offset) {
    in_.clear();
    in_.seekg(static_cast<std::streamoff>(offset));
    if (!in_) throw ValidationError(path_.string() + ": seek past end");
  }

  // True when the stream sits exactly at end of file.
  bool at_end() {
    return in_.peek() == std::ifstream::traits_type::eof();
  }

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
};

}  // namespace psc::io

#endif  // PSC_SRC_BINARY_IO_H_
