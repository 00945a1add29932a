#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "f3r/error.hpp"

namespace f3r::io {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path) : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw Error(ErrorKind::Io, "cannot open for writing: " + path);
  }

  void magic(std::string_view m) { bytes(m.data(), m.size()); }

  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T value) {
    bytes(&value, sizeof(T));
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  void put_array(std::span<const T> values) {
    bytes(values.data(), values.size_bytes());
  }

  void bytes(const void* data, std::size_t n) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out_) throw Error(ErrorKind::Io, "write failed: " + path_);
  }

  void close() {
    out_.close();
    if (!out_) throw Error(ErrorKind::Io, "close failed: " + path_);
  }

 private:
  std::string path_;
  std::ofstream out_;
};

/// Reads a whole file up front; every read past the end is a FormatError.
class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path);

  bool at_end() const { return pos_ == data_.size(); }
  std::size_t remaining() const { return data_.size() - pos_; }
  std::string_view peek(std::size_t n) const;

  void expect_magic(std::string_view m);

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get() {
    T value;
    bytes(&value, sizeof(T));
    return value;
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  void get_array(std::span<T> out) {
    bytes(out.data(), out.size_bytes());
  }

  void bytes(void* dst, std::size_t n);

 private:
  std::string path_;
  std::vector<char> data_;
  std::size_t pos_ = 0;
};

}  // namespace f3r::io
