#include "f3r/binary_io.hpp"

#include <iterator>

namespace f3r::io {

BinaryReader::BinaryReader(const std::string& path) : path_(path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open for reading: " + path);
  data_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorKind::Io, "read failed: " + path);
}

std::string_view BinaryReader::peek(std::size_t n) const {
  if (remaining() < n) return {};
  return {data_.data() + pos_, n};
}

void BinaryReader::expect_magic(std::string_view m) {
  if (peek(m.size()) != m) throw Error(ErrorKind::Format, "bad magic in " + path_);
  pos_ += m.size();
}

void BinaryReader::bytes(void* dst, std::size_t n) {
  if (remaining() < n) throw Error(ErrorKind::Format, "truncated file: " + path_);
  std::memcpy(dst, data_.data() + pos_, n);
  pos_ += n;
}

}  // namespace f3r::io
