#pragma once

// Little-endian primitive codecs shared by the binary file formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "layerlens/error.hpp"

namespace layerlens::detail {

template <typename UInt>
void put_le(std::string& buf, UInt value) {
  for (std::size_t i = 0; i < sizeof(UInt); ++i) {
    buf.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
  }
}

inline void put_f32(std::string& buf, float v) {
  put_le(buf, std::bit_cast<std::uint32_t>(v));
}
inline void put_f64(std::string& buf, double v) {
  put_le(buf, std::bit_cast<std::uint64_t>(v));
}

// Cursor over an in-memory byte buffer; every read is bounds checked.
class Reader {
 public:
  Reader(const std::string& data, std::string context)
      : data_(data), context_(std::move(context)) {}

  template <typename UInt>
  UInt get_le() {
    need(sizeof(UInt));
    UInt v = 0;
    for (std::size_t i = 0; i < sizeof(UInt); ++i) {
      v |= static_cast<UInt>(static_cast<unsigned char>(data_[pos_ + i]))
           << (8 * i);
    }
    pos_ += sizeof(UInt);
    return v;
  }
  float get_f32() { return std::bit_cast<float>(get_le<std::uint32_t>()); }
  double get_f64() { return std::bit_cast<double>(get_le<std::uint64_t>()); }

  std::string get_bytes(std::size_t n) {
    need(n);
    std::string out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) {
      throw Error(ErrorKind::kFormat, context_ + ": truncated file");
    }
  }

  const std::string& data_;
  std::string context_;
  std::size_t pos_ = 0;
};

std::string read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::string& bytes);

}  // namespace layerlens::detail
