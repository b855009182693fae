#pragma once

// Flat binary container for named real arrays.
//
//   magic    "CFLD"
//   version  u32 (currently 1)
//   count    u32
//   count x {
//     name_len u32, name bytes (UTF-8)
//     rank     u32
//     extents  rank x u64
//     values   product(extents) x f64
//   }
//
// All integers and floats are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include "corrfield/error.hpp"
#include "corrfield/tensor.hpp"

namespace corrfield {

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

namespace checkpoint {

inline constexpr char kMagic[4] = {'C', 'F', 'L', 'D'};
inline constexpr std::uint32_t kVersion = 1;

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
  static_assert(std::is_unsigned_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i)
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }

  std::string get_bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw DataError(std::string("checkpoint truncated while reading ") + what +
                      " at byte offset " + std::to_string(pos_));
    }
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode(const std::vector<NamedArray>& arrays) {
  std::string out(kMagic, kMagic + 4);
  detail::put_le<std::uint32_t>(out, kVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& a : arrays) {
    if (numel(a.shape) != a.values.size()) {
      throw ShapeError("array '" + a.name + "' has inconsistent shape " +
                       to_string(a.shape));
    }
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(a.name.size()));
    out += a.name;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(a.shape.size()));
    for (std::size_t e : a.shape) detail::put_le<std::uint64_t>(out, e);
    for (double v : a.values) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline std::vector<NamedArray> decode(const std::string& bytes) {
  detail::Reader in(bytes);
  if (in.get_bytes(4, "magic") != std::string(kMagic, 4)) {
    throw DataError("checkpoint has bad magic at byte offset 0");
  }
  const std::size_t version_at = in.offset();
  const auto version = in.get<std::uint32_t>("version");
  if (version != kVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version) +
                    " at byte offset " + std::to_string(version_at));
  }
  const auto count = in.get<std::uint32_t>("array count");
  std::vector<NamedArray> arrays;
  for (std::uint32_t k = 0; k < count; ++k) {
    NamedArray a;
    const auto name_len = in.get<std::uint32_t>("name length");
    a.name = in.get_bytes(name_len, "name");
    const auto rank = in.get<std::uint32_t>("rank");
    for (std::uint32_t d = 0; d < rank; ++d)
      a.shape.push_back(static_cast<std::size_t>(in.get<std::uint64_t>("extent")));
    const std::size_t n = numel(a.shape);
    a.values.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
      a.values.push_back(std::bit_cast<double>(in.get<std::uint64_t>("values")));
    arrays.push_back(std::move(a));
  }
  if (!in.at_end()) {
    throw DataError("trailing bytes in checkpoint at byte offset " +
                    std::to_string(in.offset()));
  }
  return arrays;
}

inline void save(const std::string& path, const std::vector<NamedArray>& arrays) {
  const std::string bytes = encode(arrays);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing checkpoint: " + path);
}

inline std::vector<NamedArray> load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode(bytes);
}

}  // namespace checkpoint
}  // namespace corrfield
