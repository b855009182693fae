#pragma once

// Binary PGM (P5) and PPM (P6) with maxval 255.

#include <cctype>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "corrfield/error.hpp"

namespace corrfield {

struct Raster8 {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;  // 1 for P5, 3 for P6
  std::vector<std::uint8_t> data;

  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c = 0) const {
    return data[(y * width + x) * channels + c];
  }
};

namespace pnm {

inline std::string encode(const Raster8& r) {
  if (r.channels != 1 && r.channels != 3) {
    throw std::invalid_argument("pnm rasters have 1 or 3 channels");
  }
  if (r.data.size() != r.height * r.width * r.channels) {
    throw std::invalid_argument("pnm raster payload size mismatch");
  }
  std::string out = (r.channels == 1 ? "P5\n" : "P6\n") + std::to_string(r.width) + " " +
                    std::to_string(r.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(r.data.data()), r.data.size());
  return out;
}

namespace detail {

class HeaderReader {
 public:
  explicit HeaderReader(const std::string& b) : b_(b) {}

  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      const unsigned char c = static_cast<unsigned char>(b_[pos_]);
      if (c == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else if (std::isspace(c)) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t number(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    std::size_t v = 0;
    while (pos_ < b_.size() && std::isdigit(static_cast<unsigned char>(b_[pos_]))) {
      v = v * 10 + static_cast<std::size_t>(b_[pos_] - '0');
      if (v > (1u << 24)) fail(std::string(what) + " too large", start);
      ++pos_;
    }
    if (pos_ == start) fail(std::string("expected ") + what, start);
    return v;
  }

  // Exactly one whitespace byte separates maxval from the payload.
  void single_space() {
    if (pos_ >= b_.size() || !std::isspace(static_cast<unsigned char>(b_[pos_]))) {
      fail("expected whitespace after maxval", pos_);
    }
    ++pos_;
  }

  [[noreturn]] static void fail(const std::string& msg, std::size_t offset) {
    throw DataError("pnm: " + msg + " at byte offset " + std::to_string(offset));
  }

  std::size_t pos_ = 0;

 private:
  const std::string& b_;
};

}  // namespace detail

inline Raster8 decode(const std::string& bytes) {
  detail::HeaderReader in(bytes);
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    detail::HeaderReader::fail("bad magic, expected P5 or P6", 0);
  }
  Raster8 r;
  r.channels = bytes[1] == '5' ? 1 : 3;
  in.pos_ = 2;
  in.skip_space_and_comments();
  const std::size_t width_at = in.pos_;
  r.width = in.number("width");
  r.height = in.number("height");
  if (r.width == 0 || r.height == 0) detail::HeaderReader::fail("zero image extent", width_at);
  in.skip_space_and_comments();
  const std::size_t maxval_at = in.pos_;
  const std::size_t maxval = in.number("maxval");
  if (maxval != 255) {
    detail::HeaderReader::fail("unsupported maxval " + std::to_string(maxval), maxval_at);
  }
  in.single_space();
  const std::size_t need = r.width * r.height * r.channels;
  const std::size_t have = bytes.size() - in.pos_;
  if (have < need) {
    detail::HeaderReader::fail("truncated payload (" + std::to_string(have) + " of " +
                                   std::to_string(need) + " bytes)",
                               bytes.size());
  }
  if (have > need) detail::HeaderReader::fail("trailing bytes after payload", in.pos_ + need);
  r.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(in.pos_), bytes.end());
  return r;
}

inline void save(const std::string& path, const Raster8& r) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  const auto bytes = encode(r);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("failed writing " + path);
}

inline Raster8 load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  try {
    return decode(ss.str());
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

}  // namespace pnm

}  // namespace corrfield
