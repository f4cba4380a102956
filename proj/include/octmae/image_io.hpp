#pragma once

#include "octmae/camera.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cctype>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace octmae::io {

namespace detail {

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

// Netpbm-style header: whitespace separated tokens, '#' comments, a single
// whitespace byte before the binary payload.
class HeaderReader {
 public:
  HeaderReader(const std::vector<char>& buf, std::string what) : buf_(buf), what_(std::move(what)) {}

  std::string token() {
    skip_space();
    std::string t;
    while (pos_ < buf_.size() && !std::isspace(static_cast<unsigned char>(buf_[pos_]))) t += buf_[pos_++];
    if (t.empty()) throw IoError(what_ + ": truncated header");
    return t;
  }

  long integer() {
    const auto t = token();
    try {
      return std::stol(t);
    } catch (...) {
      throw IoError(what_ + ": bad header field '" + t + "'");
    }
  }

  double real() {
    const auto t = token();
    try {
      return std::stod(t);
    } catch (...) {
      throw IoError(what_ + ": bad header field '" + t + "'");
    }
  }

  std::size_t payload_offset() {
    if (pos_ >= buf_.size()) throw IoError(what_ + ": missing payload");
    return pos_ + 1;
  }

 private:
  void skip_space() {
    while (pos_ < buf_.size()) {
      if (buf_[pos_] == '#') {
        while (pos_ < buf_.size() && buf_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(buf_[pos_]))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  const std::vector<char>& buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::uint32_t byteswap32(std::uint32_t x) {
  return (x >> 24) | ((x >> 8) & 0xff00u) | ((x << 8) & 0xff0000u) | (x << 24);
}

}  // namespace detail

/// Depth raster, meters. Invalid depth (NaN) is stored as 0.
/// Grayscale PFM, little-endian, rows stored bottom to top.
inline void write_pfm(const std::filesystem::path& path, int width, int height,
                      const std::vector<double>& depth) {
  std::ostringstream os;
  os << "Pf\n" << width << ' ' << height << "\n-1.0\n";
  std::string bytes = os.str();
  const std::size_t header = bytes.size();
  bytes.resize(header + std::size_t(width) * height * 4);
  char* dst = bytes.data() + header;
  for (int v = height - 1; v >= 0; --v) {
    for (int u = 0; u < width; ++u) {
      const double z = depth[std::size_t(v) * width + u];
      float f = valid_depth(z) ? float(z) : 0.0f;
      std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
      if constexpr (std::endian::native == std::endian::big) bits = detail::byteswap32(bits);
      std::memcpy(dst, &bits, 4);
      dst += 4;
    }
  }
  detail::write_file(path, bytes);
}

inline std::vector<double> read_pfm(const std::filesystem::path& path, int* width, int* height) {
  const auto buf = detail::read_file(path);
  detail::HeaderReader hdr(buf, path.string());
  if (hdr.token() != "Pf") throw IoError(path.string() + ": not a grayscale PFM");
  const long w = hdr.integer();
  const long h = hdr.integer();
  const double scale = hdr.real();
  if (w <= 0 || h <= 0 || scale == 0.0) throw IoError(path.string() + ": bad PFM header");
  const bool little = scale < 0.0;
  const auto off = hdr.payload_offset();
  if (buf.size() < off + std::size_t(w) * h * 4) throw IoError(path.string() + ": truncated PFM payload");
  std::vector<double> depth(std::size_t(w) * h);
  const char* src = buf.data() + off;
  const bool swap = little != (std::endian::native == std::endian::little);
  for (long v = h - 1; v >= 0; --v) {
    for (long u = 0; u < w; ++u) {
      std::uint32_t bits;
      std::memcpy(&bits, src, 4);
      src += 4;
      if (swap) bits = detail::byteswap32(bits);
      const float f = std::bit_cast<float>(bits);
      depth[std::size_t(v) * w + u] = (std::isfinite(f) && f > 0.0f) ? double(f) : kNaN;
    }
  }
  *width = int(w);
  *height = int(h);
  return depth;
}

/// Binary PGM, 255 = foreground.
inline void write_pgm(const std::filesystem::path& path, int width, int height,
                      const std::vector<std::uint8_t>& mask) {
  std::ostringstream os;
  os << "P5\n" << width << ' ' << height << "\n255\n";
  std::string bytes = os.str();
  for (auto m : mask) bytes.push_back(m ? char(255) : char(0));
  detail::write_file(path, bytes);
}

inline std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, int* width, int* height) {
  const auto buf = detail::read_file(path);
  detail::HeaderReader hdr(buf, path.string());
  if (hdr.token() != "P5") throw IoError(path.string() + ": not a binary PGM");
  const long w = hdr.integer();
  const long h = hdr.integer();
  const long maxval = hdr.integer();
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) throw IoError(path.string() + ": unsupported PGM header");
  const auto off = hdr.payload_offset();
  if (buf.size() < off + std::size_t(w) * h) throw IoError(path.string() + ": truncated PGM payload");
  std::vector<std::uint8_t> mask(std::size_t(w) * h);
  for (std::size_t i = 0; i < mask.size(); ++i)
    mask[i] = 2 * long(static_cast<unsigned char>(buf[off + i])) > maxval ? 1 : 0;
  *width = int(w);
  *height = int(h);
  return mask;
}

/// Binary PPM, 8 bits per channel.
inline void write_ppm(const std::filesystem::path& path, int width, int height, const MatD& color) {
  std::ostringstream os;
  os << "P6\n" << width << ' ' << height << "\n255\n";
  std::string bytes = os.str();
  for (Eigen::Index i = 0; i < color.rows(); ++i)
    for (int c = 0; c < 3; ++c)
      bytes.push_back(char(std::lround(std::clamp(color(i, c), 0.0, 1.0) * 255.0)));
  detail::write_file(path, bytes);
}

inline MatD read_ppm(const std::filesystem::path& path, int* width, int* height) {
  const auto buf = detail::read_file(path);
  detail::HeaderReader hdr(buf, path.string());
  if (hdr.token() != "P6") throw IoError(path.string() + ": not a binary PPM");
  const long w = hdr.integer();
  const long h = hdr.integer();
  const long maxval = hdr.integer();
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) throw IoError(path.string() + ": unsupported PPM header");
  const auto off = hdr.payload_offset();
  if (buf.size() < off + std::size_t(w) * h * 3) throw IoError(path.string() + ": truncated PPM payload");
  MatD color(w * h, 3);
  for (long i = 0; i < w * h; ++i)
    for (int c = 0; c < 3; ++c)
      color(i, c) = double(static_cast<unsigned char>(buf[off + std::size_t(i) * 3 + c])) / double(maxval);
  *width = int(w);
  *height = int(h);
  return color;
}

inline nlohmann::json to_json(const CameraIntrinsics& k) {
  return {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}, {"width", k.width}, {"height", k.height}};
}

inline CameraIntrinsics intrinsics_from_json(const nlohmann::json& j) {
  CameraIntrinsics k;
  try {
    k.fx = j.at("fx").get<double>();
    k.fy = j.at("fy").get<double>();
    k.cx = j.at("cx").get<double>();
    k.cy = j.at("cy").get<double>();
    k.width = j.at("width").get<int>();
    k.height = j.at("height").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("intrinsics: ") + e.what());
  }
  k.validate();
  return k;
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  const auto buf = detail::read_file(path);
  try {
    return nlohmann::json::parse(buf.begin(), buf.end());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  detail::write_file(path, j.dump(2) + "\n");
}

inline CameraIntrinsics read_intrinsics(const std::filesystem::path& path) {
  return intrinsics_from_json(read_json(path));
}

/// Loads depth + mask (+ optional color) into a frame. Without color the
/// image is uniform mid-gray.
inline RgbdFrame read_frame(const std::filesystem::path& depth_path, const std::filesystem::path& mask_path,
                            const std::filesystem::path& color_path = {}) {
  int w = 0, h = 0, mw = 0, mh = 0;
  RgbdFrame f;
  f.depth = read_pfm(depth_path, &w, &h);
  f.mask = read_pgm(mask_path, &mw, &mh);
  if (mw != w || mh != h) throw IoError("mask and depth sizes differ");
  f.width = w;
  f.height = h;
  if (!color_path.empty()) {
    int cw = 0, ch = 0;
    f.color = read_ppm(color_path, &cw, &ch);
    if (cw != w || ch != h) throw IoError("color and depth sizes differ");
  } else {
    f.color = MatD::Constant(w * h, 3, 0.5);
  }
  return f;
}

}  // namespace octmae::io
