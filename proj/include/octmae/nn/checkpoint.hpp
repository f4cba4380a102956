#pragma once

#include "octmae/nn/params.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

// Checkpoint layout (all integers little-endian):
//   "OCTM" | u32 version | u32 config length | config JSON bytes |
//   repeated until EOF: u32 name length | name | u32 rank | u64 dims[rank] | f32 values[prod(dims)]
namespace octmae::nn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  explicit ByteReader(std::string bytes) : bytes_(std::move(bytes)) {}
  bool done() const { return pos_ == bytes_.size(); }
  std::uint64_t uint(int width) {
    need(std::size_t(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= std::uint64_t(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += std::size_t(width);
    return v;
  }
  std::string take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw IoError("checkpoint: truncated file");
  }
  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <typename T>
std::string serialize_checkpoint(const nlohmann::json& config, const ParamStore<T>& params) {
  std::string out = "OCTM";
  detail::put_u32(out, kCheckpointVersion);
  const auto cfg = config.dump();
  detail::put_u32(out, std::uint32_t(cfg.size()));
  out += cfg;
  for (const auto& p : params) {
    detail::put_u32(out, std::uint32_t(p.name.size()));
    out += p.name;
    detail::put_u32(out, std::uint32_t(p.shape.size()));
    for (auto d : p.shape) detail::put_u64(out, d);
    for (Eigen::Index i = 0; i < p.value.size(); ++i)
      detail::put_u32(out, std::bit_cast<std::uint32_t>(float(p.value.data()[i])));
  }
  return out;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& config, const ParamStore<T>& params) {
  const auto bytes = serialize_checkpoint(config, params);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

template <typename T>
struct Checkpoint {
  nlohmann::json config;
  ParamStore<T> params;
};

template <typename T>
Checkpoint<T> parse_checkpoint(std::string bytes) {
  detail::ByteReader in(std::move(bytes));
  if (in.take(4) != "OCTM") throw IoError("checkpoint: bad magic");
  if (const auto v = in.uint(4); v != kCheckpointVersion)
    throw IoError("checkpoint: unsupported version " + std::to_string(v));
  Checkpoint<T> ck;
  const auto cfg_len = in.uint(4);
  try {
    ck.config = nlohmann::json::parse(in.take(cfg_len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: bad config JSON: ") + e.what());
  }
  while (!in.done()) {
    const auto name = in.take(in.uint(4));
    const auto rank = in.uint(4);
    if (rank == 0 || rank > 2) throw IoError("checkpoint: unsupported rank for " + name);
    std::vector<std::size_t> shape;
    std::size_t count = 1;
    for (std::uint64_t r = 0; r < rank; ++r) {
      shape.push_back(std::size_t(in.uint(8)));
      count *= shape.back();
    }
    auto& p = ck.params.add(name, shape);
    for (std::size_t i = 0; i < count; ++i) p.value.data()[i] = T(std::bit_cast<float>(std::uint32_t(in.uint(4))));
  }
  return ck;
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return parse_checkpoint<T>(std::move(bytes));
}

}  // namespace octmae::nn
