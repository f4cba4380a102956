#pragma once

#include "octmae/common.hpp"

#include <numbers>
#include <string>
#include <vector>

namespace octmae::nn {

enum class RopeMode { None, Literal, Geometric };

inline const char* to_string(RopeMode m) {
  switch (m) {
    case RopeMode::None: return "none";
    case RopeMode::Literal: return "literal";
    case RopeMode::Geometric: return "geometric";
  }
  return "?";
}

inline RopeMode rope_mode_from_string(const std::string& s) {
  if (s == "none") return RopeMode::None;
  if (s == "literal") return RopeMode::Literal;
  if (s == "geometric") return RopeMode::Geometric;
  throw ConfigError("unknown rope mode: " + s);
}

/// Per-axis frequency of the literal 3D rotary embedding:
///   theta_i = (1 + (floor(D/2) - 1) / (floor(D/6) - 1)) * (i - 1) * pi,  1 <= i <= floor(D/6).
inline double rope_angles(int i, int model_dim) {
  const int pairs = model_dim / 6;
  if (i < 1 || i > pairs) throw DomainError("rope_angles: index out of range");
  if (i == 1) return 0.0;
  const double slope = 1.0 + double(model_dim / 2 - 1) / double(pairs - 1);
  return slope * double(i - 1) * std::numbers::pi;
}

/// Conventional geometric frequencies base^(-2(i-1)/k), k = per-axis block width.
inline double rope_geometric_angle(int i, int block, double base) {
  return std::pow(base, -2.0 * double(i - 1) / double(block));
}

/// Rotation layout for feature vectors of width `width`: three axis blocks of
/// floor(width/3) channels, each rotated pairwise, remainder left untouched.
struct RopeSpec {
  RopeMode mode = RopeMode::None;
  int width = 0;
  int block = 0;
  std::vector<double> theta;  // one frequency per pair within an axis block

  bool active() const { return mode != RopeMode::None && !theta.empty(); }
};

inline RopeSpec make_rope(int width, RopeMode mode, double base = 100.0) {
  RopeSpec s;
  s.mode = mode;
  s.width = width;
  s.block = width / 3;
  if (mode == RopeMode::None) return s;
  if (s.block % 2 != 0 || s.block == 0)
    throw ConfigError("rope: per-axis block floor(D/3) must be even and non-zero, D=" + std::to_string(width));
  const int pairs = s.block / 2;
  for (int i = 1; i <= pairs; ++i)
    s.theta.push_back(mode == RopeMode::Literal ? rope_angles(i, width) : rope_geometric_angle(i, s.block, base));
  return s;
}

/// Rotates `x` (length spec.width) in place by coord; sign -1 applies the inverse.
template <typename T>
void rope_rotate_inplace(T* x, const Vec3& coord, const RopeSpec& spec, double sign = 1.0) {
  if (!spec.active()) return;
  for (int axis = 0; axis < 3; ++axis) {
    T* blk = x + axis * spec.block;
    for (std::size_t j = 0; j < spec.theta.size(); ++j) {
      const double a = sign * coord[axis] * spec.theta[j];
      const T c = T(std::cos(a)), s = T(std::sin(a));
      const T x0 = blk[2 * j], x1 = blk[2 * j + 1];
      blk[2 * j] = c * x0 - s * x1;
      blk[2 * j + 1] = s * x0 + c * x1;
    }
  }
}

template <typename T>
Eigen::Matrix<T, Eigen::Dynamic, 1> rope_rotate(const Eigen::Matrix<T, Eigen::Dynamic, 1>& feature, const Vec3& coord,
                                                const RopeSpec& spec) {
  if (feature.size() != spec.width) throw ConfigError("rope_rotate: feature width mismatch");
  Eigen::Matrix<T, Eigen::Dynamic, 1> out = feature;
  rope_rotate_inplace(out.data(), coord, spec);
  return out;
}

}  // namespace octmae::nn
