#pragma once

#include "octmae/common.hpp"

#include <cstddef>
#include <string>
#include <vector>

namespace octmae {

/// Pinhole intrinsics. Pixel (u, v) has its center at integer coordinates.
struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw ConfigError("intrinsics: focal lengths must be positive");
    if (width <= 0 || height <= 0) throw ConfigError("intrinsics: raster size must be positive");
    if (!(cx >= 0.0 && cx < width) || !(cy >= 0.0 && cy < height))
      throw ConfigError("intrinsics: principal point outside raster");
  }

  bool operator==(const CameraIntrinsics&) const = default;
};

/// Color, depth and foreground mask rasters, row-major (index = v * width + u).
/// Invalid depth is NaN in memory.
struct RgbdFrame {
  int width = 0;
  int height = 0;
  MatD color;                  // (H*W) x 3, values in [0,1]
  std::vector<double> depth;   // meters
  std::vector<std::uint8_t> mask;

  RgbdFrame() = default;
  RgbdFrame(int w, int h)
      : width(w), height(h), color(MatD::Zero(std::size_t(w) * h, 3)),
        depth(std::size_t(w) * h, kNaN), mask(std::size_t(w) * h, 0) {}

  std::size_t pixel_count() const { return std::size_t(width) * height; }
  std::size_t index(int u, int v) const { return std::size_t(v) * width + u; }

  void validate() const {
    const auto n = pixel_count();
    if (std::size_t(color.rows()) != n || color.cols() != 3 || depth.size() != n || mask.size() != n)
      throw ConfigError("frame: rasters do not share dimensions");
  }
};

/// Per-point features and camera-frame positions.
template <typename T>
struct PointFeatureCloud {
  Mat<T> features;              // N x D
  std::vector<Vec3> positions;  // N, all z > 0
};

/// Pixels selected by mask and depth, in row-major pixel order.
struct UnprojectedPixels {
  std::vector<std::size_t> pixel_index;
  std::vector<Vec3> positions;
  std::size_t skipped_invalid_depth = 0;
};

inline Vec3 unproject_pixel(double u, double v, double z, const CameraIntrinsics& k) {
  return {(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z};
}

/// Selects foreground pixels with valid depth and lifts them to 3D.
inline UnprojectedPixels unproject_pixels(const RgbdFrame& frame, const CameraIntrinsics& k) {
  frame.validate();
  if (frame.width != k.width || frame.height != k.height)
    throw ConfigError("unproject: frame size does not match intrinsics");
  UnprojectedPixels out;
  for (int v = 0; v < frame.height; ++v) {
    for (int u = 0; u < frame.width; ++u) {
      const auto i = frame.index(u, v);
      if (!frame.mask[i]) continue;
      const double z = frame.depth[i];
      if (!valid_depth(z)) {
        ++out.skipped_invalid_depth;
        continue;
      }
      out.pixel_index.push_back(i);
      out.positions.push_back(unproject_pixel(u, v, z, k));
    }
  }
  return out;
}

/// Lifts an H*W x D feature raster to a point feature cloud.
template <typename T>
PointFeatureCloud<T> unproject(const Mat<T>& feature_map, const RgbdFrame& frame,
                               const CameraIntrinsics& k, std::size_t* skipped = nullptr) {
  if (std::size_t(feature_map.rows()) != frame.pixel_count())
    throw ConfigError("unproject: feature map does not match frame dimensions");
  auto px = unproject_pixels(frame, k);
  PointFeatureCloud<T> cloud;
  cloud.features.resize(Eigen::Index(px.pixel_index.size()), feature_map.cols());
  for (std::size_t r = 0; r < px.pixel_index.size(); ++r)
    cloud.features.row(Eigen::Index(r)) = feature_map.row(Eigen::Index(px.pixel_index[r]));
  cloud.positions = std::move(px.positions);
  if (skipped) *skipped = px.skipped_invalid_depth;
  return cloud;
}

struct PixelProjection {
  double u;
  double v;
  double z;
};

inline PixelProjection project(const Vec3& p, const CameraIntrinsics& k) {
  if (!(p.z() > 0.0)) throw DomainError("project: point is not in front of the camera");
  return {k.fx * p.x() / p.z() + k.cx, k.fy * p.y() / p.z() + k.cy, p.z()};
}

enum class VoxelVisibility { FreeSpace, Occluded, OutsideView };

/// Depth test of a voxel center against the observed surface, nearest-pixel lookup.
inline VoxelVisibility classify_voxel(const Vec3& center, const RgbdFrame& frame,
                                      const CameraIntrinsics& k, double tolerance) {
  if (tolerance < 0.0) throw ConfigError("classify_voxel: negative tolerance");
  if (!(center.z() > 0.0)) return VoxelVisibility::OutsideView;
  const auto p = project(center, k);
  const double ur = std::floor(p.u + 0.5);
  const double vr = std::floor(p.v + 0.5);
  if (ur < 0.0 || vr < 0.0 || ur >= frame.width || vr >= frame.height)
    return VoxelVisibility::OutsideView;
  const auto i = frame.index(int(ur), int(vr));
  const double depth = frame.depth[i];
  if (!frame.mask[i] || !valid_depth(depth)) return VoxelVisibility::OutsideView;
  return center.z() > depth + tolerance ? VoxelVisibility::Occluded : VoxelVisibility::FreeSpace;
}

inline const char* to_string(VoxelVisibility v) {
  switch (v) {
    case VoxelVisibility::FreeSpace: return "free";
    case VoxelVisibility::Occluded: return "occluded";
    case VoxelVisibility::OutsideView: return "outside";
  }
  return "?";
}

}  // namespace octmae
