#pragma once

#include "octmae/camera.hpp"
#include "octmae/common.hpp"

#include <algorithm>
#include <array>
#include <compare>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <vector>

namespace octmae {

inline constexpr unsigned kMaxMortonLevel = 20;
inline constexpr unsigned kMaxLod = 9;
inline constexpr std::int32_t kAbsent = -1;

namespace detail {

inline std::uint64_t spread_bits(std::uint64_t x) {
  x &= 0x1fffff;
  x = (x | (x << 32)) & 0x1f00000000ffffULL;
  x = (x | (x << 16)) & 0x1f0000ff0000ffULL;
  x = (x | (x << 8)) & 0x100f00f00f00f00fULL;
  x = (x | (x << 4)) & 0x10c30c30c30c30c3ULL;
  x = (x | (x << 2)) & 0x1249249249249249ULL;
  return x;
}

inline std::uint32_t compact_bits(std::uint64_t x) {
  x &= 0x1249249249249249ULL;
  x = (x ^ (x >> 2)) & 0x10c30c30c30c30c3ULL;
  x = (x ^ (x >> 4)) & 0x100f00f00f00f00fULL;
  x = (x ^ (x >> 8)) & 0x1f0000ff0000ffULL;
  x = (x ^ (x >> 16)) & 0x1f00000000ffffULL;
  x = (x ^ (x >> 32)) & 0x1fffff;
  return std::uint32_t(x);
}

}  // namespace detail

/// Interleaves x (least significant), y, z.
inline std::uint64_t morton_encode(std::uint32_t ix, std::uint32_t iy, std::uint32_t iz, unsigned level) {
  if (level > kMaxMortonLevel) throw DomainError("morton_encode: level exceeds 20");
  const std::uint64_t limit = std::uint64_t(1) << level;
  if (ix >= limit || iy >= limit || iz >= limit) throw DomainError("morton_encode: coordinate overflow");
  return detail::spread_bits(ix) | (detail::spread_bits(iy) << 1) | (detail::spread_bits(iz) << 2);
}

inline std::array<std::uint32_t, 3> morton_decode(std::uint64_t code, unsigned level) {
  if (level > kMaxMortonLevel) throw DomainError("morton_decode: level exceeds 20");
  if (level < kMaxMortonLevel && (code >> (3 * level)) != 0) throw DomainError("morton_decode: code overflow");
  return {detail::compact_bits(code), detail::compact_bits(code >> 1), detail::compact_bits(code >> 2)};
}

struct VoxelKey {
  std::uint32_t level = 0;
  std::uint32_t ix = 0, iy = 0, iz = 0;

  std::uint64_t code() const { return morton_encode(ix, iy, iz, level); }

  static VoxelKey from_code(std::uint64_t code, unsigned level) {
    const auto c = morton_decode(code, level);
    return {level, c[0], c[1], c[2]};
  }

  bool valid() const {
    return level <= kMaxLod && ix < (1u << level) && iy < (1u << level) && iz < (1u << level);
  }

  friend bool operator==(const VoxelKey&, const VoxelKey&) = default;
  friend std::strong_ordering operator<=>(const VoxelKey& a, const VoxelKey& b) {
    if (auto c = a.level <=> b.level; c != 0) return c;
    return a.code() <=> b.code();
  }
};

/// Octant index of a key inside its parent, matches the low three Morton bits.
inline unsigned octant(const VoxelKey& k) { return (k.ix & 1u) | ((k.iy & 1u) << 1) | ((k.iz & 1u) << 2); }

inline VoxelKey parent(const VoxelKey& k) {
  if (k.level == 0) throw DomainError("parent: level-0 key has no parent");
  return {k.level - 1, k.ix >> 1, k.iy >> 1, k.iz >> 1};
}

inline std::array<VoxelKey, 8> children(const VoxelKey& k) {
  if (k.level >= kMaxLod) throw DomainError("children: level exceeds maximum LoD");
  std::array<VoxelKey, 8> out;
  for (unsigned c = 0; c < 8; ++c)
    out[c] = {k.level + 1, 2 * k.ix + (c & 1u), 2 * k.iy + ((c >> 1) & 1u), 2 * k.iz + ((c >> 2) & 1u)};
  return out;
}

inline VoxelKey ancestor(VoxelKey k, unsigned level) {
  if (level > k.level) throw DomainError("ancestor: target level is finer than key");
  const unsigned s = k.level - level;
  return {level, k.ix >> s, k.iy >> s, k.iz >> s};
}

/// Cubic grid placed in the camera frame.
struct OctreeGeometry {
  Vec3 origin = Vec3::Zero();
  double extent = 0.64;
  unsigned max_lod = 6;

  double cell_size(unsigned level) const { return std::ldexp(extent, -int(level)); }
  double half_diagonal(unsigned level) const { return 0.5 * std::sqrt(3.0) * cell_size(level); }

  Vec3 center(const VoxelKey& k) const {
    const double s = cell_size(k.level);
    return origin + Vec3((k.ix + 0.5) * s, (k.iy + 0.5) * s, (k.iz + 0.5) * s);
  }

  /// RoPE coordinate: cell index / 2^level.
  Vec3 normalized(const VoxelKey& k) const {
    const double r = std::ldexp(1.0, -int(k.level));
    return {k.ix * r, k.iy * r, k.iz * r};
  }

  bool contains(const Vec3& p) const {
    for (int a = 0; a < 3; ++a)
      if (!(p[a] >= origin[a] && p[a] < origin[a] + extent)) return false;
    return true;
  }
};

/// Grid centered on the optical axis with the front face at the nearest point.
inline OctreeGeometry compute_grid_origin(std::span<const Vec3> positions, double extent, unsigned max_lod = 6) {
  if (positions.empty()) throw Error("no foreground points");
  if (!(extent > 0.0)) throw ConfigError("grid extent must be positive");
  if (max_lod < 1 || max_lod > kMaxLod) throw ConfigError("max_lod must be in [1, 9]");
  double zmin = positions.front().z();
  for (const auto& p : positions) {
    if (!(p.z() > 0.0)) throw DomainError("compute_grid_origin: point behind camera");
    zmin = std::min(zmin, p.z());
  }
  OctreeGeometry g;
  g.origin = Vec3(-extent / 2, -extent / 2, zmin);
  g.extent = extent;
  g.max_lod = max_lod;
  return g;
}

struct OctreeLevel {
  unsigned level = 0;
  std::vector<VoxelKey> keys;  // strictly ascending Morton order
  MatD features;               // keys.size() x C, may have zero columns

  std::size_t size() const { return keys.size(); }
};

struct Octree {
  OctreeGeometry geometry;
  std::map<unsigned, OctreeLevel> levels;
  std::size_t dropped_points = 0;

  const OctreeLevel& finest() const { return levels.at(geometry.max_lod); }
};

/// Point-to-voxel bucketing at the finest level. members of voxel i are
/// member_index[member_offset[i] .. member_offset[i+1]), in input order.
struct Voxelization {
  std::vector<VoxelKey> keys;
  std::vector<std::size_t> member_offset;
  std::vector<std::size_t> member_index;
  std::size_t dropped = 0;
};

inline Voxelization voxelize(std::span<const Vec3> positions, const OctreeGeometry& g) {
  const double cell = g.cell_size(g.max_lod);
  const std::int64_t res = std::int64_t(1) << g.max_lod;
  std::vector<std::pair<std::uint64_t, std::size_t>> coded;
  coded.reserve(positions.size());
  Voxelization out;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    std::array<std::int64_t, 3> c{};
    bool inside = true;
    for (int a = 0; a < 3; ++a) {
      const double t = (positions[i][a] - g.origin[a]) / cell;
      if (!(t >= 0.0 && t < double(res))) {
        inside = false;
        break;
      }
      c[a] = std::min<std::int64_t>(std::int64_t(std::floor(t)), res - 1);
    }
    if (!inside) {
      ++out.dropped;
      continue;
    }
    coded.emplace_back(morton_encode(std::uint32_t(c[0]), std::uint32_t(c[1]), std::uint32_t(c[2]), g.max_lod), i);
  }
  std::sort(coded.begin(), coded.end());
  for (std::size_t i = 0; i < coded.size(); ++i) {
    if (i == 0 || coded[i].first != coded[i - 1].first) {
      out.keys.push_back(VoxelKey::from_code(coded[i].first, g.max_lod));
      out.member_offset.push_back(i);
    }
    out.member_index.push_back(coded[i].second);
  }
  out.member_offset.push_back(coded.size());
  return out;
}

/// Unique ancestors at `level` of a Morton-sorted key list (result sorted).
inline std::vector<VoxelKey> ancestors(std::span<const VoxelKey> keys, unsigned level) {
  std::vector<VoxelKey> out;
  for (const auto& k : keys) {
    const auto a = ancestor(k, level);
    if (out.empty() || out.back() != a) out.push_back(a);
  }
  return out;
}

/// Octree with averaged point features at max_lod and the ancestor key sets
/// (feature-less) at every coarser level.
template <typename T>
Octree build_octree(const PointFeatureCloud<T>& cloud, const OctreeGeometry& g) {
  if (g.max_lod < 1 || g.max_lod > kMaxLod) throw ConfigError("build_octree: max_lod must be in [1, 9]");
  if (std::size_t(cloud.features.rows()) != cloud.positions.size())
    throw ConfigError("build_octree: feature/position row mismatch");
  const auto vox = voxelize(cloud.positions, g);
  if (vox.keys.empty()) throw Error("empty octree");
  Octree tree;
  tree.geometry = g;
  tree.dropped_points = vox.dropped;
  OctreeLevel finest;
  finest.level = g.max_lod;
  finest.keys = vox.keys;
  finest.features = MatD::Zero(Eigen::Index(vox.keys.size()), cloud.features.cols());
  for (std::size_t v = 0; v < vox.keys.size(); ++v) {
    const auto b = vox.member_offset[v], e = vox.member_offset[v + 1];
    for (auto m = b; m < e; ++m)
      finest.features.row(Eigen::Index(v)) += cloud.features.row(Eigen::Index(vox.member_index[m])).template cast<double>();
    finest.features.row(Eigen::Index(v)) /= double(e - b);
  }
  for (unsigned h = 0; h < g.max_lod; ++h) {
    OctreeLevel l;
    l.level = h;
    l.keys = ancestors(finest.keys, h);
    l.features = MatD(Eigen::Index(l.keys.size()), 0);
    tree.levels.emplace(h, std::move(l));
  }
  tree.levels.emplace(g.max_lod, std::move(finest));
  return tree;
}

/// Sorted Morton codes for binary-search lookups.
inline std::vector<std::uint64_t> codes_of(std::span<const VoxelKey> keys) {
  std::vector<std::uint64_t> c(keys.size());
  for (std::size_t i = 0; i < keys.size(); ++i) c[i] = keys[i].code();
  return c;
}

inline std::int32_t find_code(const std::vector<std::uint64_t>& codes, std::uint64_t code) {
  const auto it = std::lower_bound(codes.begin(), codes.end(), code);
  if (it == codes.end() || *it != code) return kAbsent;
  return std::int32_t(it - codes.begin());
}

using Offset3 = std::array<int, 3>;

/// The 27 offsets of a 3x3x3 stencil, x fastest; index 13 is the center.
inline std::vector<Offset3> stencil27() {
  std::vector<Offset3> o;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) o.push_back({dx, dy, dz});
  return o;
}

/// Row-major |keys| x |offsets| table of neighbor positions, kAbsent when missing.
struct NeighborTable {
  std::size_t rows = 0;
  std::size_t taps = 0;
  std::vector<std::int32_t> index;

  std::int32_t operator()(std::size_t r, std::size_t t) const { return index[r * taps + t]; }
};

inline NeighborTable neighbor_indices(std::span<const VoxelKey> keys, std::span<const Offset3> offsets) {
  NeighborTable t{keys.size(), offsets.size(), std::vector<std::int32_t>(keys.size() * offsets.size(), kAbsent)};
  if (keys.empty()) return t;
  const unsigned level = keys.front().level;
  const std::int64_t res = std::int64_t(1) << level;
  const auto codes = codes_of(keys);
  for (std::size_t i = 0; i < keys.size(); ++i) {
    for (std::size_t j = 0; j < offsets.size(); ++j) {
      const std::int64_t x = std::int64_t(keys[i].ix) + offsets[j][0];
      const std::int64_t y = std::int64_t(keys[i].iy) + offsets[j][1];
      const std::int64_t z = std::int64_t(keys[i].iz) + offsets[j][2];
      if (x < 0 || y < 0 || z < 0 || x >= res || y >= res || z >= res) continue;
      t.index[i * offsets.size() + j] =
          find_code(codes, morton_encode(std::uint32_t(x), std::uint32_t(y), std::uint32_t(z), level));
    }
  }
  return t;
}

inline NeighborTable neighbor_indices(const OctreeLevel& level, std::span<const Offset3> offsets) {
  return neighbor_indices(std::span<const VoxelKey>(level.keys), offsets);
}

/// Keeps voxels with prob >= threshold, preserving order and feature rows.
template <typename P>
OctreeLevel prune(const OctreeLevel& level, std::span<const P> probs, double threshold = 0.5) {
  if (probs.size() != level.keys.size()) throw ConfigError("prune: probability count does not match key count");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("prune: threshold must lie in (0,1)");
  OctreeLevel out;
  out.level = level.level;
  std::vector<Eigen::Index> rows;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (double(probs[i]) >= threshold) {
      out.keys.push_back(level.keys[i]);
      rows.push_back(Eigen::Index(i));
    }
  }
  const bool has_features = level.features.rows() == Eigen::Index(level.keys.size());
  out.features = MatD(Eigen::Index(rows.size()), has_features ? level.features.cols() : 0);
  if (has_features)
    for (std::size_t r = 0; r < rows.size(); ++r) out.features.row(Eigen::Index(r)) = level.features.row(rows[r]);
  return out;
}

/// All 8 children of every key, Morton-sorted.
inline std::vector<VoxelKey> expand(std::span<const VoxelKey> keys) {
  std::vector<VoxelKey> out;
  out.reserve(keys.size() * 8);
  for (const auto& k : keys)
    for (const auto& c : children(k)) out.push_back(c);
  return out;
}

inline std::vector<VoxelKey> expand(const OctreeLevel& level) { return expand(std::span<const VoxelKey>(level.keys)); }

/// For each parent in `parents`, the positions of its 8 children in `fine`
/// (column = octant), kAbsent when the child is not present.
inline NeighborTable child_table(std::span<const VoxelKey> parents, std::span<const VoxelKey> fine) {
  NeighborTable t{parents.size(), 8, std::vector<std::int32_t>(parents.size() * 8, kAbsent)};
  const auto codes = codes_of(fine);
  for (std::size_t i = 0; i < parents.size(); ++i) {
    const auto base = parents[i].code() << 3;
    auto it = std::lower_bound(codes.begin(), codes.end(), base);
    for (; it != codes.end() && (*it >> 3) == parents[i].code(); ++it)
      t.index[i * 8 + (*it & 7u)] = std::int32_t(it - codes.begin());
  }
  return t;
}

/// For each child, the position of its parent in `parents` placed in the
/// child's octant column; the other seven columns are kAbsent.
inline NeighborTable parent_table(std::span<const VoxelKey> fine, std::span<const VoxelKey> parents) {
  NeighborTable t{fine.size(), 8, std::vector<std::int32_t>(fine.size() * 8, kAbsent)};
  const auto codes = codes_of(parents);
  for (std::size_t i = 0; i < fine.size(); ++i)
    t.index[i * 8 + octant(fine[i])] = find_code(codes, parent(fine[i]).code());
  return t;
}

/// Position of every key of `query` in `reference`, kAbsent when missing.
inline std::vector<std::int32_t> lookup(std::span<const VoxelKey> query, std::span<const VoxelKey> reference) {
  const auto codes = codes_of(reference);
  std::vector<std::int32_t> out(query.size());
  for (std::size_t i = 0; i < query.size(); ++i) out[i] = find_code(codes, query[i].code());
  return out;
}

inline bool is_strictly_sorted(std::span<const VoxelKey> keys) {
  for (std::size_t i = 1; i < keys.size(); ++i)
    if (!(keys[i - 1] < keys[i])) return false;
  return true;
}

}  // namespace octmae
