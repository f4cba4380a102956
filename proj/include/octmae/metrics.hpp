#pragma once

#include "octmae/camera.hpp"
#include "octmae/net.hpp"
#include "octmae/ply.hpp"
#include "octmae/scenegen.hpp"

#include <json.hpp>

#include <algorithm>
#include <optional>
#include <random>
#include <unordered_map>
#include <vector>

namespace octmae::metrics {

struct SurfaceSample {
  std::vector<Vec3> points;   // meters
  std::vector<Vec3> normals;  // empty or one unit vector per point

  bool has_normals() const { return !normals.empty() && normals.size() == points.size(); }
  std::size_t size() const { return points.size(); }
};

inline double point_distance(const Vec3& a, const Vec3& b) {
  const double dx = a.x() - b.x(), dy = a.y() - b.y(), dz = a.z() - b.z();
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

struct Neighbor {
  std::size_t index = 0;
  double distance = std::numeric_limits<double>::infinity();
};

/// Nearest neighbor over a fixed reference set using a uniform hash grid.
/// Ties are resolved toward the smaller reference index.
class NearestNeighbors {
 public:
  explicit NearestNeighbors(const std::vector<Vec3>& reference) : ref_(reference) {
    if (ref_.empty()) throw DomainError("empty sample");
    lo_ = hi_ = ref_.front();
    for (const auto& p : ref_) {
      lo_ = lo_.cwiseMin(p);
      hi_ = hi_.cwiseMax(p);
    }
    const Vec3 span = (hi_ - lo_).cwiseMax(1e-9);
    // About two points per occupied cell on surface-like data.
    cell_ = std::max(span.maxCoeff() / std::max(1.0, std::sqrt(double(ref_.size()) / 2.0)), 1e-9);
    for (int a = 0; a < 3; ++a) dims_[a] = std::int64_t(std::floor(span[a] / cell_)) + 1;
    for (std::size_t i = 0; i < ref_.size(); ++i) cells_[hash(cell_of(ref_[i]))].push_back(i);
  }

  Neighbor query(const Vec3& q) const {
    Neighbor best;
    std::array<std::int64_t, 3> qc{};
    for (int a = 0; a < 3; ++a) qc[a] = std::int64_t(std::floor((q[a] - lo_[a]) / cell_));
    // Chebyshev distance from the query cell to the occupied grid box.
    std::int64_t r0 = 0, rmax = 0;
    for (int a = 0; a < 3; ++a) {
      r0 = std::max({r0, -qc[a], qc[a] - (dims_[a] - 1)});
      rmax = std::max({rmax, qc[a], dims_[a] - 1 - qc[a]});
    }
    for (std::int64_t r = r0; r <= rmax; ++r) {
      // One ring of slack keeps the bound safe against rounding in cell assignment.
      if (r >= 2 && double(r - 2) * cell_ > best.distance) break;
      visit_shell(qc, r, [&](std::size_t i) {
        const double d = point_distance(q, ref_[i]);
        if (d < best.distance || (d == best.distance && i < best.index)) best = {i, d};
      });
    }
    return best;
  }

 private:
  using Cell = std::array<std::int64_t, 3>;

  Cell cell_of(const Vec3& p) const {
    Cell c{};
    for (int a = 0; a < 3; ++a)
      c[a] = std::clamp<std::int64_t>(std::int64_t(std::floor((p[a] - lo_[a]) / cell_)), 0, dims_[a] - 1);
    return c;
  }

  static std::uint64_t hash(const Cell& c) {
    return (std::uint64_t(c[0]) * 73856093ULL) ^ (std::uint64_t(c[1]) * 19349663ULL) ^ (std::uint64_t(c[2]) * 83492791ULL);
  }

  template <typename F>
  void visit_cell(const Cell& c, F&& f) const {
    for (int a = 0; a < 3; ++a)
      if (c[a] < 0 || c[a] >= dims_[a]) return;
    auto it = cells_.find(hash(c));
    if (it == cells_.end()) return;
    for (auto i : it->second)
      if (cell_of(ref_[i]) == c) f(i);
  }

  template <typename F>
  void visit_shell(const Cell& q, std::int64_t r, F&& f) const {
    if (r == 0) return visit_cell(q, f);
    auto lo = [&](int a) { return std::max(q[a] - r, std::int64_t(0)); };
    auto hi = [&](int a) { return std::min(q[a] + r, dims_[a] - 1); };
    for (std::int64_t x = lo(0); x <= hi(0); ++x) {
      for (std::int64_t y = lo(1); y <= hi(1); ++y) {
        const bool edge = std::abs(x - q[0]) == r || std::abs(y - q[1]) == r;
        if (edge) {
          for (std::int64_t z = lo(2); z <= hi(2); ++z) visit_cell({x, y, z}, f);
        } else {
          visit_cell({x, y, q[2] - r}, f);
          visit_cell({x, y, q[2] + r}, f);
        }
      }
    }
  }

  const std::vector<Vec3>& ref_;
  Vec3 lo_, hi_;
  double cell_ = 1.0;
  std::array<std::int64_t, 3> dims_{};
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> cells_;
};

inline std::vector<Neighbor> nearest(const std::vector<Vec3>& queries, const std::vector<Vec3>& reference) {
  NearestNeighbors nn(reference);
  std::vector<Neighbor> out(queries.size());
  for (std::size_t i = 0; i < queries.size(); ++i) out[i] = nn.query(queries[i]);
  return out;
}

namespace detail {

inline void require_non_empty(const SurfaceSample& a, const SurfaceSample& b) {
  if (a.points.empty() || b.points.empty()) throw DomainError("empty sample");
}

inline double mean_distance(const std::vector<Neighbor>& n) {
  double s = 0.0;
  for (const auto& x : n) s += x.distance;
  return s / double(n.size());
}

}  // namespace detail

/// Symmetric mean nearest-neighbor distance in millimeters.
inline double chamfer(const SurfaceSample& pd, const SurfaceSample& gt) {
  detail::require_non_empty(pd, gt);
  const auto a = nearest(pd.points, gt.points);
  const auto b = nearest(gt.points, pd.points);
  return 1000.0 * (0.5 * detail::mean_distance(a) + 0.5 * detail::mean_distance(b));
}

struct F1Score {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// A point counts as correct when its nearest counterpart is closer than eta (mm).
inline F1Score f1_at(const SurfaceSample& pd, const SurfaceSample& gt, double eta_mm = 10.0) {
  detail::require_non_empty(pd, gt);
  if (!(eta_mm > 0.0)) throw DomainError("f1_at: eta must be positive");
  const double eta = eta_mm / 1000.0;
  auto frac = [&](const std::vector<Neighbor>& n) {
    std::size_t c = 0;
    for (const auto& x : n) c += x.distance < eta;
    return double(c) / double(n.size());
  };
  F1Score s;
  s.precision = frac(nearest(pd.points, gt.points));
  s.recall = frac(nearest(gt.points, pd.points));
  s.f1 = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

inline double normal_consistency(const SurfaceSample& pd, const SurfaceSample& gt) {
  detail::require_non_empty(pd, gt);
  if (!pd.has_normals() || !gt.has_normals()) throw DomainError("normal_consistency: missing normals");
  auto side = [](const SurfaceSample& from, const SurfaceSample& to) {
    const auto n = nearest(from.points, to.points);
    double s = 0.0;
    for (std::size_t i = 0; i < n.size(); ++i) s += from.normals[i].dot(to.normals[n[i].index]);
    return s / double(n.size());
  };
  return 0.5 * side(pd, gt) + 0.5 * side(gt, pd);
}

struct VisibilitySplit {
  SurfaceSample visible;
  SurfaceSample occluded;
};

/// Visible iff the point lands on a foreground pixel whose depth is within tol of its own.
inline VisibilitySplit split_visible(const SurfaceSample& gt, const RgbdFrame& frame, const CameraIntrinsics& k,
                                     double tol_mm = 5.0) {
  if (!(tol_mm > 0.0)) throw DomainError("split_visible: tolerance must be positive");
  const double tol = tol_mm / 1000.0;
  VisibilitySplit s;
  for (std::size_t i = 0; i < gt.points.size(); ++i) {
    const auto& p = gt.points[i];
    bool visible = false;
    if (p.z() > 0.0) {
      const auto pr = project(p, k);
      const double u = std::floor(pr.u + 0.5), v = std::floor(pr.v + 0.5);
      if (u >= 0 && v >= 0 && u < frame.width && v < frame.height) {
        const auto idx = frame.index(int(u), int(v));
        visible = frame.mask[idx] && valid_depth(frame.depth[idx]) && std::abs(p.z() - frame.depth[idx]) <= tol;
      }
    }
    auto& dst = visible ? s.visible : s.occluded;
    dst.points.push_back(p);
    if (gt.has_normals()) dst.normals.push_back(gt.normals[i]);
  }
  return s;
}

struct EvalReport {
  double cd = 0.0;
  std::optional<double> cd_vis;
  std::optional<double> cd_occ;
  double f1 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  std::optional<double> nc;
};

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j = {{"cd", r.cd}, {"f1", r.f1}, {"precision", r.precision}, {"recall", r.recall}};
  if (r.cd_vis) j["cd_vis"] = *r.cd_vis;
  if (r.cd_occ) j["cd_occ"] = *r.cd_occ;
  if (r.nc) j["nc"] = *r.nc;
  return j;
}

struct ViewContext {
  const RgbdFrame* frame = nullptr;
  const CameraIntrinsics* intrinsics = nullptr;
};

inline EvalReport evaluate(const SurfaceSample& pd, const SurfaceSample& gt, std::optional<ViewContext> view = {},
                           double eta_mm = 10.0, double split_tol_mm = 5.0) {
  EvalReport r;
  r.cd = chamfer(pd, gt);
  const auto f = f1_at(pd, gt, eta_mm);
  r.f1 = f.f1;
  r.precision = f.precision;
  r.recall = f.recall;
  if (pd.has_normals() && gt.has_normals()) r.nc = normal_consistency(pd, gt);
  if (view && view->frame && view->intrinsics) {
    const auto s = split_visible(gt, *view->frame, *view->intrinsics, split_tol_mm);
    if (!s.visible.points.empty()) r.cd_vis = chamfer(pd, s.visible);
    if (!s.occluded.points.empty()) r.cd_occ = chamfer(pd, s.occluded);
  }
  return r;
}

/// Survivor centers with their predicted normals.
inline SurfaceSample sample_surface(const CompletionOutput& c) {
  if (c.collapsed || c.surface_keys.empty()) throw NumericalError("sample_surface: completion collapsed");
  SurfaceSample s;
  s.points = c.surface_points();
  s.normals = c.normals;
  return s;
}

/// Uniform samples on the zero level set: rejection in a thin band inside the
/// bounding box of the primitives, then projection along the gradient.
inline SurfaceSample sample_surface(const scene::SceneSpec& spec, std::size_t n, std::uint64_t seed,
                                    double band = 0.25e-3) {
  if (n < 1) throw DomainError("sample_surface: n must be >= 1");
  if (spec.primitives.empty()) throw DomainError("sample_surface: scene has no primitives");
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity()), hi = -lo;
  for (const auto& p : spec.primitives) {
    const Vec3 r = Vec3::Constant(p.bounding_radius() + band);
    lo = lo.cwiseMin(p.translation - r);
    hi = hi.cwiseMax(p.translation + r);
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ux(lo.x(), hi.x()), uy(lo.y(), hi.y()), uz(lo.z(), hi.z());
  SurfaceSample s;
  const std::uint64_t max_tries = std::uint64_t(n) * 1000000ULL;
  for (std::uint64_t t = 0; s.points.size() < n; ++t) {
    if (t >= max_tries) throw NumericalError("sample_surface: band rejection did not converge");
    Vec3 p(ux(rng), uy(rng), uz(rng));
    auto d = scene::scene_sdf(spec, p);
    if (std::abs(d.distance) > band) continue;
    for (int it = 0; it < 3; ++it) {
      p -= d.distance * d.normal;
      d = scene::scene_sdf(spec, p);
    }
    s.points.push_back(p);
    s.normals.push_back(d.normal);
  }
  return s;
}

inline SurfaceSample sample_from_ply(const ply::VertexTable& t) {
  const auto x = t.column("x"), y = t.column("y"), z = t.column("z");
  if (!x || !y || !z) throw IoError("ply: missing x/y/z properties");
  const auto nx = t.column("nx"), ny = t.column("ny"), nz = t.column("nz");
  SurfaceSample s;
  for (Eigen::Index r = 0; r < t.values.rows(); ++r) {
    s.points.emplace_back(t.values(r, *x), t.values(r, *y), t.values(r, *z));
    if (nx && ny && nz) s.normals.emplace_back(t.values(r, *nx), t.values(r, *ny), t.values(r, *nz));
  }
  return s;
}

inline ply::VertexTable to_ply(const SurfaceSample& s) {
  ply::VertexTable t;
  t.names = {"x", "y", "z"};
  if (s.has_normals()) t.names.insert(t.names.end(), {"nx", "ny", "nz"});
  t.values.resize(Eigen::Index(s.size()), Eigen::Index(t.names.size()));
  for (std::size_t i = 0; i < s.size(); ++i) {
    t.values.block<1, 3>(Eigen::Index(i), 0) = s.points[i].transpose();
    if (s.has_normals()) t.values.block<1, 3>(Eigen::Index(i), 3) = s.normals[i].transpose();
  }
  return t;
}

}  // namespace octmae::metrics
