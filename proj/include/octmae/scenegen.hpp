#pragma once

#include "octmae/camera.hpp"
#include "octmae/image_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace octmae::scene {

enum class PrimitiveKind { Sphere, Box, Cylinder, Capsule };

inline const char* to_string(PrimitiveKind k) {
  switch (k) {
    case PrimitiveKind::Sphere: return "sphere";
    case PrimitiveKind::Box: return "box";
    case PrimitiveKind::Cylinder: return "cylinder";
    case PrimitiveKind::Capsule: return "capsule";
  }
  return "?";
}

inline PrimitiveKind kind_from_string(const std::string& s) {
  if (s == "sphere") return PrimitiveKind::Sphere;
  if (s == "box") return PrimitiveKind::Box;
  if (s == "cylinder") return PrimitiveKind::Cylinder;
  if (s == "capsule") return PrimitiveKind::Capsule;
  throw IoError("unknown primitive kind: " + s);
}

struct SdfSample {
  double distance = std::numeric_limits<double>::infinity();
  Vec3 normal = Vec3::Zero();
};

/// Analytic solid. `size` holds: sphere (radius), box (half extents x, y, z),
/// cylinder and capsule (radius, half height of the y-aligned axis).
/// The local frame maps to camera coordinates by rotation then translation.
struct Primitive {
  PrimitiveKind kind = PrimitiveKind::Sphere;
  Eigen::Quaterniond rotation = Eigen::Quaterniond::Identity();
  Vec3 translation = Vec3::Zero();
  Vec3 size = Vec3::Constant(0.05);
  Vec3 albedo = Vec3::Constant(0.7);

  double largest_dimension() const {
    switch (kind) {
      case PrimitiveKind::Sphere: return 2 * size.x();
      case PrimitiveKind::Box: return 2 * size.maxCoeff();
      case PrimitiveKind::Cylinder: return 2 * std::max(size.x(), size.y());
      case PrimitiveKind::Capsule: return std::max(2 * size.x(), 2 * (size.y() + size.x()));
    }
    return 0.0;
  }

  double bounding_radius() const {
    switch (kind) {
      case PrimitiveKind::Sphere: return size.x();
      case PrimitiveKind::Box: return size.norm();
      case PrimitiveKind::Cylinder: return std::hypot(size.x(), size.y());
      case PrimitiveKind::Capsule: return size.y() + size.x();
    }
    return 0.0;
  }

  /// Half extent along the local y axis (the upright axis).
  double vertical_half_extent() const {
    switch (kind) {
      case PrimitiveKind::Sphere: return size.x();
      case PrimitiveKind::Box: return size.y();
      case PrimitiveKind::Cylinder: return size.y();
      case PrimitiveKind::Capsule: return size.y() + size.x();
    }
    return 0.0;
  }

  void validate() const {
    const int n = (kind == PrimitiveKind::Sphere) ? 1 : (kind == PrimitiveKind::Box ? 3 : 2);
    for (int i = 0; i < n; ++i)
      if (!(size[i] > 0.0)) throw ConfigError("primitive size parameters must be positive");
    if (std::abs(rotation.norm() - 1.0) > 1e-6) throw ConfigError("primitive rotation must be a unit quaternion");
  }

  SdfSample local_sdf(const Vec3& q) const {
    SdfSample s;
    switch (kind) {
      case PrimitiveKind::Sphere: {
        const double len = q.norm();
        s.distance = len - size.x();
        s.normal = len > 0 ? Vec3(q / len) : Vec3(0, -1, 0);
        break;
      }
      case PrimitiveKind::Box: {
        const Vec3 d = q.cwiseAbs() - size;
        const Vec3 outside = d.cwiseMax(0.0);
        const double olen = outside.norm();
        Eigen::Index axis = 0;
        const double inside = std::min(d.maxCoeff(&axis), 0.0);
        s.distance = olen + inside;
        const Vec3 sgn(q.x() < 0 ? -1.0 : 1.0, q.y() < 0 ? -1.0 : 1.0, q.z() < 0 ? -1.0 : 1.0);
        if (olen > 0) {
          s.normal = sgn.cwiseProduct(outside) / olen;
        } else {
          s.normal = Vec3::Zero();
          s.normal[axis] = sgn[axis];
        }
        break;
      }
      case PrimitiveKind::Cylinder: {
        const double rxz = std::hypot(q.x(), q.z());
        const double dr = rxz - size.x();
        const double dy = std::abs(q.y()) - size.y();
        const Vec3 radial = rxz > 0 ? Vec3(q.x() / rxz, 0, q.z() / rxz) : Vec3(1, 0, 0);
        const Vec3 axial(0, q.y() < 0 ? -1.0 : 1.0, 0);
        const double wr = std::max(dr, 0.0), wy = std::max(dy, 0.0);
        const double olen = std::hypot(wr, wy);
        s.distance = std::min(std::max(dr, dy), 0.0) + olen;
        if (olen > 0)
          s.normal = (wr * radial + wy * axial) / olen;
        else
          s.normal = dr > dy ? radial : axial;
        break;
      }
      case PrimitiveKind::Capsule: {
        const Vec3 c(0, std::clamp(q.y(), -size.y(), size.y()), 0);
        const Vec3 d = q - c;
        const double len = d.norm();
        s.distance = len - size.x();
        s.normal = len > 0 ? Vec3(d / len) : Vec3(1, 0, 0);
        break;
      }
    }
    return s;
  }

  SdfSample sdf(const Vec3& p) const {
    const Vec3 q = rotation.conjugate() * (p - translation);
    auto s = local_sdf(q);
    s.normal = rotation * s.normal;
    return s;
  }
};

struct SceneSpec {
  std::vector<Primitive> primitives;
  std::optional<double> ground_y;  // plane y = ground_y (camera y points down)
  CameraIntrinsics intrinsics;
  std::uint64_t seed = 0;

  void validate() const {
    if (primitives.size() > 6) throw ConfigError("scene: at most 6 primitives");
    for (const auto& p : primitives) p.validate();
  }
};

/// Minimum over primitive SDFs (negative inside); the ground plane is not part
/// of the scene surface. Normal is the gradient of the minimizing primitive.
inline SdfSample scene_sdf(const SceneSpec& scene, const Vec3& p) {
  SdfSample best;
  for (const auto& prim : scene.primitives) {
    auto s = prim.sdf(p);
    if (s.distance < best.distance) best = s;
  }
  return best;
}

inline double ground_distance(const SceneSpec& scene, const Vec3& p) {
  return scene.ground_y ? *scene.ground_y - p.y() : std::numeric_limits<double>::infinity();
}

struct TraceSettings {
  int max_steps = 256;
  double hit_threshold = 1e-4;
  double max_range = 3.0;
};

struct TraceHit {
  bool hit = false;
  bool primitive = false;
  double t = 0.0;
  Vec3 point = Vec3::Zero();
};

inline TraceHit sphere_trace(const SceneSpec& scene, const Vec3& dir, const TraceSettings& ts = {}) {
  TraceHit h;
  double t = 0.0;
  for (int i = 0; i < ts.max_steps && t <= ts.max_range; ++i) {
    const Vec3 p = t * dir;
    const double dp = scene_sdf(scene, p).distance;
    const double dg = ground_distance(scene, p);
    const double d = std::min(dp, dg);
    if (d < ts.hit_threshold) {
      h.hit = true;
      h.primitive = dp <= dg;
      h.t = t;
      h.point = p;
      return h;
    }
    t += d;
  }
  return h;
}

inline Vec3 pixel_ray(double u, double v, const CameraIntrinsics& k) {
  return Vec3((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0).normalized();
}

/// Sphere-traced depth, foreground mask (primitives only) and Lambert-shaded color.
inline RgbdFrame render(const SceneSpec& scene, const TraceSettings& ts = {}) {
  const auto& k = scene.intrinsics;
  k.validate();
  RgbdFrame f(k.width, k.height);
  std::fill(f.depth.begin(), f.depth.end(), 0.0);  // misses are invalid depth
  const Vec3 light = Vec3(0.3, -1.0, -0.6).normalized();
  for (int v = 0; v < k.height; ++v) {
    for (int u = 0; u < k.width; ++u) {
      const auto i = f.index(u, v);
      const auto h = sphere_trace(scene, pixel_ray(u, v, k), ts);
      if (!h.hit) continue;
      f.depth[i] = h.point.z();
      Vec3 albedo(0.45, 0.45, 0.45);
      Vec3 n(0, -1, 0);
      if (h.primitive) {
        f.mask[i] = 1;
        // Albedo of the closest primitive.
        double best = std::numeric_limits<double>::infinity();
        for (const auto& prim : scene.primitives) {
          const auto s = prim.sdf(h.point);
          if (s.distance < best) {
            best = s.distance;
            albedo = prim.albedo;
            n = s.normal;
          }
        }
      }
      f.color.row(Eigen::Index(i)) = (albedo * (0.25 + 0.75 * std::max(0.0, n.dot(light)))).transpose();
    }
  }
  return f;
}

struct GeneratorConfig {
  CameraIntrinsics intrinsics{72.0, 72.0, 31.5, 23.5, 64, 48};
  int min_objects = 3;
  int max_objects = 5;
  double min_size = 0.06;  // largest dimension, meters
  double max_size = 0.16;
  double x_range = 0.16;
  double z_min = 0.50;
  double z_max = 0.80;
  std::optional<double> ground_y = 0.10;
  double depth_noise = 0.0;
  int max_tries = 1000;
  unsigned lod = 6;  // finest level intended for training on this data

  void validate() const {
    intrinsics.validate();
    if (min_objects < 1 || max_objects > 6 || min_objects > max_objects)
      throw ConfigError("generator: object count must satisfy 1 <= min <= max <= 6");
    if (!(min_size >= 0.04 && max_size <= 0.40 && min_size <= max_size))
      throw ConfigError("generator: sizes must lie within [0.04, 0.40] m");
    if (depth_noise < 0.0) throw ConfigError("generator: negative depth noise");
  }
};

inline nlohmann::json to_json(const GeneratorConfig& c) {
  return {{"intrinsics", io::to_json(c.intrinsics)},
          {"min_objects", c.min_objects},
          {"max_objects", c.max_objects},
          {"min_size", c.min_size},
          {"max_size", c.max_size},
          {"x_range", c.x_range},
          {"z_min", c.z_min},
          {"z_max", c.z_max},
          {"ground_y", c.ground_y ? nlohmann::json(*c.ground_y) : nlohmann::json(nullptr)},
          {"depth_noise", c.depth_noise},
          {"max_tries", c.max_tries},
          {"lod", c.lod}};
}

inline Primitive random_primitive(std::mt19937_64& rng, const GeneratorConfig& cfg) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * unit(rng); };
  Primitive p;
  p.kind = static_cast<PrimitiveKind>(std::uniform_int_distribution<int>(0, 3)(rng));
  const double half = 0.5 * uni(cfg.min_size, cfg.max_size);
  switch (p.kind) {
    case PrimitiveKind::Sphere: p.size = Vec3(half, 0, 0); break;
    case PrimitiveKind::Box: {
      p.size = Vec3(uni(0.4, 1.0) * half, uni(0.4, 1.0) * half, uni(0.4, 1.0) * half);
      const int axis = std::uniform_int_distribution<int>(0, 2)(rng);
      p.size[axis] = half;
      break;
    }
    case PrimitiveKind::Cylinder:
      if (unit(rng) < 0.5)
        p.size = Vec3(half, uni(0.3, 1.0) * half, 0);
      else
        p.size = Vec3(uni(0.3, 1.0) * half, half, 0);
      break;
    case PrimitiveKind::Capsule: {
      const double r = uni(0.25, 0.6) * half;
      p.size = Vec3(r, half - r, 0);
      break;
    }
  }
  p.rotation = Eigen::Quaterniond(Eigen::AngleAxisd(uni(0.0, 2.0 * std::numbers::pi), Vec3::UnitY()));
  p.albedo = Vec3(uni(0.2, 1.0), uni(0.2, 1.0), uni(0.2, 1.0));
  const double x = uni(-cfg.x_range, cfg.x_range);
  const double z = uni(cfg.z_min, cfg.z_max);
  const double y = cfg.ground_y ? *cfg.ground_y - p.vertical_half_extent() : uni(-0.1, 0.1);
  p.translation = Vec3(x, y, z);
  return p;
}

/// Rejection-samples a non-overlapping placement whose render shows at least
/// one foreground pixel. Returns nullopt after cfg.max_tries rejections.
inline std::optional<SceneSpec> random_scene(std::uint64_t seed, const GeneratorConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  SceneSpec scene;
  scene.intrinsics = cfg.intrinsics;
  scene.ground_y = cfg.ground_y;
  scene.seed = seed;
  const int count = std::uniform_int_distribution<int>(cfg.min_objects, cfg.max_objects)(rng);
  int tries = 0;
  while (int(scene.primitives.size()) < count) {
    if (++tries > cfg.max_tries) return std::nullopt;
    auto cand = random_primitive(rng, cfg);
    bool ok = true;
    for (const auto& other : scene.primitives) {
      if (other.sdf(cand.translation).distance < cand.bounding_radius() ||
          cand.sdf(other.translation).distance < other.bounding_radius()) {
        ok = false;
        break;
      }
    }
    if (ok) scene.primitives.push_back(cand);
  }
  return scene;
}

inline nlohmann::json to_json(const Primitive& p) {
  return {{"kind", to_string(p.kind)},
          {"rotation_wxyz", {p.rotation.w(), p.rotation.x(), p.rotation.y(), p.rotation.z()}},
          {"translation", {p.translation.x(), p.translation.y(), p.translation.z()}},
          {"size", {p.size.x(), p.size.y(), p.size.z()}},
          {"albedo", {p.albedo.x(), p.albedo.y(), p.albedo.z()}}};
}

inline nlohmann::json to_json(const SceneSpec& s) {
  nlohmann::json prims = nlohmann::json::array();
  for (const auto& p : s.primitives) prims.push_back(to_json(p));
  return {{"primitives", prims},
          {"ground_y", s.ground_y ? nlohmann::json(*s.ground_y) : nlohmann::json(nullptr)},
          {"intrinsics", io::to_json(s.intrinsics)},
          {"seed", s.seed}};
}

inline SceneSpec scene_from_json(const nlohmann::json& j) {
  try {
    SceneSpec s;
    for (const auto& jp : j.at("primitives")) {
      Primitive p;
      p.kind = kind_from_string(jp.at("kind").get<std::string>());
      const auto r = jp.at("rotation_wxyz").get<std::vector<double>>();
      const auto t = jp.at("translation").get<std::vector<double>>();
      const auto z = jp.at("size").get<std::vector<double>>();
      const auto a = jp.at("albedo").get<std::vector<double>>();
      if (r.size() != 4 || t.size() != 3 || z.size() != 3 || a.size() != 3) throw IoError("scene: bad vector length");
      p.rotation = Eigen::Quaterniond(r[0], r[1], r[2], r[3]);
      p.translation = Vec3(t[0], t[1], t[2]);
      p.size = Vec3(z[0], z[1], z[2]);
      p.albedo = Vec3(a[0], a[1], a[2]);
      s.primitives.push_back(p);
    }
    if (!j.at("ground_y").is_null()) s.ground_y = j.at("ground_y").get<double>();
    s.intrinsics = io::intrinsics_from_json(j.at("intrinsics"));
    s.seed = j.at("seed").get<std::uint64_t>();
    s.validate();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("scene: ") + e.what());
  }
}

inline std::uint64_t scene_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 of (seed, index)
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline void add_depth_noise(RgbdFrame& f, double sigma, std::uint64_t seed) {
  if (sigma <= 0.0) return;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sigma);
  for (auto& z : f.depth)
    if (valid_depth(z)) z = std::max(1e-4, z + n(rng));
}

inline std::string scene_dir_name(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04zu", index);
  return buf;
}

/// Writes scenes/NNNN/{depth.pfm, mask.pgm, color.ppm, scene.json} and
/// manifest.json under out_dir; even scene indices train, odd are held out.
inline nlohmann::json generate_dataset(std::size_t count, std::uint64_t seed, const std::filesystem::path& out_dir,
                                       const GeneratorConfig& cfg = {}) {
  if (count < 1) throw ConfigError("generate_dataset: count must be >= 1");
  cfg.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir / "scenes", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "scenes").string() + ": " + ec.message());
  nlohmann::json scenes = nlohmann::json::array();
  nlohmann::json skipped = nlohmann::json::array();
  for (std::size_t i = 0; i < count; ++i) {
    const auto s_seed = scene_seed(seed, i);
    auto spec = random_scene(s_seed, cfg);
    std::optional<RgbdFrame> frame;
    if (spec) {
      frame = render(*spec);
      if (std::count(frame->mask.begin(), frame->mask.end(), 1) == 0) spec.reset();
    }
    if (!spec) {
      std::cerr << "warning: scene " << i << " skipped (placement failed or nothing visible)\n";
      skipped.push_back(i);
      continue;
    }
    add_depth_noise(*frame, cfg.depth_noise, s_seed ^ 0xd1b54a32d192ed03ULL);
    const auto name = scene_dir_name(i);
    const auto dir = out_dir / "scenes" / name;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string());
    io::write_pfm(dir / "depth.pfm", frame->width, frame->height, frame->depth);
    io::write_pgm(dir / "mask.pgm", frame->width, frame->height, frame->mask);
    io::write_ppm(dir / "color.ppm", frame->width, frame->height, frame->color);
    io::write_json(dir / "scene.json", to_json(*spec));
    scenes.push_back({{"index", i}, {"dir", "scenes/" + name}, {"split", i % 2 == 0 ? "train" : "heldout"}});
  }
  nlohmann::json manifest = {{"seed", seed},
                             {"count", count},
                             {"intrinsics", io::to_json(cfg.intrinsics)},
                             {"generator", to_json(cfg)},
                             {"scenes", scenes},
                             {"skipped", skipped}};
  io::write_json(out_dir / "manifest.json", manifest);
  return manifest;
}

/// One scene loaded back from a generated dataset.
struct DatasetScene {
  std::size_t index = 0;
  std::string split;
  SceneSpec spec;
  RgbdFrame frame;
};

inline std::vector<DatasetScene> load_dataset(const std::filesystem::path& dir, const std::string& split = "") {
  const auto manifest = io::read_json(dir / "manifest.json");
  std::vector<DatasetScene> out;
  try {
    for (const auto& s : manifest.at("scenes")) {
      DatasetScene d;
      d.index = s.at("index").get<std::size_t>();
      d.split = s.at("split").get<std::string>();
      if (!split.empty() && d.split != split) continue;
      const auto sd = dir / s.at("dir").get<std::string>();
      d.spec = scene_from_json(io::read_json(sd / "scene.json"));
      d.frame = io::read_frame(sd / "depth.pfm", sd / "mask.pgm", sd / "color.ppm");
      if (d.frame.width != d.spec.intrinsics.width || d.frame.height != d.spec.intrinsics.height)
        throw IoError("scene " + sd.string() + ": raster size does not match intrinsics");
      out.push_back(std::move(d));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("manifest: ") + e.what());
  }
  return out;
}

}  // namespace octmae::scene
