#include "octmae/ply.hpp"
#include "octmae/scenegen.hpp"
#include "oracle/oracle.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace octmae;
using scene::Primitive;
using scene::PrimitiveKind;

namespace {

Primitive make(PrimitiveKind kind, const Vec3& size, const Vec3& at, double yaw = 0.0) {
  Primitive p;
  p.kind = kind;
  p.size = size;
  p.translation = at;
  p.rotation = Eigen::Quaterniond(Eigen::AngleAxisd(yaw, Vec3::UnitY()));
  return p;
}

std::vector<Primitive> all_kinds() {
  return {make(PrimitiveKind::Sphere, Vec3(0.05, 0, 0), Vec3(0.0, 0.0, 0.6)),
          make(PrimitiveKind::Box, Vec3(0.03, 0.05, 0.04), Vec3(0.1, 0.0, 0.7), 0.4),
          make(PrimitiveKind::Cylinder, Vec3(0.04, 0.06, 0), Vec3(-0.1, 0.02, 0.65), 1.1),
          make(PrimitiveKind::Capsule, Vec3(0.025, 0.04, 0), Vec3(0.0, -0.1, 0.75), 2.0)};
}

}  // namespace

TEST(Sdf, Examples) {
  const auto sphere = make(PrimitiveKind::Sphere, Vec3(0.1, 0, 0), Vec3(0, 0, 1));
  EXPECT_NEAR(sphere.sdf(Vec3(0, 0, 0.5)).distance, 0.4, 1e-15);
  EXPECT_NEAR(sphere.sdf(Vec3(0, 0, 1)).distance, -0.1, 1e-15);
  EXPECT_NEAR(sphere.sdf(Vec3(0, 0.1, 1)).distance, 0.0, 1e-15);
  const auto box = make(PrimitiveKind::Box, Vec3(0.1, 0.2, 0.3), Vec3::Zero());
  EXPECT_NEAR(box.sdf(Vec3(0.5, 0, 0)).distance, 0.4, 1e-15);
  EXPECT_NEAR(box.sdf(Vec3(0.05, 0, 0)).distance, -0.05, 1e-15);
  EXPECT_NEAR(box.sdf(Vec3(0.4, 0.6, 0)).distance, 0.5, 1e-15);
  EXPECT_LT(box.sdf(Vec3::Zero()).distance, 0.0);
  const auto cyl = make(PrimitiveKind::Cylinder, Vec3(0.1, 0.2, 0), Vec3::Zero());
  EXPECT_NEAR(cyl.sdf(Vec3(0, 0.5, 0)).distance, 0.3, 1e-15);
  EXPECT_NEAR(cyl.sdf(Vec3(0.3, 0, 0)).distance, 0.2, 1e-15);
  const auto cap = make(PrimitiveKind::Capsule, Vec3(0.1, 0.2, 0), Vec3::Zero());
  EXPECT_NEAR(cap.sdf(Vec3(0, 0.5, 0)).distance, 0.2, 1e-15);
  EXPECT_NEAR(cap.sdf(Vec3(0.3, 0.1, 0)).distance, 0.2, 1e-15);
}

TEST(Sdf, NormalMatchesFiniteDifferenceGradient) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-0.15, 0.15);
  const double h = 1e-7;
  for (const auto& p : all_kinds()) {
    int checked = 0;
    while (checked < 200) {
      const Vec3 x = p.translation + Vec3(u(rng), u(rng), u(rng));
      const auto s = p.sdf(x);
      Vec3 fd;
      for (int a = 0; a < 3; ++a) {
        Vec3 dx = Vec3::Zero();
        dx[a] = h;
        fd[a] = (p.sdf(x + dx).distance - p.sdf(x - dx).distance) / (2 * h);
      }
      // Skip points near creases and the medial axis where the field is not differentiable.
      if (std::abs(fd.norm() - 1.0) > 1e-6) continue;
      EXPECT_LE((fd - s.normal).norm(), 1e-5) << scene::to_string(p.kind) << " at " << x.transpose();
      ++checked;
    }
  }
}

TEST(Sdf, IsOneLipschitz) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  scene::SceneSpec spec;
  spec.primitives = all_kinds();
  for (int i = 0; i < 2000; ++i) {
    const Vec3 a(u(rng), u(rng), 0.6 + u(rng)), b(u(rng), u(rng), 0.6 + u(rng));
    EXPECT_LE(std::abs(scene::scene_sdf(spec, a).distance - scene::scene_sdf(spec, b).distance),
              (a - b).norm() + 1e-12);
  }
}

TEST(Render, EmptySceneHasZeroDepthAndEmptyMask) {
  scene::SceneSpec spec;
  spec.intrinsics = {40, 40, 15.5, 11.5, 32, 24};
  const auto f = scene::render(spec);
  EXPECT_TRUE(std::all_of(f.depth.begin(), f.depth.end(), [](double z) { return z == 0.0; }));
  EXPECT_TRUE(std::all_of(f.mask.begin(), f.mask.end(), [](std::uint8_t m) { return m == 0; }));
}

TEST(Render, CenteredSphereDepth) {
  scene::SceneSpec spec;
  spec.intrinsics = {80, 80, 32, 24, 65, 49};  // pixel (32, 24) is the optical axis
  spec.primitives = {make(PrimitiveKind::Sphere, Vec3(0.1, 0, 0), Vec3(0, 0, 1))};
  const auto f = scene::render(spec);
  const auto i = f.index(32, 24);
  EXPECT_EQ(f.mask[i], 1);
  EXPECT_NEAR(f.depth[i], 0.9, 2e-4);
}

TEST(Render, AgreesWithClosedFormRayCasting) {
  scene::SceneSpec spec;
  spec.intrinsics = {72.0, 72.0, 31.5, 23.5, 64, 48};
  spec.primitives = all_kinds();
  spec.ground_y = 0.1;
  const auto f = scene::render(spec);
  const auto& k = spec.intrinsics;
  std::size_t hits = 0, grazing = 0;
  for (int v = 0; v < k.height; ++v) {
    for (int u = 0; u < k.width; ++u) {
      const Vec3 d = scene::pixel_ray(u, v, k);
      auto hit = oracle::cast_ray(spec, d);
      if (hit && hit->t > scene::TraceSettings{}.max_range) hit.reset();  // beyond the tracer's range
      const auto i = f.index(u, v);
      const bool exact = hit && hit->primitive;
      if (f.mask[i]) {
        const Vec3 p = unproject_pixel(u, v, f.depth[i], k);
        EXPECT_LE(std::abs(scene::scene_sdf(spec, p).distance), 5e-4);
      }
      if (f.mask[i] && !exact) {
        // The tracer stops within its hit threshold, so rays that graze a
        // silhouette or a ground contact count as primitive hits.
        ++grazing;
        continue;
      }
      EXPECT_EQ(f.mask[i], exact ? 1 : 0) << u << "," << v;
      // Background pixels at grazing incidence may exhaust the step budget.
      if (!hit || (!exact && f.depth[i] == 0.0)) continue;
      // Along a ray the threshold stretches by 1/cos of the incidence angle;
      // for the ground plane that factor is d.z / d.y.
      const double tol = exact ? 5e-4 : 2e-4 * d.z() / d.y();
      EXPECT_NEAR(f.depth[i], hit->t * d.z(), tol) << u << "," << v;
      ++hits;
    }
  }
  EXPECT_LE(grazing, f.mask.size() / 100);
  EXPECT_GT(hits, 100u);
}

TEST(Render, ColorIsFiniteAndInRange) {
  scene::SceneSpec spec;
  spec.intrinsics = {40, 40, 15.5, 11.5, 32, 24};
  spec.primitives = {make(PrimitiveKind::Box, Vec3(0.05, 0.05, 0.05), Vec3(0, 0, 0.5), 0.7)};
  const auto f = scene::render(spec);
  EXPECT_TRUE(f.color.allFinite());
  EXPECT_GE(f.color.minCoeff(), 0.0);
  EXPECT_LE(f.color.maxCoeff(), 1.0);
}

TEST(Generator, ScenesAreSeededAndNonOverlapping) {
  scene::GeneratorConfig cfg;
  for (std::uint64_t i = 0; i < 20; ++i) {
    const auto a = scene::random_scene(scene::scene_seed(9, i), cfg);
    const auto b = scene::random_scene(scene::scene_seed(9, i), cfg);
    ASSERT_TRUE(a && b);
    EXPECT_EQ(scene::to_json(*a), scene::to_json(*b));
    ASSERT_GE(a->primitives.size(), 3u);
    ASSERT_LE(a->primitives.size(), 5u);
    for (std::size_t x = 0; x < a->primitives.size(); ++x) {
      const auto& p = a->primitives[x];
      EXPECT_GE(p.largest_dimension(), cfg.min_size - 1e-12);
      EXPECT_LE(p.largest_dimension(), cfg.max_size + 1e-12);
      EXPECT_NEAR(p.translation.y() + p.vertical_half_extent(), *cfg.ground_y, 1e-12);
      for (std::size_t y = x + 1; y < a->primitives.size(); ++y)
        EXPECT_GE(a->primitives[y].sdf(p.translation).distance, p.bounding_radius());
    }
  }
  EXPECT_NE(scene::scene_seed(9, 0), scene::scene_seed(9, 1));
  EXPECT_NE(scene::scene_seed(9, 0), scene::scene_seed(10, 0));
}

TEST(Generator, ImpossiblePlacementGivesUp) {
  scene::GeneratorConfig cfg;
  cfg.min_objects = cfg.max_objects = 6;
  cfg.min_size = cfg.max_size = 0.4;
  cfg.x_range = 0.0;
  cfg.z_min = cfg.z_max = 0.6;
  cfg.max_tries = 50;
  EXPECT_FALSE(scene::random_scene(1, cfg).has_value());
  cfg.max_objects = 7;
  EXPECT_THROW(scene::random_scene(1, cfg), ConfigError);
}

TEST(Dataset, ByteIdenticalAcrossRunsWithManifestCounts) {
  testing_support::TempDir dir;
  scene::GeneratorConfig cfg;
  cfg.intrinsics = {36.0, 36.0, 15.5, 11.5, 32, 24};
  const auto m = scene::generate_dataset(6, 17, dir / "a", cfg);
  scene::generate_dataset(6, 17, dir / "b", cfg);
  namespace fs = std::filesystem;
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir / "a")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir / "a");
    EXPECT_EQ(testing_support::slurp(e.path()), testing_support::slurp(dir.path() / "b" / rel)) << rel;
    ++files;
  }
  EXPECT_EQ(m.at("scenes").size() + m.at("skipped").size(), 6u);
  EXPECT_EQ(files, 1 + 4 * m.at("scenes").size());
  const auto train = scene::load_dataset(dir / "a", "train");
  const auto held = scene::load_dataset(dir / "a", "heldout");
  EXPECT_EQ(train.size() + held.size(), m.at("scenes").size());
  for (const auto& d : train) EXPECT_EQ(d.index % 2, 0u);
  for (const auto& d : held) {
    EXPECT_EQ(d.index % 2, 1u);
    EXPECT_GE(std::count(d.frame.mask.begin(), d.frame.mask.end(), 1), 1);
  }
  // Stored depth is float32; the stored frame matches a fresh render to that precision.
  const auto& d = train.front();
  const auto fresh = scene::render(d.spec);
  EXPECT_EQ(fresh.mask, d.frame.mask);
  // Misses are written as 0 and read back as NaN; both are invalid depth.
  for (std::size_t i = 0; i < fresh.depth.size(); ++i) {
    ASSERT_EQ(valid_depth(fresh.depth[i]), valid_depth(d.frame.depth[i]));
    if (valid_depth(fresh.depth[i])) EXPECT_NEAR(fresh.depth[i], d.frame.depth[i], 1e-6 * fresh.depth[i]);
  }
}

TEST(Dataset, ForegroundCoverageOfDefaultScenes) {
  // Default 64x48 camera: objects cover a moderate fraction of the image.
  scene::GeneratorConfig cfg;
  double lo = 1.0, hi = 0.0;
  for (std::uint64_t i = 0; i < 64; ++i) {
    const auto spec = scene::random_scene(scene::scene_seed(42, i), cfg);
    ASSERT_TRUE(spec);
    const auto f = scene::render(*spec);
    const double c = double(std::count(f.mask.begin(), f.mask.end(), 1)) / double(f.mask.size());
    lo = std::min(lo, c);
    hi = std::max(hi, c);
  }
  EXPECT_GE(lo, 0.02);
  EXPECT_LE(hi, 0.60);
}

TEST(Dataset, MissingManifestIsIoError) {
  testing_support::TempDir dir;
  EXPECT_THROW(scene::load_dataset(dir.path()), IoError);
}

TEST(SceneJson, RoundTrip) {
  scene::SceneSpec spec;
  spec.primitives = all_kinds();
  spec.ground_y = 0.1;
  spec.intrinsics = {72.0, 72.0, 31.5, 23.5, 64, 48};
  spec.seed = 77;
  const auto back = scene::scene_from_json(scene::to_json(spec));
  EXPECT_EQ(scene::to_json(back), scene::to_json(spec));
  EXPECT_THROW(scene::scene_from_json({{"primitives", 3}}), IoError);
  auto j = scene::to_json(spec);
  j["primitives"][0]["kind"] = "torus";
  EXPECT_THROW(scene::scene_from_json(j), Error);
}

TEST(Ply, WriteReadRoundTripAndErrors) {
  testing_support::TempDir dir;
  ply::VertexTable t;
  t.names = {"x", "y", "z", "prob"};
  t.values = MatD(3, 4);
  t.values << 0.1, 0.2, 0.3, 0.9, -1, 2, -3, 0.5, 1e-3, 0, 7, 1;
  ply::write(dir / "a.ply", t, {"test"});
  const auto back = ply::read(dir / "a.ply");
  EXPECT_EQ(back.names, t.names);
  EXPECT_EQ(back.size(), 3u);
  EXPECT_LE((back.values - t.values).cwiseAbs().maxCoeff(), 1e-9);
  io::detail::write_file(dir / "bad.ply", "ply\nformat binary_little_endian 1.0\nend_header\n");
  EXPECT_THROW(ply::read(dir / "bad.ply"), IoError);
  io::detail::write_file(dir / "short.ply", "ply\nformat ascii 1.0\nelement vertex 2\nproperty double x\nend_header\n1\n");
  EXPECT_THROW(ply::read(dir / "short.ply"), IoError);
}
