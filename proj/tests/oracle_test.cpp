#include "oracle/checks.hpp"
#include "oracle/oracle.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

using namespace octmae;

TEST(OracleGrid, RoundTripAndSimpleCases) {
  std::mt19937_64 rng(1);
  const auto keys = diag::random_keys(3, 90, rng);
  MatD f(Eigen::Index(keys.size()), 3);
  diag::fill_random(f, rng);
  const auto [k2, f2] = oracle::sparsify(oracle::densify(keys, f, 3, 8), 3);
  EXPECT_EQ(k2, keys);
  EXPECT_EQ(f2, f);

  const auto empty = oracle::densify({}, MatD(0, 2), 2, 4);
  EXPECT_TRUE(std::all_of(empty.values.begin(), empty.values.end(), [](double v) { return v == 0.0; }));

  const std::vector<VoxelKey> one{{3, 1, 2, 3}};
  const auto g = oracle::densify(one, MatD::Ones(1, 1), 3, 8);
  EXPECT_EQ(std::count_if(g.values.begin(), g.values.end(), [](double v) { return v != 0.0; }), 1);
  EXPECT_EQ(g.at(1, 2, 3, 0), 1.0);
  EXPECT_THROW(oracle::densify(one, MatD::Ones(1, 1), 3, 4), std::invalid_argument);
}

TEST(OracleConv, IdentityAndZeroKernels) {
  std::mt19937_64 rng(2);
  const auto keys = diag::random_keys(2, 30, rng);
  MatD f(Eigen::Index(keys.size()), 2);
  diag::fill_random(f, rng);
  const auto grid = oracle::densify(keys, f, 2, 4);
  MatD w = MatD::Zero(27 * 2, 2);
  w.middleRows(13 * 2, 2) = MatD::Identity(2, 2);
  const auto same = oracle::dense_conv3(grid, w, MatD::Zero(1, 2));
  EXPECT_EQ(same.values, grid.values);
  const MatD bias = (MatD(1, 2) << 0.25, -3.0).finished();
  const auto biased = oracle::dense_conv3(grid, MatD::Zero(27 * 2, 2), bias);
  for (std::size_t i = 0; i < biased.values.size(); ++i) EXPECT_EQ(biased.values[i], bias(0, Eigen::Index(i % 2)));
}

TEST(OracleConv, MatchesSparseConv) { EXPECT_LE(checks::conv_equivalence(3, 20), 1e-6); }

TEST(OracleAttention, RotationIsOrthonormal) {
  std::mt19937_64 rng(4);
  const auto freqs = oracle::literal_frequencies(48);
  for (int i = 0; i < 50; ++i) {
    const Vec3 p = Vec3::Random();
    const auto R = oracle::rotation_matrix(p, 48, freqs);
    EXPECT_LE((R.transpose() * R - Eigen::MatrixXd::Identity(48, 48)).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(OracleAttention, FrequenciesAgreeWithLibrary) {
  for (int d : {12, 24, 48, 192}) {
    const auto f = oracle::literal_frequencies(d);
    const auto spec = nn::make_rope(d, nn::RopeMode::Literal);
    ASSERT_EQ(f.size(), spec.theta.size());
    for (std::size_t i = 0; i < f.size(); ++i) EXPECT_NEAR(f[i], spec.theta[i], 1e-12 * std::max(1.0, f[i]));
  }
}

TEST(OracleAttention, SingleTokenIsValuePath) {
  Eigen::MatrixXd x = Eigen::MatrixXd::Random(1, 12), kv = Eigen::MatrixXd::Random(1, 12);
  oracle::AttentionWeights w{Eigen::MatrixXd::Random(12, 12), Eigen::MatrixXd::Random(12, 12),
                             Eigen::MatrixXd::Random(12, 12), Eigen::MatrixXd::Random(12, 12),
                             Eigen::RowVectorXd::Random(12)};
  const auto out = oracle::dense_rope_attention(x, {Vec3(0.5, 0.25, 0)}, kv, {Vec3(0.1, 0.2, 0.3)}, w, 2,
                                                oracle::literal_frequencies(12));
  const Eigen::MatrixXd expect = kv * w.wv * w.wo + w.bo;
  EXPECT_LE((out - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(OracleAttention, MatchesLibraryAttention) { EXPECT_LE(checks::attention_equivalence(5, 20), 1e-6); }

TEST(OracleOcclusion, EmptyMaskHasNoOccludedCells) {
  CameraIntrinsics k{40, 40, 15.5, 11.5, 32, 24};
  const auto frame = testing_support::flat_frame(32, 24, 0.7, false);
  for (const auto& c : oracle::brute_occlusion(Vec3(-0.32, -0.32, 0.5), 0.64, 3, frame, k, 0.01))
    EXPECT_NE(c.state, oracle::CellState::Occluded);
  const auto copy = frame;
  const auto a = oracle::brute_occlusion(Vec3(-0.32, -0.32, 0.5), 0.64, 3, frame, k, 0.01);
  const auto b = oracle::brute_occlusion(Vec3(-0.32, -0.32, 0.5), 0.64, 3, copy, k, 0.01);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].state, b[i].state);
}

TEST(OracleOcclusion, FrontalWallMatchesMaskTokens) {
  CameraIntrinsics k{40, 40, 15.5, 11.5, 32, 24};
  const double wall = 0.8;
  const auto frame = testing_support::flat_frame(32, 24, wall, true);
  OctreeGeometry geometry;
  geometry.origin = Vec3(-0.32, -0.32, 0.6);
  geometry.extent = 0.64;
  geometry.max_lod = 6;
  const double tol = 0.01;
  nn::ParamStore<double> ps;
  ps.add("mae.mask_token", {3});
  nn::Graph<double> g(false);
  for (unsigned level : {3u, 4u, 5u}) {
    LevelFeatures<double> none{level, {}, g.constant(MatD(0, 3))};
    const auto t = place_mask_tokens(g, ps, none, geometry, frame, k, MaskingMode::Occlusion, tol);
    std::size_t expect = 0;
    for (const auto& c : oracle::brute_occlusion(geometry.origin, geometry.extent, level, frame, k, tol))
      expect += c.state == oracle::CellState::Occluded;
    EXPECT_EQ(t.masked_keys.size(), expect) << "level " << level;
    EXPECT_GT(expect, 0u);
    for (const auto& key : t.masked_keys) EXPECT_GT(geometry.center(key).z(), wall + tol);
  }
}

TEST(OracleOcclusion, GeneratedScenesMatch) {
  const auto a = checks::occlusion_equivalence(6, 5);
  EXPECT_EQ(a.scenes, 5);
  EXPECT_EQ(a.set_mismatches, 0);
  EXPECT_EQ(a.dense_below_occlusion, 0);
  EXPECT_GT(a.occlusion_tokens, 0u);
}

TEST(OracleMetrics, NearestNeighborScanMatchesHashGrid) {
  const auto a = checks::nearest_neighbor_equivalence(7, 10);
  EXPECT_EQ(a.mismatches, 0u);
  EXPECT_EQ(a.queries, 2000u);
}

TEST(OracleMetrics, ChamferAndNormalConsistencyMatch) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 0.05);
  metrics::SurfaceSample a, b;
  for (int i = 0; i < 300; ++i) {
    a.points.emplace_back(n(rng), n(rng), n(rng));
    a.normals.push_back(Vec3::Random().normalized());
  }
  for (int i = 0; i < 170; ++i) {
    b.points.emplace_back(n(rng), n(rng), n(rng));
    b.normals.push_back(Vec3::Random().normalized());
  }
  EXPECT_NEAR(metrics::chamfer(a, b), oracle::brute_chamfer_mm(a.points, b.points), 1e-9);
  EXPECT_NEAR(metrics::normal_consistency(a, b), oracle::brute_nc(a.points, a.normals, b.points, b.normals), 1e-12);
}

TEST(OracleRay, ClosedFormIntersectionsAgainstKnownHits) {
  scene::Primitive s;
  s.kind = scene::PrimitiveKind::Sphere;
  s.size = Vec3(0.1, 0, 0);
  s.translation = Vec3(0, 0, 1);
  EXPECT_NEAR(*oracle::intersect(s, Vec3::Zero(), Vec3::UnitZ()), 0.9, 1e-15);
  scene::Primitive box;
  box.kind = scene::PrimitiveKind::Box;
  box.size = Vec3(0.1, 0.2, 0.3);
  box.translation = Vec3(0, 0, 1);
  EXPECT_NEAR(*oracle::intersect(box, Vec3::Zero(), Vec3::UnitZ()), 0.7, 1e-15);
  scene::Primitive cyl;
  cyl.kind = scene::PrimitiveKind::Cylinder;
  cyl.size = Vec3(0.1, 0.2, 0);
  cyl.translation = Vec3(0, 0, 1);
  EXPECT_NEAR(*oracle::intersect(cyl, Vec3::Zero(), Vec3::UnitZ()), 0.9, 1e-15);
  EXPECT_NEAR(*oracle::intersect(cyl, Vec3(0, -1, 1), Vec3::UnitY()), 0.8, 1e-15);
  scene::Primitive cap = cyl;
  cap.kind = scene::PrimitiveKind::Capsule;
  EXPECT_NEAR(*oracle::intersect(cap, Vec3(0, -1, 1), Vec3::UnitY()), 0.7, 1e-15);
  EXPECT_FALSE(oracle::intersect(s, Vec3::Zero(), Vec3::UnitX()).has_value());
}

TEST(OracleDilation, MatchesLibrary) {
  std::mt19937_64 rng(9);
  for (int r : {0, 1, 3, 5}) {
    std::vector<std::uint8_t> m(20 * 15, 0);
    for (auto& v : m) v = rng() % 17 == 0;
    EXPECT_EQ(train::dilate_mask(m, 20, 15, r), oracle::brute_dilate(m, 20, 15, r)) << "radius " << r;
  }
}
