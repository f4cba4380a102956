#pragma once

#include "octmae/nn/grad_check.hpp"
#include "octmae/nn/layers.hpp"
#include "octmae/scenegen.hpp"
#include "octmae/train.hpp"

#include <functional>
#include <random>
#include <set>
#include <string>
#include <vector>

// Gradient-check suite over every differentiable kernel plus the end-to-end
// loss on a small two-object scene.
namespace octmae::diag {

inline constexpr double kKernelTolerance = 1e-5;
inline constexpr double kEndToEndTolerance = 1e-4;

/// `count` distinct random keys at `level`, Morton-sorted.
inline std::vector<VoxelKey> random_keys(unsigned level, std::size_t count, std::mt19937_64& rng) {
  const std::uint64_t cells = std::uint64_t(1) << (3 * level);
  count = std::min<std::size_t>(count, cells);
  std::set<std::uint64_t> codes;
  std::uniform_int_distribution<std::uint64_t> pick(0, cells - 1);
  while (codes.size() < count) codes.insert(pick(rng));
  std::vector<VoxelKey> keys;
  for (auto c : codes) keys.push_back(VoxelKey::from_code(c, level));
  return keys;
}

/// Random values with magnitude at least `gap`, so rectifier kinks stay
/// far from the finite-difference step.
inline void fill_random(Mat<double>& m, std::mt19937_64& rng, double gap = 0.0) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    double v = n(rng);
    if (gap > 0.0) v = (v < 0 ? -1.0 : 1.0) * (gap + std::abs(v));
    m.data()[i] = v;
  }
}

inline nn::Param<double>& random_param(nn::ParamStore<double>& ps, const std::string& name, std::size_t rows,
                                       std::size_t cols, std::mt19937_64& rng, double gap = 0.0) {
  auto& p = ps.add(name, {rows, cols});
  fill_random(p.value, rng, gap);
  return p;
}

struct CheckOutcome {
  std::string name;
  double tolerance = kKernelTolerance;
  nn::GradCheckResult result;
  bool passed() const { return result.checked > 0 && result.max_rel_error <= tolerance; }
};

using Builder = std::function<nn::Var<double>(nn::Graph<double>&)>;

inline CheckOutcome run_check(const std::string& name, nn::ParamStore<double>& ps, const Builder& build,
                              std::uint64_t seed, double tol = kKernelTolerance, std::size_t max_entries = 0) {
  return {name, tol, nn::grad_check(build, {&ps}, seed, 1e-5, 1e-3, max_entries)};
}

inline std::vector<CheckOutcome> kernel_checks(std::uint64_t seed) {
  std::vector<CheckOutcome> out;
  std::mt19937_64 rng(seed);
  using G = nn::Graph<double>;
  auto P = [](G& g, nn::ParamStore<double>& ps, const char* n) { return g.param(ps.get(n)); };

  {
    nn::ParamStore<double> ps;
    random_param(ps, "a", 5, 4, rng);
    random_param(ps, "b", 4, 3, rng);
    out.push_back(run_check("matmul", ps, [&](G& g) { return nn::matmul(P(g, ps, "a"), P(g, ps, "b")); }, seed));
  }
  {
    nn::ParamStore<double> ps;
    random_param(ps, "x", 6, 4, rng);
    random_param(ps, "w", 4, 3, rng);
    random_param(ps, "b", 1, 3, rng);
    out.push_back(run_check("linear", ps, [&](G& g) { return nn::linear(P(g, ps, "x"), P(g, ps, "w"), P(g, ps, "b")); }, seed));
  }
  {
    nn::ParamStore<double> ps;
    random_param(ps, "a", 4, 3, rng);
    random_param(ps, "b", 4, 3, rng);
    out.push_back(run_check("add_sub_mul_scale", ps, [&](G& g) {
      auto a = P(g, ps, "a"), b = P(g, ps, "b");
      return nn::scale(nn::add(nn::mul(a, b), nn::sub(a, b)), 0.7);
    }, seed));
  }
  {
    nn::ParamStore<double> ps;
    random_param(ps, "x", 5, 4, rng, 0.05);
    out.push_back(run_check("relu", ps, [&](G& g) { return nn::relu(P(g, ps, "x")); }, seed));
  }
  {
    nn::ParamStore<double> ps;
    random_param(ps, "x", 5, 4, rng);
    out.push_back(run_check("gelu", ps, [&](G& g) { return nn::gelu(P(g, ps, "x")); }, seed));
  }
  {
    nn::ParamStore<double> ps;
    random_param(ps, "x", 5, 4, rng);
    out.push_back(run_check("sigmoid", ps, [&](G& g) { return nn::sigmoid(P(g, ps, "x")); }, seed));
  }
  {
    nn::ParamStore<double> ps;
    random_param(ps, "x", 5, 6, rng);
    random_param(ps, "gamma", 1, 6, rng);
    random_param(ps, "beta", 1, 6, rng);
    out.push_back(run_check("layer_norm", ps, [&](G& g) {
      return nn::layer_norm(P(g, ps, "x"), P(g, ps, "gamma"), P(g, ps, "beta"));
    }, seed));
  }
  {
    nn::ParamStore<double> ps;
    random_param(ps, "x", 6, 3, rng);
    out.push_back(run_check("normalize_rows", ps, [&](G& g) { return nn::normalize_rows(P(g, ps, "x")); }, seed));
  }
  {
    nn::ParamStore<double> ps;
    random_param(ps, "a", 3, 4, rng);
    random_param(ps, "b", 2, 4, rng);
    out.push_back(run_check("concat_gather_rows", ps, [&](G& g) {
      auto c = nn::concat_rows(P(g, ps, "a"), P(g, ps, "b"));
      return nn::gather_rows(c, {4, 0, kAbsent, 2, 2, 1});
    }, seed));
  }
  {
    nn::ParamStore<double> ps;
    random_param(ps, "x", 7, 3, rng);
    out.push_back(run_check("gather_mean", ps, [&](G& g) {
      return nn::gather_mean(P(g, ps, "x"), {0, 2, 3, 7}, {6, 1, 0, 2, 3, 4, 5});
    }, seed));
  }
  {
    nn::ParamStore<double> ps;
    const auto keys = random_keys(3, 40, rng);
    random_param(ps, "x", keys.size(), 3, rng);
    random_param(ps, "w", 27 * 3, 4, rng);
    random_param(ps, "b", 1, 4, rng);
    const auto table = neighbor_indices(std::span<const VoxelKey>(keys), stencil27());
    out.push_back(run_check("sparse_conv", ps, [&](G& g) {
      return nn::gathered_conv(P(g, ps, "x"), table, P(g, ps, "w"), P(g, ps, "b"));
    }, seed));
  }
  {
    nn::ParamStore<double> ps;
    const auto fine = random_keys(3, 30, rng);
    const auto coarse = ancestors(fine, 2);
    random_param(ps, "x", fine.size(), 3, rng);
    random_param(ps, "w", 8 * 3, 2, rng);
    random_param(ps, "b", 1, 2, rng);
    const auto table = child_table(coarse, fine);
    out.push_back(run_check("down_conv", ps, [&](G& g) {
      return nn::gathered_conv(P(g, ps, "x"), table, P(g, ps, "w"), P(g, ps, "b"));
    }, seed));
  }
  {
    nn::ParamStore<double> ps;
    const auto coarse = random_keys(2, 6, rng);
    const auto fine = expand(std::span<const VoxelKey>(coarse));
    random_param(ps, "x", coarse.size(), 3, rng);
    random_param(ps, "w", 8 * 3, 2, rng);
    random_param(ps, "b", 1, 2, rng);
    const auto table = parent_table(fine, coarse);
    out.push_back(run_check("up_conv", ps, [&](G& g) {
      return nn::gathered_conv(P(g, ps, "x"), table, P(g, ps, "w"), P(g, ps, "b"));
    }, seed));
  }
  {
    nn::ParamStore<double> ps;
    const int w = 5, h = 4;
    random_param(ps, "x", std::size_t(w * h), 3, rng);
    random_param(ps, "w", 9 * 3, 2, rng);
    random_param(ps, "b", 1, 2, rng);
    const auto table = nn::pixel_table(w, h);
    out.push_back(run_check("pixel_conv", ps, [&](G& g) {
      return nn::gathered_conv(P(g, ps, "x"), table, P(g, ps, "w"), P(g, ps, "b"));
    }, seed));
  }
  {
    nn::ParamStore<double> ps;
    random_param(ps, "x", 5, 12, rng);
    auto coords = std::make_shared<std::vector<Vec3>>();
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 5; ++i) coords->emplace_back(u(rng), u(rng), u(rng));
    const auto spec = nn::make_rope(12, nn::RopeMode::Literal);
    out.push_back(run_check("rope", ps, [&, coords](G& g) { return nn::rope(P(g, ps, "x"), coords, spec); }, seed));
  }
  {
    nn::ParamStore<double> ps;
    random_param(ps, "q", 5, 8, rng);
    random_param(ps, "k", 7, 8, rng);
    random_param(ps, "v", 7, 8, rng);
    out.push_back(run_check("attention_core", ps, [&](G& g) {
      return nn::attention_core(P(g, ps, "q"), P(g, ps, "k"), P(g, ps, "v"), 2);
    }, seed));
  }
  {
    nn::ParamStore<double> ps;
    nn::AttentionConfig cfg{12, 2, nn::RopeMode::Literal, 100.0, false};
    nn::register_transformer_block(ps, "blk", cfg, true, rng);
    for (auto& p : ps) {
      fill_random(p.value, rng);
      p.value *= 0.5;
    }
    random_param(ps, "x", 5, 12, rng);
    random_param(ps, "kv", 6, 12, rng);
    auto xc = std::make_shared<std::vector<Vec3>>();
    auto kc = std::make_shared<std::vector<Vec3>>();
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 5; ++i) xc->emplace_back(u(rng), u(rng), u(rng));
    for (int i = 0; i < 6; ++i) kc->emplace_back(u(rng), u(rng), u(rng));
    out.push_back(run_check("transformer_block", ps, [&, xc, kc](G& g) {
      return nn::transformer_block(g, ps, "blk", P(g, ps, "x"), xc, cfg, P(g, ps, "kv"), kc);
    }, seed));
  }
  {
    nn::ParamStore<double> ps;
    auto& p = ps.add("p", {9, 1});
    std::uniform_real_distribution<double> u(0.05, 0.95);
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = u(rng);
    std::vector<double> labels{1, 0, 0, 1, 1, 0, 1, 0, 1};
    out.push_back(run_check("bce_mean", ps, [&](G& g) { return nn::bce_mean(P(g, ps, "p"), labels); }, seed));
  }
  {
    nn::ParamStore<double> ps;
    random_param(ps, "n", 6, 3, rng);
    random_param(ps, "s", 6, 1, rng);
    Mat<double> tn(6, 3), ts(6, 1);
    fill_random(tn, rng);
    fill_random(ts, rng);
    out.push_back(run_check("normal_sdf_losses", ps, [&](G& g) {
      auto l = train::normal_sdf_loss(P(g, ps, "n"), tn, P(g, ps, "s"), ts);
      return nn::add_scalars(g, {l.normal, l.sdf, nn::sum(P(g, ps, "s"))});
    }, seed));
  }
  return out;
}

/// Two-object scene observed by a small camera; fits a 0.32 m grid.
inline scene::SceneSpec micro_scene() {
  scene::SceneSpec s;
  s.intrinsics = {30.0, 30.0, 11.5, 8.5, 24, 18};
  scene::Primitive a;
  a.kind = scene::PrimitiveKind::Sphere;
  a.size = Vec3(0.05, 0, 0);
  a.translation = Vec3(-0.045, 0.0, 0.42);
  a.albedo = Vec3(0.9, 0.3, 0.2);
  scene::Primitive b;
  b.kind = scene::PrimitiveKind::Box;
  b.size = Vec3(0.035, 0.05, 0.04);
  b.rotation = Eigen::Quaterniond(Eigen::AngleAxisd(0.5, Vec3::UnitY()));
  b.translation = Vec3(0.06, 0.01, 0.47);
  b.albedo = Vec3(0.2, 0.5, 0.9);
  s.primitives = {a, b};
  return s;
}

inline NetConfig micro_config() {
  NetConfig c;
  c.max_lod = 4;
  c.latent_lod = 2;
  c.extent = 0.32;
  c.feature_dim = 4;
  c.channels = {4, 6};
  c.model_dim = 12;
  c.heads = 2;
  c.mae_layers = 1;
  c.occlusion_tolerance = 0.01;
  return c;
}

/// Central differences of the full teacher-forced loss with respect to a
/// sample of entries of every parameter tensor.
inline CheckOutcome end_to_end_check(std::uint64_t seed, std::size_t entries_per_param = 4) {
  const auto spec = micro_scene();
  const auto frame = scene::render(spec);
  const auto cfg = micro_config();
  auto ps = init_params<double>(cfg, seed);
  // Zero biases put rectifiers exactly on their kink for constant-color
  // pixels; evaluate at a generic point instead.
  std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
  std::normal_distribution<double> jitter(0.0, 0.1);
  for (auto& p : ps)
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] += jitter(rng);
  return run_check("end_to_end_loss", ps, [&](nn::Graph<double>& g) {
    return train::scene_loss(g, ps, cfg, spec, frame).total;
  }, seed, kEndToEndTolerance, entries_per_param);
}

}  // namespace octmae::diag
