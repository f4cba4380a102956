#pragma once

#include "octmae/nn/ops.hpp"

#include <memory>
#include <random>
#include <string>

// Parameterized building blocks. Parameters live in a ParamStore under
// dotted names ("<prefix>.w", "<prefix>.b", ...); register_* creates them,
// the matching apply function looks them up.
namespace octmae::nn {

struct AttentionConfig {
  int model_dim = 48;
  int heads = 4;
  RopeMode rope_mode = RopeMode::Literal;
  double rope_theta = 100.0;
  bool rope_per_head = false;

  void validate() const {
    if (model_dim <= 0 || heads <= 0 || model_dim % heads != 0)
      throw ConfigError("attention: model_dim must be divisible by heads");
    if (rope_mode != RopeMode::None) (void)rope_spec();
  }

  RopeSpec rope_spec() const {
    const int width = rope_per_head ? model_dim / heads : model_dim;
    return make_rope(width, rope_mode, rope_theta);
  }
};

template <typename T>
void register_linear(ParamStore<T>& ps, const std::string& name, int in, int out, std::mt19937_64& rng,
                     double gain = 1.0) {
  init_normal(ps.add(name + ".w", {std::size_t(in), std::size_t(out)}), gain / std::sqrt(double(in)), rng);
  ps.add(name + ".b", {std::size_t(out)});
}

template <typename T>
Var<T> apply_linear(Graph<T>& g, ParamStore<T>& ps, const std::string& name, Var<T> x) {
  return linear(x, g.param(ps.get(name + ".w")), g.param(ps.get(name + ".b")));
}

template <typename T>
void register_layer_norm(ParamStore<T>& ps, const std::string& name, int width) {
  init_constant(ps.add(name + ".gamma", {std::size_t(width)}), 1.0);
  ps.add(name + ".beta", {std::size_t(width)});
}

template <typename T>
Var<T> apply_layer_norm(Graph<T>& g, ParamStore<T>& ps, const std::string& name, Var<T> x) {
  return layer_norm(x, g.param(ps.get(name + ".gamma")), g.param(ps.get(name + ".beta")));
}

/// Convolution weights, (taps * cin) x cout, He-scaled.
template <typename T>
void register_conv(ParamStore<T>& ps, const std::string& name, int taps, int cin, int cout, std::mt19937_64& rng,
                   double gain = std::sqrt(2.0)) {
  init_normal(ps.add(name + ".w", {std::size_t(taps) * std::size_t(cin), std::size_t(cout)}),
              gain / std::sqrt(double(taps) * cin), rng);
  ps.add(name + ".b", {std::size_t(cout)});
}

template <typename T>
Var<T> sparse_conv(Graph<T>& g, ParamStore<T>& ps, const std::string& name, Var<T> x, const NeighborTable& table) {
  return gathered_conv(x, table, g.param(ps.get(name + ".w")), g.param(ps.get(name + ".b")));
}

template <typename T>
void register_attention(ParamStore<T>& ps, const std::string& name, const AttentionConfig& cfg, std::mt19937_64& rng) {
  const auto d = std::size_t(cfg.model_dim);
  for (const char* p : {".wq", ".wk", ".wv", ".wo"}) init_normal(ps.add(name + p, {d, d}), 1.0 / std::sqrt(double(d)), rng);
  ps.add(name + ".bo", {d});
}

/// Multi-head attention with rotary embedding of the projected queries and keys.
/// Projections carry no bias; the output projection does.
template <typename T>
Var<T> attention(Graph<T>& g, ParamStore<T>& ps, const std::string& name, Var<T> queries, Var<T> keys_values,
                 std::shared_ptr<const std::vector<Vec3>> q_coords, std::shared_ptr<const std::vector<Vec3>> kv_coords,
                 const AttentionConfig& cfg, std::vector<Mat<T>>* weights_out = nullptr) {
  if (keys_values.rows() == 0) throw ConfigError("attention over empty key set");
  auto q = matmul(queries, g.param(ps.get(name + ".wq")));
  auto k = matmul(keys_values, g.param(ps.get(name + ".wk")));
  auto v = matmul(keys_values, g.param(ps.get(name + ".wv")));
  const auto spec = cfg.rope_spec();
  q = rope(q, q_coords, spec);
  k = rope(k, kv_coords, spec);
  auto o = attention_core(q, k, v, cfg.heads, weights_out);
  return linear(o, g.param(ps.get(name + ".wo")), g.param(ps.get(name + ".bo")));
}

template <typename T>
void register_transformer_block(ParamStore<T>& ps, const std::string& name, const AttentionConfig& cfg, bool cross,
                                std::mt19937_64& rng) {
  register_layer_norm(ps, name + ".ln1", cfg.model_dim);
  if (cross) register_layer_norm(ps, name + ".ln_kv", cfg.model_dim);
  register_attention(ps, name + ".attn", cfg, rng);
  register_layer_norm(ps, name + ".ln2", cfg.model_dim);
  register_linear(ps, name + ".fc1", cfg.model_dim, 4 * cfg.model_dim, rng);
  register_linear(ps, name + ".fc2", 4 * cfg.model_dim, cfg.model_dim, rng);
}

/// Pre-norm residual block: x + Attn(LN(x), LN(kv)), then x + MLP(LN(x)).
/// Self attention when `kv` is not valid.
template <typename T>
Var<T> transformer_block(Graph<T>& g, ParamStore<T>& ps, const std::string& name, Var<T> x,
                         std::shared_ptr<const std::vector<Vec3>> coords, const AttentionConfig& cfg,
                         Var<T> kv = {}, std::shared_ptr<const std::vector<Vec3>> kv_coords = nullptr) {
  auto h = apply_layer_norm(g, ps, name + ".ln1", x);
  Var<T> a;
  if (kv.valid()) {
    auto hk = apply_layer_norm(g, ps, name + ".ln_kv", kv);
    a = attention(g, ps, name + ".attn", h, hk, coords, kv_coords, cfg);
  } else {
    a = attention(g, ps, name + ".attn", h, h, coords, coords, cfg);
  }
  x = add(x, a);
  auto m = apply_layer_norm(g, ps, name + ".ln2", x);
  m = gelu(apply_linear(g, ps, name + ".fc1", m));
  m = apply_linear(g, ps, name + ".fc2", m);
  return add(x, m);
}

/// Three zero-padded 3x3 convolutions, ReLU after the first two.
template <typename T>
void register_image_encoder(ParamStore<T>& ps, const std::string& name, int feature_dim, std::mt19937_64& rng) {
  register_conv(ps, name + ".conv1", 9, 3, feature_dim, rng);
  register_conv(ps, name + ".conv2", 9, feature_dim, feature_dim, rng);
  register_conv(ps, name + ".conv3", 9, feature_dim, feature_dim, rng, 1.0);
}

template <typename T>
Var<T> conv2d_encoder(Graph<T>& g, ParamStore<T>& ps, const std::string& name, Var<T> image, int width, int height) {
  if (image.rows() != Eigen::Index(width) * height || image.cols() != 3)
    throw ConfigError("conv2d_encoder: image must be (H*W) x 3");
  const auto table = pixel_table(width, height);
  auto x = relu(sparse_conv(g, ps, name + ".conv1", image, table));
  x = relu(sparse_conv(g, ps, name + ".conv2", x, table));
  return sparse_conv(g, ps, name + ".conv3", x, table);
}

}  // namespace octmae::nn
