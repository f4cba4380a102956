#pragma once

#include "octmae/camera.hpp"
#include "octmae/nn/layers.hpp"
#include "octmae/octree.hpp"
#include "octmae/ply.hpp"

#include <json.hpp>

#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace octmae {

enum class MaskingMode { Occlusion, Dense, None };
enum class DecoderAttention { Cross, Self };

inline const char* to_string(MaskingMode m) {
  switch (m) {
    case MaskingMode::Occlusion: return "occlusion";
    case MaskingMode::Dense: return "dense";
    case MaskingMode::None: return "none";
  }
  return "?";
}

inline MaskingMode masking_mode_from_string(const std::string& s) {
  if (s == "occlusion") return MaskingMode::Occlusion;
  if (s == "dense") return MaskingMode::Dense;
  if (s == "none") return MaskingMode::None;
  throw ConfigError("unknown masking mode: " + s);
}

// Attention variants other than "full" are recognized by name only.
inline const std::vector<std::string>& stub_attention_modes() {
  static const std::vector<std::string> names{"deformable", "neighborhood", "octree_window"};
  return names;
}

struct NetConfig {
  unsigned max_lod = 6;
  int latent_lod = -1;  // < 0: max_lod - 4 (at least 0)
  double extent = 0.64;
  int feature_dim = 16;
  std::vector<int> channels{16, 24, 32, 48};  // levels max_lod, max_lod-1, ... above the latent level
  int model_dim = 48;
  int heads = 4;
  int mae_layers = 3;
  nn::RopeMode rope_mode = nn::RopeMode::Literal;
  double rope_theta = 100.0;
  bool rope_per_head = false;
  MaskingMode masking = MaskingMode::Occlusion;
  std::string attention_mode = "full";
  DecoderAttention decoder_attention = DecoderAttention::Cross;
  double prune_threshold = 0.5;
  double occlusion_tolerance = -1.0;  // < 0: half the latent cell diagonal

  unsigned latent() const {
    return latent_lod >= 0 ? unsigned(latent_lod) : (max_lod >= 4 ? max_lod - 4 : 0u);
  }

  /// Channel width of the U-Net at `level` (the latent level has model_dim).
  int width(unsigned level) const {
    if (level <= latent()) return model_dim;
    return channels.at(max_lod - level);
  }

  double tolerance() const {
    if (occlusion_tolerance >= 0.0) return occlusion_tolerance;
    return 0.5 * std::sqrt(3.0) * std::ldexp(extent, -int(latent()));
  }

  nn::AttentionConfig attention() const {
    return {model_dim, heads, rope_mode, rope_theta, rope_per_head};
  }

  void validate() const {
    if (max_lod < 1 || max_lod > kMaxLod) throw ConfigError("max_lod must be in [1, 9]");
    if (latent() >= max_lod) throw ConfigError("latent_lod must be smaller than max_lod");
    if (mae_layers < 1) throw ConfigError("mae_layers must be >= 1");
    if (!(extent > 0.0)) throw ConfigError("extent must be positive");
    if (feature_dim < 1) throw ConfigError("feature_dim must be >= 1");
    if (channels.size() < max_lod - latent()) throw ConfigError("channels must list one width per level above the latent level");
    for (unsigned i = 0; i < max_lod - latent(); ++i)
      if (channels[i] < 1) throw ConfigError("channel widths must be positive");
    if (channels[0] != feature_dim) throw ConfigError("channels[0] must equal feature_dim");
    if (!(prune_threshold > 0.0 && prune_threshold < 1.0)) throw ConfigError("prune_threshold must lie in (0,1)");
    if (attention_mode != "full") {
      for (const auto& s : stub_attention_modes())
        if (s == attention_mode) throw ConfigError("attention_mode '" + attention_mode + "' is not implemented");
      throw ConfigError("unknown attention_mode: " + attention_mode);
    }
    attention().validate();
  }
};

inline nlohmann::json to_json(const NetConfig& c) {
  return {{"max_lod", c.max_lod},
          {"latent_lod", int(c.latent())},
          {"extent", c.extent},
          {"feature_dim", c.feature_dim},
          {"channels", c.channels},
          {"model_dim", c.model_dim},
          {"heads", c.heads},
          {"mae_layers", c.mae_layers},
          {"rope_mode", nn::to_string(c.rope_mode)},
          {"rope_theta", c.rope_theta},
          {"rope_per_head", c.rope_per_head},
          {"masking_mode", to_string(c.masking)},
          {"attention_mode", c.attention_mode},
          {"decoder_attention", c.decoder_attention == DecoderAttention::Cross ? "cross" : "self"},
          {"prune_threshold", c.prune_threshold},
          {"occlusion_tolerance", c.occlusion_tolerance}};
}

/// Reads the fields present in `j` over the defaults; unknown keys are rejected.
inline NetConfig net_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("net config must be a JSON object");
  NetConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "max_lod") c.max_lod = v.get<unsigned>();
      else if (key == "latent_lod") c.latent_lod = v.get<int>();
      else if (key == "extent") c.extent = v.get<double>();
      else if (key == "feature_dim") c.feature_dim = v.get<int>();
      else if (key == "channels") c.channels = v.get<std::vector<int>>();
      else if (key == "model_dim") c.model_dim = v.get<int>();
      else if (key == "heads") c.heads = v.get<int>();
      else if (key == "mae_layers") c.mae_layers = v.get<int>();
      else if (key == "rope_mode") c.rope_mode = nn::rope_mode_from_string(v.get<std::string>());
      else if (key == "rope_theta") c.rope_theta = v.get<double>();
      else if (key == "rope_per_head") c.rope_per_head = v.get<bool>();
      else if (key == "masking_mode") c.masking = masking_mode_from_string(v.get<std::string>());
      else if (key == "attention_mode") c.attention_mode = v.get<std::string>();
      else if (key == "decoder_attention") {
        const auto s = v.get<std::string>();
        if (s == "cross") c.decoder_attention = DecoderAttention::Cross;
        else if (s == "self") c.decoder_attention = DecoderAttention::Self;
        else throw ConfigError("unknown decoder_attention: " + s);
      } else if (key == "prune_threshold") c.prune_threshold = v.get<double>();
      else if (key == "occlusion_tolerance") c.occlusion_tolerance = v.get<double>();
      else throw ConfigError("unknown net config key: " + key);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("net config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace detail {
inline std::string level_name(const char* prefix, unsigned level) { return std::string(prefix) + std::to_string(level); }
}  // namespace detail

/// Creates every parameter of the model in a fixed order.
template <typename T>
nn::ParamStore<T> init_params(const NetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  nn::ParamStore<T> ps;
  const unsigned lat = cfg.latent();
  const auto att = cfg.attention();
  nn::register_image_encoder(ps, "image", cfg.feature_dim, rng);
  for (unsigned h = cfg.max_lod; h > lat; --h) {
    const auto p = detail::level_name("enc.l", h);
    nn::register_conv(ps, p + ".conv_a", 27, cfg.width(h), cfg.width(h), rng);
    nn::register_conv(ps, p + ".conv_b", 27, cfg.width(h), cfg.width(h), rng, 0.5);
    nn::register_conv(ps, p + ".down", 8, cfg.width(h), cfg.width(h - 1), rng);
  }
  nn::init_normal(ps.add("mae.mask_token", {std::size_t(cfg.model_dim)}), 1.0, rng);
  for (int i = 0; i < cfg.mae_layers; ++i)
    nn::register_transformer_block(ps, "mae.enc." + std::to_string(i), att, false, rng);
  for (int i = 0; i < cfg.mae_layers; ++i)
    nn::register_transformer_block(ps, "mae.dec." + std::to_string(i), att,
                                   cfg.decoder_attention == DecoderAttention::Cross, rng);
  for (unsigned h = lat; h <= cfg.max_lod; ++h) {
    const auto p = detail::level_name("dec.l", h);
    if (h > lat) {
      nn::register_conv(ps, p + ".up", 8, cfg.width(h - 1), cfg.width(h), rng);
      nn::register_conv(ps, p + ".refine", 27, cfg.width(h), cfg.width(h), rng, 0.5);
    }
    nn::register_linear(ps, p + ".occ.fc1", cfg.width(h), cfg.width(h), rng, std::sqrt(2.0));
    nn::register_linear(ps, p + ".occ.fc2", cfg.width(h), 1, rng);
  }
  nn::register_linear(ps, "head.normal", cfg.width(cfg.max_lod), 3, rng);
  nn::register_linear(ps, "head.sdf", cfg.width(cfg.max_lod), 1, rng);
  return ps;
}

/// Throws unless `ps` has exactly the names and shapes of a freshly initialized model.
template <typename T>
void check_params(const NetConfig& cfg, const nn::ParamStore<T>& ps) {
  const auto ref = init_params<T>(cfg, 0);
  if (ref.size() != ps.size()) throw IoError("parameter count does not match the configuration");
  for (const auto& p : ref) {
    if (!ps.contains(p.name)) throw IoError("missing parameter " + p.name);
    if (ps.get(p.name).shape != p.shape) throw IoError("shape mismatch for parameter " + p.name);
  }
}

using Coords = std::shared_ptr<const std::vector<Vec3>>;

inline Coords rope_coords(const OctreeGeometry& g, const std::vector<VoxelKey>& keys) {
  auto c = std::make_shared<std::vector<Vec3>>();
  c->reserve(keys.size());
  for (const auto& k : keys) c->push_back(g.normalized(k));
  return c;
}

/// Sparse level with differentiable features.
template <typename T>
struct LevelFeatures {
  unsigned level = 0;
  std::vector<VoxelKey> keys;
  nn::Var<T> features;
};

template <typename T>
struct EncoderOutput {
  LevelFeatures<T> latent;
  std::map<unsigned, LevelFeatures<T>> skips;
};

/// Residual sparse-conv stages from the finest level down to the latent level.
template <typename T>
EncoderOutput<T> encode_unet(nn::Graph<T>& g, nn::ParamStore<T>& ps, const NetConfig& cfg, LevelFeatures<T> finest) {
  if (finest.keys.empty()) throw Error("empty octree");
  if (finest.level != cfg.max_lod) throw ConfigError("encode_unet: input must be at max_lod");
  if (finest.features.cols() != cfg.width(cfg.max_lod)) throw ConfigError("encode_unet: feature width mismatch");
  const auto stencil = stencil27();
  EncoderOutput<T> out;
  auto cur = std::move(finest);
  for (unsigned h = cfg.max_lod; h > cfg.latent(); --h) {
    const auto p = detail::level_name("enc.l", h);
    const auto table = neighbor_indices(std::span<const VoxelKey>(cur.keys), stencil);
    auto y = nn::relu(nn::sparse_conv(g, ps, p + ".conv_a", cur.features, table));
    y = nn::sparse_conv(g, ps, p + ".conv_b", y, table);
    cur.features = nn::relu(nn::add(cur.features, y));
    out.skips[h] = cur;
    LevelFeatures<T> next;
    next.level = h - 1;
    next.keys = ancestors(cur.keys, h - 1);
    const auto down = child_table(next.keys, cur.keys);
    next.features = nn::relu(nn::sparse_conv(g, ps, p + ".down", cur.features, down));
    cur = std::move(next);
  }
  out.latent = std::move(cur);
  return out;
}

/// Latent cells that receive a mask token, Morton-sorted and disjoint from
/// `visible` (which must be sorted).
inline std::vector<VoxelKey> mask_token_keys(const std::vector<VoxelKey>& visible, unsigned level,
                                             const OctreeGeometry& geometry, const RgbdFrame& frame,
                                             const CameraIntrinsics& k, MaskingMode mode, double tolerance) {
  std::vector<VoxelKey> out;
  if (mode == MaskingMode::None) return out;
  const std::uint64_t cells = std::uint64_t(1) << (3 * level);
  std::size_t vi = 0;
  for (std::uint64_t code = 0; code < cells; ++code) {
    while (vi < visible.size() && visible[vi].code() < code) ++vi;
    if (vi < visible.size() && visible[vi].code() == code) continue;
    const auto key = VoxelKey::from_code(code, level);
    if (mode == MaskingMode::Dense ||
        classify_voxel(geometry.center(key), frame, k, tolerance) == VoxelVisibility::Occluded)
      out.push_back(key);
  }
  return out;
}

template <typename T>
struct MaeTokens {
  unsigned level = 0;
  std::vector<VoxelKey> visible_keys;
  nn::Var<T> visible;
  std::vector<VoxelKey> masked_keys;
  nn::Var<T> masked;  // every row is the shared mask token; invalid when M = 0
};

template <typename T>
MaeTokens<T> place_mask_tokens(nn::Graph<T>& g, nn::ParamStore<T>& ps, const LevelFeatures<T>& latent,
                               const OctreeGeometry& geometry, const RgbdFrame& frame, const CameraIntrinsics& k,
                               MaskingMode mode, double tolerance) {
  MaeTokens<T> t;
  t.level = latent.level;
  t.visible_keys = latent.keys;
  t.visible = latent.features;
  t.masked_keys = mask_token_keys(latent.keys, latent.level, geometry, frame, k, mode, tolerance);
  if (!t.masked_keys.empty()) {
    const auto token = g.param(ps.get("mae.mask_token"));
    t.masked = nn::gather_rows(token, std::vector<std::int32_t>(t.masked_keys.size(), 0));
  }
  return t;
}

template <typename T>
nn::Var<T> mae_encode(nn::Graph<T>& g, nn::ParamStore<T>& ps, const NetConfig& cfg, nn::Var<T> visible,
                      Coords coords) {
  if (visible.rows() == 0) throw Error("mae_encode: no visible tokens (scene has no foreground)");
  const auto att = cfg.attention();
  for (int i = 0; i < cfg.mae_layers; ++i) visible = nn::transformer_block(g, ps, "mae.enc." + std::to_string(i), visible, coords, att);
  return visible;
}

/// Union of visible and masked tokens in Morton order, refined by attention
/// to the encoded visible tokens (or to the union itself in self mode).
template <typename T>
LevelFeatures<T> mae_decode(nn::Graph<T>& g, nn::ParamStore<T>& ps, const NetConfig& cfg,
                            const OctreeGeometry& geometry, nn::Var<T> encoded, const MaeTokens<T>& tokens) {
  const auto& vk = tokens.visible_keys;
  const auto& mk = tokens.masked_keys;
  LevelFeatures<T> out;
  out.level = tokens.level;
  std::vector<std::int32_t> order;
  order.reserve(vk.size() + mk.size());
  std::size_t a = 0, b = 0;
  while (a < vk.size() || b < mk.size()) {
    if (b == mk.size() || (a < vk.size() && vk[a] < mk[b])) {
      out.keys.push_back(vk[a]);
      order.push_back(std::int32_t(a++));
    } else {
      if (a < vk.size() && vk[a] == mk[b]) throw ConfigError("mae_decode: visible and masked keys overlap");
      out.keys.push_back(mk[b]);
      order.push_back(std::int32_t(vk.size() + b++));
    }
  }
  auto stacked = mk.empty() ? encoded : nn::concat_rows(encoded, tokens.masked);
  auto x = nn::gather_rows(stacked, std::move(order));
  const auto coords = rope_coords(geometry, out.keys);
  const auto kv_coords = rope_coords(geometry, vk);
  const auto att = cfg.attention();
  for (int i = 0; i < cfg.mae_layers; ++i) {
    const auto name = "mae.dec." + std::to_string(i);
    if (cfg.decoder_attention == DecoderAttention::Cross)
      x = nn::transformer_block(g, ps, name, x, coords, att, encoded, kv_coords);
    else
      x = nn::transformer_block(g, ps, name, x, coords, att);
  }
  out.features = x;
  return out;
}

/// Per-level occupancy labels that drive pruning during training.
using Teacher = std::function<std::vector<std::uint8_t>(unsigned level, const std::vector<VoxelKey>& keys)>;

template <typename T>
struct LevelPrediction {
  unsigned level = 0;
  std::vector<VoxelKey> keys;  // evaluated keys
  nn::Var<T> probs;            // keys x 1
  std::vector<std::int32_t> kept;
};

template <typename T>
struct DecoderOutput {
  std::map<unsigned, LevelPrediction<T>> levels;
  std::vector<VoxelKey> final_keys;
  nn::Var<T> normals;  // final_keys x 3, unit rows
  nn::Var<T> sdf;      // final_keys x 1, meters
  bool collapsed = false;
  unsigned collapsed_level = 0;
};

template <typename T>
DecoderOutput<T> decode_unet(nn::Graph<T>& g, nn::ParamStore<T>& ps, const NetConfig& cfg,
                             const OctreeGeometry& geometry, LevelFeatures<T> x,
                             const std::map<unsigned, LevelFeatures<T>>& skips, const Teacher* teacher = nullptr) {
  DecoderOutput<T> out;
  const auto stencil = stencil27();
  for (unsigned h = x.level;; ++h) {
    const auto p = detail::level_name("dec.l", h);
    if (h > x.level) {
      // x holds the previous level; upsample into the children of its kept voxels.
      const auto& prev = out.levels.at(h - 1);
      std::vector<VoxelKey> kept_keys;
      kept_keys.reserve(prev.kept.size());
      for (auto i : prev.kept) kept_keys.push_back(prev.keys[std::size_t(i)]);
      LevelFeatures<T> fine;
      fine.level = h;
      fine.keys = expand(std::span<const VoxelKey>(kept_keys));
      const auto up = parent_table(std::span<const VoxelKey>(fine.keys), std::span<const VoxelKey>(x.keys));
      auto f = nn::relu(nn::sparse_conv(g, ps, p + ".up", x.features, up));
      if (auto it = skips.find(h); it != skips.end())
        f = nn::add(f, nn::gather_rows(it->second.features,
                                       lookup(std::span<const VoxelKey>(fine.keys), std::span<const VoxelKey>(it->second.keys))));
      const auto table = neighbor_indices(std::span<const VoxelKey>(fine.keys), stencil);
      fine.features = nn::relu(nn::add(f, nn::sparse_conv(g, ps, p + ".refine", f, table)));
      x = std::move(fine);
    }
    LevelPrediction<T> pred;
    pred.level = h;
    pred.keys = x.keys;
    auto hidden = nn::relu(nn::apply_linear(g, ps, p + ".occ.fc1", x.features));
    pred.probs = nn::sigmoid(nn::apply_linear(g, ps, p + ".occ.fc2", hidden));
    if (teacher) {
      const auto labels = (*teacher)(h, pred.keys);
      if (labels.size() != pred.keys.size()) throw ConfigError("teacher label count mismatch");
      for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i]) pred.kept.push_back(std::int32_t(i));
    } else {
      const auto& pv = pred.probs.value();
      for (Eigen::Index i = 0; i < pv.rows(); ++i)
        if (double(pv(i, 0)) >= cfg.prune_threshold) pred.kept.push_back(std::int32_t(i));
    }
    const bool empty = pred.kept.empty();
    out.levels.emplace(h, std::move(pred));
    if (empty) {
      out.collapsed = true;
      out.collapsed_level = h;
      return out;
    }
    if (h == cfg.max_lod) break;
  }
  const auto& last = out.levels.at(cfg.max_lod);
  for (auto i : last.kept) out.final_keys.push_back(last.keys[std::size_t(i)]);
  auto feats = nn::gather_rows(x.features, last.kept);
  out.normals = nn::normalize_rows(nn::apply_linear(g, ps, "head.normal", feats));
  out.sdf = nn::scale(nn::apply_linear(g, ps, "head.sdf", feats), T(geometry.cell_size(cfg.max_lod)));
  return out;
}

struct StageTimings {
  std::vector<std::pair<std::string, double>> stages;  // name, milliseconds

  double total() const {
    double t = 0;
    for (const auto& s : stages) t += s.second;
    return t;
  }
};

class StageClock {
 public:
  explicit StageClock(StageTimings* t) : t_(t), last_(std::chrono::steady_clock::now()) {}
  void lap(const char* name) {
    if (!t_) return;
    const auto now = std::chrono::steady_clock::now();
    t_->stages.emplace_back(name, std::chrono::duration<double, std::milli>(now - last_).count());
    last_ = now;
  }

 private:
  StageTimings* t_;
  std::chrono::steady_clock::time_point last_;
};

template <typename T>
struct ForwardResult {
  OctreeGeometry geometry;
  std::vector<VoxelKey> input_keys;  // finest occupied keys of the observation
  MaeTokens<T> tokens;
  DecoderOutput<T> decoded;
};

/// Full pipeline on one frame. With a teacher, pruning follows its labels.
template <typename T>
ForwardResult<T> forward(nn::Graph<T>& g, nn::ParamStore<T>& ps, const NetConfig& cfg, const RgbdFrame& frame,
                         const CameraIntrinsics& k, const Teacher* teacher = nullptr, StageTimings* timings = nullptr) {
  frame.validate();
  StageClock clock(timings);
  auto image = g.constant(frame.color.template cast<T>());
  auto feature_map = nn::conv2d_encoder(g, ps, "image", image, frame.width, frame.height);
  clock.lap("image_encoder");
  const auto px = unproject_pixels(frame, k);
  if (px.positions.empty()) throw Error("no foreground points");
  clock.lap("unproject");
  ForwardResult<T> r;
  r.geometry = compute_grid_origin(px.positions, cfg.extent, cfg.max_lod);
  const auto vox = voxelize(px.positions, r.geometry);
  if (vox.keys.empty()) throw Error("empty octree");
  std::vector<std::size_t> members(vox.member_index.size());
  for (std::size_t i = 0; i < members.size(); ++i) members[i] = px.pixel_index[vox.member_index[i]];
  LevelFeatures<T> finest{cfg.max_lod, vox.keys, nn::gather_mean(feature_map, vox.member_offset, std::move(members))};
  r.input_keys = vox.keys;
  clock.lap("octree");
  auto enc = encode_unet(g, ps, cfg, std::move(finest));
  clock.lap("encode_unet");
  r.tokens = place_mask_tokens(g, ps, enc.latent, r.geometry, frame, k, cfg.masking, cfg.tolerance());
  clock.lap("place_mask_tokens");
  auto encoded = mae_encode(g, ps, cfg, enc.latent.features, rope_coords(r.geometry, enc.latent.keys));
  clock.lap("mae_encode");
  auto latent = mae_decode(g, ps, cfg, r.geometry, encoded, r.tokens);
  clock.lap("mae_decode");
  r.decoded = decode_unet(g, ps, cfg, r.geometry, std::move(latent), enc.skips, teacher);
  clock.lap("decode_unet");
  return r;
}

/// Plain-data result of an inference pass.
struct CompletionOutput {
  struct Level {
    std::vector<VoxelKey> keys;
    std::vector<double> probs;
  };
  OctreeGeometry geometry;
  std::map<unsigned, Level> levels;
  std::vector<VoxelKey> surface_keys;  // survivors at max_lod
  std::vector<Vec3> normals;
  std::vector<double> sdf;
  std::size_t visible_tokens = 0;
  std::size_t mask_tokens = 0;
  bool collapsed = false;
  unsigned collapsed_level = 0;
  StageTimings timings;

  std::vector<Vec3> surface_points() const {
    std::vector<Vec3> p;
    p.reserve(surface_keys.size());
    for (const auto& k : surface_keys) p.push_back(geometry.center(k));
    return p;
  }
};

template <typename T>
CompletionOutput to_completion(const ForwardResult<T>& r) {
  CompletionOutput c;
  c.geometry = r.geometry;
  c.visible_tokens = r.tokens.visible_keys.size();
  c.mask_tokens = r.tokens.masked_keys.size();
  for (const auto& [h, lp] : r.decoded.levels) {
    auto& l = c.levels[h];
    l.keys = lp.keys;
    const auto& pv = lp.probs.value();
    l.probs.resize(std::size_t(pv.rows()));
    for (Eigen::Index i = 0; i < pv.rows(); ++i) l.probs[std::size_t(i)] = double(pv(i, 0));
  }
  c.collapsed = r.decoded.collapsed;
  c.collapsed_level = r.decoded.collapsed_level;
  if (!c.collapsed) {
    c.surface_keys = r.decoded.final_keys;
    const auto& n = r.decoded.normals.value();
    const auto& s = r.decoded.sdf.value();
    for (Eigen::Index i = 0; i < n.rows(); ++i) {
      c.normals.emplace_back(double(n(i, 0)), double(n(i, 1)), double(n(i, 2)));
      c.sdf.push_back(double(s(i, 0)));
    }
  }
  return c;
}

template <typename T>
CompletionOutput complete_scene(const RgbdFrame& frame, const CameraIntrinsics& k, const NetConfig& cfg,
                                nn::ParamStore<T>& ps) {
  cfg.validate();
  nn::Graph<T> g(false);
  StageTimings timings;
  const auto r = forward(g, ps, cfg, frame, k, nullptr, &timings);
  auto c = to_completion(r);
  c.timings = std::move(timings);
  return c;
}

/// Surface voxels as PLY vertices: center, normal, sdf and occupancy probability.
inline void write_completion_ply(const std::filesystem::path& path, const CompletionOutput& c) {
  ply::VertexTable t;
  t.names = {"x", "y", "z", "nx", "ny", "nz", "sdf", "prob"};
  t.values.resize(Eigen::Index(c.surface_keys.size()), 8);
  std::vector<double> probs;
  if (!c.collapsed) {
    const auto& last = c.levels.rbegin()->second;
    const auto idx = lookup(std::span<const VoxelKey>(c.surface_keys), std::span<const VoxelKey>(last.keys));
    for (auto i : idx) probs.push_back(last.probs[std::size_t(i)]);
  }
  for (std::size_t i = 0; i < c.surface_keys.size(); ++i) {
    const auto p = c.geometry.center(c.surface_keys[i]);
    t.values.row(Eigen::Index(i)) << p.x(), p.y(), p.z(), c.normals[i].x(), c.normals[i].y(), c.normals[i].z(),
        c.sdf[i], probs[i];
  }
  ply::write(path, t, {"octmae completion", "max_lod " + std::to_string(c.geometry.max_lod)});
}

}  // namespace octmae
