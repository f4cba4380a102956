#pragma once

#include "octmae/metrics.hpp"
#include "octmae/net.hpp"
#include "octmae/nn/checkpoint.hpp"
#include "octmae/scenegen.hpp"

#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <thread>
#include <vector>

namespace octmae::train {

/// Surface-band occupancy: |sdf(center)| <= half the cell diagonal.
inline std::uint8_t occupancy_label(const scene::SceneSpec& spec, const OctreeGeometry& g, const VoxelKey& k) {
  return std::abs(scene::scene_sdf(spec, g.center(k)).distance) <= g.half_diagonal(k.level) ? 1 : 0;
}

struct LevelLabels {
  std::vector<VoxelKey> keys;
  std::vector<std::uint8_t> labels;
};

struct GroundTruth {
  std::map<unsigned, LevelLabels> occupancy;
  // For the supervised keys at max_lod, in the same order.
  std::vector<Vec3> normals;
  std::vector<double> sdf;
};

inline GroundTruth assign_gt(const scene::SceneSpec& spec, const std::map<unsigned, std::vector<VoxelKey>>& supervised,
                             const OctreeGeometry& g) {
  GroundTruth gt;
  for (const auto& [h, keys] : supervised) {
    auto& l = gt.occupancy[h];
    l.keys = keys;
    l.labels.reserve(keys.size());
    for (const auto& k : keys) l.labels.push_back(occupancy_label(spec, g, k));
  }
  if (auto it = supervised.find(g.max_lod); it != supervised.end()) {
    for (const auto& k : it->second) {
      const auto s = scene::scene_sdf(spec, g.center(k));
      gt.sdf.push_back(s.distance);
      gt.normals.push_back(s.normal);
    }
  }
  return gt;
}

/// Mean binary cross entropy; an empty supervised set contributes 0.
template <typename T>
nn::Var<T> occupancy_loss(nn::Var<T> probs, const std::vector<std::uint8_t>& labels) {
  return nn::bce_mean(probs, std::vector<double>(labels.begin(), labels.end()));
}

template <typename T>
struct NormalSdfLoss {
  nn::Var<T> normal;
  nn::Var<T> sdf;
};

template <typename T>
NormalSdfLoss<T> normal_sdf_loss(nn::Var<T> pred_normals, const Mat<T>& gt_normals, nn::Var<T> pred_sdf,
                                 const Mat<T>& gt_sdf) {
  return {nn::mean_row_distance(pred_normals, gt_normals), nn::mean_abs_diff(pred_sdf, gt_sdf)};
}

template <typename T>
struct LossTerms {
  nn::Var<T> total;
  std::map<unsigned, double> occupancy;
  double normal = 0.0;
  double sdf = 0.0;
  std::vector<std::string> warnings;

  double total_value() const { return double(total.value()(0, 0)); }
};

/// Indices of the decoded keys that receive occupancy supervision at each level.
/// Latent cells outside the observed view get none.
template <typename T>
std::map<unsigned, std::vector<std::int32_t>> supervised_rows(const ForwardResult<T>& r, const NetConfig& cfg,
                                                              const RgbdFrame& frame, const CameraIntrinsics& k) {
  std::map<unsigned, std::vector<std::int32_t>> rows;
  for (const auto& [h, lp] : r.decoded.levels) {
    auto& v = rows[h];
    for (std::size_t i = 0; i < lp.keys.size(); ++i) {
      if (h == cfg.latent() && classify_voxel(r.geometry.center(lp.keys[i]), frame, k, cfg.tolerance()) ==
                                   VoxelVisibility::OutsideView &&
          !std::binary_search(r.tokens.visible_keys.begin(), r.tokens.visible_keys.end(), lp.keys[i]))
        continue;
      v.push_back(std::int32_t(i));
    }
  }
  return rows;
}

/// Unweighted sum of per-level occupancy losses, the normal loss and the SDF
/// loss (target truncated to +-2 finest cells).
template <typename T>
LossTerms<T> total_loss(nn::Graph<T>& g, const ForwardResult<T>& r, const GroundTruth& gt,
                        const std::map<unsigned, std::vector<std::int32_t>>& rows) {
  LossTerms<T> out;
  std::vector<nn::Var<T>> terms;
  for (const auto& [h, lp] : r.decoded.levels) {
    const auto& idx = rows.at(h);
    const auto& labels = gt.occupancy.at(h).labels;
    if (labels.size() != idx.size()) throw ConfigError("total_loss: label set does not match supervised set");
    if (idx.empty()) out.warnings.push_back("empty supervised set at level " + std::to_string(h));
    auto l = occupancy_loss(nn::gather_rows(lp.probs, idx), labels);
    out.occupancy[h] = double(l.value()(0, 0));
    terms.push_back(l);
  }
  const auto& d = r.decoded;
  const unsigned top = r.geometry.max_lod;
  if (!d.collapsed && !d.final_keys.empty()) {
    // final keys are a subset of the supervised keys at max_lod
    const auto& sup = gt.occupancy.at(top).keys;
    const auto pos = lookup(std::span<const VoxelKey>(d.final_keys), std::span<const VoxelKey>(sup));
    std::vector<std::int32_t> matched_rows;
    Mat<T> gn(0, 3), gs(0, 1);
    std::vector<std::size_t> src;
    for (std::size_t i = 0; i < pos.size(); ++i)
      if (pos[i] != kAbsent) {
        matched_rows.push_back(std::int32_t(i));
        src.push_back(std::size_t(pos[i]));
      }
    if (!matched_rows.empty()) {
      gn.resize(Eigen::Index(src.size()), 3);
      gs.resize(Eigen::Index(src.size()), 1);
      const double clamp = 2.0 * r.geometry.cell_size(top);
      for (std::size_t i = 0; i < src.size(); ++i) {
        gn.row(Eigen::Index(i)) = gt.normals[src[i]].template cast<T>().transpose();
        gs(Eigen::Index(i), 0) = T(std::clamp(gt.sdf[src[i]], -clamp, clamp));
      }
      auto ns = normal_sdf_loss(nn::gather_rows(d.normals, matched_rows), gn, nn::gather_rows(d.sdf, matched_rows), gs);
      out.normal = double(ns.normal.value()(0, 0));
      out.sdf = double(ns.sdf.value()(0, 0));
      terms.push_back(ns.normal);
      terms.push_back(ns.sdf);
    } else {
      out.warnings.push_back("no matched final voxels for normal/sdf loss");
    }
  } else {
    out.warnings.push_back("decode collapsed; normal/sdf loss skipped");
  }
  out.total = nn::add_scalars(g, terms);
  return out;
}

/// Forward with teacher forcing plus the loss against the analytic scene.
template <typename T>
LossTerms<T> scene_loss(nn::Graph<T>& g, nn::ParamStore<T>& ps, const NetConfig& cfg, const scene::SceneSpec& spec,
                        const RgbdFrame& frame, ForwardResult<T>* result_out = nullptr) {
  const auto& k = spec.intrinsics;
  OctreeGeometry geometry;
  const OctreeGeometry* gp = nullptr;
  Teacher teacher = [&](unsigned, const std::vector<VoxelKey>& keys) {
    std::vector<std::uint8_t> labels;
    labels.reserve(keys.size());
    for (const auto& key : keys) labels.push_back(occupancy_label(spec, *gp, key));
    return labels;
  };
  // The grid is only known after unprojection; forward() fixes it before decoding.
  const auto px = unproject_pixels(frame, k);
  if (px.positions.empty()) throw Error("no foreground points");
  geometry = compute_grid_origin(px.positions, cfg.extent, cfg.max_lod);
  gp = &geometry;
  auto r = forward(g, ps, cfg, frame, k, &teacher);
  const auto rows = supervised_rows(r, cfg, frame, k);
  std::map<unsigned, std::vector<VoxelKey>> sup;
  for (const auto& [h, idx] : rows) {
    auto& keys = sup[h];
    for (auto i : idx) keys.push_back(r.decoded.levels.at(h).keys[std::size_t(i)]);
  }
  const auto gt = assign_gt(spec, sup, r.geometry);
  auto terms = total_loss(g, r, gt, rows);
  if (result_out) *result_out = std::move(r);
  return terms;
}

/// Disk dilation: a pixel is set iff some foreground pixel center lies within `radius`.
inline std::vector<std::uint8_t> dilate_mask(const std::vector<std::uint8_t>& mask, int width, int height, int radius) {
  if (radius < 0) throw ConfigError("dilate_mask: negative radius");
  if (mask.size() != std::size_t(width) * height) throw ConfigError("dilate_mask: mask size mismatch");
  if (radius == 0) return mask;
  std::vector<std::pair<int, int>> disk;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx)
      if (dx * dx + dy * dy <= radius * radius) disk.emplace_back(dx, dy);
  std::vector<std::uint8_t> out(mask.size(), 0);
  for (int v = 0; v < height; ++v)
    for (int u = 0; u < width; ++u) {
      if (!mask[std::size_t(v) * width + u]) continue;
      for (const auto& [dx, dy] : disk) {
        const int x = u + dx, y = v + dy;
        if (x >= 0 && y >= 0 && x < width && y < height) out[std::size_t(y) * width + x] = 1;
      }
    }
  return out;
}

struct TrainConfig {
  double learning_rate = 0.002;
  int batch_size = 4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int steps = 2000;
  std::uint64_t seed = 1;
  std::vector<int> dilation_radii{1, 3, 5};
  int threads = 0;  // 0: hardware concurrency
  int checkpoint_every = 0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (steps < 0) throw ConfigError("steps must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && epsilon > 0.0))
      throw ConfigError("invalid Adam hyperparameters");
    for (int r : dilation_radii)
      if (r != 0 && r != 1 && r != 3 && r != 5) throw ConfigError("dilation radii must be drawn from {0,1,3,5}");
    if (threads < 0 || checkpoint_every < 0) throw ConfigError("threads and checkpoint_every must be >= 0");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size}, {"beta1", c.beta1},
          {"beta2", c.beta2},                 {"epsilon", c.epsilon},       {"steps", c.steps},
          {"seed", c.seed},                   {"dilation_radii", c.dilation_radii}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  TrainConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "learning_rate") c.learning_rate = v.get<double>();
      else if (key == "batch_size") c.batch_size = v.get<int>();
      else if (key == "beta1") c.beta1 = v.get<double>();
      else if (key == "beta2") c.beta2 = v.get<double>();
      else if (key == "epsilon") c.epsilon = v.get<double>();
      else if (key == "steps") c.steps = v.get<int>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "dilation_radii") c.dilation_radii = v.get<std::vector<int>>();
      else if (key == "threads") c.threads = v.get<int>();
      else if (key == "checkpoint_every") c.checkpoint_every = v.get<int>();
      else throw ConfigError("unknown train config key: " + key);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

/// Adam with bias correction. Rejects the whole step if any gradient is non-finite.
template <typename T>
class Adam {
 public:
  explicit Adam(const TrainConfig& c) : lr_(c.learning_rate), b1_(c.beta1), b2_(c.beta2), eps_(c.epsilon) {}

  void step(nn::ParamStore<T>& ps) {
    if (m_.empty()) {
      for (const auto& p : ps) {
        m_.push_back(Mat<T>::Zero(p.value.rows(), p.value.cols()));
        v_.push_back(Mat<T>::Zero(p.value.rows(), p.value.cols()));
      }
    }
    if (m_.size() != ps.size()) throw ConfigError("adam: parameter store changed shape");
    for (const auto& p : ps)
      if (!p.grad.allFinite()) throw NumericalError("non-finite gradient in " + p.name);
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, double(t_));
    const double c2 = 1.0 - std::pow(b2_, double(t_));
    for (std::size_t i = 0; i < ps.size(); ++i) {
      auto& p = ps[i];
      auto& m = m_[i];
      auto& v = v_[i];
      for (Eigen::Index j = 0; j < p.value.size(); ++j) {
        const double g = double(p.grad.data()[j]);
        const double mj = b1_ * double(m.data()[j]) + (1.0 - b1_) * g;
        const double vj = b2_ * double(v.data()[j]) + (1.0 - b2_) * g * g;
        m.data()[j] = T(mj);
        v.data()[j] = T(vj);
        p.value.data()[j] -= T(lr_ * (mj / c1) / (std::sqrt(vj / c2) + eps_));
      }
      p.grad.setZero();
    }
  }

  std::size_t steps_taken() const { return t_; }

 private:
  double lr_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<Mat<T>> m_, v_;
};

inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  return int(std::max(1u, std::thread::hardware_concurrency()));
}

/// Runs f(i) for i in [0, n) on up to `threads` workers; rethrows the first
/// failure in index order.
template <typename F>
void parallel_for(std::size_t n, int threads, F&& f) {
  std::vector<std::exception_ptr> errors(n);
  auto run = [&](std::size_t i) {
    try {
      f(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const std::size_t workers = std::min<std::size_t>(n, std::size_t(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) run(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) run(i);
      });
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct StepRecord {
  int step = 0;
  double total = 0.0;
  std::map<unsigned, double> occupancy;
  double normal = 0.0;
  double sdf = 0.0;
  double wall_ms = 0.0;
};

inline std::string csv_header(const NetConfig& cfg) {
  std::string s = "step,loss_total";
  for (unsigned h = cfg.latent(); h <= cfg.max_lod; ++h) s += ",loss_occ_l" + std::to_string(h);
  return s + ",loss_nrm,loss_sdf,wall_ms";
}

inline std::string csv_row(const NetConfig& cfg, const StepRecord& r) {
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return std::string(buf);
  };
  std::string s = std::to_string(r.step) + "," + num(r.total);
  for (unsigned h = cfg.latent(); h <= cfg.max_lod; ++h) {
    auto it = r.occupancy.find(h);
    s += "," + num(it == r.occupancy.end() ? 0.0 : it->second);
  }
  char wall[32];
  std::snprintf(wall, sizeof wall, "%.3f", r.wall_ms);
  return s + "," + num(r.normal) + "," + num(r.sdf) + "," + wall;
}

/// Loss and summed parameter gradients over a batch of (scene, frame) pairs;
/// gradients are averaged and written into Param::grad in batch order.
template <typename T>
StepRecord batch_step(nn::ParamStore<T>& ps, const NetConfig& cfg, const std::vector<const scene::SceneSpec*>& specs,
                      const std::vector<RgbdFrame>& frames, int threads) {
  const std::size_t n = specs.size();
  std::vector<std::vector<Mat<T>>> grads(n);
  std::vector<StepRecord> recs(n);
  parallel_for(n, threads, [&](std::size_t b) {
    nn::Graph<T> g(true);
    auto terms = scene_loss(g, ps, cfg, *specs[b], frames[b]);
    if (!std::isfinite(terms.total_value())) throw NumericalError("non-finite loss");
    g.backward(terms.total);
    auto& out = grads[b];
    out.reserve(ps.size());
    for (const auto& p : ps) {
      const auto* gp = g.param_grad(p);
      out.push_back(gp ? *gp : Mat<T>::Zero(p.value.rows(), p.value.cols()));
    }
    recs[b].total = terms.total_value();
    recs[b].occupancy = terms.occupancy;
    recs[b].normal = terms.normal;
    recs[b].sdf = terms.sdf;
  });
  StepRecord rec;
  const T inv = T(1.0 / double(n));
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto& pg = ps[i].grad;
    pg.setZero();
    for (std::size_t b = 0; b < n; ++b) pg += grads[b][i];
    pg *= inv;
  }
  for (const auto& r : recs) {
    rec.total += r.total / double(n);
    rec.normal += r.normal / double(n);
    rec.sdf += r.sdf / double(n);
    for (const auto& [h, v] : r.occupancy) rec.occupancy[h] += v / double(n);
  }
  return rec;
}

inline nlohmann::json checkpoint_config(const NetConfig& net, const TrainConfig& tc) {
  return {{"net", to_json(net)}, {"train", to_json(tc)}};
}

struct TrainResult {
  std::vector<StepRecord> log;
};

/// Seeded training over the "train" split. Writes the final checkpoint to
/// `checkpoint_path` and the per-step CSV to `csv_path` (if non-empty).
inline TrainResult train_loop(const std::vector<scene::DatasetScene>& data, const NetConfig& cfg, const TrainConfig& tc,
                              const std::filesystem::path& checkpoint_path, const std::filesystem::path& csv_path,
                              std::ostream* progress = nullptr, nn::ParamStore<float>* params_out = nullptr) {
  cfg.validate();
  tc.validate();
  if (data.empty()) throw Error("training dataset is empty");
  std::mt19937_64 rng(tc.seed);
  auto ps = init_params<float>(cfg, rng());
  Adam<float> adam(tc);
  const int threads = resolve_threads(tc.threads);
  std::ofstream csv;
  if (!csv_path.empty()) {
    csv.open(csv_path, std::ios::binary);
    if (!csv) throw IoError("cannot write " + csv_path.string());
    csv << csv_header(cfg) << "\n";
  }
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  TrainResult result;
  const auto write_checkpoint = [&](const std::filesystem::path& p) { nn::save_checkpoint(p, checkpoint_config(cfg, tc), ps); };
  for (int step = 0; step < tc.steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<const scene::SceneSpec*> specs;
    std::vector<RgbdFrame> frames;
    for (int b = 0; b < tc.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const auto& d = data[order[cursor++]];
      RgbdFrame f = d.frame;
      if (!tc.dilation_radii.empty()) {
        const int r = tc.dilation_radii[std::size_t(rng() % tc.dilation_radii.size())];
        f.mask = dilate_mask(f.mask, f.width, f.height, r);
      }
      specs.push_back(&d.spec);
      frames.push_back(std::move(f));
    }
    auto rec = batch_step(ps, cfg, specs, frames, threads);
    adam.step(ps);
    rec.step = step;
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (csv.is_open()) csv << csv_row(cfg, rec) << "\n";
    if (progress && (step % 50 == 0 || step + 1 == tc.steps))
      *progress << "step " << step << " loss " << rec.total << " (" << rec.wall_ms << " ms)\n";
    result.log.push_back(rec);
    if (tc.checkpoint_every > 0 && (step + 1) % tc.checkpoint_every == 0 && step + 1 < tc.steps) {
      auto p = checkpoint_path;
      char suffix[32];
      std::snprintf(suffix, sizeof suffix, ".step%06d", step + 1);
      p += suffix;
      write_checkpoint(p);
    }
  }
  if (!checkpoint_path.empty()) write_checkpoint(checkpoint_path);
  if (params_out) *params_out = std::move(ps);
  return result;
}

/// Mean teacher-forced loss over scenes, without augmentation.
template <typename T>
double dataset_loss(nn::ParamStore<T>& ps, const NetConfig& cfg, const std::vector<scene::DatasetScene>& data,
                    int threads = 1) {
  std::vector<double> losses(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i) {
    nn::Graph<T> g(false);
    losses[i] = scene_loss(g, ps, cfg, data[i].spec, data[i].frame).total_value();
  });
  double s = 0.0;
  for (double l : losses) s += l;
  return s / double(std::max<std::size_t>(1, data.size()));
}

struct SceneEval {
  std::size_t index = 0;
  bool collapsed = false;
  metrics::EvalReport report;
  std::size_t mask_tokens = 0;
};

struct EvalSummary {
  std::vector<SceneEval> scenes;
  double mean_f1 = 0.0;     // collapsed scenes count as 0
  double mean_cd = 0.0;     // over non-collapsed scenes
  double mean_cd_occ = 0.0; // over non-collapsed scenes with an occluded subset
  std::size_t collapsed = 0;
};

/// Inference on each scene, compared against a band sample of its analytic surface.
template <typename T>
EvalSummary evaluate_scenes(nn::ParamStore<T>& ps, const NetConfig& cfg, const std::vector<scene::DatasetScene>& data,
                            std::size_t gt_points = 20000, std::uint64_t gt_seed = 7, int threads = 1,
                            const std::vector<metrics::SurfaceSample>* gt_cache = nullptr) {
  EvalSummary s;
  s.scenes.resize(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i) {
    const auto& d = data[i];
    auto& e = s.scenes[i];
    e.index = d.index;
    const auto gt = gt_cache ? (*gt_cache)[i] : metrics::sample_surface(d.spec, gt_points, gt_seed + d.index);
    const auto c = complete_scene(d.frame, d.spec.intrinsics, cfg, ps);
    e.mask_tokens = c.mask_tokens;
    if (c.collapsed || c.surface_keys.empty()) {
      e.collapsed = true;
      return;
    }
    e.report = metrics::evaluate(metrics::sample_surface(c), gt, metrics::ViewContext{&d.frame, &d.spec.intrinsics});
  });
  std::size_t n_cd = 0, n_occ = 0;
  for (const auto& e : s.scenes) {
    if (e.collapsed) {
      ++s.collapsed;
      continue;
    }
    s.mean_f1 += e.report.f1;
    s.mean_cd += e.report.cd;
    ++n_cd;
    if (e.report.cd_occ) {
      s.mean_cd_occ += *e.report.cd_occ;
      ++n_occ;
    }
  }
  s.mean_f1 /= double(std::max<std::size_t>(1, s.scenes.size()));
  s.mean_cd = n_cd ? s.mean_cd / double(n_cd) : std::numeric_limits<double>::quiet_NaN();
  s.mean_cd_occ = n_occ ? s.mean_cd_occ / double(n_occ) : std::numeric_limits<double>::quiet_NaN();
  return s;
}

}  // namespace octmae::train
