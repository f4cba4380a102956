// octmae command-line tool: dataset generation, training, completion,
// evaluation and diagnostics.
#include "octmae/diagnostics.hpp"
#include "octmae/metrics.hpp"
#include "octmae/net.hpp"
#include "octmae/nn/checkpoint.hpp"
#include "octmae/ply.hpp"
#include "octmae/scenegen.hpp"
#include "octmae/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

namespace fs = std::filesystem;
using namespace octmae;

namespace {

enum Exit { kOk = 0, kConfig = 2, kIo = 3, kNumerical = 4 };

struct Globals {
  std::uint64_t seed = 1;
  bool seed_set = false;
  int threads = 0;
  bool verbose = false;
};

void require_file(const fs::path& p, const char* what) {
  if (!fs::is_regular_file(p)) throw IoError(std::string(what) + " not found: " + p.string());
}

void require_parent(const fs::path& p) {
  const auto parent = p.has_parent_path() ? p.parent_path() : fs::path(".");
  if (!fs::is_directory(parent)) throw IoError("output directory does not exist: " + parent.string());
}

struct GenArgs {
  std::size_t scenes = 0;
  std::string out;
  unsigned lod = 6;
  double noise = 0.0;
  int min_objects = 3;
  int max_objects = 5;
};

int cmd_gen(const GenArgs& a, const Globals& g) {
  if (a.scenes < 1) throw ConfigError("--scenes must be >= 1");
  if (a.lod < 1 || a.lod > kMaxLod) throw ConfigError("--lod must be in [1, 9]");
  scene::GeneratorConfig cfg;
  cfg.depth_noise = a.noise;
  cfg.min_objects = a.min_objects;
  cfg.max_objects = a.max_objects;
  cfg.lod = a.lod;
  const auto manifest = scene::generate_dataset(a.scenes, g.seed, a.out, cfg);
  if (g.verbose)
    std::cerr << "wrote " << manifest["scenes"].size() << " scenes (" << manifest["skipped"].size() << " skipped) to "
              << a.out << "\n";
  return kOk;
}

struct TrainArgs {
  std::string data, config, out, log;
  std::optional<int> steps;
};

int cmd_train(const TrainArgs& a, const Globals& g) {
  require_file(fs::path(a.data) / "manifest.json", "dataset manifest");
  require_file(a.config, "config");
  require_parent(a.out);
  const auto j = io::read_json(a.config);
  const auto net = net_config_from_json(j.value("net", nlohmann::json::object()));
  auto tc = train::train_config_from_json(j.value("train", nlohmann::json::object()));
  if (a.steps) tc.steps = *a.steps;
  if (g.seed_set) tc.seed = g.seed;
  if (g.threads > 0) tc.threads = g.threads;
  tc.validate();
  const auto data = scene::load_dataset(a.data, "train");
  if (data.empty()) throw IoError("dataset has no training scenes: " + a.data);
  const fs::path log = a.log.empty() ? fs::path(a.out + ".csv") : fs::path(a.log);
  train::train_loop(data, net, tc, a.out, log, g.verbose ? &std::cerr : nullptr);
  return kOk;
}

struct LoadedModel {
  NetConfig cfg;
  nn::ParamStore<float> params;
};

LoadedModel load_model(const std::string& path) {
  require_file(path, "model");
  auto ck = nn::load_checkpoint<float>(path);
  LoadedModel m;
  try {
    m.cfg = net_config_from_json(ck.config.at("net"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint config: ") + e.what());
  }
  check_params(m.cfg, ck.params);
  m.params = std::move(ck.params);
  return m;
}

struct FrameArgs {
  std::string depth, mask, intrinsics, color;
};

std::pair<RgbdFrame, CameraIntrinsics> load_frame(const FrameArgs& f) {
  require_file(f.depth, "depth");
  require_file(f.mask, "mask");
  require_file(f.intrinsics, "intrinsics");
  if (!f.color.empty()) require_file(f.color, "color");
  auto k = io::read_intrinsics(f.intrinsics);
  auto frame = io::read_frame(f.depth, f.mask, f.color);
  if (frame.width != k.width || frame.height != k.height)
    throw ConfigError("raster size does not match intrinsics");
  return {std::move(frame), k};
}

struct CompleteArgs {
  std::string model, out, masking;
  FrameArgs frame;
};

int cmd_complete(const CompleteArgs& a, const Globals& g) {
  auto m = load_model(a.model);
  require_parent(a.out);
  if (!a.masking.empty()) m.cfg.masking = masking_mode_from_string(a.masking);
  const auto [frame, k] = load_frame(a.frame);
  const auto c = complete_scene(frame, k, m.cfg, m.params);
  if (g.verbose)
    std::cerr << "visible tokens " << c.visible_tokens << ", mask tokens " << c.mask_tokens << ", surface voxels "
              << c.surface_keys.size() << "\n";
  if (c.collapsed) {
    std::cerr << "error: decode collapsed at level " << c.collapsed_level << "\n";
    return kNumerical;
  }
  write_completion_ply(a.out, c);
  return kOk;
}

struct EvalArgs {
  std::string pred, gt;
  FrameArgs frame;
  double eta = 10.0;
  double split_tol = 5.0;
};

int cmd_eval(const EvalArgs& a, const Globals&) {
  require_file(a.pred, "prediction");
  require_file(a.gt, "ground truth");
  const auto pd = metrics::sample_from_ply(ply::read(a.pred));
  const auto gt = metrics::sample_from_ply(ply::read(a.gt));
  if (pd.points.empty() || gt.points.empty()) throw NumericalError("empty sample");
  std::optional<std::pair<RgbdFrame, CameraIntrinsics>> view;
  const bool any = !a.frame.depth.empty() || !a.frame.mask.empty() || !a.frame.intrinsics.empty();
  if (any) {
    if (a.frame.depth.empty() || a.frame.mask.empty() || a.frame.intrinsics.empty())
      throw ConfigError("--depth, --mask and --intrinsics must be given together");
    view = load_frame(a.frame);
  }
  std::optional<metrics::ViewContext> ctx;
  if (view) ctx = metrics::ViewContext{&view->first, &view->second};
  const auto r = metrics::evaluate(pd, gt, ctx, a.eta, a.split_tol);
  std::cout << metrics::to_json(r).dump(2) << "\n";
  return kOk;
}

struct SampleArgs {
  std::string scene, out;
  std::size_t points = 20000;
};

int cmd_sample(const SampleArgs& a, const Globals& g) {
  require_file(a.scene, "scene");
  require_parent(a.out);
  const auto spec = scene::scene_from_json(io::read_json(a.scene));
  const auto s = metrics::sample_surface(spec, a.points, g.seed);
  ply::write(a.out, metrics::to_ply(s), {"octmae ground-truth surface sample"});
  return kOk;
}

int cmd_gradcheck(bool skip_e2e, const Globals& g) {
  auto results = diag::kernel_checks(g.seed);
  if (!skip_e2e) results.push_back(diag::end_to_end_check(g.seed));
  bool ok = true;
  std::cout << "kernel,checked,max_rel_error,tolerance,status,worst\n";
  for (const auto& r : results) {
    ok = ok && r.passed();
    std::cout << r.name << "," << r.result.checked << "," << r.result.max_rel_error << "," << r.tolerance << ","
              << (r.passed() ? "pass" : "FAIL") << "," << r.result.worst << "\n";
  }
  return ok ? kOk : kNumerical;
}

struct BenchArgs {
  std::string model, config;
  FrameArgs frame;
  int repeats = 3;
};

int cmd_bench(const BenchArgs& a, const Globals& g) {
  if (a.repeats < 1) throw ConfigError("--repeats must be >= 1");
  LoadedModel m;
  if (!a.model.empty()) {
    m = load_model(a.model);
  } else {
    NetConfig cfg;
    if (!a.config.empty()) {
      require_file(a.config, "config");
      const auto j = io::read_json(a.config);
      cfg = net_config_from_json(j.contains("net") ? j["net"] : j);
    }
    m.cfg = cfg;
    m.params = init_params<float>(cfg, g.seed);
  }
  RgbdFrame frame;
  CameraIntrinsics k;
  if (!a.frame.depth.empty()) {
    std::tie(frame, k) = load_frame(a.frame);
  } else {
    auto spec = scene::random_scene(g.seed, {});
    if (!spec) throw Error("bench: could not place a scene");
    frame = scene::render(*spec);
    k = spec->intrinsics;
  }
  std::cout << "run,stage,ms\n";
  for (int r = 0; r < a.repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto c = complete_scene(frame, k, m.cfg, m.params);
    const double wall = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    for (const auto& [name, ms] : c.timings.stages) std::cout << r << "," << name << "," << ms << "\n";
    std::cout << r << ",sum_of_stages," << c.timings.total() << "\n";
    std::cout << r << ",total," << wall << "\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Octree masked-autoencoder scene completion"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  auto* seed_opt = app.add_option("--seed", g.seed, "Random seed")->default_val(1);
  app.add_option("--threads", g.threads, "Worker threads (0 = all cores)")->check(CLI::NonNegativeNumber);
  app.add_flag("--verbose,-v", g.verbose, "Progress logs on stderr");

  GenArgs gen;
  auto* s_gen = app.add_subcommand("gen", "Generate a procedural RGB-D dataset");
  s_gen->add_option("--scenes", gen.scenes, "Number of scenes")->required();
  s_gen->add_option("--out", gen.out, "Output directory")->required();
  s_gen->add_option("--lod", gen.lod, "Finest level of detail recorded in the manifest");
  s_gen->add_option("--noise", gen.noise, "Gaussian depth noise sigma (m)");
  s_gen->add_option("--min-objects", gen.min_objects, "Minimum objects per scene");
  s_gen->add_option("--max-objects", gen.max_objects, "Maximum objects per scene");

  TrainArgs tr;
  auto* s_train = app.add_subcommand("train", "Train a model on a generated dataset");
  s_train->add_option("--data", tr.data, "Dataset directory")->required();
  s_train->add_option("--config", tr.config, "JSON config with optional 'net' and 'train' objects")->required();
  s_train->add_option("--out", tr.out, "Checkpoint path")->required();
  s_train->add_option("--steps", tr.steps, "Override the number of steps");
  s_train->add_option("--log", tr.log, "Loss CSV path (default <out>.csv)");

  CompleteArgs cp;
  auto* s_complete = app.add_subcommand("complete", "Complete a scene from one RGB-D frame");
  s_complete->add_option("--model", cp.model, "Checkpoint")->required();
  s_complete->add_option("--depth", cp.frame.depth, "Depth PFM")->required();
  s_complete->add_option("--mask", cp.frame.mask, "Foreground mask PGM")->required();
  s_complete->add_option("--intrinsics", cp.frame.intrinsics, "Intrinsics JSON")->required();
  s_complete->add_option("--color", cp.frame.color, "Color PPM (mid-gray if omitted)");
  s_complete->add_option("--out", cp.out, "Output PLY")->required();
  s_complete->add_option("--masking", cp.masking, "occlusion | dense | none")
      ->check(CLI::IsMember({"occlusion", "dense", "none"}));

  EvalArgs ev;
  auto* s_eval = app.add_subcommand("eval", "Compare a predicted and a ground-truth PLY");
  s_eval->add_option("--pred", ev.pred, "Predicted PLY")->required();
  s_eval->add_option("--gt", ev.gt, "Ground-truth PLY")->required();
  s_eval->add_option("--depth", ev.frame.depth, "Depth PFM for the visible/occluded split");
  s_eval->add_option("--mask", ev.frame.mask, "Mask PGM for the visible/occluded split");
  s_eval->add_option("--intrinsics", ev.frame.intrinsics, "Intrinsics JSON for the visible/occluded split");
  s_eval->add_option("--eta", ev.eta, "F-score threshold (mm)");
  s_eval->add_option("--split-tol", ev.split_tol, "Visibility tolerance (mm)");

  SampleArgs sa;
  auto* s_sample = app.add_subcommand("sample", "Sample the analytic surface of a scene.json into a PLY");
  s_sample->add_option("--scene", sa.scene, "scene.json")->required();
  s_sample->add_option("--out", sa.out, "Output PLY")->required();
  s_sample->add_option("--points", sa.points, "Number of surface points");

  bool skip_e2e = false;
  auto* s_grad = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable kernel");
  s_grad->add_flag("--kernels-only", skip_e2e, "Skip the end-to-end loss check");

  BenchArgs bn;
  auto* s_bench = app.add_subcommand("bench", "Per-stage inference timings (CSV)");
  s_bench->add_option("--model", bn.model, "Checkpoint (random weights if omitted)");
  s_bench->add_option("--config", bn.config, "Net config JSON when no model is given");
  s_bench->add_option("--depth", bn.frame.depth, "Depth PFM (generated scene if omitted)");
  s_bench->add_option("--mask", bn.frame.mask, "Mask PGM");
  s_bench->add_option("--intrinsics", bn.frame.intrinsics, "Intrinsics JSON");
  s_bench->add_option("--repeats", bn.repeats, "Number of runs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }
  g.seed_set = seed_opt->count() > 0;
  try {
    if (*s_gen) return cmd_gen(gen, g);
    if (*s_train) return cmd_train(tr, g);
    if (*s_complete) return cmd_complete(cp, g);
    if (*s_eval) return cmd_eval(ev, g);
    if (*s_sample) return cmd_sample(sa, g);
    if (*s_grad) return cmd_gradcheck(skip_e2e, g);
    if (*s_bench) return cmd_bench(bn, g);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumerical;
  } catch (const DomainError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumerical;
  }
  return kConfig;
}
