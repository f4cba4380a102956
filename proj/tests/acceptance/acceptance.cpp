// Acceptance gate: one PASS/FAIL line per criterion. Exit status is non-zero
// if any criterion fails.
#include "octmae/diagnostics.hpp"
#include "octmae/metrics.hpp"
#include "octmae/train.hpp"
#include "oracle/checks.hpp"
#include "support.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <sstream>
#include <sys/wait.h>

using namespace octmae;

namespace {

constexpr double kConvTolerance = 1e-6;
constexpr double kConvSeconds = 60.0;
constexpr double kRopeNormTolerance = 1e-12;
constexpr double kRopeRelativeTolerance = 1e-9;
constexpr double kAttentionTolerance = 1e-6;
constexpr double kKernelGradTolerance = 1e-5;
constexpr double kEndToEndGradTolerance = 1e-4;
constexpr double kLossRatio = 0.5;
constexpr int kToySteps = 2000;
constexpr int kFinalWindow = 50;  // final loss: mean of the last logged steps

int failures = 0;

void report(int id, bool ok, const std::string& what) {
  std::cout << (ok ? "[PASS]" : "[FAIL]") << " criterion " << id << ": " << what << std::endl;
  failures += !ok;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void sparse_conv() {
  const auto t0 = std::chrono::steady_clock::now();
  const double err = checks::conv_equivalence(101, 100);
  const double s = seconds_since(t0);
  report(1, err <= kConvTolerance && s < kConvSeconds,
         "sparse vs dense conv, 100 octrees: max rel error " + fmt(err) + ", " + fmt(s) + " s");
}

void rope() {
  const auto a = checks::rope_properties(202, 1000);
  const double att = checks::attention_equivalence(203, 100);
  report(2,
         a.origin_exact && a.norm_error <= kRopeNormTolerance && a.relative_error <= kRopeRelativeTolerance &&
             att <= kAttentionTolerance,
         std::string("rope origin ") + (a.origin_exact ? "exact" : "NOT exact") + ", norm error " + fmt(a.norm_error) +
             ", relative-position error " + fmt(a.relative_error) + ", attention vs dense " + fmt(att));
}

void gradients() {
  double worst = 0.0;
  bool ok = true;
  std::string bad;
  for (const auto& c : diag::kernel_checks(42)) {
    worst = std::max(worst, c.result.max_rel_error);
    if (!(c.result.checked > 0 && c.result.max_rel_error <= kKernelGradTolerance)) {
      ok = false;
      bad += " " + c.name;
    }
  }
  const auto e2e = diag::end_to_end_check(42);
  ok = ok && e2e.result.checked > 0 && e2e.result.max_rel_error <= kEndToEndGradTolerance;
  report(3, ok, "kernel gradients max rel error " + fmt(worst) + (bad.empty() ? "" : " (failed:" + bad + ")") +
                    ", end-to-end " + fmt(e2e.result.max_rel_error));
}

void occlusion() {
  const auto a = checks::occlusion_equivalence(304, 50, 5);
  report(4, a.scenes == 50 && a.set_mismatches == 0 && a.dense_below_occlusion == 0,
         std::to_string(a.scenes) + " scenes, " + std::to_string(a.set_mismatches) + " set mismatches, " +
             std::to_string(a.occlusion_tokens) + " occlusion vs " + std::to_string(a.dense_tokens) + " dense tokens");
}

void hierarchy() {
  const auto a = checks::hierarchy_invariant(405, 100);
  report(5, a.decodes == 100 && a.violations == 0,
         std::to_string(a.decodes) + " decodes, " + std::to_string(a.survivors) + " survivors, " +
             std::to_string(a.violations) + " violations");
}

void metric_cases() {
  metrics::SurfaceSample o, p;
  o.points = {Vec3::Zero()};
  p.points = {Vec3(0.003, 0.004, 0.0)};
  const double cd = metrics::chamfer(o, p);
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0.0, 0.05);
  metrics::SurfaceSample s;
  for (int i = 0; i < 300; ++i) {
    s.points.emplace_back(n(rng), n(rng), n(rng));
    s.normals.push_back(Vec3(n(rng), n(rng), n(rng)).normalized());
  }
  const auto self = metrics::evaluate(s, s);
  const bool identity = self.cd == 0.0 && self.f1 == 1.0 && self.nc && *self.nc == 1.0;
  const auto nn = checks::nearest_neighbor_equivalence(506, 50);
  report(6, cd == 5.0 && identity && nn.pairs == 50 && nn.mismatches == 0,
         "CD 3-4-5 = " + fmt(cd) + " mm, identity " + (identity ? "exact" : "NOT exact") + ", nearest neighbor " +
             std::to_string(nn.mismatches) + " mismatches over " + std::to_string(nn.queries) + " queries");
}

struct ToyRun {
  double loss_before = 0.0, loss_after = 0.0;
  double f1_before = 0.0, f1_after = 0.0;
  double cd_occ = 0.0;
  std::size_t collapsed = 0;
};

ToyRun toy_run(MaskingMode mode, const std::vector<scene::DatasetScene>& train_set,
               const std::vector<scene::DatasetScene>& held, const std::vector<metrics::SurfaceSample>& gts) {
  NetConfig cfg;
  cfg.max_lod = 6;
  cfg.latent_lod = 3;
  cfg.channels = {16, 24, 32, 48};
  cfg.model_dim = 48;
  cfg.mae_layers = 2;
  cfg.masking = mode;
  train::TrainConfig tc;
  tc.steps = kToySteps;
  tc.seed = 1;
  tc.threads = 1;
  ToyRun r;
  // Same draw train_loop uses for its initialization.
  auto init = init_params<float>(cfg, std::mt19937_64(tc.seed)());
  r.f1_before = train::evaluate_scenes(init, cfg, held, 20000, 7, 1, &gts).mean_f1;
  nn::ParamStore<float> ps;
  const auto log = train::train_loop(train_set, cfg, tc, "", "", nullptr, &ps).log;
  r.loss_before = log.front().total;
  for (int i = kToySteps - kFinalWindow; i < kToySteps; ++i) r.loss_after += log[std::size_t(i)].total / kFinalWindow;
  const auto e = train::evaluate_scenes(ps, cfg, held, 20000, 7, 1, &gts);
  r.f1_after = e.mean_f1;
  r.cd_occ = e.mean_cd_occ;
  r.collapsed = e.collapsed;
  return r;
}

void toy_training() {
  testing_support::TempDir dir;
  scene::generate_dataset(64, 42, dir / "data");
  const auto train_set = scene::load_dataset(dir / "data", "train");
  const auto held = scene::load_dataset(dir / "data", "heldout");
  std::vector<metrics::SurfaceSample> gts;
  for (const auto& d : held) gts.push_back(metrics::sample_surface(d.spec, 20000, 7 + d.index));
  const auto occ = toy_run(MaskingMode::Occlusion, train_set, held, gts);
  const auto none = toy_run(MaskingMode::None, train_set, held, gts);
  const bool a = occ.loss_after <= kLossRatio * occ.loss_before;
  const bool b = occ.f1_after > occ.f1_before;
  const bool c = occ.cd_occ < none.cd_occ;
  report(7, a && b && c,
         "toy training: loss " + fmt(occ.loss_before) + " -> " + fmt(occ.loss_after) + (a ? " (ok)" : " (FAIL)") +
             ", held-out F1@10mm " + fmt(occ.f1_before) + " -> " + fmt(occ.f1_after) + (b ? " (ok)" : " (FAIL)") +
             ", CD_occ occlusion " + fmt(occ.cd_occ) + " mm vs none " + fmt(none.cd_occ) + " mm" +
             (c ? " (ok)" : " (FAIL)") + ", collapsed " + std::to_string(occ.collapsed) + "/" +
             std::to_string(none.collapsed));
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(OCTMAE_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string tree_bytes(const std::filesystem::path& root) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) all += std::filesystem::relative(f, root).string() + "\n" + testing_support::slurp(f);
  return all;
}

// The loss log without its wall-clock column.
std::string csv_without_wall(const std::string& csv) {
  std::istringstream in(csv);
  std::string line, out;
  while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + "\n";
  return out;
}

void determinism() {
  testing_support::TempDir dir;
  io::write_json(dir / "cfg.json",
                 {{"net", {{"max_lod", 6}, {"latent_lod", 3}, {"channels", {16, 24, 32, 48}}, {"model_dim", 48},
                           {"mae_layers", 2}}},
                  {"train", {{"steps", 10}, {"seed", 3}}}});
  bool ok = true;
  for (const char* run : {"a", "b"}) {
    const auto d = dir.path() / run;
    std::filesystem::create_directories(d);
    ok = ok && run_cli("--seed 11 gen --scenes 6 --out " + (d / "data").string()) == 0;
    ok = ok && run_cli("train --data " + (d / "data").string() + " --config " + (dir / "cfg.json").string() +
                       " --out " + (d / "m.octm").string()) == 0;
  }
  const bool data_same = ok && tree_bytes(dir / "a" / "data") == tree_bytes(dir / "b" / "data");
  const bool model_same = ok && testing_support::slurp(dir / "a" / "m.octm") == testing_support::slurp(dir / "b" / "m.octm");
  const bool log_same = ok && csv_without_wall(testing_support::slurp(dir / "a" / "m.octm.csv")) ==
                                  csv_without_wall(testing_support::slurp(dir / "b" / "m.octm.csv"));
  report(8, ok && data_same && model_same && log_same,
         std::string("gen ") + (data_same ? "identical" : "DIFFERS") + ", checkpoint " +
             (model_same ? "identical" : "DIFFERS") + ", loss log " + (log_same ? "identical" : "DIFFERS") +
             (ok ? "" : " (command failed)"));
}

}  // namespace

int main() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<void (*)()> criteria{sparse_conv, rope, gradients, occlusion, hierarchy,
                                         metric_cases, toy_training, determinism};
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    try {
      criteria[i]();
    } catch (const std::exception& e) {
      report(int(i + 1), false, std::string("exception: ") + e.what());
    }
  }
  std::cout << (failures ? "acceptance: " + std::to_string(failures) + " criteria failed" : "acceptance: all criteria passed")
            << " (" << fmt(seconds_since(t0)) << " s)" << std::endl;
  return failures ? 1 : 0;
}
