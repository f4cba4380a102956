#pragma once

#include "octmae/nn/ops.hpp"

#include <algorithm>
#include <random>
#include <string>
#include <vector>

namespace octmae::nn {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "<param>[<flat index>]"
  std::size_t checked = 0;
};

/// Compares reverse-mode gradients of a random linear functional of the
/// output against central differences, over every entry of every parameter
/// in `stores` (inputs can be checked by placing them in a store).
///
/// The relative error of one entry is |a - n| / max(|a|, |n|, floor).
/// `build` must construct the same computation on any Graph<double> it is
/// handed, reading parameters through Graph::param.
template <typename Build>
GradCheckResult grad_check(Build&& build, const std::vector<ParamStore<double>*>& stores, std::uint64_t seed,
                           double step = 1e-5, double floor = 1e-3, std::size_t max_entries_per_param = 0) {
  Mat<double> weights;
  {
    Graph<double> probe(false);
    const auto out = build(probe);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    weights.resize(out.rows(), out.cols());
    for (Eigen::Index i = 0; i < weights.size(); ++i) weights.data()[i] = dist(rng);
  }
  auto objective = [&]() {
    Graph<double> g(false);
    const auto out = build(g);
    return out.value().cwiseProduct(weights).sum();
  };

  Graph<double> g(true);
  const auto out = build(g);
  g.backward(weighted_sum(out, weights));

  GradCheckResult res;
  std::mt19937_64 pick(seed ^ 0x9e3779b97f4a7c15ULL);
  for (auto* store : stores) {
    for (auto& p : *store) {
      const Mat<double>* analytic = g.param_grad(p);
      std::vector<Eigen::Index> entries(std::size_t(p.value.size()));
      for (Eigen::Index i = 0; i < p.value.size(); ++i) entries[std::size_t(i)] = i;
      if (max_entries_per_param && entries.size() > max_entries_per_param) {
        std::shuffle(entries.begin(), entries.end(), pick);
        entries.resize(max_entries_per_param);
      }
      for (const auto i : entries) {
        double& x = p.value.data()[i];
        const double saved = x;
        x = saved + step;
        const double fp = objective();
        x = saved - step;
        const double fm = objective();
        x = saved;
        const double numeric = (fp - fm) / (2.0 * step);
        const double a = analytic ? analytic->data()[i] : 0.0;
        const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
        ++res.checked;
        if (rel > res.max_rel_error) {
          res.max_rel_error = rel;
          res.worst = p.name + "[" + std::to_string(i) + "]";
        }
      }
    }
  }
  return res;
}

}  // namespace octmae::nn
