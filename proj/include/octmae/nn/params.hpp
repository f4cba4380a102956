#pragma once

#include "octmae/common.hpp"

#include <deque>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace octmae::nn {

/// Named trainable tensor. Rank-1 tensors are stored as a single row.
template <typename T>
struct Param {
  std::string name;
  std::vector<std::size_t> shape;
  Mat<T> value;
  Mat<T> grad;

  std::size_t size() const { return std::size_t(value.size()); }
};

/// Ordered parameter collection. References stay valid as parameters are added.
template <typename T>
class ParamStore {
 public:
  Param<T>& add(const std::string& name, std::vector<std::size_t> shape) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    if (shape.empty() || shape.size() > 2) throw ConfigError("parameter rank must be 1 or 2: " + name);
    const Eigen::Index rows = shape.size() == 1 ? 1 : Eigen::Index(shape[0]);
    const Eigen::Index cols = Eigen::Index(shape.back());
    Param<T> p{name, std::move(shape), Mat<T>::Zero(rows, cols), Mat<T>::Zero(rows, cols)};
    index_.emplace(name, params_.size());
    params_.push_back(std::move(p));
    return params_.back();
  }

  Param<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return params_[it->second];
  }
  const Param<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return params_[it->second];
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const { return params_.size(); }
  Param<T>& operator[](std::size_t i) { return params_[i]; }
  const Param<T>& operator[](std::size_t i) const { return params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.setZero();
  }

  /// Same names and shapes, values converted to U.
  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& p : params_) out.add(p.name, p.shape).value = p.value.template cast<U>();
    return out;
  }

 private:
  std::deque<Param<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
void init_normal(Param<T>& p, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = T(dist(rng));
}

template <typename T>
void init_constant(Param<T>& p, double v) {
  p.value.setConstant(T(v));
}

}  // namespace octmae::nn
