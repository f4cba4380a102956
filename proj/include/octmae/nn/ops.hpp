#pragma once

#include "octmae/nn/graph.hpp"
#include "octmae/nn/rope.hpp"
#include "octmae/octree.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <span>
#include <vector>

// Differentiable kernels. Every op computes its forward value eagerly and
// registers a closure that maps the output gradient onto its inputs.
namespace octmae::nn {

namespace detail {

template <typename T>
void add_grad(Graph<T>& g, Var<T> v, const Mat<T>& delta) {
  if (auto* gp = g.grad_ptr(v)) *gp += delta;
}

template <typename T>
void check_same_shape(Var<T> a, Var<T> b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ConfigError(std::string(op) + ": shape mismatch");
}

}  // namespace detail

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  if (a.cols() != b.rows()) throw ConfigError("matmul: inner dimension mismatch");
  Mat<T> out = a.value() * b.value();
  return a.graph->emit(std::move(out), {a, b}, [a, b](const Mat<T>& go, const Mat<T>&, Graph<T>& g) {
    if (auto* ga = g.grad_ptr(a)) ga->noalias() += go * g.value(b).transpose();
    if (auto* gb = g.grad_ptr(b)) gb->noalias() += g.value(a).transpose() * go;
  });
}

/// x W + b, b a 1 x out row.
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  if (x.cols() != w.rows()) throw ConfigError("linear: input width mismatch");
  if (b.rows() != 1 || b.cols() != w.cols()) throw ConfigError("linear: bias shape mismatch");
  Mat<T> out = x.value() * w.value();
  out.rowwise() += b.value().row(0);
  return x.graph->emit(std::move(out), {x, w, b}, [x, w, b](const Mat<T>& go, const Mat<T>&, Graph<T>& g) {
    if (auto* gx = g.grad_ptr(x)) gx->noalias() += go * g.value(w).transpose();
    if (auto* gw = g.grad_ptr(w)) gw->noalias() += g.value(x).transpose() * go;
    if (auto* gb = g.grad_ptr(b)) *gb += go.colwise().sum();
  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w) {
  return matmul(x, w);
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::check_same_shape(a, b, "add");
  return a.graph->emit(a.value() + b.value(), {a, b}, [a, b](const Mat<T>& go, const Mat<T>&, Graph<T>& g) {
    detail::add_grad(g, a, go);
    detail::add_grad(g, b, go);
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::check_same_shape(a, b, "sub");
  return a.graph->emit(a.value() - b.value(), {a, b}, [a, b](const Mat<T>& go, const Mat<T>&, Graph<T>& g) {
    detail::add_grad(g, a, go);
    detail::add_grad(g, b, Mat<T>(-go));
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::check_same_shape(a, b, "mul");
  return a.graph->emit(a.value().cwiseProduct(b.value()), {a, b}, [a, b](const Mat<T>& go, const Mat<T>&, Graph<T>& g) {
    if (auto* ga = g.grad_ptr(a)) *ga += go.cwiseProduct(g.value(b));
    if (auto* gb = g.grad_ptr(b)) *gb += go.cwiseProduct(g.value(a));
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  return a.graph->emit(a.value() * s, {a}, [a, s](const Mat<T>& go, const Mat<T>&, Graph<T>& g) {
    detail::add_grad(g, a, Mat<T>(go * s));
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  Mat<T> out = a.value().cwiseMax(T(0));
  return a.graph->emit(std::move(out), {a}, [a](const Mat<T>& go, const Mat<T>&, Graph<T>& g) {
    if (auto* ga = g.grad_ptr(a)) {
      const auto& x = g.value(a);
      for (Eigen::Index i = 0; i < x.size(); ++i)
        if (x.data()[i] > T(0)) ga->data()[i] += go.data()[i];
    }
  });
}

/// Exact GELU, x * Phi(x).
template <typename T>
Var<T> gelu(Var<T> a) {
  const auto& x = a.value();
  Mat<T> out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const T v = x.data()[i];
    out.data()[i] = T(0.5) * v * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
  }
  return a.graph->emit(std::move(out), {a}, [a](const Mat<T>& go, const Mat<T>&, Graph<T>& g) {
    if (auto* ga = g.grad_ptr(a)) {
      const auto& x = g.value(a);
      const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
      for (Eigen::Index i = 0; i < x.size(); ++i) {
        const T v = x.data()[i];
        const T cdf = T(0.5) * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
        ga->data()[i] += go.data()[i] * (cdf + v * pdf);
      }
    }
  });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  const auto& x = a.value();
  Mat<T> out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const T v = x.data()[i];
    out.data()[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  }
  return a.graph->emit(std::move(out), {a}, [a](const Mat<T>& go, const Mat<T>& y, Graph<T>& g) {
    if (auto* ga = g.grad_ptr(a)) *ga += go.cwiseProduct(y.cwiseProduct((T(1) - y.array()).matrix()));
  });
}

/// Row-wise layer normalization with affine gamma/beta (1 x C each).
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  const auto& xv = x.value();
  const Eigen::Index n = xv.rows(), c = xv.cols();
  if (gamma.cols() != c || beta.cols() != c) throw ConfigError("layer_norm: affine width mismatch");
  auto xhat = std::make_shared<Mat<T>>(n, c);
  auto inv_std = std::make_shared<std::vector<T>>(std::size_t(n));
  Mat<T> out(n, c);
  for (Eigen::Index r = 0; r < n; ++r) {
    const T mean = xv.row(r).mean();
    const T var = (xv.row(r).array() - mean).square().mean();
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[std::size_t(r)] = is;
    xhat->row(r) = (xv.row(r).array() - mean) * is;
    out.row(r) = xhat->row(r).cwiseProduct(gamma.value().row(0)) + beta.value().row(0);
  }
  return x.graph->emit(std::move(out), {x, gamma, beta},
                       [x, gamma, beta, xhat, inv_std](const Mat<T>& go, const Mat<T>&, Graph<T>& g) {
                         if (auto* gg = g.grad_ptr(gamma)) *gg += go.cwiseProduct(*xhat).colwise().sum();
                         if (auto* gb = g.grad_ptr(beta)) *gb += go.colwise().sum();
                         if (auto* gx = g.grad_ptr(x)) {
                           const auto& gam = g.value(gamma);
                           for (Eigen::Index r = 0; r < go.rows(); ++r) {
                             const Eigen::Matrix<T, 1, Eigen::Dynamic> dxh = go.row(r).cwiseProduct(gam.row(0));
                             const T m1 = dxh.mean();
                             const T m2 = dxh.cwiseProduct(xhat->row(r)).mean();
                             gx->row(r) += ((dxh.array() - m1 - xhat->row(r).array() * m2) *
                                            (*inv_std)[std::size_t(r)]).matrix();
                           }
                         }
                       });
}

/// Scales every row to unit Euclidean norm.
template <typename T>
Var<T> normalize_rows(Var<T> x, T eps = T(1e-12)) {
  const auto& xv = x.value();
  auto norms = std::make_shared<std::vector<T>>(std::size_t(xv.rows()));
  Mat<T> out(xv.rows(), xv.cols());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const T n = std::max(xv.row(r).norm(), eps);
    (*norms)[std::size_t(r)] = n;
    out.row(r) = xv.row(r) / n;
  }
  return x.graph->emit(std::move(out), {x}, [x, norms](const Mat<T>& go, const Mat<T>& y, Graph<T>& g) {
    if (auto* gx = g.grad_ptr(x)) {
      for (Eigen::Index r = 0; r < go.rows(); ++r) {
        const T d = go.row(r).dot(y.row(r));
        gx->row(r) += (go.row(r) - d * y.row(r)) / (*norms)[std::size_t(r)];
      }
    }
  });
}

template <typename T>
Var<T> concat_rows(Var<T> a, Var<T> b) {
  if (a.cols() != b.cols() && a.rows() > 0 && b.rows() > 0) throw ConfigError("concat_rows: width mismatch");
  const Eigen::Index c = a.rows() > 0 ? a.cols() : b.cols();
  Mat<T> out(a.rows() + b.rows(), c);
  if (a.rows() > 0) out.topRows(a.rows()) = a.value();
  if (b.rows() > 0) out.bottomRows(b.rows()) = b.value();
  const Eigen::Index na = a.rows(), nb = b.rows();
  return a.graph->emit(std::move(out), {a, b}, [a, b, na, nb](const Mat<T>& go, const Mat<T>&, Graph<T>& g) {
    if (na > 0)
      if (auto* ga = g.grad_ptr(a)) *ga += go.topRows(na);
    if (nb > 0)
      if (auto* gb = g.grad_ptr(b)) *gb += go.bottomRows(nb);
  });
}

/// out.row(i) = x.row(index[i]), or zeros where index[i] == kAbsent.
template <typename T>
Var<T> gather_rows(Var<T> x, std::vector<std::int32_t> index) {
  const auto& xv = x.value();
  Mat<T> out = Mat<T>::Zero(Eigen::Index(index.size()), xv.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] == kAbsent) continue;
    if (index[i] < 0 || index[i] >= xv.rows()) throw ConfigError("gather_rows: index out of range");
    out.row(Eigen::Index(i)) = xv.row(index[i]);
  }
  auto idx = std::make_shared<std::vector<std::int32_t>>(std::move(index));
  return x.graph->emit(std::move(out), {x}, [x, idx](const Mat<T>& go, const Mat<T>&, Graph<T>& g) {
    if (auto* gx = g.grad_ptr(x))
      for (std::size_t i = 0; i < idx->size(); ++i)
        if ((*idx)[i] != kAbsent) gx->row((*idx)[i]) += go.row(Eigen::Index(i));
  });
}

/// Segment mean: out.row(i) = mean of x rows members[offset[i] .. offset[i+1]).
template <typename T>
Var<T> gather_mean(Var<T> x, std::vector<std::size_t> offset, std::vector<std::size_t> members) {
  if (offset.empty()) throw ConfigError("gather_mean: empty offset list");
  const auto& xv = x.value();
  const std::size_t n = offset.size() - 1;
  Mat<T> out = Mat<T>::Zero(Eigen::Index(n), xv.cols());
  for (std::size_t i = 0; i < n; ++i) {
    const auto b = offset[i], e = offset[i + 1];
    if (e <= b) throw ConfigError("gather_mean: empty segment");
    for (auto m = b; m < e; ++m) out.row(Eigen::Index(i)) += xv.row(Eigen::Index(members[m]));
    out.row(Eigen::Index(i)) /= T(e - b);
  }
  auto off = std::make_shared<std::vector<std::size_t>>(std::move(offset));
  auto mem = std::make_shared<std::vector<std::size_t>>(std::move(members));
  return x.graph->emit(std::move(out), {x}, [x, off, mem](const Mat<T>& go, const Mat<T>&, Graph<T>& g) {
    if (auto* gx = g.grad_ptr(x)) {
      for (std::size_t i = 0; i + 1 < off->size(); ++i) {
        const auto b = (*off)[i], e = (*off)[i + 1];
        const T w = T(1) / T(e - b);
        for (auto m = b; m < e; ++m) gx->row(Eigen::Index((*mem)[m])) += w * go.row(Eigen::Index(i));
      }
    }
  });
}

/// Tap-gathered convolution: out(i) = b + sum_t W_t^T x(table(i, t)), absent
/// taps contributing zero. W is (taps * Cin) x Cout, tap-major.
/// Covers stride-1 sparse convolution (27-tap neighbor table), stride-2
/// downsampling (8-tap child table), transposed upsampling (8-tap parent
/// table) and dense 2D convolution (9-tap pixel table).
template <typename T>
Var<T> gathered_conv(Var<T> x, const NeighborTable& table, Var<T> w, Var<T> b) {
  const Eigen::Index cin = x.cols();
  const Eigen::Index cout = w.cols();
  if (w.rows() != Eigen::Index(table.taps) * cin)
    throw ConfigError("sparse_conv: weight rows " + std::to_string(w.rows()) + " != taps * Cin " +
                      std::to_string(Eigen::Index(table.taps) * cin));
  if (b.rows() != 1 || b.cols() != cout) throw ConfigError("sparse_conv: bias shape mismatch");
  // Per-tap (out_row, in_row) pairs.
  auto pairs = std::make_shared<std::vector<std::vector<std::pair<std::int32_t, std::int32_t>>>>(table.taps);
  for (std::size_t r = 0; r < table.rows; ++r)
    for (std::size_t t = 0; t < table.taps; ++t)
      if (const auto src = table(r, t); src != kAbsent) {
        if (src < 0 || src >= x.rows()) throw ConfigError("sparse_conv: neighbor index out of range");
        (*pairs)[t].emplace_back(std::int32_t(r), src);
      }
  const auto& xv = x.value();
  const auto& wv = w.value();
  Mat<T> out(Eigen::Index(table.rows), cout);
  out.rowwise() = b.value().row(0);
  Mat<T> gathered, y;
  for (std::size_t t = 0; t < table.taps; ++t) {
    const auto& pt = (*pairs)[t];
    if (pt.empty()) continue;
    gathered.resize(Eigen::Index(pt.size()), cin);
    for (std::size_t m = 0; m < pt.size(); ++m) gathered.row(Eigen::Index(m)) = xv.row(pt[m].second);
    y.noalias() = gathered * wv.middleRows(Eigen::Index(t) * cin, cin);
    for (std::size_t m = 0; m < pt.size(); ++m) out.row(pt[m].first) += y.row(Eigen::Index(m));
  }
  return x.graph->emit(std::move(out), {x, w, b}, [x, w, b, pairs, cin](const Mat<T>& go, const Mat<T>&, Graph<T>& g) {
    if (auto* gb = g.grad_ptr(b)) *gb += go.colwise().sum();
    auto* gx = g.grad_ptr(x);
    auto* gw = g.grad_ptr(w);
    const auto& xv = g.value(x);
    const auto& wv = g.value(w);
    Mat<T> gathered, dy, dg;
    for (std::size_t t = 0; t < pairs->size(); ++t) {
      const auto& pt = (*pairs)[t];
      if (pt.empty()) continue;
      dy.resize(Eigen::Index(pt.size()), go.cols());
      for (std::size_t m = 0; m < pt.size(); ++m) dy.row(Eigen::Index(m)) = go.row(pt[m].first);
      if (gw) {
        gathered.resize(Eigen::Index(pt.size()), cin);
        for (std::size_t m = 0; m < pt.size(); ++m) gathered.row(Eigen::Index(m)) = xv.row(pt[m].second);
        gw->middleRows(Eigen::Index(t) * cin, cin).noalias() += gathered.transpose() * dy;
      }
      if (gx) {
        dg.noalias() = dy * wv.middleRows(Eigen::Index(t) * cin, cin).transpose();
        for (std::size_t m = 0; m < pt.size(); ++m) gx->row(pt[m].second) += dg.row(Eigen::Index(m));
      }
    }
  });
}

/// 3x3 zero-padded pixel neighborhood of an H x W raster, x fastest.
inline NeighborTable pixel_table(int width, int height) {
  NeighborTable t{std::size_t(width) * height, 9, std::vector<std::int32_t>(std::size_t(width) * height * 9, kAbsent)};
  for (int v = 0; v < height; ++v)
    for (int u = 0; u < width; ++u)
      for (int dv = -1; dv <= 1; ++dv)
        for (int du = -1; du <= 1; ++du) {
          const int uu = u + du, vv = v + dv;
          if (uu < 0 || vv < 0 || uu >= width || vv >= height) continue;
          t.index[(std::size_t(v) * width + u) * 9 + std::size_t((dv + 1) * 3 + du + 1)] = vv * width + uu;
        }
  return t;
}

/// Applies the 3D rotary embedding to every row. Rows are split into
/// consecutive segments of width spec.width (one segment = full width,
/// several = per-head application).
template <typename T>
Var<T> rope(Var<T> x, std::shared_ptr<const std::vector<Vec3>> coords, const RopeSpec& spec) {
  if (!spec.active()) return x;
  if (std::size_t(x.rows()) != coords->size()) throw ConfigError("rope: coordinate count mismatch");
  if (spec.width <= 0 || x.cols() % spec.width != 0) throw ConfigError("rope: width does not tile the features");
  const Eigen::Index segments = x.cols() / spec.width;
  Mat<T> out = x.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r)
    for (Eigen::Index s = 0; s < segments; ++s)
      rope_rotate_inplace(out.row(r).data() + s * spec.width, (*coords)[std::size_t(r)], spec);
  return x.graph->emit(std::move(out), {x}, [x, coords, spec, segments](const Mat<T>& go, const Mat<T>&, Graph<T>& g) {
    if (auto* gx = g.grad_ptr(x)) {
      Mat<T> back = go;
      for (Eigen::Index r = 0; r < back.rows(); ++r)
        for (Eigen::Index s = 0; s < segments; ++s)
          rope_rotate_inplace(back.row(r).data() + s * spec.width, (*coords)[std::size_t(r)], spec, -1.0);
      *gx += back;
    }
  });
}

/// Multi-head scaled dot-product attention over already projected q, k, v.
/// Optionally exposes the per-head softmax weights.
template <typename T>
Var<T> attention_core(Var<T> q, Var<T> k, Var<T> v, int heads, std::vector<Mat<T>>* weights_out = nullptr) {
  if (k.rows() == 0) throw ConfigError("attention over empty key set");
  if (q.cols() != k.cols() || k.cols() != v.cols() || k.rows() != v.rows())
    throw ConfigError("attention: q/k/v shape mismatch");
  if (heads <= 0 || q.cols() % heads != 0) throw ConfigError("attention: model_dim not divisible by heads");
  const Eigen::Index dh = q.cols() / heads;
  const T sc = T(1) / std::sqrt(T(dh));
  auto probs = std::make_shared<std::vector<Mat<T>>>(std::size_t(heads));
  Mat<T> out(q.rows(), q.cols());
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  for (int h = 0; h < heads; ++h) {
    Mat<T> s = (qv.middleCols(h * dh, dh) * kv.middleCols(h * dh, dh).transpose()) * sc;
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
      const T mx = s.row(r).maxCoeff();
      s.row(r) = (s.row(r).array() - mx).exp().matrix();
      s.row(r) /= s.row(r).sum();
    }
    out.middleCols(h * dh, dh).noalias() = s * vv.middleCols(h * dh, dh);
    (*probs)[std::size_t(h)] = std::move(s);
  }
  if (weights_out) *weights_out = *probs;
  return q.graph->emit(std::move(out), {q, k, v}, [q, k, v, probs, heads, dh, sc](const Mat<T>& go, const Mat<T>&, Graph<T>& g) {
    auto* gq = g.grad_ptr(q);
    auto* gk = g.grad_ptr(k);
    auto* gv = g.grad_ptr(v);
    const auto& qv = g.value(q);
    const auto& kv = g.value(k);
    const auto& vv = g.value(v);
    for (int h = 0; h < heads; ++h) {
      const auto& p = (*probs)[std::size_t(h)];
      const auto goh = go.middleCols(h * dh, dh);
      if (gv) gv->middleCols(h * dh, dh).noalias() += p.transpose() * goh;
      if (!gq && !gk) continue;
      Mat<T> dp = goh * vv.middleCols(h * dh, dh).transpose();
      for (Eigen::Index r = 0; r < dp.rows(); ++r) {
        const T dot = dp.row(r).dot(p.row(r));
        dp.row(r) = p.row(r).cwiseProduct((dp.row(r).array() - dot).matrix());
      }
      dp *= sc;
      if (gq) gq->middleCols(h * dh, dh).noalias() += dp * kv.middleCols(h * dh, dh);
      if (gk) gk->middleCols(h * dh, dh).noalias() += dp.transpose() * qv.middleCols(h * dh, dh);
    }
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  Mat<T> out(1, 1);
  out(0, 0) = x.value().sum();
  return x.graph->emit(std::move(out), {x}, [x](const Mat<T>& go, const Mat<T>&, Graph<T>& g) {
    if (auto* gx = g.grad_ptr(x)) gx->array() += go(0, 0);
  });
}

/// sum(x .* weights) with constant weights.
template <typename T>
Var<T> weighted_sum(Var<T> x, Mat<T> weights) {
  if (weights.rows() != x.rows() || weights.cols() != x.cols()) throw ConfigError("weighted_sum: shape mismatch");
  Mat<T> out(1, 1);
  out(0, 0) = x.value().cwiseProduct(weights).sum();
  auto w = std::make_shared<Mat<T>>(std::move(weights));
  return x.graph->emit(std::move(out), {x}, [x, w](const Mat<T>& go, const Mat<T>&, Graph<T>& g) {
    if (auto* gx = g.grad_ptr(x)) *gx += go(0, 0) * *w;
  });
}

/// Sum of scalar nodes.
template <typename T>
Var<T> add_scalars(Graph<T>& graph, const std::vector<Var<T>>& terms) {
  Mat<T> out = Mat<T>::Zero(1, 1);
  for (const auto& t : terms) {
    if (t.value().size() != 1) throw ConfigError("add_scalars: non-scalar term");
    out(0, 0) += t.value()(0, 0);
  }
  auto ts = std::make_shared<std::vector<Var<T>>>(terms);
  bool needs = false;
  for (const auto& t : terms) needs = needs || graph.needs_grad(t);
  if (!needs || !graph.recording()) return graph.constant(std::move(out));
  // emit() takes an initializer list; route through the first term and
  // propagate to all terms in the closure.
  Var<T> anchor = terms.front();
  for (const auto& t : terms)
    if (graph.needs_grad(t)) anchor = t;
  return graph.emit(std::move(out), {anchor}, [ts](const Mat<T>& go, const Mat<T>&, Graph<T>& g) {
    for (const auto& t : *ts)
      if (auto* gt = g.grad_ptr(t)) (*gt)(0, 0) += go(0, 0);
  });
}

/// Mean binary cross entropy on probabilities clamped to [eps, 1 - eps].
template <typename T>
Var<T> bce_mean(Var<T> probs, std::vector<double> labels, double eps = 1e-7) {
  if (probs.cols() != 1 || std::size_t(probs.rows()) != labels.size()) throw ConfigError("bce: length mismatch");
  const auto& p = probs.value();
  const std::size_t n = labels.size();
  Mat<T> out = Mat<T>::Zero(1, 1);
  if (n == 0) return probs.graph->constant(std::move(out));
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double pi = std::clamp(double(p(Eigen::Index(i), 0)), eps, 1.0 - eps);
    acc -= labels[i] * std::log(pi) + (1.0 - labels[i]) * std::log(1.0 - pi);
  }
  out(0, 0) = T(acc / double(n));
  auto lab = std::make_shared<std::vector<double>>(std::move(labels));
  return probs.graph->emit(std::move(out), {probs}, [probs, lab, eps](const Mat<T>& go, const Mat<T>&, Graph<T>& g) {
    if (auto* gp = g.grad_ptr(probs)) {
      const auto& p = g.value(probs);
      const double n = double(lab->size());
      for (std::size_t i = 0; i < lab->size(); ++i) {
        const double pi = double(p(Eigen::Index(i), 0));
        if (pi < eps || pi > 1.0 - eps) continue;
        const double y = (*lab)[i];
        (*gp)(Eigen::Index(i), 0) += T(double(go(0, 0)) * (-(y / pi) + (1.0 - y) / (1.0 - pi)) / n);
      }
    }
  });
}

/// Mean over rows of the Euclidean distance to a constant target.
template <typename T>
Var<T> mean_row_distance(Var<T> x, Mat<T> target) {
  if (target.rows() != x.rows() || target.cols() != x.cols()) throw ConfigError("mean_row_distance: shape mismatch");
  Mat<T> out = Mat<T>::Zero(1, 1);
  const Eigen::Index n = x.rows();
  if (n == 0) return x.graph->constant(std::move(out));
  Mat<T> diff = x.value() - target;
  out(0, 0) = diff.rowwise().norm().sum() / T(n);
  auto d = std::make_shared<Mat<T>>(std::move(diff));
  return x.graph->emit(std::move(out), {x}, [x, d, n](const Mat<T>& go, const Mat<T>&, Graph<T>& g) {
    if (auto* gx = g.grad_ptr(x))
      for (Eigen::Index r = 0; r < n; ++r) {
        const T len = d->row(r).norm();
        if (len > T(0)) gx->row(r) += go(0, 0) * d->row(r) / (len * T(n));
      }
  });
}

/// Mean absolute difference to a constant target.
template <typename T>
Var<T> mean_abs_diff(Var<T> x, Mat<T> target) {
  if (target.rows() != x.rows() || target.cols() != x.cols()) throw ConfigError("mean_abs_diff: shape mismatch");
  Mat<T> out = Mat<T>::Zero(1, 1);
  const Eigen::Index n = x.value().size();
  if (n == 0) return x.graph->constant(std::move(out));
  Mat<T> diff = x.value() - target;
  out(0, 0) = diff.cwiseAbs().sum() / T(n);
  auto d = std::make_shared<Mat<T>>(std::move(diff));
  return x.graph->emit(std::move(out), {x}, [x, d, n](const Mat<T>& go, const Mat<T>&, Graph<T>& g) {
    if (auto* gx = g.grad_ptr(x))
      for (Eigen::Index i = 0; i < n; ++i) {
        const T v = d->data()[i];
        if (v != T(0)) gx->data()[i] += go(0, 0) * (v > T(0) ? T(1) : T(-1)) / T(n);
      }
  });
}

}  // namespace octmae::nn
