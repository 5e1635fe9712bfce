#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "adret/errors.hpp"

namespace adret {

using Vec = std::vector<double>;

// Dense row-major matrix. Accumulations over its elements always run in
// row-major order so results are bit-reproducible run to run.
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  std::span<double> row(std::size_t i) {
    return {data.data() + i * cols, cols};
  }
  std::span<const double> row(std::size_t i) const {
    return {data.data() + i * cols, cols};
  }

  bool same_shape(const Mat& other) const {
    return rows == other.rows && cols == other.cols;
  }

  bool operator==(const Mat& other) const = default;
};

inline bool all_finite(std::span<const double> x) {
  return std::all_of(x.begin(), x.end(),
                     [](double v) { return std::isfinite(v); });
}

inline bool all_finite(const Mat& m) { return all_finite(m.data); }

// Numerically stable softmax: shifts by the max before exponentiating.
inline Vec softmax_row(std::span<const double> x) {
  if (x.empty()) throw ShapeError("softmax_row: empty input");
  if (!all_finite(x)) throw NumericError("softmax_row: non-finite input");
  double m = *std::max_element(x.begin(), x.end());
  Vec out(x.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - m);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw ShapeError("dot: size mismatch " + std::to_string(a.size()) +
                     " vs " + std::to_string(b.size()));
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double cosine(std::span<const double> a, std::span<const double> b) {
  double na = norm(a);
  double nb = norm(b);
  if (na == 0.0 || nb == 0.0)
    throw DegenerateVectorError("cosine: zero-norm operand");
  return dot(a, b) / (na * nb);
}

// d cos(a, b) / d a, holding b fixed.
inline Vec cosine_grad_a(std::span<const double> a, std::span<const double> b) {
  double na = norm(a);
  double nb = norm(b);
  if (na == 0.0 || nb == 0.0)
    throw DegenerateVectorError("cosine_grad_a: zero-norm operand");
  double c = dot(a, b) / (na * nb);
  Vec g(a.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    g[i] = b[i] / (na * nb) - c * a[i] / (na * na);
  return g;
}

// m (r x c) times x (c) -> r.
inline Vec matvec(const Mat& m, std::span<const double> x) {
  if (m.cols != x.size())
    throw ShapeError("matvec: " + std::to_string(m.cols) + " cols vs vector " +
                     std::to_string(x.size()));
  Vec out(m.rows, 0.0);
  for (std::size_t i = 0; i < m.rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m.cols; ++j) s += m.at(i, j) * x[j];
    out[i] = s;
  }
  return out;
}

// w (r) times m (r x c) -> c.
inline Vec vecmat(std::span<const double> w, const Mat& m) {
  if (m.rows != w.size())
    throw ShapeError("vecmat: vector " + std::to_string(w.size()) + " vs " +
                     std::to_string(m.rows) + " rows");
  Vec out(m.cols, 0.0);
  for (std::size_t j = 0; j < m.cols; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m.rows; ++i) s += w[i] * m.at(i, j);
    out[j] = s;
  }
  return out;
}

inline Vec scale(std::span<const double> a, double s) {
  Vec out(a.begin(), a.end());
  for (double& v : out) v *= s;
  return out;
}

inline Vec add(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("add: size mismatch");
  Vec out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw ShapeError("axpy: size mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline Vec l2_normalize(std::span<const double> a) {
  double n = norm(a);
  if (n == 0.0) throw DegenerateVectorError("l2_normalize: zero vector");
  return scale(a, 1.0 / n);
}

// --- Adam with stepped learning-rate decay -------------------------------

// Optimizer state for one parameter matrix. The schedule is part of the
// state so a checkpointed run can resume with the same effective rate:
// lr(epoch) = base_lr * gamma^floor(epoch / step_every_epochs).
struct AdamState {
  Mat m;  // first-moment estimate
  Mat v;  // second-moment estimate
  std::uint64_t step_count = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double base_lr = 1e-3;
  double gamma = 0.5;
  int step_every_epochs = 100;

  static AdamState for_param(const Mat& param, double base_lr, double gamma,
                             int step_every_epochs) {
    AdamState st;
    st.m = Mat(param.rows, param.cols);
    st.v = Mat(param.rows, param.cols);
    st.base_lr = base_lr;
    st.gamma = gamma;
    st.step_every_epochs = step_every_epochs;
    return st;
  }
};

inline double scheduled_lr(const AdamState& st, int epoch) {
  if (epoch < 0) throw ConfigError("scheduled_lr: negative epoch");
  int n = epoch / std::max(1, st.step_every_epochs);
  return st.base_lr * std::pow(st.gamma, n);
}

// One Adam step with bias correction at the epoch's scheduled rate.
// `what` names the parameter in diagnostics.
inline void adam_update(Mat& param, const Mat& grad, AdamState& st, int epoch,
                        std::string_view what = "param") {
  if (!param.same_shape(grad) || !param.same_shape(st.m))
    throw ShapeError(std::string("adam_update: shape mismatch for ") +
                     std::string(what));
  if (!all_finite(grad))
    throw DivergenceError(std::string("non-finite gradient for ") +
                          std::string(what) + " at epoch " +
                          std::to_string(epoch));
  st.step_count += 1;
  double t = static_cast<double>(st.step_count);
  double lr = scheduled_lr(st, epoch);
  double bc1 = 1.0 - std::pow(st.beta1, t);
  double bc2 = 1.0 - std::pow(st.beta2, t);
  for (std::size_t i = 0; i < param.data.size(); ++i) {
    double g = grad.data[i];
    st.m.data[i] = st.beta1 * st.m.data[i] + (1.0 - st.beta1) * g;
    st.v.data[i] = st.beta2 * st.v.data[i] + (1.0 - st.beta2) * g * g;
    double mhat = st.m.data[i] / bc1;
    double vhat = st.v.data[i] / bc2;
    param.data[i] -= lr * mhat / (std::sqrt(vhat) + st.eps);
  }
}

}  // namespace adret
