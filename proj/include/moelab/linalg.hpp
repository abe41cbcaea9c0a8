#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "moelab/errors.hpp"

namespace moelab {

using Vector = std::vector<double>;

// Row-major dense matrix. All kernels accumulate in 64-bit, left to right,
// so two runs on identical inputs are bit-identical.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  Vector data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  double* row(std::size_t i) { return data.data() + i * cols; }
  const double* row(std::size_t i) const { return data.data() + i * cols; }

  std::size_t size() const { return data.size(); }

  bool same_shape(const Matrix& o) const {
    return rows == o.rows && cols == o.cols;
  }
};

// Integer count matrix (collaboration / token-similarity tables).
struct CountMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int64_t> data;

  CountMatrix() = default;
  CountMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0) {}

  std::int64_t& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  std::int64_t at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

inline void check_finite(const Vector& v, const char* what) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw ValidationError(std::string(what) + ": non-finite entry at index " +
                            std::to_string(i));
    }
  }
}

inline void check_finite(const Matrix& m, const char* what) {
  for (std::size_t i = 0; i < m.data.size(); ++i) {
    if (!std::isfinite(m.data[i])) {
      throw ValidationError(std::string(what) + ": non-finite entry at flat index " +
                            std::to_string(i));
    }
  }
}

inline double l2_norm(const Vector& v) {
  check_finite(v, "l2_norm");
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

inline double dot(const Vector& u, const Vector& v) {
  double acc = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) acc += u[i] * v[i];
  return acc;
}

// Near-zero vectors (norm < 1e-12) yield cosine 0: no similarity evidence,
// and no NaN poisoning of similarity matrices.
inline constexpr double kCosineNormFloor = 1e-12;

inline double cosine(const Vector& u, const Vector& v) {
  if (u.size() != v.size()) {
    throw ValidationError("cosine: dimension mismatch " + std::to_string(u.size()) +
                          " vs " + std::to_string(v.size()));
  }
  check_finite(u, "cosine(u)");
  check_finite(v, "cosine(v)");
  double uu = 0.0, vv = 0.0, uv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uu += u[i] * u[i];
    vv += v[i] * v[i];
    uv += u[i] * v[i];
  }
  const double nu = std::sqrt(uu), nv = std::sqrt(vv);
  if (nu < kCosineNormFloor || nv < kCosineNormFloor) return 0.0;
  double c = uv / (nu * nv);
  return std::clamp(c, -1.0, 1.0);
}

namespace detail {

// Cyclic Jacobi diagonalization of a symmetric matrix; returns eigenvalues
// in descending order. `a` is destroyed.
inline std::vector<double> jacobi_eigenvalues(Matrix a, const std::string& identity) {
  const std::size_t n = a.rows;
  const int max_sweeps = 64;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += a.at(i, j) * a.at(i, j);
    double diag = 0.0;
    for (std::size_t i = 0; i < n; ++i) diag += a.at(i, i) * a.at(i, i);
    if (off <= 1e-26 * std::max(diag, 1e-300)) {
      std::vector<double> ev(n);
      for (std::size_t i = 0; i < n; ++i) ev[i] = a.at(i, i);
      std::sort(ev.begin(), ev.end(), std::greater<double>());
      return ev;
    }
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a.at(p, q);
        if (apq == 0.0) continue;
        const double app = a.at(p, p);
        const double aqq = a.at(q, q);
        const double tau = (aqq - app) / (2.0 * apq);
        const double t = (tau >= 0.0)
                             ? 1.0 / (tau + std::sqrt(1.0 + tau * tau))
                             : 1.0 / (tau - std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a.at(k, p);
          const double akq = a.at(k, q);
          a.at(k, p) = c * akp - s * akq;
          a.at(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a.at(p, k);
          const double aqk = a.at(q, k);
          a.at(p, k) = c * apk - s * aqk;
          a.at(q, k) = s * apk + c * aqk;
        }
      }
    }
  }
  throw NumericalError("jacobi_eigenvalues: no convergence after 64 sweeps (" +
                       identity + ")");
}

}  // namespace detail

// Gram matrix of the smaller side: MᵀM if cols <= rows, else MMᵀ.
inline Matrix gram_small_side(const Matrix& m) {
  if (m.cols <= m.rows) {
    Matrix g(m.cols, m.cols);
    for (std::size_t i = 0; i < m.cols; ++i) {
      for (std::size_t j = i; j < m.cols; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < m.rows; ++k) acc += m.at(k, i) * m.at(k, j);
        g.at(i, j) = acc;
        g.at(j, i) = acc;
      }
    }
    return g;
  }
  Matrix g(m.rows, m.rows);
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t j = i; j < m.rows; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < m.cols; ++k) acc += m.at(i, k) * m.at(j, k);
      g.at(i, j) = acc;
      g.at(j, i) = acc;
    }
  }
  return g;
}

// Singular values in descending order, via Jacobi on the Gram matrix of the
// smaller side. Matrices up to 1024x1024 supported.
inline Vector singular_values(const Matrix& m, const std::string& identity = "matrix") {
  if (m.rows == 0 || m.cols == 0) {
    throw ValidationError("singular_values: empty matrix (" + identity + ")");
  }
  if (m.rows > 1024 || m.cols > 1024) {
    throw ValidationError("singular_values: matrix exceeds 1024x1024 (" + identity + ")");
  }
  check_finite(m, "singular_values");
  std::vector<double> ev = detail::jacobi_eigenvalues(gram_small_side(m), identity);
  Vector sv(ev.size());
  for (std::size_t i = 0; i < ev.size(); ++i) sv[i] = std::sqrt(std::max(ev[i], 0.0));
  return sv;
}

inline double frobenius_sq(const Matrix& m) {
  double acc = 0.0;
  for (double x : m.data) acc += x * x;
  return acc;
}

// Frobenius² / σ₁². Undefined (rejected) for the all-zero matrix.
inline double stable_rank(const Matrix& m, const std::string& identity = "matrix") {
  check_finite(m, "stable_rank");
  const double fro2 = frobenius_sq(m);
  if (fro2 == 0.0) {
    throw ValidationError("stable_rank: all-zero matrix (" + identity + ")");
  }
  Vector sv = singular_values(m, identity);
  return fro2 / (sv[0] * sv[0]);
}

// Per-dimension mean and population standard deviation (divide by count).
inline std::pair<Vector, Vector> per_dim_stats(const std::vector<Vector>& samples) {
  if (samples.empty()) {
    throw ValidationError("per_dim_stats: empty sample set");
  }
  const std::size_t dim = samples[0].size();
  for (std::size_t s = 0; s < samples.size(); ++s) {
    if (samples[s].size() != dim) {
      throw ValidationError("per_dim_stats: dimension mismatch at sample " +
                            std::to_string(s));
    }
    check_finite(samples[s], "per_dim_stats");
  }
  Vector mean(dim, 0.0), var(dim, 0.0);
  for (const auto& s : samples)
    for (std::size_t j = 0; j < dim; ++j) mean[j] += s[j];
  const double inv = 1.0 / static_cast<double>(samples.size());
  for (std::size_t j = 0; j < dim; ++j) mean[j] *= inv;
  for (const auto& s : samples)
    for (std::size_t j = 0; j < dim; ++j) {
      const double d = s[j] - mean[j];
      var[j] += d * d;
    }
  Vector std(dim);
  for (std::size_t j = 0; j < dim; ++j) std[j] = std::sqrt(var[j] * inv);
  return {mean, std};
}

// Values strictly outside [mu - c*sigma, mu + c*sigma]; 0 when sigma = 0.
inline std::size_t outlier_count(const Vector& values, double c) {
  if (values.size() < 2) {
    throw ValidationError("outlier_count: need at least 2 values");
  }
  check_finite(values, "outlier_count");
  double mean = 0.0;
  for (double x : values) mean += x;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double x : values) {
    const double d = x - mean;
    var += d * d;
  }
  const double sigma = std::sqrt(var / static_cast<double>(values.size()));
  if (sigma == 0.0) return 0;
  const double lo = mean - c * sigma;
  const double hi = mean + c * sigma;
  std::size_t n = 0;
  for (double x : values)
    if (x < lo || x > hi) ++n;
  return n;
}

// ---- plain matmul helpers used by the model (row-vector convention) ----

// y += x · W, where x has W.rows entries and y has W.cols entries.
inline void add_vec_mat(const double* x, const Matrix& w, double* y) {
  for (std::size_t i = 0; i < w.rows; ++i) {
    const double xi = x[i];
    const double* wr = w.row(i);
    for (std::size_t j = 0; j < w.cols; ++j) y[j] += xi * wr[j];
  }
}

// y += W · g, i.e. y_i += Σ_j W[i][j] g[j]  (backprop through x·W).
inline void add_mat_vec(const Matrix& w, const double* g, double* y) {
  for (std::size_t i = 0; i < w.rows; ++i) {
    const double* wr = w.row(i);
    double acc = 0.0;
    for (std::size_t j = 0; j < w.cols; ++j) acc += wr[j] * g[j];
    y[i] += acc;
  }
}

// W += outer(x, g): W[i][j] += x[i] * g[j].
inline void add_outer(const double* x, const double* g, Matrix& w) {
  for (std::size_t i = 0; i < w.rows; ++i) {
    const double xi = x[i];
    double* wr = w.row(i);
    for (std::size_t j = 0; j < w.cols; ++j) wr[j] += xi * g[j];
  }
}

inline Vector flatten_concat(const Matrix& a, const Matrix& b) {
  Vector out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.data.begin(), a.data.end());
  out.insert(out.end(), b.data.begin(), b.data.end());
  return out;
}

}  // namespace moelab
