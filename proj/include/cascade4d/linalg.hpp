// SPDX-License-Identifier: Apache-2.0
#pragma once

// Small dense symmetric linear algebra (row-major square matrices).

#include <cmath>
#include <vector>

#include "cascade4d/error.hpp"

namespace c4d {

struct Matrix {
  std::size_t n = 0;
  std::vector<double> a;  // n * n

  Matrix() = default;
  explicit Matrix(std::size_t size, double fill = 0.0) : n(size), a(size * size, fill) {}

  static Matrix identity(std::size_t size) {
    Matrix m(size);
    for (std::size_t i = 0; i < size; ++i) m(i, i) = 1.0;
    return m;
  }

  double& operator()(std::size_t i, std::size_t j) { return a[i * n + j]; }
  double operator()(std::size_t i, std::size_t j) const { return a[i * n + j]; }

  double trace() const {
    double t = 0.0;
    for (std::size_t i = 0; i < n; ++i) t += (*this)(i, i);
    return t;
  }
  double frobenius() const {
    double s = 0.0;
    for (double v : a) s += v * v;
    return std::sqrt(s);
  }
};

inline Matrix operator*(const Matrix& x, const Matrix& y) {
  if (x.n != y.n) throw ShapeError("matrix size mismatch");
  Matrix r(x.n);
  for (std::size_t i = 0; i < x.n; ++i)
    for (std::size_t k = 0; k < x.n; ++k) {
      const double v = x(i, k);
      for (std::size_t j = 0; j < x.n; ++j) r(i, j) += v * y(k, j);
    }
  return r;
}

inline Matrix symmetrized(const Matrix& m) {
  Matrix r(m.n);
  for (std::size_t i = 0; i < m.n; ++i)
    for (std::size_t j = 0; j < m.n; ++j) r(i, j) = 0.5 * (m(i, j) + m(j, i));
  return r;
}

struct SymEigen {
  std::vector<double> values;
  Matrix vectors;  // columns are eigenvectors
};

/// Cyclic Jacobi rotations until off-diagonal mass is negligible.
inline SymEigen jacobi_eigen(Matrix m, std::size_t max_sweeps = 100) {
  const std::size_t n = m.n;
  Matrix v = Matrix::identity(n);
  const double scale = std::max(m.frobenius(), 1e-300);
  for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += m(i, j) * m(i, j);
    if (std::sqrt(off) <= 1e-15 * scale) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = m(p, q);
        if (std::abs(apq) <= 1e-300) continue;
        const double theta = (m(q, q) - m(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double mkp = m(k, p), mkq = m(k, q);
          m(k, p) = c * mkp - s * mkq;
          m(k, q) = s * mkp + c * mkq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double mpk = m(p, k), mqk = m(q, k);
          m(p, k) = c * mpk - s * mqk;
          m(q, k) = s * mpk + c * mqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
  }
  SymEigen e;
  e.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) e.values[i] = m(i, i);
  e.vectors = std::move(v);
  return e;
}

/// V diag(f(lambda)) V^T.
template <typename F>
Matrix spectral_apply(const SymEigen& e, F f) {
  const std::size_t n = e.values.size();
  Matrix r(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double fk = f(e.values[k]);
    if (fk == 0.0) continue;
    for (std::size_t i = 0; i < n; ++i) {
      const double vik = e.vectors(i, k) * fk;
      for (std::size_t j = 0; j < n; ++j) r(i, j) += vik * e.vectors(j, k);
    }
  }
  return r;
}

}  // namespace c4d
