#pragma once

#include <cassert>
#include <cstddef>
#include <vector>

namespace mixline {

using Vec = std::vector<double>;

// Dense row-major matrix. Deliberately minimal: the nets in this project are
// tiny, so plain contiguous loops beat any heavier dependency.
struct Matrix {
  int rows = 0;
  int cols = 0;
  Vec a;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, 0.0) {}

  double& at(int r, int c) { return a[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return a[static_cast<std::size_t>(r) * cols + c]; }
  double* row(int r) { return a.data() + static_cast<std::size_t>(r) * cols; }
  const double* row(int r) const { return a.data() + static_cast<std::size_t>(r) * cols; }
  std::size_t size() const { return a.size(); }
  void zero() { std::fill(a.begin(), a.end(), 0.0); }
};

inline double dot(const double* x, const double* y, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

// C (B x out) = X (B x in) * W^T (W is out x in), plus bias per output.
inline void gemm_xt(const Matrix& x, const Matrix& w, const Vec& bias, Matrix& out) {
  assert(x.cols == w.cols && static_cast<int>(bias.size()) == w.rows);
  out.rows = x.rows;
  out.cols = w.rows;
  out.a.assign(static_cast<std::size_t>(out.rows) * out.cols, 0.0);
  for (int b = 0; b < x.rows; ++b) {
    const double* xr = x.row(b);
    double* yr = out.row(b);
    for (int o = 0; o < w.rows; ++o) yr[o] = dot(xr, w.row(o), x.cols) + bias[o];
  }
}

// dX (B x in) += G (B x out) * W (out x in)
inline void gemm_grad_input(const Matrix& g, const Matrix& w, Matrix& dx) {
  dx.rows = g.rows;
  dx.cols = w.cols;
  dx.a.assign(static_cast<std::size_t>(dx.rows) * dx.cols, 0.0);
  for (int b = 0; b < g.rows; ++b) {
    const double* gr = g.row(b);
    double* dr = dx.row(b);
    for (int o = 0; o < g.cols; ++o) {
      const double go = gr[o];
      if (go == 0.0) continue;
      const double* wr = w.row(o);
      for (int i = 0; i < w.cols; ++i) dr[i] += go * wr[i];
    }
  }
}

// dW (out x in) += G^T (B x out) * X (B x in);  db += column sums of G.
inline void gemm_grad_params(const Matrix& g, const Matrix& x, Matrix& dw, Vec& db) {
  assert(g.rows == x.rows);
  for (int b = 0; b < g.rows; ++b) {
    const double* gr = g.row(b);
    const double* xr = x.row(b);
    for (int o = 0; o < g.cols; ++o) {
      const double go = gr[o];
      db[o] += go;
      if (go == 0.0) continue;
      double* wr = dw.row(o);
      for (int i = 0; i < x.cols; ++i) wr[i] += go * xr[i];
    }
  }
}

}  // namespace mixline
