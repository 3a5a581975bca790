#pragma once

#include <cassert>
#include <cmath>
#include <cstring>
#include <vector>

namespace kgcl {

// Row-major dense double matrix. Everything in this project is desk scale,
// so the operations below are plain loops with a fixed summation order
// (which is what makes reruns bitwise reproducible).
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, 0.0) {}

  double& at(int i, int j) { return a[static_cast<size_t>(i) * cols + j]; }
  double at(int i, int j) const { return a[static_cast<size_t>(i) * cols + j]; }
  double* row(int i) { return a.data() + static_cast<size_t>(i) * cols; }
  const double* row(int i) const { return a.data() + static_cast<size_t>(i) * cols; }

  void zero() { std::fill(a.begin(), a.end(), 0.0); }
  size_t size() const { return a.size(); }

  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

// C = A * B
inline Mat matmul(const Mat& A, const Mat& B) {
  assert(A.cols == B.rows);
  Mat C(A.rows, B.cols);
  for (int i = 0; i < A.rows; ++i) {
    const double* ai = A.row(i);
    double* ci = C.row(i);
    for (int k = 0; k < A.cols; ++k) {
      double aik = ai[k];
      if (aik == 0.0) continue;
      const double* bk = B.row(k);
      for (int j = 0; j < B.cols; ++j) ci[j] += aik * bk[j];
    }
  }
  return C;
}

// C = A * B^T
inline Mat matmul_nt(const Mat& A, const Mat& B) {
  assert(A.cols == B.cols);
  Mat C(A.rows, B.rows);
  for (int i = 0; i < A.rows; ++i) {
    const double* ai = A.row(i);
    for (int j = 0; j < B.rows; ++j) {
      const double* bj = B.row(j);
      double s = 0.0;
      for (int k = 0; k < A.cols; ++k) s += ai[k] * bj[k];
      C.at(i, j) = s;
    }
  }
  return C;
}

// C = A^T * B
inline Mat matmul_tn(const Mat& A, const Mat& B) {
  assert(A.rows == B.rows);
  Mat C(A.cols, B.cols);
  for (int k = 0; k < A.rows; ++k) {
    const double* ak = A.row(k);
    const double* bk = B.row(k);
    for (int i = 0; i < A.cols; ++i) {
      double aki = ak[i];
      if (aki == 0.0) continue;
      double* ci = C.row(i);
      for (int j = 0; j < B.cols; ++j) ci[j] += aki * bk[j];
    }
  }
  return C;
}

inline void add_inplace(Mat& A, const Mat& B) {
  assert(A.same_shape(B));
  for (size_t i = 0; i < A.a.size(); ++i) A.a[i] += B.a[i];
}

inline void scale_inplace(Mat& A, double s) {
  for (double& x : A.a) x *= s;
}

// adds bias row vector b (1 x cols) to every row
inline void add_bias_inplace(Mat& A, const Mat& b) {
  assert(b.rows == 1 && b.cols == A.cols);
  for (int i = 0; i < A.rows; ++i) {
    double* ai = A.row(i);
    for (int j = 0; j < A.cols; ++j) ai[j] += b.at(0, j);
  }
}

inline double dot(const std::vector<double>& x, const std::vector<double>& y) {
  assert(x.size() == y.size());
  double s = 0.0;
  for (size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

inline double dot(const double* x, const double* y, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

inline double l2_norm(const double* x, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += x[i] * x[i];
  return std::sqrt(s);
}

inline double l2_norm(const std::vector<double>& x) {
  return l2_norm(x.data(), static_cast<int>(x.size()));
}

// Returns x / ||x||; a zero vector is returned unchanged.
inline std::vector<double> l2_normalized(const std::vector<double>& x) {
  double n = l2_norm(x);
  if (n == 0.0) return x;
  std::vector<double> y(x.size());
  for (size_t i = 0; i < x.size(); ++i) y[i] = x[i] / n;
  return y;
}

// Single-pass accumulation and sqrt(sx*sy) keep cosine(x,x) at exactly 1;
// zero-norm inputs are flagged via *degenerate.
inline double cosine(const double* x, const double* y, int n, bool* degenerate = nullptr) {
  double d = 0, sx = 0, sy = 0;
  for (int i = 0; i < n; ++i) {
    d += x[i] * y[i];
    sx += x[i] * x[i];
    sy += y[i] * y[i];
  }
  if (sx == 0.0 || sy == 0.0) {
    if (degenerate) *degenerate = true;
    return 0.0;
  }
  if (degenerate) *degenerate = false;
  double c = d / std::sqrt(sx * sy);
  if (c > 1.0) c = 1.0;
  if (c < -1.0) c = -1.0;
  return c;
}

// Chain rule through y = x / ||x||; mirrors l2_normalized, so a zero input
// (left unchanged there) passes the gradient through untouched.
inline std::vector<double> l2_normalize_backward(const std::vector<double>& x,
                                                 const std::vector<double>& dy) {
  assert(x.size() == dy.size());
  double n = l2_norm(x);
  if (n == 0.0) return dy;
  double ydy = 0.0;
  std::vector<double> y(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    y[i] = x[i] / n;
    ydy += y[i] * dy[i];
  }
  std::vector<double> dx(x.size());
  for (size_t i = 0; i < x.size(); ++i) dx[i] = (dy[i] - y[i] * ydy) / n;
  return dx;
}

inline bool all_finite(const Mat& A) {
  for (double x : A.a)
    if (!std::isfinite(x)) return false;
  return true;
}

// numerically stable log(1 + e^x)
inline double softplus(double x) {
  if (x > 0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace kgcl
