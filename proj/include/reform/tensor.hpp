#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

namespace reform {

/// Dense row-major matrix of doubles.
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Mat() = default;
  Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) noexcept { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data[r * cols + c]; }
  double* row(std::size_t r) noexcept { return data.data() + r * cols; }
  const double* row(std::size_t r) const noexcept { return data.data() + r * cols; }
  std::span<double> row_span(std::size_t r) noexcept { return {row(r), cols}; }
  std::span<const double> row_span(std::size_t r) const noexcept { return {row(r), cols}; }
  std::size_t size() const noexcept { return data.size(); }
  void zero() noexcept { std::fill(data.begin(), data.end(), 0.0); }
  bool same_shape(const Mat& o) const noexcept { return rows == o.rows && cols == o.cols; }

  friend bool operator==(const Mat&, const Mat&) = default;
};

/// C (+)= A * B
inline void gemm_nn(const Mat& a, const Mat& b, Mat& c, bool accumulate = false) {
  assert(a.cols == b.rows);
  if (!accumulate) c = Mat(a.rows, b.cols);
  const std::size_t n = a.rows, k = a.cols, m = b.cols;
  for (std::size_t i = 0; i < n; ++i) {
    double* ci = c.row(i);
    const double* ai = a.row(i);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b.row(p);
      for (std::size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
}

/// C (+)= A^T * B
inline void gemm_tn(const Mat& a, const Mat& b, Mat& c, bool accumulate = false) {
  assert(a.rows == b.rows);
  if (!accumulate) c = Mat(a.cols, b.cols);
  const std::size_t k = a.rows, n = a.cols, m = b.cols;
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a.row(p);
    const double* bp = b.row(p);
    for (std::size_t i = 0; i < n; ++i) {
      const double av = ap[i];
      if (av == 0.0) continue;
      double* ci = c.row(i);
      for (std::size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
}

/// C (+)= A * B^T
inline void gemm_nt(const Mat& a, const Mat& b, Mat& c, bool accumulate = false) {
  assert(a.cols == b.cols);
  if (!accumulate) c = Mat(a.rows, b.rows);
  const std::size_t n = a.rows, k = a.cols, m = b.rows;
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = a.row(i);
    double* ci = c.row(i);
    for (std::size_t j = 0; j < m; ++j) {
      const double* bj = b.row(j);
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] += s;
    }
  }
}

inline void add_inplace(Mat& a, const Mat& b) noexcept {
  assert(a.same_shape(b));
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

inline void scale_inplace(Mat& a, double s) noexcept {
  for (double& v : a.data) v *= s;
}

/// Numerically stable log-softmax of one row.
inline void log_softmax_row(std::span<const double> in, std::span<double> out) noexcept {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : in) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : in) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] - lse;
}

inline std::vector<double> softmax(std::span<const double> in) {
  std::vector<double> out(in.size());
  log_softmax_row(in, out);
  for (double& v : out) v = std::exp(v);
  return out;
}

inline std::vector<double> log_softmax(std::span<const double> in) {
  std::vector<double> out(in.size());
  log_softmax_row(in, out);
  return out;
}

}  // namespace reform
