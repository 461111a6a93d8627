#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

#include "fakd/error.hpp"

namespace fakd {

using Vec = std::vector<double>;

// Dense row-major matrix of doubles. Deliberately small: element access, row
// views and the handful of products the losses need. Anything fancier is out
// of scope.
class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Mat from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    Mat m(rows.size(), rows.size() ? rows.begin()->size() : 0);
    std::size_t i = 0;
    for (const auto& r : rows) {
      require(r.size() == m.cols_, "shape-mismatch", "ragged initializer rows");
      std::size_t j = 0;
      for (double v : r) m(i, j++) = v;
      ++i;
    }
    return m;
  }

  static Mat identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  Vec& data() noexcept { return data_; }
  const Vec& data() const noexcept { return data_; }

  bool same_shape(const Mat& o) const noexcept {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }

 private:
  std::size_t rows_ = 0, cols_ = 0;
  Vec data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// y += alpha * x
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

// A * v
inline Vec matvec(const Mat& a, std::span<const double> v) {
  require(a.cols() == v.size(), "shape-mismatch", "matvec dimensions disagree");
  Vec out(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) out[i] = dot(a.row(i), v);
  return out;
}

// A^T * v
inline Vec matvec_t(const Mat& a, std::span<const double> v) {
  require(a.rows() == v.size(), "shape-mismatch", "matvec_t dimensions disagree");
  Vec out(a.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) axpy(v[i], a.row(i), out);
  return out;
}

inline Mat matmul(const Mat& a, const Mat& b) {
  require(a.cols() == b.rows(), "shape-mismatch", "matmul dimensions disagree");
  Mat out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
    }
  return out;
}

// A * B^T
inline Mat matmul_nt(const Mat& a, const Mat& b) {
  require(a.cols() == b.cols(), "shape-mismatch", "matmul_nt dimensions disagree");
  Mat out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = dot(a.row(i), b.row(j));
  return out;
}

// A^T * B
inline Mat matmul_tn(const Mat& a, const Mat& b) {
  require(a.rows() == b.rows(), "shape-mismatch", "matmul_tn dimensions disagree");
  Mat out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k)
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a(k, i);
      if (aki == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aki * b(k, j);
    }
  return out;
}

// w^T S w for square S
inline double quad_form(const Mat& s, std::span<const double> w) {
  require(s.rows() == s.cols() && s.rows() == w.size(), "shape-mismatch",
          "quad_form dimensions disagree");
  double acc = 0.0;
  for (std::size_t i = 0; i < s.rows(); ++i) acc += w[i] * dot(s.row(i), w);
  return acc;
}

inline double max_abs(const Mat& m) {
  double v = 0.0;
  for (double x : m.data()) v = std::max(v, std::abs(x));
  return v;
}

inline Mat symmetrized(const Mat& m) {
  Mat out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = 0.5 * (m(i, j) + m(j, i));
  return out;
}

inline bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace fakd
