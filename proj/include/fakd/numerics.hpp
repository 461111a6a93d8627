#pragma once

#include <algorithm>
#include <cmath>
#include <span>

#include "fakd/error.hpp"
#include "fakd/mat.hpp"
#include "fakd/rng.hpp"

namespace fakd {

// log(sum_k exp(v_k)) via max-shift; safe for entries up to ~|700|.
inline double log_sum_exp(std::span<const double> v) {
  require(!v.empty(), "empty-vector", "log_sum_exp of an empty vector");
  const double m = *std::max_element(v.begin(), v.end());
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - m);
  return m + std::log(acc);
}

// softmax(v / tau); output sums to 1 within 1e-12.
inline Vec softmax(std::span<const double> v, double tau = 1.0) {
  require(tau > 0.0, "invalid-temperature", "softmax needs tau > 0");
  require(!v.empty(), "empty-vector", "softmax of an empty vector");
  const double m = *std::max_element(v.begin(), v.end());
  Vec out(v.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp((v[i] - m) / tau);
    acc += out[i];
  }
  for (auto& x : out) x /= acc;
  return out;
}

struct PsdFactor {
  Mat lower;      // L with L L^T ~= sym(cov) + jitter I
  double jitter;  // jitter level that succeeded
};

// Lower-triangular square root of a numerically PSD matrix. Rank-deficient
// inputs are expected (fresh covariance stores are all zero), so zero pivots
// produce zero columns. Slightly indefinite inputs get escalating diagonal
// jitter relative to the mean diagonal; genuinely indefinite inputs fail.
inline PsdFactor psd_factor(const Mat& cov) {
  require(cov.rows() == cov.cols(), "shape-mismatch", "psd_factor needs a square matrix");
  const std::size_t n = cov.rows();
  const Mat s = symmetrized(cov);
  double diag_mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) diag_mean += std::abs(s(i, i));
  diag_mean /= n ? double(n) : 1.0;
  const double scale = max_abs(s);
  const double residual_tol = 1e-9 * (1.0 + scale);
  const double pivot_tol = 1e-12 * (1.0 + diag_mean);

  constexpr double kJitterLevels[] = {0.0, 1e-12, 1e-10, 1e-8};
  for (double level : kJitterLevels) {
    const double jitter = level * diag_mean;
    Mat a = s;
    for (std::size_t i = 0; i < n; ++i) a(i, i) += jitter;

    Mat l(n, n);
    bool ok = true;
    for (std::size_t j = 0; j < n && ok; ++j) {
      double d = a(j, j) - dot(l.row(j).subspan(0, j), l.row(j).subspan(0, j));
      if (d < -pivot_tol) {
        ok = false;
        break;
      }
      if (d <= pivot_tol) {
        // semidefinite pivot: zero column
        for (std::size_t i = j; i < n; ++i) l(i, j) = 0.0;
        continue;
      }
      l(j, j) = std::sqrt(d);
      for (std::size_t i = j + 1; i < n; ++i) {
        const double off =
            a(i, j) - dot(l.row(i).subspan(0, j), l.row(j).subspan(0, j));
        l(i, j) = off / l(j, j);
      }
    }
    if (!ok) continue;

    // Residual gate: the zero-column shortcut is only valid for PSD inputs.
    double resid = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j) {
        const double reconstructed =
            dot(l.row(i).subspan(0, j + 1), l.row(j).subspan(0, j + 1));
        resid = std::max(resid, std::abs(reconstructed - a(i, j)));
      }
    if (resid <= residual_tol) return {std::move(l), jitter};
  }
  fail("psd-factorization-failed",
       "matrix not positive semidefinite within jitter policy");
}

// n i.i.d. rows from N(mean, scale * cov). scale == 0 copies the mean exactly
// and consumes no randomness.
inline Mat sample_mvn(std::span<const double> mean, const Mat& cov, double scale,
                      std::size_t n, Rng& rng) {
  require(cov.rows() == cov.cols(), "shape-mismatch", "covariance must be square");
  require(cov.rows() == mean.size(), "shape-mismatch",
          "covariance and mean dimensions disagree");
  require(scale >= 0.0, "invalid-scale", "covariance scale must be nonnegative");
  const std::size_t dim = mean.size();
  Mat out(n, dim);
  for (std::size_t r = 0; r < n; ++r)
    std::copy(mean.begin(), mean.end(), out.row(r).begin());
  if (scale == 0.0) return out;

  const Mat l = psd_factor(cov).lower;
  const double root = std::sqrt(scale);
  Vec z(dim);
  for (std::size_t r = 0; r < n; ++r) {
    rng.fill_normal(z);
    auto row = out.row(r);
    for (std::size_t i = 0; i < dim; ++i) {
      // L is lower triangular; only the first i+1 entries contribute.
      row[i] += root * dot(l.row(i).subspan(0, i + 1),
                           std::span<const double>(z.data(), i + 1));
    }
  }
  return out;
}

}  // namespace fakd
