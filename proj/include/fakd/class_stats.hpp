#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "fakd/error.hpp"
#include "fakd/mat.hpp"

namespace fakd {

// Label value marking pixels excluded from supervision and statistics.
inline constexpr int kIgnoreLabel = -1;

// Streaming per-class feature statistics: exact mean / population covariance
// of everything seen so far, merged batch by batch. Counts are exact pixel
// counts, so feeding a dataset in any split order reproduces the one-shot
// statistics.
class ClassCovarianceStore {
 public:
  ClassCovarianceStore() = default;
  // diagonal_only keeps off-diagonal covariance entries pinned at zero; the
  // per-coordinate variances still follow the exact streaming merge.
  ClassCovarianceStore(std::size_t num_classes, std::size_t dim, bool diagonal_only = false)
      : dim_(dim), diagonal_only_(diagonal_only), classes_(num_classes) {
    for (auto& c : classes_) {
      c.mean.assign(dim, 0.0);
      c.cov = Mat(dim, dim);
    }
  }

  std::size_t num_classes() const noexcept { return classes_.size(); }
  std::size_t dim() const noexcept { return dim_; }
  bool diagonal_only() const noexcept { return diagonal_only_; }

  // Merge one batch of labeled feature rows. Rows labeled kIgnoreLabel are
  // skipped. Merge rule (population covariance, divisor n):
  //   mu'    = (n mu + m mu_b) / (n + m)
  //   Sigma' = [n Sigma + m Sigma_b + nm/(n+m) (mu - mu_b)(mu - mu_b)^T] / (n+m)
  void update(const Mat& features, std::span<const int> labels) {
    require(features.cols() == dim_, "shape-mismatch",
            "feature width does not match store dimension");
    require(features.rows() == labels.size(), "shape-mismatch",
            "labels length does not match feature rows");
    for (int y : labels)
      require(y == kIgnoreLabel || (y >= 0 && static_cast<std::size_t>(y) < classes_.size()),
              "unknown-class", "label " + std::to_string(y) + " out of class range");
    for (std::size_t c = 0; c < classes_.size(); ++c) {
      merge_class(static_cast<int>(c), features, labels);
    }
  }

  const Mat& cov(int class_id) const {
    check_class(class_id);
    return classes_[class_id].cov;
  }

  std::span<const double> mean(int class_id) const {
    check_class(class_id);
    return classes_[class_id].mean;
  }

  std::int64_t count(int class_id) const {
    check_class(class_id);
    return classes_[class_id].n;
  }

  // Flat text snapshot: header, C, A, then per class n, mu, Sigma row-major.
  // Diagonal-only stores mark the header so a reload keeps the constraint.
  void save(std::ostream& os) const {
    os << "fakd-class-stats v1" << (diagonal_only_ ? " diagonal" : "") << "\n"
       << classes_.size() << " " << dim_ << "\n";
    os.precision(17);
    for (const auto& c : classes_) {
      os << c.n << "\n";
      for (std::size_t i = 0; i < dim_; ++i) os << c.mean[i] << (i + 1 < dim_ ? ' ' : '\n');
      for (std::size_t i = 0; i < dim_; ++i)
        for (std::size_t j = 0; j < dim_; ++j)
          os << c.cov(i, j) << (j + 1 < dim_ ? ' ' : '\n');
    }
  }

  static ClassCovarianceStore load(std::istream& is) {
    std::string header;
    std::getline(is, header);
    require(header == "fakd-class-stats v1" || header == "fakd-class-stats v1 diagonal",
            "invalid-snapshot", "unrecognized class-stats snapshot header");
    std::size_t num_classes = 0, dim = 0;
    is >> num_classes >> dim;
    require(bool(is), "invalid-snapshot", "truncated class-stats snapshot");
    ClassCovarianceStore store(num_classes, dim, header != "fakd-class-stats v1");
    for (auto& c : store.classes_) {
      is >> c.n;
      for (auto& v : c.mean) is >> v;
      for (auto& v : c.cov.data()) is >> v;
    }
    require(bool(is), "invalid-snapshot", "truncated class-stats snapshot");
    return store;
  }

 private:
  struct PerClass {
    Vec mean;
    Mat cov;
    std::int64_t n = 0;
  };

  void check_class(int class_id) const {
    require(class_id >= 0 && static_cast<std::size_t>(class_id) < classes_.size(),
            "unknown-class", "class id " + std::to_string(class_id) + " out of range");
  }

  void merge_class(int class_id, const Mat& features, std::span<const int> labels) {
    // batch mean
    Vec mu_b(dim_, 0.0);
    std::int64_t m = 0;
    for (std::size_t r = 0; r < features.rows(); ++r) {
      if (labels[r] != class_id) continue;
      axpy(1.0, features.row(r), mu_b);
      ++m;
    }
    if (m == 0) return;
    for (auto& v : mu_b) v /= double(m);

    // batch scatter m * Sigma_b
    Mat scatter(dim_, dim_);
    Vec delta(dim_);
    for (std::size_t r = 0; r < features.rows(); ++r) {
      if (labels[r] != class_id) continue;
      auto row = features.row(r);
      for (std::size_t i = 0; i < dim_; ++i) delta[i] = row[i] - mu_b[i];
      for (std::size_t i = 0; i < dim_; ++i)
        for (std::size_t j = 0; j <= i; ++j) scatter(i, j) += delta[i] * delta[j];
    }

    PerClass& cls = classes_[class_id];
    const double n = double(cls.n);
    const double total = n + double(m);
    const double cross = n * double(m) / total;
    Vec dmu(dim_);
    for (std::size_t i = 0; i < dim_; ++i) dmu[i] = cls.mean[i] - mu_b[i];

    for (std::size_t i = 0; i < dim_; ++i)
      for (std::size_t j = diagonal_only_ ? i : 0; j <= i; ++j) {
        const double merged =
            (n * cls.cov(i, j) + scatter(i, j) + cross * dmu[i] * dmu[j]) / total;
        cls.cov(i, j) = merged;
        cls.cov(j, i) = merged;
      }
    for (std::size_t i = 0; i < dim_; ++i)
      cls.mean[i] = (n * cls.mean[i] + double(m) * mu_b[i]) / total;
    cls.n += m;
  }

  std::size_t dim_ = 0;
  bool diagonal_only_ = false;
  std::vector<PerClass> classes_;
};

enum class ScheduleKind { cosine, linear };

// Ramp 0 -> lambda0 over total_steps. Cosine is the default; the linear ramp
// exists for comparison runs.
struct LambdaSchedule {
  double lambda0 = 0.0;
  std::int64_t total_steps = 1;
  ScheduleKind kind = ScheduleKind::cosine;
};

inline double lambda_schedule(std::int64_t step, const LambdaSchedule& sched) {
  constexpr double kPi = 3.14159265358979323846;
  require(sched.total_steps > 0, "invalid-step", "schedule needs total_steps > 0");
  require(step >= 0 && step <= sched.total_steps, "invalid-step",
          "step " + std::to_string(step) + " outside [0, T]");
  const double frac = double(step) / double(sched.total_steps);
  switch (sched.kind) {
    case ScheduleKind::linear:
      return sched.lambda0 * frac;
    case ScheduleKind::cosine:
    default:
      return sched.lambda0 * (1.0 - std::cos(kPi * frac)) / 2.0;
  }
}

}  // namespace fakd
