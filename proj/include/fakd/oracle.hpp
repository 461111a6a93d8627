#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fakd/class_stats.hpp"
#include "fakd/error.hpp"
#include "fakd/losses.hpp"
#include "fakd/mat.hpp"
#include "fakd/numerics.hpp"
#include "fakd/rng.hpp"

namespace fakd {

// Streaming mean/variance. On a constant input stream both the mean increment
// and the squared-deviation increment are exactly zero, so degenerate Monte
// Carlo runs (lambda = 0, Sigma = 0) report a bit-exact mean and zero error.
class Welford {
 public:
  void add(double x) {
    ++n_;
    const double d = x - mean_;
    mean_ += d / double(n_);
    m2_ += d * (x - mean_);
  }
  std::int64_t count() const noexcept { return n_; }
  double mean() const noexcept { return mean_; }
  double variance() const noexcept { return n_ >= 2 ? m2_ / double(n_ - 1) : 0.0; }
  double std_error() const noexcept {
    return n_ >= 2 ? std::sqrt(m2_ / double(n_ - 1) / double(n_)) : 0.0;
  }

 private:
  std::int64_t n_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

struct McEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  std::int64_t n_samples = 0;
};

struct MgfResult {
  McEstimate mc;
  double closed_form = 0.0;
};

struct BoundReport {
  double closed_form = 0.0;
  McEstimate mc;
  double margin = 0.0;  // closed_form - mc.mean
  bool holds = false;   // margin >= -3 * mc.std_error
};

// Monte Carlo check of E[e^{a.x}] = e^{a.mu + a^T Sigma a / 2} for x ~ N(mu, Sigma).
inline MgfResult mgf_expectation(std::span<const double> a, std::span<const double> mu,
                                 const Mat& cov, std::int64_t n_samples, Rng& rng) {
  const std::size_t d = a.size();
  require(mu.size() == d && cov.rows() == d && cov.cols() == d, "shape-mismatch",
          "mgf_expectation arguments disagree on dimension");
  require(n_samples >= 2, "invalid-config", "mgf_expectation needs n_samples >= 2");

  MgfResult res;
  res.closed_form = std::exp(dot(a, std::span<const double>(mu)) + 0.5 * quad_form(cov, a));

  const Mat lower = psd_factor(cov).lower;
  Vec z(d), x(d);
  Welford acc;
  for (std::int64_t s = 0; s < n_samples; ++s) {
    rng.fill_normal(z);
    for (std::size_t i = 0; i < d; ++i) {
      double t = mu[i];
      for (std::size_t j = 0; j <= i; ++j) t += lower(i, j) * z[j];
      x[i] = t;
    }
    acc.add(std::exp(dot(a, std::span<const double>(x))));
  }
  res.mc = {acc.mean(), acc.std_error(), acc.count()};
  return res;
}

// Expected base loss under joint feature augmentation: every pixel of every
// draw is re-sampled as s_i + sqrt(lambda) * L_{kappa(i)} z (one joint draw per
// sample, since the spatial softmax couples pixels). The base loss of the
// given variant family is evaluated against fixed teacher distributions.
inline McEstimate mc_loss_estimate(LossVariant variant, const FeatureBatch& student,
                                   const FeatureBatch& teacher, const ClassifierHead& head,
                                   const ClassCovarianceStore& covs, double lambda, double tau,
                                   std::int64_t n_samples, Rng& rng) {
  require(n_samples >= 2, "invalid-config", "mc_loss_estimate needs n_samples >= 2");
  require(lambda >= 0.0, "invalid-lambda", "mc_loss_estimate needs lambda >= 0");
  detail::check_pair(student, teacher, head);
  const bool cwd_family =
      variant == LossVariant::CWD || variant == LossVariant::AUG_CWD;

  const std::vector<int> kappa = assign_pixel_classes(student, teacher, head, covs);
  Mat teacher_class, teacher_spatial;
  if (cwd_family)
    teacher_spatial = spatial_probs(teacher.features, head, tau);
  else
    teacher_class = class_probs(teacher.features, head);

  const std::size_t m = student.features.rows();
  const std::size_t a = student.features.cols();
  std::vector<char> present(covs.num_classes(), 0);
  for (int g : kappa) present[g] = 1;
  std::vector<Mat> lower(covs.num_classes());
  if (lambda > 0.0)
    for (std::size_t g = 0; g < covs.num_classes(); ++g)
      if (present[g]) lower[g] = psd_factor(covs.cov(int(g))).lower;

  const double scale = std::sqrt(lambda);
  Mat draw = student.features;
  Vec z(a);
  Welford acc;
  for (std::int64_t s = 0; s < n_samples; ++s) {
    if (lambda > 0.0) {
      for (std::size_t i = 0; i < m; ++i) {
        const Mat& l = lower[kappa[i]];
        rng.fill_normal(z);
        auto dst = draw.row(i);
        auto src = student.features.row(i);
        for (std::size_t t = 0; t < a; ++t) {
          double noise = 0.0;
          for (std::size_t j = 0; j <= t; ++j) noise += l(t, j) * z[j];
          dst[t] = src[t] + scale * noise;
        }
      }
    }
    acc.add(cwd_family ? cwd_value_given_teacher(draw, teacher_spatial, head, tau)
                       : pd_value_given_teacher(draw, teacher_class, head));
  }
  return {acc.mean(), acc.std_error(), acc.count()};
}

// Bundled random problem for verification campaigns.
struct LossInstance {
  FeatureBatch student;
  FeatureBatch teacher;
  ClassifierHead head;
  ClassCovarianceStore covs{2, 1};
};

// Random instance with fully labeled pixels (the teacher-argmax fallback is a
// step function of the parameters; gradient checks need smooth inputs) and a
// covariance store fed enough samples per class to be nondegenerate.
inline LossInstance random_instance(std::size_t m, std::size_t a, std::size_t c, Rng& rng) {
  require(m >= 1 && a >= 1 && c >= 2, "shape-mismatch", "instance needs m,a >= 1 and c >= 2");
  LossInstance inst;
  inst.student.role = Role::student;
  inst.teacher.role = Role::teacher;
  inst.student.features = Mat(m, a);
  inst.teacher.features = Mat(m, a);
  rng.fill_normal(inst.student.features.data());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t t = 0; t < a; ++t)
      inst.teacher.features(i, t) = inst.student.features(i, t) + 0.5 * rng.normal();

  inst.head.W = Mat(c, a);
  const double w_scale = 1.0 / std::sqrt(double(a));
  for (auto& v : inst.head.W.data()) v = w_scale * rng.normal();
  inst.head.B.assign(c, 0.0);
  for (auto& v : inst.head.B) v = 0.1 * rng.normal();

  inst.covs = ClassCovarianceStore(c, a);
  const std::size_t per_class = 2 * a + 6;
  Mat batch(per_class, a);
  Vec shift(a);
  Mat mix(a, a);
  std::vector<int> labels(per_class);
  for (std::size_t g = 0; g < c; ++g) {
    rng.fill_normal(shift);
    rng.fill_normal(mix.data());
    for (auto& v : mix.data()) v *= w_scale;
    for (std::size_t s = 0; s < per_class; ++s) {
      rng.fill_normal(batch.row(s));
      Vec x = matvec(mix, batch.row(s));
      for (std::size_t t = 0; t < a; ++t) batch(s, t) = shift[t] + x[t];
      labels[s] = int(g);
    }
    inst.covs.update(batch, labels);
  }

  inst.student.pixel_class.resize(m);
  for (std::size_t i = 0; i < m; ++i) inst.student.pixel_class[i] = int(rng.below(c));
  return inst;
}

// Closed-form augmented loss vs Monte Carlo expectation of its base loss.
// The base variants are normalized to their augmented pair so the bound
// relation (Jensen plus Gaussian MGF) is the one being tested.
inline BoundReport verify_upper_bound(LossVariant variant, const LossInstance& inst,
                                      double lambda, double tau, std::int64_t n_samples, Rng& rng,
                                      DiagonalMode mode = DiagonalMode::paper_form,
                                      VarianceDenominator denom = VarianceDenominator::tau_squared) {
  const bool cwd_family =
      variant == LossVariant::CWD || variant == LossVariant::AUG_CWD;
  BoundReport rep;
  rep.closed_form =
      cwd_family
          ? aug_cwd_loss(inst.student, inst.teacher, inst.head, inst.covs, lambda, tau, mode,
                         denom)
                .value
          : aug_pd_loss(inst.student, inst.teacher, inst.head, inst.covs, lambda).value;
  rep.mc = mc_loss_estimate(variant, inst.student, inst.teacher, inst.head, inst.covs, lambda,
                            tau, n_samples, rng);
  rep.margin = rep.closed_form - rep.mc.mean;
  rep.holds = rep.margin >= -3.0 * rep.mc.std_error;
  return rep;
}

// Central-difference check of every coordinate gradient (student features,
// classifier W and B) against the analytic LossOutput. Returns the worst
// relative error with denominator max(1, |analytic|).
//
// loss_fn(student, teacher, head) must be the differentiated function. For
// the distillation losses that means the teacher targets have to be frozen
// outside the closure (use the *_given_teacher forms, or the DistillLossSpec
// overload below); probing the convenience wrappers would differentiate the
// targets along with the classifier.
template <typename LossFn>
double finite_diff_grad_check(const LossFn& loss_fn, const LossInstance& inst, double step) {
  require(step > 0.0, "invalid-step", "finite differences need step > 0");
  LossInstance work = inst;
  const LossOutput base = loss_fn(work.student, work.teacher, work.head);

  double worst = 0.0;
  auto probe = [&](double& coord, double analytic) {
    const double saved = coord;
    coord = saved + step;
    const double up = loss_fn(work.student, work.teacher, work.head).value;
    coord = saved - step;
    const double down = loss_fn(work.student, work.teacher, work.head).value;
    coord = saved;
    const double fd = (up - down) / (2.0 * step);
    const double rel = std::abs(fd - analytic) / std::max(1.0, std::abs(analytic));
    if (rel > worst) worst = rel;
  };

  for (std::size_t i = 0; i < work.student.features.rows(); ++i)
    for (std::size_t t = 0; t < work.student.features.cols(); ++t)
      probe(work.student.features(i, t), base.grad_features(i, t));
  for (std::size_t cidx = 0; cidx < work.head.W.rows(); ++cidx)
    for (std::size_t t = 0; t < work.head.W.cols(); ++t)
      probe(work.head.W(cidx, t), base.grad_W(cidx, t));
  for (std::size_t cidx = 0; cidx < work.head.B.size(); ++cidx)
    probe(work.head.B[cidx], base.grad_B[cidx]);
  return worst;
}

// Spec-driven variant: freezes the teacher targets and the per-pixel class
// assignment at the unperturbed instance, then differences the core loss.
inline double finite_diff_grad_check(const DistillLossSpec& spec, const LossInstance& inst,
                                     double step) {
  const bool cwd_family =
      spec.variant == LossVariant::CWD || spec.variant == LossVariant::AUG_CWD;
  const Mat targets = cwd_family ? spatial_probs(inst.teacher.features, inst.head, spec.tau)
                                 : class_probs(inst.teacher.features, inst.head);
  const std::vector<int> kappa =
      assign_pixel_classes(inst.student, inst.teacher, inst.head, inst.covs);
  return finite_diff_grad_check(
      [&](const FeatureBatch& s, const FeatureBatch&, const ClassifierHead& h) {
        switch (spec.variant) {
          case LossVariant::PD:
            return pd_loss_given_teacher(s, h, targets);
          case LossVariant::CWD:
            return cwd_loss_given_teacher(s, h, spec.tau, targets);
          case LossVariant::AUG_PD:
            return aug_pd_loss_given_teacher(s, h, inst.covs, spec.lambda, targets, kappa);
          case LossVariant::AUG_CWD:
          default:
            return aug_cwd_loss_given_teacher(s, h, inst.covs, spec.lambda, spec.tau,
                                              spec.diagonal_mode, spec.variance_denominator,
                                              targets, kappa);
        }
      },
      inst, step);
}

// Cyclic Jacobi eigenvalues of a symmetric matrix, ascending. Small matrices
// only; used to audit covariance PSD-ness.
inline Vec jacobi_eigenvalues(const Mat& sym) {
  require(sym.rows() == sym.cols(), "shape-mismatch", "eigenvalues need a square matrix");
  Mat a = symmetrized(sym);
  const std::size_t n = a.rows();
  if (n == 1) return Vec{a(0, 0)};

  double norm = max_abs(a);
  const double tol = 1e-15 * (1.0 + norm);
  for (int sweep = 0; sweep < 64; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off = std::max(off, std::abs(a(p, q)));
    if (off <= tol) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) <= tol) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double cs = 1.0 / std::sqrt(t * t + 1.0);
        const double sn = t * cs;
        const double app = a(p, p), aqq = a(q, q);
        a(p, p) = app - t * apq;
        a(q, q) = aqq + t * apq;
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          if (k == p || k == q) continue;
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = cs * akp - sn * akq;
          a(p, k) = a(k, p);
          a(k, q) = sn * akp + cs * akq;
          a(q, k) = a(k, q);
        }
      }
    }
  }
  Vec eig(n);
  for (std::size_t i = 0; i < n; ++i) eig[i] = a(i, i);
  std::sort(eig.begin(), eig.end());
  return eig;
}

inline double min_eigenvalue(const Mat& sym) { return jacobi_eigenvalues(sym).front(); }

// --- bound-report CSV ---

inline std::string format_general(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

inline std::string bound_csv_header() {
  return "variant,seed,M,A,C,lambda,tau,mode,closed_form,mc_mean,mc_stderr,margin,holds";
}

inline std::string bound_csv_row(LossVariant variant, std::uint64_t seed, std::size_t m,
                                 std::size_t a, std::size_t c, double lambda, double tau,
                                 DiagonalMode mode, const BoundReport& rep) {
  std::string row;
  row += variant_name(variant);
  row += ',';
  row += std::to_string(seed);
  row += ',' + std::to_string(m) + ',' + std::to_string(a) + ',' + std::to_string(c);
  row += ',' + format_general(lambda) + ',' + format_general(tau);
  row += ',';
  row += diagonal_mode_name(mode);
  row += ',' + format_general(rep.closed_form) + ',' + format_general(rep.mc.mean);
  row += ',' + format_general(rep.mc.std_error) + ',' + format_general(rep.margin);
  row += rep.holds ? ",true" : ",false";
  return row;
}

}  // namespace fakd
