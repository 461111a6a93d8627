#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fakd/class_stats.hpp"
#include "fakd/error.hpp"
#include "fakd/mat.hpp"
#include "fakd/numerics.hpp"

namespace fakd {

enum class Role { student, teacher };

// Per-pixel feature vectors of one image (M pixels x A channels). pixel_class
// optionally carries ground-truth class ids (kIgnoreLabel marks unlabeled
// pixels); it drives the per-pixel covariance assignment of the aug losses.
struct FeatureBatch {
  Mat features;  // M x A
  Role role = Role::student;
  std::vector<int> pixel_class;  // empty = absent
};

// Shared linear classifier: logits = features * W^T + B.
struct ClassifierHead {
  Mat W;  // C x A
  Vec B;  // C

  std::size_t num_classes() const noexcept { return W.rows(); }
  std::size_t feature_dim() const noexcept { return W.cols(); }

  Mat logits(const Mat& feats) const {
    require(feats.cols() == feature_dim(), "shape-mismatch",
            "feature width does not match classifier");
    Mat z(feats.rows(), num_classes());
    for (std::size_t i = 0; i < feats.rows(); ++i)
      for (std::size_t c = 0; c < num_classes(); ++c)
        z(i, c) = dot(W.row(c), feats.row(i)) + B[c];
    return z;
  }
};

enum class LossVariant { PD, CWD, AUG_PD, AUG_CWD };
enum class DiagonalMode { paper_form, exact_diagonal };
enum class VarianceDenominator { tau_squared, tau };

inline const char* variant_name(LossVariant v) {
  switch (v) {
    case LossVariant::PD: return "PD";
    case LossVariant::CWD: return "CWD";
    case LossVariant::AUG_PD: return "AUG_PD";
    case LossVariant::AUG_CWD: return "AUG_CWD";
  }
  return "PD";
}

inline LossVariant parse_variant(const std::string& s) {
  if (s == "PD") return LossVariant::PD;
  if (s == "CWD") return LossVariant::CWD;
  if (s == "AUG_PD") return LossVariant::AUG_PD;
  if (s == "AUG_CWD") return LossVariant::AUG_CWD;
  fail("invalid-config", "unknown loss variant '" + s + "'");
}

inline const char* diagonal_mode_name(DiagonalMode m) {
  return m == DiagonalMode::paper_form ? "paper_form" : "exact_diagonal";
}

inline DiagonalMode parse_diagonal_mode(const std::string& s) {
  if (s == "paper_form") return DiagonalMode::paper_form;
  if (s == "exact_diagonal") return DiagonalMode::exact_diagonal;
  fail("invalid-config", "unknown diagonal mode '" + s + "'");
}

inline const char* denominator_name(VarianceDenominator d) {
  return d == VarianceDenominator::tau_squared ? "tau_squared" : "tau";
}

inline VarianceDenominator parse_denominator(const std::string& s) {
  if (s == "tau_squared") return VarianceDenominator::tau_squared;
  if (s == "tau") return VarianceDenominator::tau;
  fail("invalid-config", "unknown variance denominator '" + s + "'");
}

struct DistillLossSpec {
  LossVariant variant = LossVariant::PD;
  double tau = 1.0;
  double lambda = 0.0;
  DiagonalMode diagonal_mode = DiagonalMode::paper_form;
  VarianceDenominator variance_denominator = VarianceDenominator::tau_squared;
};

// Scalar loss plus exact gradients with respect to the student features and
// the (shared) classifier parameters. Teacher quantities never receive
// gradient.
struct LossOutput {
  double value = 0.0;
  Mat grad_features;  // M x A
  Mat grad_W;         // C x A
  Vec grad_B;         // C
};

inline LossOutput& add_scaled(LossOutput& acc, const LossOutput& other, double w) {
  acc.value += w * other.value;
  for (std::size_t i = 0; i < acc.grad_features.data().size(); ++i)
    acc.grad_features.data()[i] += w * other.grad_features.data()[i];
  for (std::size_t i = 0; i < acc.grad_W.data().size(); ++i)
    acc.grad_W.data()[i] += w * other.grad_W.data()[i];
  for (std::size_t i = 0; i < acc.grad_B.size(); ++i)
    acc.grad_B[i] += w * other.grad_B[i];
  return acc;
}

namespace detail {

inline void check_pair(const FeatureBatch& student, const FeatureBatch& teacher,
                       const ClassifierHead& head) {
  require(head.num_classes() >= 2, "shape-mismatch", "classifier needs >= 2 classes");
  require(student.features.rows() >= 1, "shape-mismatch", "empty student batch");
  require(student.features.cols() == head.feature_dim(), "shape-mismatch",
          "student feature width does not match classifier");
  require(teacher.features.cols() == head.feature_dim(), "shape-mismatch",
          "teacher feature width does not match classifier");
  require(student.features.rows() == teacher.features.rows(), "shape-mismatch",
          "student and teacher pixel counts differ");
}

inline LossOutput zero_output(std::size_t m, std::size_t a, std::size_t c) {
  LossOutput out;
  out.grad_features = Mat(m, a);
  out.grad_W = Mat(c, a);
  out.grad_B.assign(c, 0.0);
  return out;
}

}  // namespace detail

// Per-pixel class probabilities softmax_c(w_c.x_i + b_c), M x C.
inline Mat class_probs(const Mat& feats, const ClassifierHead& head) {
  Mat z = head.logits(feats);
  Mat p(z.rows(), z.cols());
  for (std::size_t i = 0; i < z.rows(); ++i) {
    Vec row = softmax(z.row(i));
    std::copy(row.begin(), row.end(), p.row(i).begin());
  }
  return p;
}

// Per-channel spatial probabilities softmax_i((w_c.x_i + b_c)/tau), C x M.
inline Mat spatial_probs(const Mat& feats, const ClassifierHead& head, double tau) {
  require(tau > 0.0, "invalid-temperature", "spatial softmax needs tau > 0");
  const std::size_t m = feats.rows(), c_count = head.num_classes();
  Mat p(c_count, m);
  Vec raw(m);
  for (std::size_t c = 0; c < c_count; ++c) {
    for (std::size_t i = 0; i < m; ++i) raw[i] = dot(head.W.row(c), feats.row(i)) + head.B[c];
    Vec row = softmax(raw, tau);
    std::copy(row.begin(), row.end(), p.row(c).begin());
  }
  return p;
}

// Covariance class for each pixel: the ground-truth class where labeled, the
// teacher's argmax class otherwise.
inline std::vector<int> assign_pixel_classes(const FeatureBatch& student,
                                             const FeatureBatch& teacher,
                                             const ClassifierHead& head,
                                             const ClassCovarianceStore& covs) {
  const std::size_t m = student.features.rows();
  require(covs.dim() == head.feature_dim(), "shape-mismatch",
          "covariance store dimension does not match classifier");
  const std::vector<int>* labels = nullptr;
  if (!student.pixel_class.empty()) {
    require(student.pixel_class.size() == m, "shape-mismatch",
            "pixel_class length does not match pixel count");
    labels = &student.pixel_class;
  } else if (!teacher.pixel_class.empty()) {
    require(teacher.pixel_class.size() == m, "shape-mismatch",
            "pixel_class length does not match pixel count");
    labels = &teacher.pixel_class;
  }

  Mat teacher_logits;  // computed on demand for ignore-label fallback
  std::vector<int> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    int cls = labels ? (*labels)[i] : kIgnoreLabel;
    if (cls == kIgnoreLabel) {
      if (teacher_logits.empty()) teacher_logits = head.logits(teacher.features);
      auto row = teacher_logits.row(i);
      cls = int(std::max_element(row.begin(), row.end()) - row.begin());
    }
    require(cls >= 0 && std::size_t(cls) < covs.num_classes(), "missing-class-stats",
            "no covariance for class " + std::to_string(cls));
    out[i] = cls;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pixel-wise distillation: mean over pixels of the cross-entropy between the
// teacher's and the student's per-pixel class softmax.
//
// The *_given_teacher forms take the teacher distribution as data. That is
// the differentiated function: the teacher side never receives gradient, so
// the gradients of the convenience wrappers are partial derivatives holding
// the teacher targets fixed.
// ---------------------------------------------------------------------------
inline LossOutput pd_loss_given_teacher(const FeatureBatch& student, const ClassifierHead& head,
                                        const Mat& pt) {
  const std::size_t m = student.features.rows();
  const std::size_t c_count = head.num_classes();
  const std::size_t a = head.feature_dim();
  require(m >= 1 && c_count >= 2, "shape-mismatch", "empty batch or classifier");
  require(student.features.cols() == a, "shape-mismatch",
          "student feature width does not match classifier");
  require(pt.rows() == m && pt.cols() == c_count, "shape-mismatch",
          "teacher probability shape");

  const Mat z = head.logits(student.features);

  LossOutput out = detail::zero_output(m, a, c_count);
  double acc = 0.0;
  Vec g(c_count);
  for (std::size_t i = 0; i < m; ++i) {
    auto zi = z.row(i);
    const double lse = log_sum_exp(zi);
    for (std::size_t c = 0; c < c_count; ++c) acc += pt(i, c) * (lse - zi[c]);

    const Vec ps = softmax(zi);
    for (std::size_t c = 0; c < c_count; ++c) g[c] = ps[c] - pt(i, c);
    auto gf = out.grad_features.row(i);
    for (std::size_t c = 0; c < c_count; ++c) {
      axpy(g[c], head.W.row(c), gf);
      axpy(g[c], student.features.row(i), out.grad_W.row(c));
      out.grad_B[c] += g[c];
    }
  }
  const double inv_m = 1.0 / double(m);
  out.value = acc * inv_m;
  for (auto& v : out.grad_features.data()) v *= inv_m;
  for (auto& v : out.grad_W.data()) v *= inv_m;
  for (auto& v : out.grad_B) v *= inv_m;
  return out;
}

inline LossOutput pd_loss(const FeatureBatch& student, const FeatureBatch& teacher,
                          const ClassifierHead& head) {
  detail::check_pair(student, teacher, head);
  return pd_loss_given_teacher(student, head, class_probs(teacher.features, head));
}

// Value-only PD against precomputed teacher class probabilities. Shares the
// accumulation order of pd_loss so degenerate (lambda = 0) Monte Carlo draws
// reproduce its value bit for bit.
inline double pd_value_given_teacher(const Mat& student_features, const Mat& teacher_probs,
                                     const ClassifierHead& head) {
  const std::size_t m = student_features.rows();
  const std::size_t c_count = head.num_classes();
  const Mat z = head.logits(student_features);
  double acc = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    auto zi = z.row(i);
    const double lse = log_sum_exp(zi);
    for (std::size_t c = 0; c < c_count; ++c) acc += teacher_probs(i, c) * (lse - zi[c]);
  }
  return acc * (1.0 / double(m));
}

// ---------------------------------------------------------------------------
// Channel-wise distillation: per class channel, cross-entropy between teacher
// and student softmax over the M spatial positions, scaled by tau^2 / C.
// ---------------------------------------------------------------------------
inline LossOutput cwd_loss_given_teacher(const FeatureBatch& student, const ClassifierHead& head,
                                         double tau, const Mat& phi_t) {
  require(tau > 0.0, "invalid-temperature", "cwd_loss needs tau > 0");
  const std::size_t m = student.features.rows();
  const std::size_t c_count = head.num_classes();
  const std::size_t a = head.feature_dim();
  require(m >= 1 && c_count >= 2, "shape-mismatch", "empty batch or classifier");
  require(student.features.cols() == a, "shape-mismatch",
          "student feature width does not match classifier");
  require(phi_t.rows() == c_count && phi_t.cols() == m, "shape-mismatch",
          "teacher spatial probability shape");

  LossOutput out = detail::zero_output(m, a, c_count);
  const double scale = tau * tau / double(c_count);

  Vec u(m);
  double acc = 0.0;
  for (std::size_t c = 0; c < c_count; ++c) {
    for (std::size_t i = 0; i < m; ++i)
      u[i] = (dot(head.W.row(c), student.features.row(i)) + head.B[c]) / tau;
    const double total = log_sum_exp(u);
    for (std::size_t i = 0; i < m; ++i) acc += phi_t(c, i) * (total - u[i]);

    // d/du_j = phi_s,j - phi_t,j ; u_j = (w_c.s_j + b_c)/tau
    for (std::size_t j = 0; j < m; ++j) {
      const double diff = std::exp(u[j] - total) - phi_t(c, j);
      const double coef = scale * diff / tau;
      axpy(coef, head.W.row(c), out.grad_features.row(j));
      axpy(coef, student.features.row(j), out.grad_W.row(c));
    }
    // b_c cancels inside the spatial softmax; its gradient is identically 0.
  }
  out.value = acc * scale;
  return out;
}

inline LossOutput cwd_loss(const FeatureBatch& student, const FeatureBatch& teacher,
                           const ClassifierHead& head, double tau) {
  require(tau > 0.0, "invalid-temperature", "cwd_loss needs tau > 0");
  detail::check_pair(student, teacher, head);
  return cwd_loss_given_teacher(student, head, tau, spatial_probs(teacher.features, head, tau));
}

// Value-only CWD against precomputed teacher spatial probabilities (C x M).
inline double cwd_value_given_teacher(const Mat& student_features, const Mat& teacher_spatial,
                                      const ClassifierHead& head, double tau) {
  const std::size_t m = student_features.rows();
  const std::size_t c_count = head.num_classes();
  Vec u(m);
  double acc = 0.0;
  for (std::size_t c = 0; c < c_count; ++c) {
    for (std::size_t i = 0; i < m; ++i)
      u[i] = (dot(head.W.row(c), student_features.row(i)) + head.B[c]) / tau;
    const double total = log_sum_exp(u);
    for (std::size_t i = 0; i < m; ++i) acc += teacher_spatial(c, i) * (total - u[i]);
  }
  return acc * (tau * tau / double(c_count));
}

// ---------------------------------------------------------------------------
// Upper bound of PD under infinitely many Gaussian feature augmentations
// s_i ~ N(s_i, lambda * Sigma_{kappa(i)}):
//   (1/M) sum_i sum_c p_t,i^c log sum_k exp[(w_k - w_c).s_i + b_k - b_c
//                                  + (lambda/2)(w_k - w_c)^T Sigma_{kappa(i)} (w_k - w_c)]
// Reduces to pd_loss exactly at lambda = 0.
// ---------------------------------------------------------------------------
inline LossOutput aug_pd_loss_given_teacher(const FeatureBatch& student,
                                            const ClassifierHead& head,
                                            const ClassCovarianceStore& covs, double lambda,
                                            const Mat& pt, std::span<const int> kappa) {
  require(lambda >= 0.0, "invalid-lambda", "aug_pd_loss needs lambda >= 0");
  const std::size_t m = student.features.rows();
  const std::size_t c_count = head.num_classes();
  const std::size_t a = head.feature_dim();
  require(m >= 1 && c_count >= 2, "shape-mismatch", "empty batch or classifier");
  require(student.features.cols() == a && covs.dim() == a, "shape-mismatch",
          "feature width does not match classifier or covariance store");
  require(pt.rows() == m && pt.cols() == c_count, "shape-mismatch",
          "teacher probability shape");
  require(kappa.size() == m, "shape-mismatch", "pixel class assignment length");
  for (int g : kappa)
    require(g >= 0 && std::size_t(g) < covs.num_classes(), "missing-class-stats",
            "no covariance for class " + std::to_string(g));

  const Mat z = head.logits(student.features);

  // Per class g present: pairwise quadratic forms R_g(k,c) = (w_k-w_c)^T Sigma_g (w_k-w_c)
  // and V_g = Sigma_g W^T for the W gradient.
  std::vector<char> present(covs.num_classes(), 0);
  for (int g : kappa) present[g] = 1;
  std::vector<Mat> r_cache(covs.num_classes());
  std::vector<Mat> v_cache(covs.num_classes());
  for (std::size_t g = 0; g < covs.num_classes(); ++g) {
    if (!present[g]) continue;
    const Mat& sigma = covs.cov(int(g));
    Mat ws = matmul_nt(sigma, head.W);  // A x C  (Sigma W^T, Sigma symmetric)
    Mat p = matmul(head.W, ws);         // C x C  (W Sigma W^T)
    Mat r(c_count, c_count);
    for (std::size_t k = 0; k < c_count; ++k)
      for (std::size_t c = 0; c < c_count; ++c)
        r(k, c) = (k == c) ? 0.0 : p(k, k) - 2.0 * p(k, c) + p(c, c);
    r_cache[g] = std::move(r);
    v_cache[g] = std::move(ws);
  }

  LossOutput out = detail::zero_output(m, a, c_count);
  const double half_lambda = 0.5 * lambda;
  double acc = 0.0;
  Vec y(c_count), alpha(c_count), gamma(c_count), v(a);
  for (std::size_t i = 0; i < m; ++i) {
    const Mat& r = r_cache[kappa[i]];
    const Mat& vg = v_cache[kappa[i]];
    auto zi = z.row(i);
    auto si = student.features.row(i);
    std::fill(gamma.begin(), gamma.end(), 0.0);
    for (std::size_t c = 0; c < c_count; ++c) {
      for (std::size_t k = 0; k < c_count; ++k) y[k] = zi[k] + half_lambda * r(k, c);
      const double lse = log_sum_exp(y);
      acc += pt(i, c) * (lse - zi[c]);

      const double ptc = pt(i, c);
      for (std::size_t k = 0; k < c_count; ++k) alpha[k] = std::exp(y[k] - lse);
      for (std::size_t k = 0; k < c_count; ++k) {
        const double beta = ptc * alpha[k];
        gamma[k] += beta;
        // v = s_i + lambda * Sigma_g (w_k - w_c)
        for (std::size_t t = 0; t < a; ++t)
          v[t] = si[t] + lambda * (vg(t, k) - vg(t, c));
        axpy(beta, v, out.grad_W.row(k));
        axpy(-beta, v, out.grad_W.row(c));
      }
      gamma[c] -= ptc;  // alpha sums to one
    }
    auto gf = out.grad_features.row(i);
    for (std::size_t k = 0; k < c_count; ++k) {
      axpy(gamma[k], head.W.row(k), gf);
      out.grad_B[k] += gamma[k];
    }
  }
  const double inv_m = 1.0 / double(m);
  out.value = acc * inv_m;
  for (auto& x : out.grad_features.data()) x *= inv_m;
  for (auto& x : out.grad_W.data()) x *= inv_m;
  for (auto& x : out.grad_B) x *= inv_m;
  return out;
}

inline LossOutput aug_pd_loss(const FeatureBatch& student, const FeatureBatch& teacher,
                              const ClassifierHead& head, const ClassCovarianceStore& covs,
                              double lambda) {
  detail::check_pair(student, teacher, head);
  const std::vector<int> kappa = assign_pixel_classes(student, teacher, head, covs);
  return aug_pd_loss_given_teacher(student, head, covs, lambda,
                                   class_probs(teacher.features, head), kappa);
}

// ---------------------------------------------------------------------------
// Upper bound of CWD under infinitely many Gaussian feature augmentations:
//   (tau^2/C) sum_c sum_i p_t,i^c log sum_{k=1..M} exp[ w_c.(s_k - s_i)/tau
//                + lambda (w_c^T Sigma_{kappa(i)} w_c + w_c^T Sigma_{kappa(k)} w_c) / denom ]
// denom = 2 tau^2 (tight moment-generating-function bound, default) or 2 tau
// (printed form; an upper bound only for tau >= 1).
// paper_form applies the variance term on the k = i diagonal as well;
// exact_diagonal keeps that term at exp(0) = 1, which is the tighter bound.
// Reduces to cwd_loss exactly at lambda = 0.
// ---------------------------------------------------------------------------
inline LossOutput aug_cwd_loss_given_teacher(const FeatureBatch& student,
                                             const ClassifierHead& head,
                                             const ClassCovarianceStore& covs, double lambda,
                                             double tau, DiagonalMode mode,
                                             VarianceDenominator denom, const Mat& phi_t,
                                             std::span<const int> kappa) {
  require(tau > 0.0, "invalid-temperature", "aug_cwd_loss needs tau > 0");
  require(lambda >= 0.0, "invalid-lambda", "aug_cwd_loss needs lambda >= 0");
  const std::size_t m = student.features.rows();
  const std::size_t c_count = head.num_classes();
  const std::size_t a = head.feature_dim();
  require(m >= 1 && c_count >= 2, "shape-mismatch", "empty batch or classifier");
  require(student.features.cols() == a && covs.dim() == a, "shape-mismatch",
          "feature width does not match classifier or covariance store");
  require(phi_t.rows() == c_count && phi_t.cols() == m, "shape-mismatch",
          "teacher spatial probability shape");
  require(kappa.size() == m, "shape-mismatch", "pixel class assignment length");
  for (int g : kappa)
    require(g >= 0 && std::size_t(g) < covs.num_classes(), "missing-class-stats",
            "no covariance for class " + std::to_string(g));

  const double scale = tau * tau / double(c_count);
  const double denom_value = (denom == VarianceDenominator::tau_squared)
                                 ? 2.0 * tau * tau
                                 : 2.0 * tau;
  const double var_coef = 2.0 * lambda / denom_value;  // scales Sigma w_c in the W gradient

  std::vector<char> present(covs.num_classes(), 0);
  for (int g : kappa) present[g] = 1;

  LossOutput out = detail::zero_output(m, a, c_count);
  double acc = 0.0;
  Vec u(m), av(m), vvec(m), rvec(m), colmass(m), row_entries(m), diag_beta(m);
  Vec quad(covs.num_classes(), 0.0);
  Vec chi(covs.num_classes(), 0.0);
  for (std::size_t c = 0; c < c_count; ++c) {
    auto wc = head.W.row(c);
    for (std::size_t i = 0; i < m; ++i)
      u[i] = (dot(wc, student.features.row(i)) + head.B[c]) / tau;
    for (std::size_t g = 0; g < covs.num_classes(); ++g)
      if (present[g]) quad[g] = quad_form(covs.cov(int(g)), wc);
    for (std::size_t i = 0; i < m; ++i) {
      av[i] = lambda * quad[kappa[i]] / denom_value;
      vvec[i] = u[i] + av[i];
      rvec[i] = u[i] - av[i];
    }

    std::fill(chi.begin(), chi.end(), 0.0);
    if (mode == DiagonalMode::paper_form) {
      // log sum_k exp(v_k - r_i) = lse(v) - r_i : one shared softmax per channel.
      const double total = log_sum_exp(vvec);
      for (std::size_t i = 0; i < m; ++i) acc += phi_t(c, i) * (total - rvec[i]);
      for (std::size_t k = 0; k < m; ++k) colmass[k] = std::exp(vvec[k] - total);
      for (std::size_t i = 0; i < m; ++i)
        chi[kappa[i]] += phi_t(c, i) + colmass[i];
    } else {
      // exact diagonal: the k = i term stays exp(0), so it carries no variance
      // inflation and no gradient of its own.
      std::fill(colmass.begin(), colmass.end(), 0.0);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t k = 0; k < m; ++k) row_entries[k] = vvec[k] - rvec[i];
        row_entries[i] = 0.0;
        const double lse = log_sum_exp(row_entries);
        const double pti = phi_t(c, i);
        acc += pti * lse;
        for (std::size_t k = 0; k < m; ++k) colmass[k] += pti * std::exp(row_entries[k] - lse);
        diag_beta[i] = pti * std::exp(-lse);
      }
      // Row and column masses both enter the variance part of the W gradient;
      // the constant diagonal term is excluded from each.
      for (std::size_t i = 0; i < m; ++i)
        chi[kappa[i]] += phi_t(c, i) + colmass[i] - 2.0 * diag_beta[i];
    }

    // gradient wrt student features: scale * (w_c/tau) * (colmass_j - phi_t_j)
    for (std::size_t j = 0; j < m; ++j) {
      const double coef = scale * (colmass[j] - phi_t(c, j)) / tau;
      axpy(coef, wc, out.grad_features.row(j));
    }
    // gradient wrt w_c: feature part + variance part
    auto gw = out.grad_W.row(c);
    for (std::size_t j = 0; j < m; ++j) {
      const double coef = scale * (colmass[j] - phi_t(c, j)) / tau;
      axpy(coef, student.features.row(j), gw);
    }
    if (lambda > 0.0) {
      Vec sig_w(a, 0.0);
      for (std::size_t g = 0; g < covs.num_classes(); ++g) {
        if (!present[g] || chi[g] == 0.0) continue;
        const Vec sw = matvec(covs.cov(int(g)), wc);
        axpy(chi[g], sw, sig_w);
      }
      axpy(scale * var_coef, sig_w, gw);
    }
  }
  out.value = acc * scale;
  return out;
}

inline LossOutput aug_cwd_loss(const FeatureBatch& student, const FeatureBatch& teacher,
                               const ClassifierHead& head, const ClassCovarianceStore& covs,
                               double lambda, double tau,
                               DiagonalMode mode = DiagonalMode::paper_form,
                               VarianceDenominator denom = VarianceDenominator::tau_squared) {
  require(tau > 0.0, "invalid-temperature", "aug_cwd_loss needs tau > 0");
  detail::check_pair(student, teacher, head);
  const std::vector<int> kappa = assign_pixel_classes(student, teacher, head, covs);
  return aug_cwd_loss_given_teacher(student, head, covs, lambda, tau, mode, denom,
                                    spatial_probs(teacher.features, head, tau), kappa);
}

// ---------------------------------------------------------------------------
// Supervised per-pixel cross-entropy over non-ignored pixels.
// ---------------------------------------------------------------------------
inline LossOutput segmentation_ce_loss(const FeatureBatch& student, const ClassifierHead& head,
                                       std::span<const int> labels) {
  require(student.features.cols() == head.feature_dim(), "shape-mismatch",
          "student feature width does not match classifier");
  require(labels.size() == student.features.rows(), "shape-mismatch",
          "labels length does not match pixel count");
  const std::size_t m = student.features.rows();
  const std::size_t c_count = head.num_classes();
  const std::size_t a = head.feature_dim();

  std::size_t valid = 0;
  for (int y : labels) {
    if (y == kIgnoreLabel) continue;
    require(y >= 0 && std::size_t(y) < c_count, "shape-mismatch",
            "label " + std::to_string(y) + " out of class range");
    ++valid;
  }
  require(valid > 0, "empty-supervision", "all pixels carry the ignore label");

  const Mat z = head.logits(student.features);
  LossOutput out = detail::zero_output(m, a, c_count);
  double acc = 0.0;
  const double inv = 1.0 / double(valid);
  for (std::size_t i = 0; i < m; ++i) {
    if (labels[i] == kIgnoreLabel) continue;
    auto zi = z.row(i);
    const double lse = log_sum_exp(zi);
    acc += lse - zi[labels[i]];
    const Vec ps = softmax(zi);
    auto gf = out.grad_features.row(i);
    for (std::size_t c = 0; c < c_count; ++c) {
      const double g = inv * (ps[c] - (std::size_t(labels[i]) == c ? 1.0 : 0.0));
      axpy(g, head.W.row(c), gf);
      axpy(g, student.features.row(i), out.grad_W.row(c));
      out.grad_B[c] += g;
    }
  }
  out.value = acc * inv;
  return out;
}

// Dispatch on the loss spec; covs may be null for the base variants.
inline LossOutput distill_loss(const DistillLossSpec& spec, const FeatureBatch& student,
                               const FeatureBatch& teacher, const ClassifierHead& head,
                               const ClassCovarianceStore* covs) {
  switch (spec.variant) {
    case LossVariant::PD:
      return pd_loss(student, teacher, head);
    case LossVariant::CWD:
      return cwd_loss(student, teacher, head, spec.tau);
    case LossVariant::AUG_PD:
      require(covs != nullptr, "missing-class-stats", "aug variant needs a covariance store");
      return aug_pd_loss(student, teacher, head, *covs, spec.lambda);
    case LossVariant::AUG_CWD:
    default:
      require(covs != nullptr, "missing-class-stats", "aug variant needs a covariance store");
      return aug_cwd_loss(student, teacher, head, *covs, spec.lambda, spec.tau,
                          spec.diagonal_mode, spec.variance_denominator);
  }
}

}  // namespace fakd
