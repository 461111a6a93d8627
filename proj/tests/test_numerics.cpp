#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "fakd/numerics.hpp"
#include "fakd/rng.hpp"
#include "test_support.hpp"

using namespace fakd;

namespace {

Mat random_psd(std::size_t n, Rng& rng) {
  Mat g(n, n);
  rng.fill_normal(g.data());
  Mat s = matmul_nt(g, g);
  for (auto& x : s.data()) x /= double(n);
  return s;
}

}  // namespace

TEST_CASE("log_sum_exp basic values") {
  const Vec two_zeros{0.0, 0.0};
  CHECK(log_sum_exp(two_zeros) == Catch::Approx(std::log(2.0)).epsilon(1e-14));

  for (double x : {-3.5, 0.0, 1.0, 123.456}) {
    const Vec single{x};
    CHECK(log_sum_exp(single) == x);
  }

  const Vec huge{1000.0, 1000.0};
  CHECK(log_sum_exp(huge) == Catch::Approx(1000.0 + std::log(2.0)).epsilon(1e-14));
  CHECK(std::isfinite(log_sum_exp(huge)));
}

TEST_CASE("log_sum_exp shift invariance") {
  Rng rng(42);
  for (int rep = 0; rep < 20; ++rep) {
    Vec v(7);
    rng.fill_normal(v);
    for (auto& x : v) x *= 3.0;
    const double base = log_sum_exp(v);
    for (double c : {-5.0, 0.25, 40.0}) {
      Vec shifted = v;
      for (auto& x : shifted) x += c;
      CHECK(log_sum_exp(shifted) == Catch::Approx(base + c).margin(1e-11));
    }
  }
}

TEST_CASE("log_sum_exp rejects empty input") {
  const Vec empty;
  CHECK_THROWS_MATCHES(log_sum_exp(empty), Error, ErrorCodeIs("empty-vector"));
}

TEST_CASE("softmax analytic cases") {
  const Vec zeros{0.0, 0.0};
  Vec p = softmax(zeros);
  CHECK(p[0] == Catch::Approx(0.5).epsilon(1e-14));
  CHECK(p[1] == Catch::Approx(0.5).epsilon(1e-14));

  const Vec ln2{std::log(2.0), 0.0};
  p = softmax(ln2);
  CHECK(p[0] == Catch::Approx(2.0 / 3.0).epsilon(1e-14));
  CHECK(p[1] == Catch::Approx(1.0 / 3.0).epsilon(1e-14));
}

TEST_CASE("softmax matches naive formula and normalizes") {
  Rng rng(7);
  for (int rep = 0; rep < 10; ++rep) {
    Vec v(5);
    rng.fill_normal(v);
    for (auto& x : v) x *= 4.0;
    for (double tau : {1.0, 2.0, 4.0}) {
      const Vec p = softmax(v, tau);
      double naive_sum = 0.0;
      for (double x : v) naive_sum += std::exp(x / tau);
      double total = 0.0;
      for (std::size_t i = 0; i < v.size(); ++i) {
        CHECK(p[i] == Catch::Approx(std::exp(v[i] / tau) / naive_sum).epsilon(1e-12));
        CHECK(p[i] > 0.0);
        CHECK(p[i] < 1.0);
        total += p[i];
      }
      CHECK(total == Catch::Approx(1.0).margin(1e-12));
    }
  }
}

TEST_CASE("softmax shift invariance") {
  Rng rng(9);
  Vec v(6);
  rng.fill_normal(v);
  const Vec base = softmax(v, 2.0);
  Vec shifted = v;
  for (auto& x : shifted) x += 17.5;
  const Vec moved = softmax(shifted, 2.0);
  for (std::size_t i = 0; i < v.size(); ++i)
    CHECK(moved[i] == Catch::Approx(base[i]).margin(1e-12));
}

TEST_CASE("softmax rejects bad temperature") {
  const Vec v{1.0, 2.0};
  CHECK_THROWS_MATCHES(softmax(v, 0.0), Error, ErrorCodeIs("invalid-temperature"));
  CHECK_THROWS_MATCHES(softmax(v, -1.0), Error, ErrorCodeIs("invalid-temperature"));
}

TEST_CASE("matrix kernels match naive loops") {
  Rng rng(11);
  Mat a(4, 3), b(3, 5);
  rng.fill_normal(a.data());
  rng.fill_normal(b.data());
  const Mat c = matmul(a, b);
  REQUIRE(c.rows() == 4);
  REQUIRE(c.cols() == 5);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < 3; ++k) acc += a(i, k) * b(k, j);
      CHECK(c(i, j) == Catch::Approx(acc).margin(1e-13));
    }

  Vec x(3);
  rng.fill_normal(x);
  const Vec y = matvec(a, x);
  for (std::size_t i = 0; i < 4; ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < 3; ++k) acc += a(i, k) * x[k];
    CHECK(y[i] == Catch::Approx(acc).margin(1e-13));
  }

  Mat s(3, 3);
  rng.fill_normal(s.data());
  s = symmetrized(s);
  const double q = quad_form(s, x);
  double acc = 0.0;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) acc += x[i] * s(i, j) * x[j];
  CHECK(q == Catch::Approx(acc).margin(1e-12));
}

TEST_CASE("psd_factor residual stays within tolerance") {
  Rng rng(21);
  for (int rep = 0; rep < 10; ++rep) {
    const Mat cov = random_psd(5, rng);
    const PsdFactor f = psd_factor(cov);
    Mat rebuilt = matmul_nt(f.lower, f.lower);
    const Mat s = symmetrized(cov);
    double worst = 0.0;
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        const double target = s(i, j) + (i == j ? f.jitter : 0.0);
        worst = std::max(worst, std::abs(rebuilt(i, j) - target));
      }
    CHECK(worst <= 1e-9 * (1.0 + max_abs(cov)));
  }
}

TEST_CASE("psd_factor handles rank-deficient covariance") {
  // Rank-1 PSD matrix: outer product of one vector.
  Vec v{1.0, -2.0, 0.5};
  Mat cov(3, 3);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) cov(i, j) = v[i] * v[j];
  const PsdFactor f = psd_factor(cov);
  Mat rebuilt = matmul_nt(f.lower, f.lower);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      CHECK(rebuilt(i, j) ==
            Catch::Approx(cov(i, j) + (i == j ? f.jitter : 0.0)).margin(1e-9));
}

TEST_CASE("psd_factor rejects indefinite matrices") {
  Mat neg = Mat::identity(2);
  neg(0, 0) = -1.0;
  CHECK_THROWS_MATCHES(psd_factor(neg), Error, ErrorCodeIs("psd-factorization-failed"));
  Mat rect(2, 3);
  CHECK_THROWS_MATCHES(psd_factor(rect), Error, ErrorCodeIs("shape-mismatch"));
}

TEST_CASE("sample_mvn degenerate cases return the mean exactly") {
  const Vec mean{1.5, -2.0, 0.25};
  Rng rng(31);
  const Mat cov = random_psd(3, rng);

  Mat rows = sample_mvn(mean, cov, 0.0, 4, rng);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t j = 0; j < 3; ++j) CHECK(rows(r, j) == mean[j]);

  rows = sample_mvn(mean, Mat(3, 3), 1.0, 4, rng);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t j = 0; j < 3; ++j) CHECK(rows(r, j) == mean[j]);
}

TEST_CASE("sample_mvn matches identity covariance statistics") {
  const std::size_t n = 100000, d = 3;
  const Vec mean(d, 0.0);
  Rng rng(77);
  const Mat draws = sample_mvn(mean, Mat::identity(d), 1.0, n, rng);
  Mat cov(d, d);
  Vec mu(d, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) mu[j] += draws(r, j);
  for (auto& x : mu) x /= double(n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j)
        cov(i, j) += (draws(r, i) - mu[i]) * (draws(r, j) - mu[j]);
  for (auto& x : cov.data()) x /= double(n);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j)
      CHECK(std::abs(cov(i, j) - (i == j ? 1.0 : 0.0)) < 0.05);
}

TEST_CASE("sample_mvn is reproducible for a fixed seed") {
  const Vec mean{0.0, 1.0};
  Rng rng_cov(5);
  const Mat cov = random_psd(2, rng_cov);
  Rng r1(99), r2(99);
  const Mat a = sample_mvn(mean, cov, 0.7, 50, r1);
  const Mat b = sample_mvn(mean, cov, 0.7, 50, r2);
  for (std::size_t i = 0; i < a.data().size(); ++i) CHECK(a.data()[i] == b.data()[i]);
}

TEST_CASE("sample_mvn rejects shape mismatches") {
  const Vec mean{0.0, 0.0};
  Rng rng(1);
  CHECK_THROWS_MATCHES(sample_mvn(mean, Mat(3, 3), 1.0, 2, rng), Error,
                       ErrorCodeIs("shape-mismatch"));
  CHECK_THROWS_MATCHES(sample_mvn(mean, Mat(2, 3), 1.0, 2, rng), Error,
                       ErrorCodeIs("shape-mismatch"));
  CHECK_THROWS_MATCHES(sample_mvn(mean, Mat(2, 2), -1.0, 2, rng), Error,
                       ErrorCodeIs("invalid-scale"));
}

TEST_CASE("rng streams are deterministic and tag-separated") {
  Rng a(1234), b(1234);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng c(1234), d(1234);
  double same = 0.0;
  for (int i = 0; i < 64; ++i) same += (c.normal() == d.normal()) ? 1.0 : 0.0;
  CHECK(same == 64.0);

  CHECK(derive_seed(9, "alpha") != derive_seed(9, "beta"));
  CHECK(derive_seed(9, "alpha") == derive_seed(9, "alpha"));
  CHECK(derive_seed(9, "alpha") != derive_seed(10, "alpha"));
}

TEST_CASE("rng normal moments are sane") {
  Rng rng(2024);
  const int n = 200000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    sum += x;
    sq += x * x;
  }
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  CHECK(std::abs(mean) < 0.01);
  CHECK(std::abs(var - 1.0) < 0.02);
}
