#include <cmath>
#include <numbers>

#include <doctest.h>

#include "kaspe/errors.hpp"
#include "kaspe/mixture.hpp"
#include "kaspe/rng.hpp"

using namespace kaspe;

namespace {

Matrix random_factor(Rng& rng, int d) {
  Matrix U = Matrix::Zero(d, d);
  for (int j = 0; j < d; ++j) {
    U(j, j) = 0.5 + rng.uniform();
    for (int k = j + 1; k < d; ++k) U(j, k) = rng.uniform() - 0.5;
  }
  return U;
}

GaussianMixture random_mixture(Rng& rng, int L, int d) {
  std::vector<double> w(L);
  double s = 0.0;
  for (auto& x : w) s += (x = 0.1 + rng.uniform());
  for (auto& x : w) x /= s;
  std::vector<Vector> mu;
  std::vector<Matrix> U;
  for (int l = 0; l < L; ++l) {
    mu.push_back(Vector::NullaryExpr(d, [&] { return 4.0 * rng.uniform() - 2.0; }));
    U.push_back(random_factor(rng, d));
  }
  return GaussianMixture(w, mu, U);
}

// Trapezoid rule over a square box, independent of the evaluation module.
double integrate_2d(const std::function<double(double, double)>& f, double lo, double hi, int n) {
  const double h = (hi - lo) / (n - 1);
  double acc = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double wi = (i == 0 || i == n - 1) ? 0.5 : 1.0;
      const double wj = (j == 0 || j == n - 1) ? 0.5 : 1.0;
      acc += wi * wj * f(lo + i * h, lo + j * h);
    }
  return acc * h * h;
}

}  // namespace

TEST_CASE("component log-density at the mode") {
  Vector t(1), m(1);
  t << 0.0;
  m << 0.0;
  CHECK(log_component_density(t, m, Matrix::Identity(1, 1)) ==
        doctest::Approx(-0.5 * std::log(2 * std::numbers::pi)).epsilon(1e-15));
  CHECK(log_component_density(t, m, Matrix::Identity(1, 1)) == doctest::Approx(-0.9189385));

  Vector mu(2);
  mu << 3.0, -7.0;
  CHECK(log_component_density(mu, mu, Matrix::Identity(2, 2)) == doctest::Approx(-1.8378771));
}

TEST_CASE("component log-density rejects a nonpositive diagonal") {
  Matrix U = Matrix::Identity(2, 2);
  U(1, 1) = 0.0;
  CHECK_THROWS_AS(log_component_density(Vector::Zero(2), Vector::Zero(2), U), InvalidParameter);
  U(1, 1) = -1.0;
  CHECK_THROWS_AS(log_component_density(Vector::Zero(2), Vector::Zero(2), U), InvalidParameter);
}

TEST_CASE("component density integrates to one in two dimensions") {
  Rng rng(11);
  for (int rep = 0; rep < 3; ++rep) {
    Vector mu(2);
    mu << rng.uniform() - 0.5, rng.uniform() - 0.5;
    const Matrix U = random_factor(rng, 2);
    const double mass = integrate_2d(
        [&](double a, double b) {
          return std::exp(log_component_density(Vector{{a, b}}, mu, U));
        },
        -12.0, 12.0, 481);
    CHECK(mass == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("single component mixture equals the component density exactly") {
  Rng rng(3);
  const GaussianMixture gm = random_mixture(rng, 1, 2);
  for (int i = 0; i < 20; ++i) {
    Vector t{{rng.normal(), rng.normal()}};
    CHECK(log_density(t, gm) == log_component_density(t, gm.means()[0], gm.factors()[0]));
  }
}

TEST_CASE("two identical half-weight components collapse to one") {
  Vector mu{{0.3, -0.2}};
  Matrix U{{1.5, 0.2}, {0.0, 0.7}};
  GaussianMixture gm({0.5, 0.5}, {mu, mu}, {U, U});
  for (double a : {-1.0, 0.0, 2.5}) {
    Vector t{{a, 0.5 * a}};
    CHECK(log_density(t, gm) == doctest::Approx(log_component_density(t, mu, U)).epsilon(1e-14));
  }
}

TEST_CASE("log-sum-exp agrees with an extended-precision naive sum") {
  Rng rng(5);
  const GaussianMixture gm = random_mixture(rng, 3, 2);
  for (int i = 0; i < 200; ++i) {
    Vector t{{3.0 * rng.normal(), 3.0 * rng.normal()}};
    long double naive = 0.0L;
    for (int l = 0; l < 3; ++l) {
      const Matrix& U = gm.factors()[l];
      const Vector dlt = t - gm.means()[l];
      long double e0 = static_cast<long double>(U(0, 0)) * dlt[0] +
                       static_cast<long double>(U(0, 1)) * dlt[1];
      long double e1 = static_cast<long double>(U(1, 1)) * dlt[1];
      long double phi = static_cast<long double>(U(0, 0)) * U(1, 1) /
                        (2.0L * std::numbers::pi_v<long double>) *
                        std::exp(-0.5L * (e0 * e0 + e1 * e1));
      naive += static_cast<long double>(gm.weights()[l]) * phi;
    }
    const double ref = static_cast<double>(std::log(naive));
    CHECK(std::abs(log_density(t, gm) - ref) <= 1e-10 * std::max(1.0, std::abs(ref)));
  }
}

TEST_CASE("log-density stays finite far in the tails") {
  GaussianMixture gm({0.5, 0.5}, {Vector{{0.0}}, Vector{{1.0}}},
                     {Matrix::Identity(1, 1), Matrix::Identity(1, 1)});
  const double v = log_density(Vector{{37.0}}, gm);
  CHECK(std::isfinite(v));
  CHECK(v < -600.0);
}

TEST_CASE("mixture normalisation over eight standard deviations") {
  Rng rng(17);
  for (int rep = 0; rep < 3; ++rep) {
    const GaussianMixture gm = random_mixture(rng, 3, 2);
    double half_width = 0.0;
    for (int l = 0; l < 3; ++l) {
      const Matrix C = gm.component_covariance(l);
      half_width = std::max(half_width, std::abs(gm.means()[l].maxCoeff()) +
                                            8.0 * std::sqrt(C.diagonal().maxCoeff()));
      half_width = std::max(half_width, std::abs(gm.means()[l].minCoeff()) +
                                            8.0 * std::sqrt(C.diagonal().maxCoeff()));
    }
    const double mass = integrate_2d(
        [&](double a, double b) { return std::exp(log_density(Vector{{a, b}}, gm)); },
        -half_width, half_width, 601);
    CHECK(mass == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("sampling: moments, degenerate weights, determinism") {
  const auto draws = sample(GaussianMixture::standard_normal(2), 100000, 42);
  Vector mean = Vector::Zero(2);
  for (const auto& x : draws) mean += x;
  mean /= 1e5;
  CHECK(std::abs(mean[0]) < 0.02);
  CHECK(std::abs(mean[1]) < 0.02);

  GaussianMixture gm({1.0, 0.0}, {Vector{{-50.0}}, Vector{{50.0}}},
                     {Matrix::Identity(1, 1), Matrix::Identity(1, 1)});
  for (const auto& x : sample(gm, 5000, 9)) CHECK(x[0] < 0.0);

  const auto a = sample(gm, 100, 123);
  const auto b = sample(gm, 100, 123);
  CHECK(a == b);
  CHECK_THROWS_AS(sample(gm, 0, 1), InvalidParameter);
}

TEST_CASE("sampling reproduces analytic mixture moments") {
  Rng rng(23);
  const GaussianMixture gm = random_mixture(rng, 3, 2);
  const int n = 100000;
  const auto draws = sample(gm, n, 7);
  Vector mean = Vector::Zero(2);
  for (const auto& x : draws) mean += x;
  mean /= n;
  Matrix cov = Matrix::Zero(2, 2);
  for (const auto& x : draws) cov += (x - mean) * (x - mean).transpose();
  cov /= n - 1;
  const Matrix C = gm.covariance();
  for (int k = 0; k < 2; ++k) {
    CHECK(std::abs(mean[k] - gm.mean()[k]) < 4.0 * std::sqrt(C(k, k) / n));
    // Var of a sample variance is at most (kurtosis-bounded) a few times 2 sigma^4 / n.
    CHECK(std::abs(cov(k, k) - C(k, k)) < 6.0 * C(k, k) * std::sqrt(2.0 / n) * 2.0);
  }
}

TEST_CASE("parameter count") {
  CHECK(parameter_count(20, 2) == 120);
  CHECK(parameter_count(1, 1) == 3);
  CHECK(parameter_count(20, 1) == 60);
  static_assert(parameter_count(2, 3) == 20);
}

TEST_CASE("construction validates every invariant") {
  const Vector z = Vector::Zero(2);
  const Matrix I = Matrix::Identity(2, 2);
  CHECK_THROWS_AS(GaussianMixture({0.6, 0.6}, {z, z}, {I, I}), InvalidParameter);
  CHECK_THROWS_AS(GaussianMixture({1.5, -0.5}, {z, z}, {I, I}), InvalidParameter);
  Matrix lower = I;
  lower(1, 0) = 0.1;
  CHECK_THROWS_AS(GaussianMixture({1.0}, {z}, {lower}), InvalidParameter);
  Matrix zero_diag = I;
  zero_diag(0, 0) = 0.0;
  CHECK_THROWS_AS(GaussianMixture({1.0}, {z}, {zero_diag}), InvalidParameter);
  CHECK_THROWS_AS(GaussianMixture({1.0}, {Vector::Zero(3)}, {I}), InvalidParameter);
  CHECK_NOTHROW(GaussianMixture({1.0 - 1e-13, 1e-13}, {z, z}, {I, I}));
}

TEST_CASE("JSON round trip") {
  Rng rng(31);
  const GaussianMixture gm = random_mixture(rng, 4, 2);
  nlohmann::json j = gm;
  CHECK(j["L"] == 4);
  CHECK(j["U"][0][1][0] == 0.0);
  const GaussianMixture back = mixture_from_json(nlohmann::json::parse(j.dump()));
  CHECK(back == gm);
  j["weights"][0] = 5.0;
  CHECK_THROWS_AS(mixture_from_json(j), InvalidParameter);
}
