#pragma once

#include <cstdint>
#include <functional>
#include <variant>
#include <vector>

#include "kaspe/evaluation.hpp"
#include "kaspe/mixture.hpp"
#include "kaspe/rng.hpp"

namespace kaspe {

/// A generative model as seen by the likelihood-free machinery: a prior we can
/// sample and evaluate, and a simulator we can only sample from.
struct Problem {
  int dim = 0;
  std::function<Vector(Rng&)> sample_prior;
  /// Log prior density up to a constant; -inf outside the support.
  std::function<double(const Vector&)> log_prior;
  /// Draws y ~ p(. | theta). May throw NumericalFailure.
  std::function<Vector(const Vector&, Rng&)> simulate;
};

// ---------------------------------------------------------------------------
// Normal model with unknown mean and precision under a normal-gamma prior.

struct NormalGammaConfig {
  double eta0 = 2.0;
  double lambda0 = 1.0 / 16.0;
  double alpha0 = 1.01;
  double beta0 = 0.1;
  int m = 4;
};

void validate(const NormalGammaConfig& cfg);

/// theta = (mu, tau). m i.i.d. draws from N(mu, 1/tau).
Vector ng_simulate(const NormalGammaConfig& cfg, const Vector& theta, Rng& rng);
Vector ng_simulate(const NormalGammaConfig& cfg, const Vector& theta, std::uint64_t rng_seed);

/// Conjugate update; the result holds the posterior hyperparameters.
NormalGammaConfig ng_posterior(const NormalGammaConfig& cfg, const Vector& y);

/// log NG(mu, tau | eta, lambda, alpha, beta); -inf for tau <= 0.
double ng_log_density(const NormalGammaConfig& params, double mu, double tau);

/// 400x400 box [mean(mu) +- 6 sd(mu)] x (0, 4 mean(tau)] for a posterior.
std::vector<Axis> ng_default_axes(const NormalGammaConfig& posterior, int nodes = 400);

Problem normal_gamma_problem(const NormalGammaConfig& cfg);

// ---------------------------------------------------------------------------
// Two-component Gaussian mixture regression with covariates
// v(t) = (t, t^2) and r(t) = (t^2, sqrt t).

struct GaussianMixtureRegressionConfig {
  std::vector<double> time_points;
  double p1 = 0.4;
  double p2 = 0.6;
  double sigma1 = 0.3;
  double sigma2 = 0.4;
  Vector prior_mean = (Vector(2) << 2.0, 1.0).finished();
  double prior_cov_scale = 4.0;

  /// Default constants with times equispaced on (0, 1].
  static GaussianMixtureRegressionConfig with_default_times(int m);
};

void validate(const GaussianMixtureRegressionConfig& cfg);

/// m x 2 design matrices of the two components.
Matrix gmr_design_v(const std::vector<double>& t);
Matrix gmr_design_r(const std::vector<double>& t);

Vector gmr_simulate(const GaussianMixtureRegressionConfig& cfg, const Vector& theta, Rng& rng);
Vector gmr_simulate(const GaussianMixtureRegressionConfig& cfg, const Vector& theta,
                    std::uint64_t rng_seed);

/// Closed-form two-component posterior; component weights are normalised in
/// log space.
GaussianMixture gmr_posterior(const GaussianMixtureRegressionConfig& cfg, const Vector& y);

/// 400x400 box covering both posterior components to +-6 sd.
std::vector<Axis> gmr_default_axes(const GaussianMixture& posterior, int nodes = 400);

Problem gmr_problem(const GaussianMixtureRegressionConfig& cfg);

// ---------------------------------------------------------------------------
// FitzHugh-Nagumo system with unknown time-scale parameter gamma.

struct FitzHughNagumoConfig {
  double theta1 = 0.2;
  double theta2 = 0.2;
  double zeta = -0.4;
  double v0 = -1.0;
  double r0 = 1.0;
  double gamma_lo = 0.0;
  double gamma_hi = 15.0;
  double noise_sd = 0.5;
  std::vector<double> time_points;
  double rk4_step = 0.01;

  static constexpr double kDefaultWindow = 5.0;
  /// Times window * i / m for i = 1..m.
  static FitzHughNagumoConfig with_default_times(int m, double window = kDefaultWindow);
};

void validate(const FitzHughNagumoConfig& cfg);

struct FnState {
  double v;
  double r;
};

/// Right-hand side (dv/dt, dr/dt).
FnState fn_rhs(const FitzHughNagumoConfig& cfg, double gamma, FnState s);

/// v(t_i) from fixed-step RK4; each observation time is hit exactly.
Vector fn_integrate(const FitzHughNagumoConfig& cfg, double gamma);

Vector fn_simulate(const FitzHughNagumoConfig& cfg, double gamma, Rng& rng);
Vector fn_simulate(const FitzHughNagumoConfig& cfg, double gamma, std::uint64_t rng_seed);

/// Gaussian log-likelihood of y given gamma (no prior term).
double fn_loglik(const FitzHughNagumoConfig& cfg, double gamma, const Vector& y);

/// Posterior over gamma on `grid_size` cell midpoints of the prior interval,
/// normalised by the trapezoid rule.
DensityGrid fn_posterior_grid(const FitzHughNagumoConfig& cfg, const Vector& y, int grid_size);

Problem fn_problem(const FitzHughNagumoConfig& cfg);

// ---------------------------------------------------------------------------

/// Ground-truth posterior in whichever form the model admits.
struct PosteriorOracle {
  enum class Kind { NormalGammaClosedForm, GaussianMixtureClosedForm, GridNormalized };
  Kind kind;
  std::variant<NormalGammaConfig, GaussianMixture, DensityGrid> payload;

  static PosteriorOracle normal_gamma(NormalGammaConfig posterior);
  static PosteriorOracle mixture(GaussianMixture posterior);
  static PosteriorOracle grid(DensityGrid posterior);

  /// Normalised tabulation on `axes`. Grid payloads require identical axes.
  DensityGrid tabulate(const std::vector<Axis>& axes) const;
  /// The oracle's own default evaluation axes.
  std::vector<Axis> default_axes() const;
};

}  // namespace kaspe
