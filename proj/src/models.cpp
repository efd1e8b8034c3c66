#include "kaspe/models.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

#include "kaspe/errors.hpp"

namespace kaspe {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_normal_pdf(double x, double mean, double var) {
  const double d = x - mean;
  return -0.5 * (kLog2Pi + std::log(var)) - 0.5 * d * d / var;
}

}  // namespace

// ---------------------------------------------------------------------------
// normal-gamma

void validate(const NormalGammaConfig& cfg) {
  if (!(cfg.lambda0 > 0.0) || !(cfg.alpha0 > 0.0) || !(cfg.beta0 > 0.0))
    throw InvalidConfig("normal-gamma: lambda0, alpha0 and beta0 must be positive");
  if (cfg.m < 1) throw InvalidConfig("normal-gamma: m must be positive");
}

Vector ng_simulate(const NormalGammaConfig& cfg, const Vector& theta, Rng& rng) {
  if (theta.size() != 2) throw InvalidParameter("normal-gamma theta must be (mu, tau)");
  const double mu = theta[0];
  const double tau = theta[1];
  if (!(tau > 0.0)) throw InvalidParameter("normal-gamma precision must be positive");
  const double sd = 1.0 / std::sqrt(tau);
  Vector y(cfg.m);
  for (int i = 0; i < cfg.m; ++i) y[i] = mu + sd * rng.normal();
  return y;
}

Vector ng_simulate(const NormalGammaConfig& cfg, const Vector& theta, std::uint64_t rng_seed) {
  Rng rng(rng_seed);
  return ng_simulate(cfg, theta, rng);
}

NormalGammaConfig ng_posterior(const NormalGammaConfig& cfg, const Vector& y) {
  const auto m = static_cast<double>(y.size());
  if (y.size() < 1) throw InvalidParameter("ng_posterior needs at least one observation");
  const double ybar = y.mean();
  const double s = (y.array() - ybar).square().sum() / m;
  const double dev = ybar - cfg.eta0;
  NormalGammaConfig post = cfg;
  post.eta0 = (cfg.lambda0 * cfg.eta0 + m * ybar) / (cfg.lambda0 + m);
  post.lambda0 = cfg.lambda0 + m;
  post.alpha0 = cfg.alpha0 + 0.5 * m;
  post.beta0 = cfg.beta0 + 0.5 * (m * s + cfg.lambda0 * m * dev * dev / (cfg.lambda0 + m));
  post.m = static_cast<int>(y.size());
  return post;
}

double ng_log_density(const NormalGammaConfig& p, double mu, double tau) {
  if (!(tau > 0.0)) return kNegInf;
  const double log_gamma = p.alpha0 * std::log(p.beta0) - std::lgamma(p.alpha0) +
                           (p.alpha0 - 1.0) * std::log(tau) - p.beta0 * tau;
  return log_gamma + log_normal_pdf(mu, p.eta0, 1.0 / (p.lambda0 * tau));
}

std::vector<Axis> ng_default_axes(const NormalGammaConfig& post, int nodes) {
  const double scale = post.alpha0 > 1.0
                           ? std::sqrt(post.beta0 / (post.lambda0 * (post.alpha0 - 1.0)))
                           : std::sqrt(post.beta0 / (post.lambda0 * post.alpha0));
  const double tau_mean = post.alpha0 / post.beta0;
  Axis tau(nodes);
  for (int j = 0; j < nodes; ++j) tau[j] = 4.0 * tau_mean * (j + 1) / nodes;
  return {linspace(post.eta0 - 6.0 * scale, post.eta0 + 6.0 * scale, nodes), tau};
}

Problem normal_gamma_problem(const NormalGammaConfig& cfg) {
  validate(cfg);
  Problem p;
  p.dim = 2;
  p.sample_prior = [cfg](Rng& rng) {
    Vector theta(2);
    theta[1] = rng.gamma(cfg.alpha0, cfg.beta0);
    theta[0] = cfg.eta0 + rng.normal() / std::sqrt(cfg.lambda0 * theta[1]);
    return theta;
  };
  p.log_prior = [cfg](const Vector& theta) { return ng_log_density(cfg, theta[0], theta[1]); };
  p.simulate = [cfg](const Vector& theta, Rng& rng) { return ng_simulate(cfg, theta, rng); };
  return p;
}

// ---------------------------------------------------------------------------
// Gaussian mixture regression

GaussianMixtureRegressionConfig GaussianMixtureRegressionConfig::with_default_times(int m) {
  GaussianMixtureRegressionConfig cfg;
  cfg.time_points.resize(m);
  for (int i = 0; i < m; ++i) cfg.time_points[i] = static_cast<double>(i + 1) / m;
  return cfg;
}

void validate(const GaussianMixtureRegressionConfig& cfg) {
  if (cfg.time_points.empty()) throw InvalidConfig("mixture regression: no time points");
  for (double t : cfg.time_points)
    if (!(t >= 0.0)) throw InvalidConfig("mixture regression: time points must be nonnegative");
  if (cfg.p1 < 0.0 || cfg.p2 < 0.0 || std::abs(cfg.p1 + cfg.p2 - 1.0) > 1e-12)
    throw InvalidConfig("mixture regression: p1 + p2 must equal 1");
  if (!(cfg.sigma1 > 0.0) || !(cfg.sigma2 > 0.0))
    throw InvalidConfig("mixture regression: noise standard deviations must be positive");
  if (cfg.prior_mean.size() != 2) throw InvalidConfig("mixture regression: prior mean must be 2-D");
  if (!(cfg.prior_cov_scale > 0.0))
    throw InvalidConfig("mixture regression: prior covariance scale must be positive");
}

Matrix gmr_design_v(const std::vector<double>& t) {
  Matrix v(t.size(), 2);
  for (std::size_t i = 0; i < t.size(); ++i) v.row(i) << t[i], t[i] * t[i];
  return v;
}

Matrix gmr_design_r(const std::vector<double>& t) {
  Matrix r(t.size(), 2);
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] < 0.0) throw InvalidConfig("mixture regression: negative time point");
    r.row(i) << t[i] * t[i], std::sqrt(t[i]);
  }
  return r;
}

Vector gmr_simulate(const GaussianMixtureRegressionConfig& cfg, const Vector& theta, Rng& rng) {
  if (theta.size() != 2) throw InvalidParameter("mixture regression theta must be 2-D");
  const bool first = rng.uniform() < cfg.p1;
  const Matrix X = first ? gmr_design_v(cfg.time_points) : gmr_design_r(cfg.time_points);
  const double sd = first ? cfg.sigma1 : cfg.sigma2;
  Vector y = X * theta;
  for (Eigen::Index i = 0; i < y.size(); ++i) y[i] += sd * rng.normal();
  return y;
}

Vector gmr_simulate(const GaussianMixtureRegressionConfig& cfg, const Vector& theta,
                    std::uint64_t rng_seed) {
  validate(cfg);
  Rng rng(rng_seed);
  return gmr_simulate(cfg, theta, rng);
}

GaussianMixture gmr_posterior(const GaussianMixtureRegressionConfig& cfg, const Vector& y) {
  validate(cfg);
  const auto m = static_cast<Eigen::Index>(cfg.time_points.size());
  if (y.size() != m) throw InvalidParameter("mixture regression: y length does not match times");

  const double prior_prec = 1.0 / (cfg.prior_cov_scale * cfg.prior_cov_scale);
  const Vector prior_term = prior_prec * cfg.prior_mean;

  const Matrix designs[2] = {gmr_design_v(cfg.time_points), gmr_design_r(cfg.time_points)};
  const double sds[2] = {cfg.sigma1, cfg.sigma2};
  const double probs[2] = {cfg.p1, cfg.p2};

  std::vector<Vector> means;
  std::vector<Matrix> factors;
  double log_alpha[2];
  for (int j = 0; j < 2; ++j) {
    const double noise_prec = 1.0 / (sds[j] * sds[j]);
    const Matrix& X = designs[j];
    Matrix precision = prior_prec * Matrix::Identity(2, 2) + noise_prec * X.transpose() * X;
    Eigen::LLT<Matrix> llt(precision);
    if (llt.info() != Eigen::Success)
      throw NumericalFailure("mixture regression: posterior precision is not positive definite");
    const Vector mean = llt.solve(prior_term + noise_prec * X.transpose() * y);
    Matrix U = llt.matrixU();
    // log|Sigma_j*|^{1/2} = -sum log diag(U)
    const double half_log_det_post = -U.diagonal().array().log().sum();
    const double half_log_det_noise = static_cast<double>(m) * std::log(sds[j]);
    const double quad = noise_prec * y.squaredNorm() - mean.dot(precision * mean);
    log_alpha[j] = (probs[j] > 0.0 ? std::log(probs[j]) : kNegInf) - half_log_det_noise +
                   half_log_det_post - 0.5 * quad;
    means.push_back(mean);
    factors.push_back(std::move(U));
  }
  const double top = std::max(log_alpha[0], log_alpha[1]);
  if (!std::isfinite(top)) throw NumericalFailure("mixture regression: both components vanish");
  const double e0 = std::exp(log_alpha[0] - top);
  const double e1 = std::exp(log_alpha[1] - top);
  const double w0 = e0 / (e0 + e1);
  return GaussianMixture({w0, 1.0 - w0}, std::move(means), std::move(factors));
}

std::vector<Axis> gmr_default_axes(const GaussianMixture& post, int nodes) {
  std::vector<Axis> axes;
  for (int k = 0; k < post.dim(); ++k) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (int l = 0; l < post.components(); ++l) {
      if (post.weights()[l] == 0.0) continue;
      const double sd = std::sqrt(post.component_covariance(l)(k, k));
      lo = std::min(lo, post.means()[l][k] - 6.0 * sd);
      hi = std::max(hi, post.means()[l][k] + 6.0 * sd);
    }
    axes.push_back(linspace(lo, hi, nodes));
  }
  return axes;
}

Problem gmr_problem(const GaussianMixtureRegressionConfig& cfg) {
  validate(cfg);
  Problem p;
  p.dim = 2;
  const double sd = cfg.prior_cov_scale;
  p.sample_prior = [cfg, sd](Rng& rng) {
    Vector theta(2);
    theta[0] = cfg.prior_mean[0] + sd * rng.normal();
    theta[1] = cfg.prior_mean[1] + sd * rng.normal();
    return theta;
  };
  p.log_prior = [cfg, sd](const Vector& theta) {
    return log_normal_pdf(theta[0], cfg.prior_mean[0], sd * sd) +
           log_normal_pdf(theta[1], cfg.prior_mean[1], sd * sd);
  };
  p.simulate = [cfg](const Vector& theta, Rng& rng) { return gmr_simulate(cfg, theta, rng); };
  return p;
}

// ---------------------------------------------------------------------------
// FitzHugh-Nagumo

FitzHughNagumoConfig FitzHughNagumoConfig::with_default_times(int m, double window) {
  FitzHughNagumoConfig cfg;
  cfg.time_points.resize(m);
  for (int i = 0; i < m; ++i) cfg.time_points[i] = window * (i + 1) / m;
  return cfg;
}

void validate(const FitzHughNagumoConfig& cfg) {
  if (!(cfg.gamma_lo < cfg.gamma_hi)) throw InvalidConfig("FitzHugh-Nagumo: gamma_lo >= gamma_hi");
  if (!(cfg.rk4_step > 0.0)) throw InvalidConfig("FitzHugh-Nagumo: rk4_step must be positive");
  if (!(cfg.noise_sd >= 0.0)) throw InvalidConfig("FitzHugh-Nagumo: noise_sd must be nonnegative");
  if (cfg.time_points.empty()) throw InvalidConfig("FitzHugh-Nagumo: no time points");
  for (std::size_t i = 0; i < cfg.time_points.size(); ++i) {
    if (!(cfg.time_points[i] >= 0.0))
      throw InvalidConfig("FitzHugh-Nagumo: time points must be nonnegative");
    if (i > 0 && !(cfg.time_points[i] > cfg.time_points[i - 1]))
      throw InvalidConfig("FitzHugh-Nagumo: time points must be strictly increasing");
  }
}

FnState fn_rhs(const FitzHughNagumoConfig& cfg, double gamma, FnState s) {
  return {gamma * (s.v - s.v * s.v * s.v / 3.0 + s.r + cfg.zeta),
          -(s.v - cfg.theta1 + cfg.theta2 * s.r) / gamma};
}

Vector fn_integrate(const FitzHughNagumoConfig& cfg, double gamma) {
  if (gamma == 0.0) throw InvalidParameter("FitzHugh-Nagumo: gamma must be nonzero");
  const auto advance = [&](FnState s, double dt) {
    const FnState k1 = fn_rhs(cfg, gamma, s);
    const FnState k2 = fn_rhs(cfg, gamma, {s.v + 0.5 * dt * k1.v, s.r + 0.5 * dt * k1.r});
    const FnState k3 = fn_rhs(cfg, gamma, {s.v + 0.5 * dt * k2.v, s.r + 0.5 * dt * k2.r});
    const FnState k4 = fn_rhs(cfg, gamma, {s.v + dt * k3.v, s.r + dt * k3.r});
    return FnState{s.v + dt / 6.0 * (k1.v + 2.0 * k2.v + 2.0 * k3.v + k4.v),
                   s.r + dt / 6.0 * (k1.r + 2.0 * k2.r + 2.0 * k3.r + k4.r)};
  };

  const double h = cfg.rk4_step;
  Vector out(static_cast<Eigen::Index>(cfg.time_points.size()));
  FnState s{cfg.v0, cfg.r0};
  double t = 0.0;
  for (std::size_t i = 0; i < cfg.time_points.size(); ++i) {
    const double target = cfg.time_points[i];
    const double span = target - t;
    if (span > 0.0) {
      // full steps of h, then one shortened step that lands exactly on target
      const auto steps = static_cast<long>(std::ceil(span / h - 1e-9));
      for (long k = 0; k < steps; ++k) {
        const double dt = k + 1 < steps ? h : span - h * static_cast<double>(steps - 1);
        s = advance(s, dt);
        if (!std::isfinite(s.v) || !std::isfinite(s.r))
          throw DivergenceError(t + h * static_cast<double>(k) + dt);
      }
      t = target;
    }
    out[static_cast<Eigen::Index>(i)] = s.v;
  }
  return out;
}

Vector fn_simulate(const FitzHughNagumoConfig& cfg, double gamma, Rng& rng) {
  Vector v = fn_integrate(cfg, gamma);
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] += cfg.noise_sd * rng.normal();
  return v;
}

Vector fn_simulate(const FitzHughNagumoConfig& cfg, double gamma, std::uint64_t rng_seed) {
  Rng rng(rng_seed);
  return fn_simulate(cfg, gamma, rng);
}

double fn_loglik(const FitzHughNagumoConfig& cfg, double gamma, const Vector& y) {
  const Vector v = fn_integrate(cfg, gamma);
  if (y.size() != v.size()) throw InvalidParameter("fn_loglik: y length does not match times");
  const double var = cfg.noise_sd * cfg.noise_sd;
  double acc = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) acc += log_normal_pdf(y[i], v[i], var);
  return acc;
}

DensityGrid fn_posterior_grid(const FitzHughNagumoConfig& cfg, const Vector& y, int grid_size) {
  validate(cfg);
  if (grid_size < 100) throw InvalidParameter("fn_posterior_grid: grid_size must be >= 100");
  Axis gammas = midpoints(cfg.gamma_lo, cfg.gamma_hi, grid_size);
  std::vector<double> logp(gammas.size());
  double top = kNegInf;
  for (std::size_t i = 0; i < gammas.size(); ++i) {
    try {
      logp[i] = fn_loglik(cfg, gammas[i], y);
    } catch (const NumericalFailure&) {
      logp[i] = kNegInf;
    }
    if (!std::isfinite(logp[i])) logp[i] = kNegInf;
    top = std::max(top, logp[i]);
  }
  if (!std::isfinite(top)) throw DegeneratePosterior("FitzHugh-Nagumo posterior vanishes on the grid");
  std::vector<double> values(gammas.size());
  for (std::size_t i = 0; i < gammas.size(); ++i) values[i] = std::exp(logp[i] - top);
  return DensityGrid({std::move(gammas)}, std::move(values)).normalized();
}

Problem fn_problem(const FitzHughNagumoConfig& cfg) {
  validate(cfg);
  Problem p;
  p.dim = 1;
  p.sample_prior = [cfg](Rng& rng) {
    Vector theta(1);
    theta[0] = cfg.gamma_lo + (cfg.gamma_hi - cfg.gamma_lo) * rng.uniform();
    return theta;
  };
  p.log_prior = [cfg](const Vector& theta) {
    return theta[0] > cfg.gamma_lo && theta[0] < cfg.gamma_hi
               ? -std::log(cfg.gamma_hi - cfg.gamma_lo)
               : kNegInf;
  };
  p.simulate = [cfg](const Vector& theta, Rng& rng) { return fn_simulate(cfg, theta[0], rng); };
  return p;
}

// ---------------------------------------------------------------------------

PosteriorOracle PosteriorOracle::normal_gamma(NormalGammaConfig posterior) {
  return {Kind::NormalGammaClosedForm, posterior};
}

PosteriorOracle PosteriorOracle::mixture(GaussianMixture posterior) {
  return {Kind::GaussianMixtureClosedForm, std::move(posterior)};
}

PosteriorOracle PosteriorOracle::grid(DensityGrid posterior) {
  if (std::abs(posterior.integral() - 1.0) > 1e-6)
    throw InvalidParameter("grid oracle must integrate to 1");
  return {Kind::GridNormalized, std::move(posterior)};
}

DensityGrid PosteriorOracle::tabulate(const std::vector<Axis>& axes) const {
  switch (kind) {
    case Kind::NormalGammaClosedForm: {
      if (axes.size() != 2) throw AxisMismatch("normal-gamma oracle needs a 2-D grid");
      const auto& p = std::get<NormalGammaConfig>(payload);
      std::vector<double> values;
      values.reserve(axes[0].size() * axes[1].size());
      for (double mu : axes[0])
        for (double tau : axes[1]) values.push_back(std::exp(ng_log_density(p, mu, tau)));
      return DensityGrid(axes, std::move(values)).normalized();
    }
    case Kind::GaussianMixtureClosedForm:
      return grid_from_mixture(std::get<GaussianMixture>(payload), axes);
    case Kind::GridNormalized: {
      const auto& g = std::get<DensityGrid>(payload);
      if (g.axes() != axes) throw AxisMismatch("grid oracle axes differ from requested axes");
      return g;
    }
  }
  throw InvalidParameter("unknown oracle kind");
}

std::vector<Axis> PosteriorOracle::default_axes() const {
  switch (kind) {
    case Kind::NormalGammaClosedForm:
      return ng_default_axes(std::get<NormalGammaConfig>(payload));
    case Kind::GaussianMixtureClosedForm:
      return gmr_default_axes(std::get<GaussianMixture>(payload));
    case Kind::GridNormalized:
      return std::get<DensityGrid>(payload).axes();
  }
  throw InvalidParameter("unknown oracle kind");
}

}  // namespace kaspe
