#include "kaspe/abc.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <numbers>
#include <ostream>
#include <sstream>

#include <Eigen/Cholesky>

#include "kaspe/csv.hpp"
#include "kaspe/errors.hpp"

namespace kaspe {

namespace {

constexpr std::uint64_t kSwapStream = 0x73776170ULL;

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Running mean and scatter matrix of a chain's visited states.
struct History {
  long count = 0;
  Vector mean;
  Matrix scatter;

  explicit History(int d) : mean(Vector::Zero(d)), scatter(Matrix::Zero(d, d)) {}

  void add(const Vector& x) {
    ++count;
    const Vector delta = x - mean;
    mean += delta / static_cast<double>(count);
    scatter += delta * (x - mean).transpose();
  }
};

AbcState initial_state(const Problem& problem, const SummarySpec& summary, const KernelSpec& k,
                       const Vector& s0, Rng& rng) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    Vector theta = problem.sample_prior(rng);
    try {
      Vector s = summarize(summary, problem.simulate(theta, rng));
      if (!s.allFinite()) continue;
      const double lk = log_kernel_weight(k, s, s0);
      if (lk > std::log(1e-10)) return {theta, s, problem.log_prior(theta), lk};
    } catch (const NumericalFailure&) {
    }
  }
  throw InitializationFailure(
      "no prior draw reached kernel weight 1e-10 in 1000 attempts; try a larger bandwidth");
}

}  // namespace

std::vector<double> AbcConfig::ladder() const {
  if (!bandwidth_ladder.empty()) return bandwidth_ladder;
  std::vector<double> l;
  for (int i = 0; i < n_temperatures; ++i) l.push_back(kernel.bandwidth * std::ldexp(1.0, i));
  return l;
}

void validate(const AbcConfig& cfg) {
  if (!(cfg.kernel.bandwidth > 0.0)) throw InvalidParameter("ABC bandwidth must be positive");
  if (cfg.burn_in < 0 || cfg.chain_length <= cfg.burn_in)
    throw InvalidParameter("chain_length must exceed burn_in");
  if (cfg.n_temperatures < 1) throw InvalidParameter("need at least one temperature");
  if (cfg.swap_interval < 1 || cfg.adapt_interval < 1)
    throw InvalidParameter("swap and adapt intervals must be >= 1");
  if (!(cfg.initial_proposal_scale > 0.0))
    throw InvalidParameter("initial proposal scale must be positive");
  const auto l = cfg.ladder();
  if (static_cast<int>(l.size()) != cfg.n_temperatures)
    throw InvalidParameter("ladder length must equal n_temperatures");
  if (l.front() != cfg.kernel.bandwidth)
    throw InvalidParameter("coldest ladder bandwidth must equal the kernel bandwidth");
  for (std::size_t i = 1; i < l.size(); ++i)
    if (!(l[i] >= l[i - 1])) throw InvalidParameter("bandwidth ladder must be increasing");
}

bool abc_mcmc_step(AbcState& state, const Problem& problem, const SummarySpec& summary,
                   const KernelSpec& kernel, const Vector& s0, const Matrix& proposal_chol,
                   Rng& rng, AbcStepStats* stats) {
  const long d = state.theta.size();
  Vector z(d);
  for (long i = 0; i < d; ++i) z[i] = rng.normal();
  const Vector theta = state.theta + proposal_chol.triangularView<Eigen::Lower>() * z;
  const double u = rng.uniform();
  if (stats) ++stats->proposals;

  const double lp = problem.log_prior(theta);
  if (!std::isfinite(lp)) return false;
  Vector s;
  try {
    s = summarize(summary, problem.simulate(theta, rng));
  } catch (const NumericalFailure&) {
    if (stats) ++stats->simulator_failures;
    return false;
  }
  if (!s.allFinite()) {
    if (stats) ++stats->simulator_failures;
    return false;
  }
  const double lk = log_kernel_weight(kernel, s, s0);
  const double log_ratio = (lk - state.log_kernel) + (lp - state.log_prior);
  if (!(std::log(u) < log_ratio)) return false;
  state = {theta, std::move(s), lp, lk};
  if (stats) ++stats->accepted;
  return true;
}

double log_swap_ratio(const Vector& si, const Vector& sj, const Vector& s0, double hi, double hj,
                      KernelKind kind) {
  const KernelSpec ki{kind, hi};
  const KernelSpec kj{kind, hj};
  return log_kernel_weight(ki, sj, s0) + log_kernel_weight(kj, si, s0) -
         log_kernel_weight(ki, si, s0) - log_kernel_weight(kj, sj, s0);
}

AbcChain run_parallel_tempering(const AbcConfig& cfg, const Problem& problem,
                                const SummarySpec& summary, const Vector& s0) {
  validate(cfg);
  if (s0.size() != summary.output_dim())
    throw InvalidParameter("observed summary has the wrong dimension");
  const auto ladder = cfg.ladder();
  const int T = cfg.n_temperatures;
  const int d = problem.dim;

  std::vector<Rng> rngs;
  std::vector<KernelSpec> kernels;
  std::vector<AbcState> states;
  std::vector<History> history;
  std::vector<Matrix> cov, chol;
  std::vector<AbcStepStats> stats(T);
  for (int i = 0; i < T; ++i) {
    rngs.emplace_back(derive_seed(cfg.rng_seed, {static_cast<std::uint64_t>(i)}));
    kernels.push_back({cfg.kernel.kind, ladder[i]});
    states.push_back(initial_state(problem, summary, kernels[i], s0, rngs[i]));
    history.emplace_back(d);
    history.back().add(states.back().theta);
    const double s2 = cfg.initial_proposal_scale * cfg.initial_proposal_scale;
    cov.push_back(s2 * Matrix::Identity(d, d));
    chol.push_back(cfg.initial_proposal_scale * Matrix::Identity(d, d));
  }
  Rng swap_rng(derive_seed(cfg.rng_seed, {kSwapStream}));
  std::vector<long> swap_tried(std::max(T - 1, 0), 0), swap_done(std::max(T - 1, 0), 0);

  AbcChain out;
  out.ladder = ladder;
  out.samples.reserve(static_cast<std::size_t>(cfg.chain_length - cfg.burn_in));
  out.proposal_covariance_at_burn_in = cov[0];
  long retained_accepts = 0;

  for (int step = 1; step <= cfg.chain_length; ++step) {
    bool cold_accepted = false;
    for (int i = 0; i < T; ++i) {
      const bool acc =
          abc_mcmc_step(states[i], problem, summary, kernels[i], s0, chol[i], rngs[i], &stats[i]);
      if (i == 0) cold_accepted = acc;
    }
    if (T > 1 && step % cfg.swap_interval == 0) {
      for (int i = 0; i + 1 < T; ++i) {
        ++swap_tried[i];
        const double lr = log_swap_ratio(states[i].summary, states[i + 1].summary, s0, ladder[i],
                                         ladder[i + 1], cfg.kernel.kind);
        if (std::log(swap_rng.uniform()) < lr) {
          ++swap_done[i];
          std::swap(states[i].theta, states[i + 1].theta);
          std::swap(states[i].summary, states[i + 1].summary);
          std::swap(states[i].log_prior, states[i + 1].log_prior);
          states[i].log_kernel = log_kernel_weight(kernels[i], states[i].summary, s0);
          states[i + 1].log_kernel = log_kernel_weight(kernels[i + 1], states[i + 1].summary, s0);
        }
      }
    }
    for (int i = 0; i < T; ++i) history[i].add(states[i].theta);

    if (step <= cfg.burn_in && step % cfg.adapt_interval == 0) {
      for (int i = 0; i < T; ++i) {
        if (history[i].count < 2) continue;
        const Matrix c = history[i].scatter / static_cast<double>(history[i].count - 1);
        Matrix next = (2.38 * 2.38 / d) * c + 1e-6 * Matrix::Identity(d, d);
        Eigen::LLT<Matrix> llt(next);
        if (llt.info() != Eigen::Success) continue;
        cov[i] = std::move(next);
        chol[i] = llt.matrixL();
      }
    }
    if (step == cfg.burn_in) out.proposal_covariance_at_burn_in = cov[0];
    if (step > cfg.burn_in) {
      out.samples.push_back(states[0].theta);
      if (cold_accepted) ++retained_accepts;
    }
  }

  out.acceptance_rate =
      static_cast<double>(retained_accepts) / static_cast<double>(cfg.chain_length - cfg.burn_in);
  for (int i = 0; i < T; ++i) {
    out.chain_acceptance.push_back(static_cast<double>(stats[i].accepted) /
                                   static_cast<double>(stats[i].proposals));
    out.simulator_failures += stats[i].simulator_failures;
  }
  for (int i = 0; i + 1 < T; ++i)
    out.swap_rates.push_back(swap_tried[i] ? static_cast<double>(swap_done[i]) / swap_tried[i]
                                           : 0.0);
  out.proposal_covariance = cov[0];
  return out;
}

Vector silverman_bandwidths(std::span<const Vector> samples) {
  if (samples.size() < 2) throw DegenerateSample("KDE needs at least two samples");
  const long d = samples.front().size();
  const double n = static_cast<double>(samples.size());
  Vector mean = Vector::Zero(d);
  for (const auto& x : samples) mean += x;
  mean /= n;
  Vector var = Vector::Zero(d);
  for (const auto& x : samples) var += (x - mean).array().square().matrix();
  var /= n - 1.0;
  const double factor = std::pow(4.0 / (d + 2.0), 1.0 / (d + 4.0)) * std::pow(n, -1.0 / (d + 4.0));
  Vector h(d);
  for (long k = 0; k < d; ++k) {
    if (!(var[k] > 0.0)) throw DegenerateSample("sample has zero variance in dimension " +
                                                std::to_string(k + 1));
    h[k] = factor * std::sqrt(var[k]);
  }
  return h;
}

DensityGrid kde(std::span<const Vector> samples, const std::vector<Axis>& axes) {
  const Vector h = silverman_bandwidths(samples);
  const long d = h.size();
  if (static_cast<long>(axes.size()) != d || d > 2)
    throw InvalidParameter("KDE axes must match the sample dimension (1 or 2)");
  const long n = static_cast<long>(samples.size());
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);

  // Kernel matrix of one coordinate for samples [lo, hi): grid x sample.
  auto kernel_block = [&](long k, long lo, long hi) {
    const Axis& ax = axes[static_cast<std::size_t>(k)];
    Matrix B(static_cast<long>(ax.size()), hi - lo);
    for (long j = lo; j < hi; ++j) {
      const double x = samples[static_cast<std::size_t>(j)][k];
      for (std::size_t g = 0; g < ax.size(); ++g) {
        const double t = (ax[g] - x) / h[k];
        B(static_cast<long>(g), j - lo) = std::exp(-0.5 * t * t) * inv_sqrt_2pi / h[k];
      }
    }
    return B;
  };

  constexpr long kBlock = 4096;
  std::vector<double> values;
  if (d == 1) {
    Vector acc = Vector::Zero(static_cast<long>(axes[0].size()));
    for (long lo = 0; lo < n; lo += kBlock)
      acc += kernel_block(0, lo, std::min(n, lo + kBlock)).rowwise().sum();
    values.assign(acc.data(), acc.data() + acc.size());
  } else {
    Matrix acc = Matrix::Zero(static_cast<long>(axes[0].size()), static_cast<long>(axes[1].size()));
    for (long lo = 0; lo < n; lo += kBlock) {
      const long hi = std::min(n, lo + kBlock);
      acc.noalias() += kernel_block(0, lo, hi) * kernel_block(1, lo, hi).transpose();
    }
    values.resize(static_cast<std::size_t>(acc.size()));
    for (long i = 0; i < acc.rows(); ++i)
      for (long j = 0; j < acc.cols(); ++j)
        values[static_cast<std::size_t>(i * acc.cols() + j)] = acc(i, j);
  }
  for (auto& v : values) v /= static_cast<double>(n);
  return DensityGrid(axes, std::move(values)).normalized();
}

Matrix autocorrelation(std::span<const Vector> samples, int max_lag) {
  if (samples.size() < 2) throw DegenerateSample("autocorrelation needs at least two samples");
  const long d = samples.front().size();
  const long n = static_cast<long>(samples.size());
  max_lag = static_cast<int>(std::min<long>(max_lag, n - 1));
  Matrix acf(max_lag + 1, d);
  for (long k = 0; k < d; ++k) {
    double mean = 0.0;
    for (const auto& x : samples) mean += x[k];
    mean /= static_cast<double>(n);
    double c0 = 0.0;
    for (const auto& x : samples) c0 += (x[k] - mean) * (x[k] - mean);
    for (int lag = 0; lag <= max_lag; ++lag) {
      double c = 0.0;
      for (long t = 0; t + lag < n; ++t)
        c += (samples[static_cast<std::size_t>(t)][k] - mean) *
             (samples[static_cast<std::size_t>(t + lag)][k] - mean);
      acf(lag, k) = c0 > 0.0 ? c / c0 : (lag == 0 ? 1.0 : 0.0);
    }
  }
  return acf;
}

void write_chain_csv(std::ostream& out, std::span<const Vector> samples, long first_step,
                     const std::vector<std::string>& comments) {
  for (const auto& c : comments) out << '#' << c << '\n';
  const long d = samples.empty() ? 0 : samples.front().size();
  out << "step";
  for (long k = 0; k < d; ++k) out << ",theta_" << k + 1;
  out << '\n';
  long step = first_step;
  for (const auto& x : samples) {
    out << step++;
    for (long k = 0; k < d; ++k) out << ',' << fmt(x[k]);
    out << '\n';
  }
}

std::vector<Vector> read_chain_csv(std::istream& in, std::vector<std::string>* comments) {
  std::string line;
  long d = -1;
  while (std::getline(in, line)) {
    if (!line.empty() && line[0] == '#') {
      if (comments) comments->push_back(line.substr(1));
      continue;
    }
    d = std::count(line.begin(), line.end(), ',');
    break;
  }
  if (d < 1) throw InvalidParameter("chain CSV: missing header");
  std::vector<Vector> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    std::getline(row, cell, ',');
    Vector x(d);
    for (long k = 0; k < d; ++k) {
      if (!std::getline(row, cell, ',')) throw InvalidParameter("chain CSV: short row");
      x[k] = parse_csv_double(cell);
    }
    out.push_back(std::move(x));
  }
  return out;
}

void write_autocorrelation_csv(std::ostream& out, const Matrix& acf,
                               const std::vector<std::string>& comments) {
  for (const auto& c : comments) out << '#' << c << '\n';
  out << "lag";
  for (long k = 0; k < acf.cols(); ++k) out << ",acf_" << k + 1;
  out << '\n';
  for (long lag = 0; lag < acf.rows(); ++lag) {
    out << lag;
    for (long k = 0; k < acf.cols(); ++k) out << ',' << fmt(acf(lag, k));
    out << '\n';
  }
}

nlohmann::json diagnostics_json(const AbcChain& chain) {
  std::vector<std::vector<double>> cov;
  for (long i = 0; i < chain.proposal_covariance.rows(); ++i) {
    cov.emplace_back();
    for (long j = 0; j < chain.proposal_covariance.cols(); ++j)
      cov.back().push_back(chain.proposal_covariance(i, j));
  }
  return {{"acceptance_rate", chain.acceptance_rate},
          {"swap_rates", chain.swap_rates},
          {"proposal_covariance", cov},
          {"chain_acceptance", chain.chain_acceptance},
          {"simulator_failures", chain.simulator_failures},
          {"ladder", chain.ladder},
          {"samples", chain.samples.size()}};
}

}  // namespace kaspe
