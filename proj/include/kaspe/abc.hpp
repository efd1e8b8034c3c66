#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "kaspe/evaluation.hpp"
#include "kaspe/kernel_synthesis.hpp"
#include "kaspe/models.hpp"
#include "kaspe/rng.hpp"
#include "kaspe/summaries.hpp"

namespace kaspe {

struct AbcConfig {
  KernelSpec kernel;
  /// Total steps per chain, burn-in included.
  int chain_length = 20000;
  int burn_in = 5000;
  int n_temperatures = 4;
  /// Empty means the geometric default h * 2^i, i = 0..n_temperatures-1.
  std::vector<double> bandwidth_ladder;
  int swap_interval = 10;
  int adapt_interval = 100;
  double initial_proposal_scale = 1.0;
  std::uint64_t rng_seed = 0;

  /// The explicit ladder, or the default one.
  std::vector<double> ladder() const;
};

void validate(const AbcConfig& cfg);

/// Current position of one chain and its kernel weight at the chain's own
/// bandwidth, kept in log form.
struct AbcState {
  Vector theta;
  Vector summary;
  double log_prior = 0.0;
  double log_kernel = 0.0;
};

struct AbcStepStats {
  long proposals = 0;
  long accepted = 0;
  long simulator_failures = 0;
};

/// One Metropolis step under a Gaussian random walk whose covariance has
/// lower Cholesky factor `proposal_chol`. Returns true on acceptance.
bool abc_mcmc_step(AbcState& state, const Problem& problem, const SummarySpec& summary,
                   const KernelSpec& kernel, const Vector& s0, const Matrix& proposal_chol,
                   Rng& rng, AbcStepStats* stats = nullptr);

/// log of the swap acceptance ratio between chains at bandwidths hi and hj.
double log_swap_ratio(const Vector& si, const Vector& sj, const Vector& s0, double hi, double hj,
                      KernelKind kind);

struct AbcChain {
  /// Coldest chain after burn-in.
  std::vector<Vector> samples;
  /// Coldest chain acceptance over the retained steps.
  double acceptance_rate = 0.0;
  /// Per-chain acceptance over all steps.
  std::vector<double> chain_acceptance;
  /// Accepted / proposed swaps for each adjacent pair (i, i+1).
  std::vector<double> swap_rates;
  long simulator_failures = 0;
  /// Coldest chain proposal covariance when burn-in ended and at the end.
  Matrix proposal_covariance_at_burn_in;
  Matrix proposal_covariance;
  std::vector<double> ladder;
};

AbcChain run_parallel_tempering(const AbcConfig& cfg, const Problem& problem,
                                const SummarySpec& summary, const Vector& s0);

/// Gaussian product-kernel density estimate with Silverman bandwidths,
/// normalised on the grid spanned by `axes` (one or two).
DensityGrid kde(std::span<const Vector> samples, const std::vector<Axis>& axes);
/// Per-dimension Silverman bandwidths.
Vector silverman_bandwidths(std::span<const Vector> samples);

/// Sample autocorrelation of each coordinate for lags 0..max_lag.
Matrix autocorrelation(std::span<const Vector> samples, int max_lag);

void write_chain_csv(std::ostream& out, std::span<const Vector> samples, long first_step,
                     const std::vector<std::string>& comments = {});
std::vector<Vector> read_chain_csv(std::istream& in, std::vector<std::string>* comments = nullptr);
void write_autocorrelation_csv(std::ostream& out, const Matrix& acf,
                               const std::vector<std::string>& comments = {});
/// {acceptance_rate, swap_rates, proposal_covariance, ...}.
nlohmann::json diagnostics_json(const AbcChain& chain);

}  // namespace kaspe
