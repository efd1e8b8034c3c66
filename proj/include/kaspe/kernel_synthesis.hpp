#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "kaspe/mixture.hpp"
#include "kaspe/models.hpp"
#include "kaspe/summaries.hpp"

namespace kaspe {

enum class KernelKind { SquaredExponential };

std::string to_string(KernelKind kind);
KernelKind kernel_kind_from_string(const std::string& name);

/// Kernel family plus bandwidth. An infinite bandwidth makes the kernel
/// identically 1, which is the MDN regime.
struct KernelSpec {
  KernelKind kind = KernelKind::SquaredExponential;
  double bandwidth = 1.0;

  static KernelSpec constant(KernelKind kind = KernelKind::SquaredExponential);
  bool is_constant() const noexcept;
};

/// K(x) in (0, 1] with K(0) = 1. Bandwidth is the caller's business.
double kernel_value(KernelKind kind, const Vector& x);
inline double kernel_value(const KernelSpec& spec, const Vector& x) {
  return kernel_value(spec.kind, x);
}
/// log K((s - s0) / h), evaluated without forming K so it never underflows.
double log_kernel_weight(const KernelSpec& spec, const Vector& s, const Vector& s0);
/// K((s - s0) / h).
double kernel_weight(const KernelSpec& spec, const Vector& s, const Vector& s0);

struct WeightedTriple {
  Vector theta;
  Vector summary;
  int weight = 0;
};

struct SyntheticDataset {
  std::vector<WeightedTriple> records;
  std::size_t n = 0;
  std::size_t n_eff = 0;
  KernelSpec kernel;
  std::uint64_t seed = 0;
  /// Simulator failures that forced a slot to be regenerated.
  std::size_t regenerated = 0;
};

/// Attempts per slot (first try plus retries) before generation gives up.
inline constexpr int kMaxSlotAttempts = 101;

/// Draws n proposals from prior x simulator, summarises them and accepts each
/// with probability K((s_i - s0)/h). Slot i, attempt a uses the stream
/// derive_seed(seed, {i, a}); output does not depend on `workers`.
SyntheticDataset generate(const Problem& problem, const SummarySpec& summary,
                          const KernelSpec& kernel, const Vector& s0, std::size_t n,
                          std::uint64_t rng_seed, unsigned workers = 1);

/// Summaries of N prior-predictive draws, for bandwidth selection.
std::vector<Vector> pilot_summaries(const Problem& problem, const SummarySpec& summary,
                                    std::size_t count, std::uint64_t rng_seed,
                                    unsigned workers = 1);

/// a(h): average kernel weight of the pilot set at bandwidth h.
double expected_acceptance(std::span<const Vector> pilot, const Vector& s0, KernelKind kind,
                           double bandwidth);

/// Smallest h (to relative tolerance 1e-3) with a(h) >= target_rate.
double select_bandwidth(std::span<const Vector> pilot, const Vector& s0, KernelKind kind,
                        double target_rate);

/// CSV `theta_1..theta_d,s_1..s_K,weight`.
void write_dataset_csv(std::ostream& out, const SyntheticDataset& data,
                       const std::vector<std::string>& comments = {});
SyntheticDataset read_dataset_csv(std::istream& in, std::vector<std::string>* comments = nullptr);
/// {n, n_eff, h, kernel, seed}; an infinite h is written as the string "inf".
nlohmann::json dataset_sidecar(const SyntheticDataset& data);
void apply_sidecar(SyntheticDataset& data, const nlohmann::json& sidecar);

}  // namespace kaspe
