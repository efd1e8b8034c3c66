#include "kaspe/kernel_synthesis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <thread>

#include "kaspe/csv.hpp"
#include "kaspe/errors.hpp"
#include "kaspe/rng.hpp"

namespace kaspe {

namespace {

constexpr std::uint64_t kPilotStream = 0x70696c6f74ULL;

// Runs body(i) for i in [0, n) on up to `workers` threads; each index is
// handled by exactly one thread.
template <class Body>
void parallel_for(std::size_t n, unsigned workers, Body&& body) {
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(n)));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> pool;
    const std::size_t chunk = (n + workers - 1) / workers;
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          const std::size_t lo = w * chunk;
          const std::size_t hi = std::min(n, lo + chunk);
          for (std::size_t i = lo; i < hi; ++i) body(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct Draw {
  Vector theta;
  Vector summary;
  double u;
  int attempts;
};

Draw draw_slot(const Problem& problem, const SummarySpec& summary, std::uint64_t seed,
               std::uint64_t stream, std::size_t slot) {
  for (int attempt = 0; attempt < kMaxSlotAttempts; ++attempt) {
    Rng rng(stream == 0 ? derive_seed(seed, {slot, static_cast<std::uint64_t>(attempt)})
                        : derive_seed(seed, {stream, slot, static_cast<std::uint64_t>(attempt)}));
    try {
      Vector theta = problem.sample_prior(rng);
      Vector s = summarize(summary, problem.simulate(theta, rng));
      if (!s.allFinite()) continue;
      const double u = rng.uniform();
      return {std::move(theta), std::move(s), u, attempt + 1};
    } catch (const NumericalFailure&) {
      continue;
    }
  }
  throw NumericalFailure("simulator failed " + std::to_string(kMaxSlotAttempts) +
                         " times for slot " + std::to_string(slot));
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string to_string(KernelKind) { return "squared-exponential"; }

KernelKind kernel_kind_from_string(const std::string& name) {
  if (name == "squared-exponential") return KernelKind::SquaredExponential;
  throw InvalidConfig("unknown kernel kind '" + name + "'");
}

KernelSpec KernelSpec::constant(KernelKind kind) {
  return {kind, std::numeric_limits<double>::infinity()};
}

bool KernelSpec::is_constant() const noexcept { return std::isinf(bandwidth); }

double kernel_value(KernelKind, const Vector& x) { return std::exp(-0.5 * x.squaredNorm()); }

double log_kernel_weight(const KernelSpec& spec, const Vector& s, const Vector& s0) {
  if (!(spec.bandwidth > 0.0)) throw InvalidParameter("kernel bandwidth must be positive");
  if (spec.is_constant()) return 0.0;
  return -0.5 * (s - s0).squaredNorm() / (spec.bandwidth * spec.bandwidth);
}

double kernel_weight(const KernelSpec& spec, const Vector& s, const Vector& s0) {
  if (!(spec.bandwidth > 0.0)) throw InvalidParameter("kernel bandwidth must be positive");
  if (spec.is_constant()) return 1.0;
  return kernel_value(spec.kind, (s - s0) / spec.bandwidth);
}

SyntheticDataset generate(const Problem& problem, const SummarySpec& summary,
                          const KernelSpec& kernel, const Vector& s0, std::size_t n,
                          std::uint64_t rng_seed, unsigned workers) {
  if (n < 1) throw InvalidParameter("generate: n must be at least 1");
  if (!(kernel.bandwidth > 0.0)) throw InvalidParameter("kernel bandwidth must be positive");
  if (s0.size() != summary.output_dim())
    throw InvalidParameter("generate: observed summary has the wrong dimension");

  SyntheticDataset out;
  out.records.resize(n);
  out.kernel = kernel;
  out.seed = rng_seed;
  std::vector<int> attempts(n, 0);
  parallel_for(n, workers, [&](std::size_t i) {
    Draw d = draw_slot(problem, summary, rng_seed, 0, i);
    const double accept = kernel_weight(kernel, d.summary, s0);
    out.records[i] = {std::move(d.theta), std::move(d.summary), d.u < accept ? 1 : 0};
    attempts[i] = d.attempts;
  });
  out.n = n;
  for (std::size_t i = 0; i < n; ++i) {
    out.n_eff += static_cast<std::size_t>(out.records[i].weight);
    out.regenerated += static_cast<std::size_t>(attempts[i] - 1);
  }
  return out;
}

std::vector<Vector> pilot_summaries(const Problem& problem, const SummarySpec& summary,
                                    std::size_t count, std::uint64_t rng_seed, unsigned workers) {
  if (count < 1) throw InvalidParameter("pilot: size must be at least 1");
  std::vector<Vector> out(count);
  parallel_for(count, workers, [&](std::size_t i) {
    out[i] = draw_slot(problem, summary, rng_seed, kPilotStream, i).summary;
  });
  return out;
}

double expected_acceptance(std::span<const Vector> pilot, const Vector& s0, KernelKind kind,
                           double bandwidth) {
  if (pilot.empty()) throw InvalidParameter("expected_acceptance: empty pilot set");
  const KernelSpec spec{kind, bandwidth};
  double acc = 0.0;
  for (const auto& s : pilot) acc += kernel_weight(spec, s, s0);
  return acc / static_cast<double>(pilot.size());
}

double select_bandwidth(std::span<const Vector> pilot, const Vector& s0, KernelKind kind,
                        double target_rate) {
  if (pilot.empty()) throw InvalidParameter("select_bandwidth: empty pilot set");
  if (!(target_rate > 0.0 && target_rate < 1.0))
    throw InvalidParameter("select_bandwidth: target rate must lie in (0, 1)");

  double scale = 0.0;
  for (const auto& s : pilot) scale = std::max(scale, (s - s0).norm());
  if (!(scale > 0.0)) scale = 1.0;
  const auto a = [&](double h) { return expected_acceptance(pilot, s0, kind, h); };

  const double floor_h = 1e-12 * scale;
  if (a(floor_h) >= target_rate) return floor_h;

  double hi = scale;
  while (a(hi) < target_rate) {
    hi *= 2.0;
    if (hi > 1e12 * scale)
      throw UnattainableTarget("select_bandwidth: target acceptance rate is unattainable");
  }
  double lo = hi;
  while (a(lo) >= target_rate) {
    hi = lo;
    lo *= 0.5;
    if (lo <= floor_h) {
      lo = floor_h;
      break;
    }
  }
  while ((hi - lo) > 1e-3 * hi) {
    const double mid = std::sqrt(lo * hi);
    (a(mid) >= target_rate ? hi : lo) = mid;
  }
  return hi;
}

void write_dataset_csv(std::ostream& out, const SyntheticDataset& data,
                       const std::vector<std::string>& comments) {
  for (const auto& c : comments) out << '#' << c << '\n';
  const auto d = data.records.empty() ? 0 : data.records.front().theta.size();
  const auto k = data.records.empty() ? 0 : data.records.front().summary.size();
  for (Eigen::Index i = 0; i < d; ++i) out << "theta_" << i + 1 << ',';
  for (Eigen::Index i = 0; i < k; ++i) out << "s_" << i + 1 << ',';
  out << "weight\n";
  for (const auto& r : data.records) {
    for (Eigen::Index i = 0; i < d; ++i) out << format_double(r.theta[i]) << ',';
    for (Eigen::Index i = 0; i < k; ++i) out << format_double(r.summary[i]) << ',';
    out << r.weight << '\n';
  }
}

SyntheticDataset read_dataset_csv(std::istream& in, std::vector<std::string>* comments) {
  std::string line;
  int d = 0;
  int k = 0;
  bool header = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line[0] == '#') {
      if (comments) comments->push_back(line.substr(1));
      continue;
    }
    std::istringstream hs(line);
    std::string name;
    while (std::getline(hs, name, ',')) {
      if (name.rfind("theta_", 0) == 0) ++d;
      else if (name.rfind("s_", 0) == 0) ++k;
      else if (name != "weight") throw InvalidParameter("dataset CSV: unexpected column " + name);
    }
    header = true;
    break;
  }
  if (!header || d == 0 || k == 0) throw InvalidParameter("dataset CSV: missing header");

  SyntheticDataset data;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    WeightedTriple r{Vector(d), Vector(k), 0};
    for (int i = 0; i < d; ++i) {
      std::getline(row, cell, ',');
      r.theta[i] = parse_csv_double(cell);
    }
    for (int i = 0; i < k; ++i) {
      std::getline(row, cell, ',');
      r.summary[i] = parse_csv_double(cell);
    }
    if (!std::getline(row, cell, ',')) throw InvalidParameter("dataset CSV: short row");
    r.weight = std::stoi(cell);
    if (r.weight != 0 && r.weight != 1) throw InvalidParameter("dataset CSV: weight must be 0 or 1");
    data.n_eff += static_cast<std::size_t>(r.weight);
    data.records.push_back(std::move(r));
  }
  data.n = data.records.size();
  return data;
}

nlohmann::json dataset_sidecar(const SyntheticDataset& data) {
  nlohmann::json h = data.kernel.is_constant() ? nlohmann::json("inf")
                                                : nlohmann::json(data.kernel.bandwidth);
  return {{"n", data.n},
          {"n_eff", data.n_eff},
          {"h", h},
          {"kernel", to_string(data.kernel.kind)},
          {"seed", data.seed}};
}

void apply_sidecar(SyntheticDataset& data, const nlohmann::json& sidecar) {
  data.kernel.kind = kernel_kind_from_string(sidecar.at("kernel").get<std::string>());
  const auto& h = sidecar.at("h");
  data.kernel.bandwidth =
      h.is_string() ? std::numeric_limits<double>::infinity() : h.get<double>();
  data.seed = sidecar.at("seed").get<std::uint64_t>();
  if (sidecar.at("n").get<std::size_t>() != data.n ||
      sidecar.at("n_eff").get<std::size_t>() != data.n_eff)
    throw InvalidParameter("dataset sidecar does not match the CSV contents");
}

}  // namespace kaspe
