#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kaspe/abc.hpp"
#include "kaspe/evaluation.hpp"
#include "kaspe/kernel_synthesis.hpp"
#include "kaspe/models.hpp"
#include "kaspe/network.hpp"
#include "kaspe/summaries.hpp"

namespace kaspe {

enum class Experiment { NormalGamma, GaussianMixture, FitzHughNagumo };
enum class Method { Kaspe, Mdn, Abc };
enum class BandwidthMode { Fixed, Auto, Infinite };

std::string to_string(Experiment e);
std::string to_string(Method m);

/// Fully resolved experiment configuration. Parsing fills every default, so
/// two files that differ only in spelled-out defaults hash identically.
struct RunConfig {
  Experiment experiment = Experiment::NormalGamma;
  Method method = Method::Kaspe;
  int m = 4;

  NormalGammaConfig normal_gamma;
  GaussianMixtureRegressionConfig mixture_regression;
  FitzHughNagumoConfig fitzhugh_nagumo;

  std::optional<Vector> true_theta;
  std::uint64_t observe_seed = 0;

  SummaryKind summary = SummaryKind::Identity;
  int basis_count = 11;
  double period = 0.0;

  KernelKind kernel = KernelKind::SquaredExponential;
  BandwidthMode bandwidth_mode = BandwidthMode::Auto;
  double bandwidth = 0.0;
  double target_rate = 0.1;
  int pilot_size = 10000;

  std::size_t n = 125000;
  std::vector<int> hidden{64, 64};
  Activation activation = Activation::Tanh;
  int components = 20;
  TrainingConfig training;
  AbcConfig abc;

  /// Nodes per axis of the evaluation grid; 0 selects the model default.
  int grid_size = 0;

  int replications = 5;
  std::uint64_t seed = 1;
  unsigned workers = 1;
  std::string output_dir = "out";
  /// Optional list of per-cell overrides run by `replicate`.
  nlohmann::json matrix = nlohmann::json::array();
  /// The document this config was parsed from. Matrix cells are patched onto
  /// it, so defaults that depend on m or method are re-derived per cell.
  nlohmann::json source = nlohmann::json::object();
};

/// Throws ConfigError carrying the JSON pointer of the offending key.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& file);
nlohmann::json to_json(const RunConfig& cfg);
/// FNV-1a over the canonical dump of the fields that affect results.
std::string config_hash(const RunConfig& cfg);

// In-memory building blocks.
Problem make_problem(const RunConfig& cfg);
SummarySpec make_summary(const RunConfig& cfg);
int parameter_dim(const RunConfig& cfg);
Vector default_true_theta(const RunConfig& cfg);

struct Observation {
  Vector true_theta;
  Vector y;
};

Observation make_observation(const RunConfig& cfg);
PosteriorOracle make_oracle(const RunConfig& cfg, const Vector& y);
std::vector<Axis> evaluation_axes(const RunConfig& cfg, const PosteriorOracle& oracle);

/// Stage seeds derived from cfg.seed.
std::uint64_t stage_seed(const RunConfig& cfg, const char* stage);

struct PilotResult {
  double bandwidth;
  double achieved_rate;
};

PilotResult run_pilot(const RunConfig& cfg, const Vector& s0);
/// Kernel used by generate/abc; `pilot_h` is consulted only in auto mode.
KernelSpec resolve_kernel(const RunConfig& cfg, std::optional<double> pilot_h);
SyntheticDataset run_generate(const RunConfig& cfg, const Vector& s0, const KernelSpec& kernel);
NetworkSpec make_network_spec(const RunConfig& cfg);
TrainingResult run_train(const RunConfig& cfg, const SyntheticDataset& data);
AbcConfig make_abc_config(const RunConfig& cfg, const KernelSpec& kernel);

/// Everything one replication of a learning method produces.
struct LearningRun {
  Observation observation;
  KernelSpec kernel;
  SyntheticDataset dataset;
  TrainingResult training;
  GaussianMixture estimate = GaussianMixture::standard_normal(1);
};

LearningRun run_learning_pipeline(const RunConfig& cfg);

// File-based commands. Each writes into cfg.output_dir and checks that the
// upstream artifacts it reads carry the same config hash and seed.
void cmd_observe(const RunConfig& cfg);
void cmd_pilot(const RunConfig& cfg);
void cmd_generate(const RunConfig& cfg);
void cmd_train(const RunConfig& cfg);
void cmd_estimate(const RunConfig& cfg);
void cmd_abc(const RunConfig& cfg);
void cmd_evaluate(const RunConfig& cfg);
/// Runs every stage of the configured method.
void cmd_run(const RunConfig& cfg);
/// Every matrix cell (or the single configured cell) for seeds seed,
/// seed+1, ... into <out>/<cell>/rep_<r>.
/// One resolved config per matrix cell, each patched onto the source document.
/// With a matrix, cell i writes into <output_dir>/<i>_<experiment>_m<m>_<method>.
std::vector<RunConfig> replicate_cells(const RunConfig& cfg);
void cmd_replicate(const RunConfig& cfg);

/// Metadata comment line put at the top of every CSV artifact.
std::string metadata_comment(const RunConfig& cfg);
/// Exit status for an exception escaping a command.
int exit_code_for(const std::exception& e);

}  // namespace kaspe
