#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "kaspe/kernel_synthesis.hpp"
#include "kaspe/mixture.hpp"

namespace kaspe {

enum class Activation { Tanh, Relu };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& name);

/// Summary vector -> mixture parameters. Raw outputs are laid out as
/// (z_alpha: L, z_mu: L*d, z_U: L*d(d+1)/2), each block component-major; the
/// z_U block of a component lists its upper triangle row by row.
struct NetworkSpec {
  int input_dim = 0;
  std::vector<int> hidden{64, 64};
  Activation activation = Activation::Tanh;
  int components = 1;
  int dim = 1;

  int raw_output_dim() const noexcept {
    return static_cast<int>(parameter_count(components, dim));
  }
  /// Widths of every affine layer's output, hidden layers first.
  std::vector<int> layer_widths() const;
  /// Total number of weights and biases.
  long weight_count() const;
};

void validate(const NetworkSpec& spec);

/// Flat parameter vector plus the affine standardisations of the input
/// summaries and of theta. Layer k stores its weight matrix (column-major,
/// out x in) followed by its bias.
struct NetworkWeights {
  Vector params;
  Vector input_shift;
  Vector input_scale;
  Vector theta_shift;
  Vector theta_scale;

  bool operator==(const NetworkWeights&) const = default;
};

/// Offsets into `params` of each layer's weight block; the bias follows it.
std::vector<long> layer_offsets(const NetworkSpec& spec);

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, identity
/// standardisations.
NetworkWeights initialize(const NetworkSpec& spec, std::uint64_t rng_seed);
/// Every parameter zero, identity standardisations.
NetworkWeights zero_weights(const NetworkSpec& spec);

/// Raw output layer values for one summary (before the mixture head).
Vector raw_output(const NetworkSpec& spec, const NetworkWeights& w, const Vector& s);
/// Mixture head applied to raw outputs, in standardised theta coordinates.
GaussianMixture mixture_head(const NetworkSpec& spec, const Vector& z);

GaussianMixture forward(const NetworkSpec& spec, const NetworkWeights& w, const Vector& s);
inline GaussianMixture estimate_posterior(const NetworkSpec& spec, const NetworkWeights& w,
                                          const Vector& s0) {
  return forward(spec, w, s0);
}

/// -(1/|batch|) sum w_i log q(theta_i | N(s_i)).
double loss(const NetworkSpec& spec, const NetworkWeights& w,
            std::span<const WeightedTriple> batch);
/// Exact gradient of `loss` with respect to `w.params`.
Vector gradient(const NetworkSpec& spec, const NetworkWeights& w,
                std::span<const WeightedTriple> batch);
/// Both at once, sharing the forward pass.
double loss_and_gradient(const NetworkSpec& spec, const NetworkWeights& w,
                         std::span<const WeightedTriple> batch, Vector* grad);

struct TrainingConfig {
  int batch_size = 256;
  int max_epochs = 500;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  int patience = 20;
  double validation_fraction = 0.25;
  std::uint64_t rng_seed = 0;
};

void validate(const TrainingConfig& cfg);

struct EpochRecord {
  int epoch;
  double train_loss;
  double val_loss;
};

struct TrainingTrace {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double best_val_loss = 0.0;
  bool failed = false;
  std::string failure;
};

struct TrainingResult {
  NetworkWeights weights;
  TrainingTrace trace;
};

/// Minibatch Adam on the accepted training records with validation-based
/// early stopping; returns the weights of the best validation epoch.
TrainingResult train(const NetworkSpec& spec, const SyntheticDataset& data,
                     const TrainingConfig& cfg);

void to_json(nlohmann::json& j, const NetworkSpec& spec);
NetworkSpec network_spec_from_json(const nlohmann::json& j);
nlohmann::json network_to_json(const NetworkSpec& spec, const NetworkWeights& w);
std::pair<NetworkSpec, NetworkWeights> network_from_json(const nlohmann::json& j);

void write_trace_csv(std::ostream& out, const TrainingTrace& trace,
                     const std::vector<std::string>& comments = {});

}  // namespace kaspe
