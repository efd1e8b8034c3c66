#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

namespace kaspe {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Gaussian mixture parameterised by the upper-triangular Cholesky factors of
/// the component precisions: Sigma_l^{-1} = U_l^T U_l.
///
/// Construction validates every invariant (weights on the simplex, factors
/// upper triangular with positive diagonal); instances are immutable.
class GaussianMixture {
 public:
  GaussianMixture(std::vector<double> weights, std::vector<Vector> means,
                  std::vector<Matrix> factors);

  /// Single standard-normal component in `dim` dimensions.
  static GaussianMixture standard_normal(int dim);

  int components() const noexcept { return static_cast<int>(weights_.size()); }
  int dim() const noexcept { return dim_; }
  const std::vector<double>& weights() const noexcept { return weights_; }
  const std::vector<Vector>& means() const noexcept { return means_; }
  const std::vector<Matrix>& factors() const noexcept { return factors_; }

  /// Covariance of component l, U_l^{-1} U_l^{-T}.
  Matrix component_covariance(int l) const;
  Vector mean() const;
  Matrix covariance() const;

  bool operator==(const GaussianMixture&) const = default;

 private:
  int dim_;
  std::vector<double> weights_;
  std::vector<Vector> means_;
  std::vector<Matrix> factors_;
};

/// log phi(theta | mu, U) for one Gaussian component.
double log_component_density(const Vector& theta, const Vector& mu, const Matrix& U);

/// log q(theta) via log-sum-exp over components.
double log_density(const Vector& theta, const GaussianMixture& gm);

/// Draws `count` points; component by inverse CDF on cumulative weights, then
/// mu + U^{-1} z by back-substitution.
std::vector<Vector> sample(const GaussianMixture& gm, int count, std::uint64_t rng_seed);

/// Number of free parameters of an L-component mixture in d dimensions.
constexpr long parameter_count(long components, long dim) {
  return components * (dim + 1) * (dim + 2) / 2;
}

void to_json(nlohmann::json& j, const GaussianMixture& gm);
GaussianMixture mixture_from_json(const nlohmann::json& j);

}  // namespace kaspe
