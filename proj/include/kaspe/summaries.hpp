#pragma once

#include <string>
#include <vector>

#include "kaspe/mixture.hpp"

namespace kaspe {

enum class SummaryKind { Identity, MeanVariance, ComponentwiseLeastSquares, Fourier };

std::string to_string(SummaryKind kind);
SummaryKind summary_kind_from_string(const std::string& name);

/// A dimension-reduction map S: R^m -> R^K. The linear kinds precompute their
/// K x m projection at construction, so a rank-deficient design fails early.
class SummarySpec {
 public:
  static SummarySpec identity(int m);
  static SummarySpec mean_variance();
  /// Stacked least-squares fits under the v(t) and r(t) designs (K = 4).
  static SummarySpec componentwise_least_squares(const std::vector<double>& times);
  /// OLS coefficients on {1, sin(2 pi k t / T), cos(2 pi k t / T)}, k = 1..(B-1)/2.
  /// A nonpositive period means "largest observation time".
  static SummarySpec fourier(const std::vector<double>& times, int basis_count = 11,
                             double period = 0.0);

  SummaryKind kind() const noexcept { return kind_; }
  int output_dim() const noexcept { return output_dim_; }
  /// Required input length, or -1 when any length is accepted.
  int input_dim() const noexcept { return input_dim_; }
  bool is_linear() const noexcept { return kind_ != SummaryKind::MeanVariance; }
  int basis_count() const noexcept { return basis_count_; }
  double period() const noexcept { return period_; }
  const Matrix& projection() const noexcept { return projection_; }

 private:
  SummarySpec(SummaryKind kind, int output_dim, int input_dim)
      : kind_(kind), output_dim_(output_dim), input_dim_(input_dim) {}

  SummaryKind kind_;
  int output_dim_;
  int input_dim_;
  int basis_count_ = 0;
  double period_ = 0.0;
  Matrix projection_;
};

Vector summarize(const SummarySpec& spec, const Vector& y);

}  // namespace kaspe
