#include "kaspe/summaries.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Dense>

#include "kaspe/errors.hpp"
#include "kaspe/models.hpp"

namespace kaspe {

namespace {

// (X^T X)^{-1} X^T through a column-pivoted QR, with a rank check.
Matrix least_squares_projection(const Matrix& X, const char* what) {
  Eigen::ColPivHouseholderQR<Matrix> qr(X);
  if (qr.rank() < X.cols())
    throw SingularDesign(std::string(what) + ": design matrix is rank deficient");
  return qr.solve(Matrix::Identity(X.rows(), X.rows()));
}

}  // namespace

std::string to_string(SummaryKind kind) {
  switch (kind) {
    case SummaryKind::Identity: return "identity";
    case SummaryKind::MeanVariance: return "mean-variance";
    case SummaryKind::ComponentwiseLeastSquares: return "componentwise-least-squares";
    case SummaryKind::Fourier: return "fourier";
  }
  return "unknown";
}

SummaryKind summary_kind_from_string(const std::string& name) {
  for (auto k : {SummaryKind::Identity, SummaryKind::MeanVariance,
                 SummaryKind::ComponentwiseLeastSquares, SummaryKind::Fourier})
    if (to_string(k) == name) return k;
  throw InvalidConfig("unknown summary kind '" + name + "'");
}

SummarySpec SummarySpec::identity(int m) {
  if (m < 1) throw InvalidParameter("identity summary needs m >= 1");
  SummarySpec s(SummaryKind::Identity, m, m);
  s.projection_ = Matrix::Identity(m, m);
  return s;
}

SummarySpec SummarySpec::mean_variance() { return SummarySpec(SummaryKind::MeanVariance, 2, -1); }

SummarySpec SummarySpec::componentwise_least_squares(const std::vector<double>& times) {
  const int m = static_cast<int>(times.size());
  SummarySpec s(SummaryKind::ComponentwiseLeastSquares, 4, m);
  s.projection_.resize(4, m);
  s.projection_.topRows(2) = least_squares_projection(gmr_design_v(times), "least-squares summary");
  s.projection_.bottomRows(2) =
      least_squares_projection(gmr_design_r(times), "least-squares summary");
  return s;
}

SummarySpec SummarySpec::fourier(const std::vector<double>& times, int basis_count, double period) {
  if (basis_count < 1 || basis_count % 2 == 0)
    throw InvalidParameter("Fourier basis count must be odd and positive");
  if (times.empty()) throw InvalidParameter("Fourier summary needs observation times");
  if (!(period > 0.0)) period = *std::max_element(times.begin(), times.end());
  if (!(period > 0.0)) throw InvalidParameter("Fourier period must be positive");

  const int m = static_cast<int>(times.size());
  Matrix X(m, basis_count);
  for (int i = 0; i < m; ++i) {
    X(i, 0) = 1.0;
    for (int k = 1; 2 * k <= basis_count - 1; ++k) {
      const double w = 2.0 * std::numbers::pi * k * times[i] / period;
      X(i, 2 * k - 1) = std::sin(w);
      X(i, 2 * k) = std::cos(w);
    }
  }
  SummarySpec s(SummaryKind::Fourier, basis_count, m);
  s.basis_count_ = basis_count;
  s.period_ = period;
  s.projection_ = least_squares_projection(X, "Fourier summary");
  return s;
}

Vector summarize(const SummarySpec& spec, const Vector& y) {
  if (spec.input_dim() >= 0 && y.size() != spec.input_dim())
    throw InvalidParameter("summarize: data length " + std::to_string(y.size()) +
                           " does not match the summary's m=" + std::to_string(spec.input_dim()));
  switch (spec.kind()) {
    case SummaryKind::Identity:
      return y;
    case SummaryKind::MeanVariance: {
      if (y.size() < 1) throw InvalidParameter("summarize: empty data");
      const double mean = y.mean();
      Vector s(2);
      s << mean, (y.array() - mean).square().mean();
      return s;
    }
    case SummaryKind::ComponentwiseLeastSquares:
    case SummaryKind::Fourier:
      return spec.projection() * y;
  }
  throw InvalidParameter("unknown summary kind");
}

}  // namespace kaspe
