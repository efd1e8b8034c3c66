#include "kaspe/mixture.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <Eigen/Dense>

#include "kaspe/errors.hpp"
#include "kaspe/rng.hpp"

namespace kaspe {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;  // log(2*pi)

void check_factor(const Matrix& U, int dim) {
  if (U.rows() != dim || U.cols() != dim)
    throw InvalidParameter("Cholesky factor has wrong shape");
  for (int j = 0; j < dim; ++j) {
    if (!(U(j, j) > 0.0) || !std::isfinite(U(j, j)))
      throw InvalidParameter("Cholesky factor diagonal must be positive and finite");
    for (int k = 0; k < dim; ++k) {
      if (k < j && U(j, k) != 0.0)
        throw InvalidParameter("Cholesky factor must be upper triangular");
      if (!std::isfinite(U(j, k)))
        throw InvalidParameter("Cholesky factor has non-finite entry");
    }
  }
}

}  // namespace

GaussianMixture::GaussianMixture(std::vector<double> weights, std::vector<Vector> means,
                                 std::vector<Matrix> factors)
    : weights_(std::move(weights)), means_(std::move(means)), factors_(std::move(factors)) {
  if (weights_.empty()) throw InvalidParameter("mixture needs at least one component");
  if (means_.size() != weights_.size() || factors_.size() != weights_.size())
    throw InvalidParameter("mixture component arrays differ in length");
  dim_ = static_cast<int>(means_.front().size());
  if (dim_ < 1) throw InvalidParameter("mixture dimension must be positive");

  double total = 0.0;
  for (double w : weights_) {
    if (!(w >= 0.0) || !std::isfinite(w))
      throw InvalidParameter("mixture weights must be finite and nonnegative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-12) throw InvalidParameter("mixture weights must sum to 1");

  for (std::size_t l = 0; l < weights_.size(); ++l) {
    if (means_[l].size() != dim_) throw InvalidParameter("mean has wrong dimension");
    if (!means_[l].allFinite()) throw InvalidParameter("mean has non-finite entry");
    check_factor(factors_[l], dim_);
  }
}

GaussianMixture GaussianMixture::standard_normal(int dim) {
  return GaussianMixture({1.0}, {Vector::Zero(dim)}, {Matrix::Identity(dim, dim)});
}

Matrix GaussianMixture::component_covariance(int l) const {
  const Matrix& U = factors_[l];
  Matrix inv = U.triangularView<Eigen::Upper>().solve(Matrix::Identity(dim_, dim_));
  return inv * inv.transpose();
}

Vector GaussianMixture::mean() const {
  Vector m = Vector::Zero(dim_);
  for (int l = 0; l < components(); ++l) m += weights_[l] * means_[l];
  return m;
}

Matrix GaussianMixture::covariance() const {
  const Vector m = mean();
  Matrix c = Matrix::Zero(dim_, dim_);
  for (int l = 0; l < components(); ++l) {
    const Vector dm = means_[l] - m;
    c += weights_[l] * (component_covariance(l) + dm * dm.transpose());
  }
  return c;
}

double log_component_density(const Vector& theta, const Vector& mu, const Matrix& U) {
  const auto d = theta.size();
  if (mu.size() != d || U.rows() != d || U.cols() != d)
    throw InvalidParameter("log_component_density: dimension mismatch");
  double log_det = 0.0;
  for (Eigen::Index k = 0; k < d; ++k) {
    if (!(U(k, k) > 0.0)) throw InvalidParameter("Cholesky diagonal must be positive");
    log_det += std::log(U(k, k));
  }
  const Vector e = U.triangularView<Eigen::Upper>() * (theta - mu);
  return -0.5 * static_cast<double>(d) * kLog2Pi + log_det - 0.5 * e.squaredNorm();
}

double log_density(const Vector& theta, const GaussianMixture& gm) {
  if (theta.size() != gm.dim()) throw InvalidParameter("log_density: dimension mismatch");
  const int L = gm.components();
  if (L == 1) return log_component_density(theta, gm.means()[0], gm.factors()[0]);

  double terms[64];
  std::vector<double> heap;
  double* t = terms;
  if (L > 64) {
    heap.resize(L);
    t = heap.data();
  }
  double top = -std::numeric_limits<double>::infinity();
  for (int l = 0; l < L; ++l) {
    const double w = gm.weights()[l];
    t[l] = w > 0.0 ? std::log(w) + log_component_density(theta, gm.means()[l], gm.factors()[l])
                   : -std::numeric_limits<double>::infinity();
    top = std::max(top, t[l]);
  }
  if (!std::isfinite(top)) return top;
  double acc = 0.0;
  for (int l = 0; l < L; ++l) acc += std::exp(t[l] - top);
  return top + std::log(acc);
}

std::vector<Vector> sample(const GaussianMixture& gm, int count, std::uint64_t rng_seed) {
  if (count < 1) throw InvalidParameter("sample: count must be at least 1");
  Rng rng(rng_seed);
  std::vector<double> cumulative(gm.components());
  double acc = 0.0;
  for (int l = 0; l < gm.components(); ++l) {
    acc += gm.weights()[l];
    cumulative[l] = acc;
  }

  std::vector<Vector> out;
  out.reserve(count);
  Vector z(gm.dim());
  for (int i = 0; i < count; ++i) {
    const double u = rng.uniform() * acc;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
    int l = static_cast<int>(std::min<std::ptrdiff_t>(it - cumulative.begin(),
                                                      gm.components() - 1));
    // never land on a zero-weight component through rounding at the top end
    while (gm.weights()[l] == 0.0 && l > 0) --l;
    for (int k = 0; k < gm.dim(); ++k) z[k] = rng.normal();
    out.push_back(gm.means()[l] + gm.factors()[l].triangularView<Eigen::Upper>().solve(z));
  }
  return out;
}

void to_json(nlohmann::json& j, const GaussianMixture& gm) {
  nlohmann::json means = nlohmann::json::array();
  nlohmann::json factors = nlohmann::json::array();
  for (int l = 0; l < gm.components(); ++l) {
    means.push_back(std::vector<double>(gm.means()[l].data(),
                                        gm.means()[l].data() + gm.dim()));
    nlohmann::json rows = nlohmann::json::array();
    for (int r = 0; r < gm.dim(); ++r) {
      std::vector<double> row(gm.dim());
      for (int c = 0; c < gm.dim(); ++c) row[c] = gm.factors()[l](r, c);
      rows.push_back(row);
    }
    factors.push_back(rows);
  }
  j = nlohmann::json{{"L", gm.components()}, {"d", gm.dim()}, {"weights", gm.weights()},
                     {"means", means}, {"U", factors}};
}

GaussianMixture mixture_from_json(const nlohmann::json& j) {
  try {
    const int L = j.at("L").get<int>();
    const int d = j.at("d").get<int>();
    auto weights = j.at("weights").get<std::vector<double>>();
    const auto& jm = j.at("means");
    const auto& ju = j.at("U");
    if (static_cast<int>(weights.size()) != L || static_cast<int>(jm.size()) != L ||
        static_cast<int>(ju.size()) != L)
      throw InvalidParameter("mixture JSON: component count does not match L");
    std::vector<Vector> means;
    std::vector<Matrix> factors;
    for (int l = 0; l < L; ++l) {
      auto m = jm[l].get<std::vector<double>>();
      if (static_cast<int>(m.size()) != d) throw InvalidParameter("mixture JSON: bad mean");
      means.push_back(Eigen::Map<Vector>(m.data(), d));
      Matrix U(d, d);
      if (static_cast<int>(ju[l].size()) != d) throw InvalidParameter("mixture JSON: bad U");
      for (int r = 0; r < d; ++r) {
        auto row = ju[l][r].get<std::vector<double>>();
        if (static_cast<int>(row.size()) != d) throw InvalidParameter("mixture JSON: bad U");
        for (int c = 0; c < d; ++c) U(r, c) = row[c];
      }
      factors.push_back(std::move(U));
    }
    return GaussianMixture(std::move(weights), std::move(means), std::move(factors));
  } catch (const nlohmann::json::exception& e) {
    throw InvalidParameter(std::string("mixture JSON: ") + e.what());
  }
}

}  // namespace kaspe
