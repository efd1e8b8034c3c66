#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "kaspe/mixture.hpp"

namespace kaspe {

using Axis = std::vector<double>;

/// `count` equispaced points on [lo, hi], endpoints included.
Axis linspace(double lo, double hi, int count);
/// `count` equispaced cell midpoints of (lo, hi); endpoints excluded.
Axis midpoints(double lo, double hi, int count);

/// Density tabulated on a 1-D or 2-D rectangular grid. Values are stored
/// row-major with the first axis varying slowest.
class DensityGrid {
 public:
  DensityGrid(std::vector<Axis> axes, std::vector<double> values);

  int dims() const noexcept { return static_cast<int>(axes_.size()); }
  const Axis& axis(int k) const { return axes_.at(k); }
  const std::vector<Axis>& axes() const noexcept { return axes_; }
  const std::vector<double>& values() const noexcept { return values_; }
  std::size_t size() const noexcept { return values_.size(); }
  double at(std::size_t i) const { return values_[i]; }
  double at(std::size_t i, std::size_t j) const { return values_[i * axes_[1].size() + j]; }

  /// Trapezoid quadrature weight of every node (the node's cell measure).
  std::vector<double> cell_measure() const;
  double integral() const;
  /// Rescaled to unit trapezoid integral. Throws CoverageError below 1e-12 mass.
  DensityGrid normalized() const;

  bool operator==(const DensityGrid&) const = default;

 private:
  std::vector<Axis> axes_;
  std::vector<double> values_;
};

/// Evaluates the mixture density at every node and normalises on the grid.
DensityGrid grid_from_mixture(const GaussianMixture& gm, const std::vector<Axis>& axes);
/// Same, but without the final normalisation (coverage is still checked).
DensityGrid raw_grid_from_mixture(const GaussianMixture& gm, const std::vector<Axis>& axes);

/// Keeps axis `keep` of a 2-D grid and integrates out the other.
DensityGrid marginalize(const DensityGrid& grid, int keep);

double total_variation(const DensityGrid& a, const DensityGrid& b);
double kl_divergence(const DensityGrid& a, const DensityGrid& b);

/// Grid nodes that are strict local maxima over their neighbours (the
/// 2- or 8-neighbourhood). Plateaus count once, at their first node.
std::vector<std::vector<double>> find_modes(const DensityGrid& grid);

struct ComparisonReport {
  double tv = 0.0;
  double kl = 0.0;
  std::vector<std::vector<double>> mode_locations;
  std::size_t mode_count = 0;
};

/// Renormalises both grids on their common axes before comparing. Modes are
/// those of `estimate`.
ComparisonReport compare(const DensityGrid& estimate, const DensityGrid& reference);
void to_json(nlohmann::json& j, const ComparisonReport& r);

/// CSV with header `theta_1[,theta_2],density`. Lines starting with '#' are
/// metadata and are kept verbatim in `comments`.
void write_grid_csv(std::ostream& out, const DensityGrid& grid,
                    const std::vector<std::string>& comments = {});
DensityGrid read_grid_csv(std::istream& in, std::vector<std::string>* comments = nullptr);

}  // namespace kaspe
