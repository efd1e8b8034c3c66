#include "kaspe/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>

#include "kaspe/csv.hpp"
#include "kaspe/errors.hpp"

namespace kaspe {

namespace {

std::vector<double> trapezoid_weights(const Axis& x) {
  const std::size_t n = x.size();
  std::vector<double> w(n, 0.0);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const double half = 0.5 * (x[i + 1] - x[i]);
    w[i] += half;
    w[i + 1] += half;
  }
  return w;
}

void require_same_axes(const DensityGrid& a, const DensityGrid& b) {
  if (a.axes() != b.axes()) throw AxisMismatch("density grids have different axes");
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

Axis linspace(double lo, double hi, int count) {
  if (count < 2 || !(hi > lo)) throw InvalidParameter("linspace needs count >= 2 and hi > lo");
  Axis a(count);
  const double step = (hi - lo) / (count - 1);
  for (int i = 0; i < count; ++i) a[i] = lo + step * i;
  a.back() = hi;
  return a;
}

Axis midpoints(double lo, double hi, int count) {
  if (count < 2 || !(hi > lo)) throw InvalidParameter("midpoints needs count >= 2 and hi > lo");
  Axis a(count);
  const double step = (hi - lo) / count;
  for (int i = 0; i < count; ++i) a[i] = lo + step * (i + 0.5);
  return a;
}

DensityGrid::DensityGrid(std::vector<Axis> axes, std::vector<double> values)
    : axes_(std::move(axes)), values_(std::move(values)) {
  if (axes_.empty() || axes_.size() > 2) throw InvalidParameter("density grid must be 1-D or 2-D");
  std::size_t expected = 1;
  for (const auto& ax : axes_) {
    if (ax.size() < 2) throw InvalidParameter("grid axis needs at least two nodes");
    for (std::size_t i = 1; i < ax.size(); ++i)
      if (!(ax[i] > ax[i - 1])) throw InvalidParameter("grid axis must be strictly increasing");
    expected *= ax.size();
  }
  if (values_.size() != expected) throw InvalidParameter("grid value count does not match axes");
  for (double v : values_)
    if (!std::isfinite(v) || v < 0.0)
      throw InvalidParameter("grid values must be finite and nonnegative");
}

std::vector<double> DensityGrid::cell_measure() const {
  const auto w0 = trapezoid_weights(axes_[0]);
  if (dims() == 1) return w0;
  const auto w1 = trapezoid_weights(axes_[1]);
  std::vector<double> w(values_.size());
  for (std::size_t i = 0; i < w0.size(); ++i)
    for (std::size_t j = 0; j < w1.size(); ++j) w[i * w1.size() + j] = w0[i] * w1[j];
  return w;
}

double DensityGrid::integral() const {
  const auto w = cell_measure();
  double acc = 0.0;
  for (std::size_t i = 0; i < values_.size(); ++i) acc += values_[i] * w[i];
  return acc;
}

DensityGrid DensityGrid::normalized() const {
  const double mass = integral();
  if (!(mass > 1e-12)) throw CoverageError("density grid carries no mass (grid misses the density)");
  std::vector<double> v(values_);
  for (double& x : v) x /= mass;
  return DensityGrid(axes_, std::move(v));
}

DensityGrid raw_grid_from_mixture(const GaussianMixture& gm, const std::vector<Axis>& axes) {
  if (static_cast<int>(axes.size()) != gm.dim())
    throw InvalidParameter("grid dimension does not match mixture dimension");
  std::vector<double> values;
  if (gm.dim() == 1) {
    values.reserve(axes[0].size());
    Vector t(1);
    for (double x : axes[0]) {
      t[0] = x;
      values.push_back(std::exp(log_density(t, gm)));
    }
  } else {
    values.reserve(axes[0].size() * axes[1].size());
    Vector t(2);
    for (double x : axes[0])
      for (double y : axes[1]) {
        t << x, y;
        values.push_back(std::exp(log_density(t, gm)));
      }
  }
  DensityGrid grid(axes, std::move(values));
  if (!(grid.integral() > 1e-12)) throw CoverageError("grid misses the mixture mass");
  return grid;
}

DensityGrid grid_from_mixture(const GaussianMixture& gm, const std::vector<Axis>& axes) {
  return raw_grid_from_mixture(gm, axes).normalized();
}

DensityGrid marginalize(const DensityGrid& grid, int keep) {
  if (grid.dims() != 2) throw InvalidParameter("marginalize needs a 2-D grid");
  if (keep != 0 && keep != 1) throw InvalidParameter("marginalize: axis index must be 0 or 1");
  const auto& a0 = grid.axis(0);
  const auto& a1 = grid.axis(1);
  const int other = 1 - keep;
  const auto w = trapezoid_weights(grid.axis(other));
  std::vector<double> out(grid.axis(keep).size(), 0.0);
  for (std::size_t i = 0; i < a0.size(); ++i)
    for (std::size_t j = 0; j < a1.size(); ++j) {
      const double v = grid.at(i, j);
      if (keep == 0)
        out[i] += v * w[j];
      else
        out[j] += v * w[i];
    }
  return DensityGrid({grid.axis(keep)}, std::move(out)).normalized();
}

double total_variation(const DensityGrid& a, const DensityGrid& b) {
  require_same_axes(a, b);
  const DensityGrid na = a.normalized();
  const DensityGrid nb = b.normalized();
  const auto w = na.cell_measure();
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) acc += std::abs(na.at(i) - nb.at(i)) * w[i];
  return std::clamp(0.5 * acc, 0.0, 1.0);
}

double kl_divergence(const DensityGrid& a, const DensityGrid& b) {
  require_same_axes(a, b);
  const DensityGrid na = a.normalized();
  const DensityGrid nb = b.normalized();
  const auto w = na.cell_measure();
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double p = na.at(i);
    if (p == 0.0) continue;
    acc += p * std::log(p / std::max(nb.at(i), 1e-300)) * w[i];
  }
  return std::max(acc, 0.0);
}

std::vector<std::vector<double>> find_modes(const DensityGrid& grid) {
  std::vector<std::vector<double>> modes;
  const auto& v = grid.values();
  if (grid.dims() == 1) {
    const auto& x = grid.axis(0);
    const std::size_t n = v.size();
    std::size_t i = 0;
    while (i < n) {
      std::size_t k = i;
      while (k + 1 < n && v[k + 1] == v[i]) ++k;
      const bool left = i == 0 || v[i - 1] < v[i];
      const bool right = k + 1 == n || v[k + 1] < v[i];
      if (left && right && v[i] > 0.0) modes.push_back({x[i]});
      i = k + 1;
    }
    return modes;
  }
  const auto& x = grid.axis(0);
  const auto& y = grid.axis(1);
  const long n0 = static_cast<long>(x.size());
  const long n1 = static_cast<long>(y.size());
  // Flood-fills each plateau of equal values; it is a mode when no cell
  // bordering it is at least as high.
  std::vector<char> seen(v.size(), 0);
  std::vector<long> stack;
  for (long start = 0; start < n0 * n1; ++start) {
    if (seen[start] || v[start] <= 0.0) continue;
    const double c = v[start];
    bool peak = true;
    stack.assign(1, start);
    seen[start] = 1;
    while (!stack.empty()) {
      const long cur = stack.back();
      stack.pop_back();
      const long i = cur / n1;
      const long j = cur % n1;
      for (long di = -1; di <= 1; ++di)
        for (long dj = -1; dj <= 1; ++dj) {
          const long a = i + di;
          const long b = j + dj;
          if ((di == 0 && dj == 0) || a < 0 || b < 0 || a >= n0 || b >= n1) continue;
          const long nb = a * n1 + b;
          if (v[nb] > c) peak = false;
          else if (v[nb] == c && !seen[nb]) {
            seen[nb] = 1;
            stack.push_back(nb);
          }
        }
    }
    if (peak) modes.push_back({x[start / n1], y[start % n1]});
  }
  return modes;
}

ComparisonReport compare(const DensityGrid& estimate, const DensityGrid& reference) {
  ComparisonReport r;
  r.tv = total_variation(estimate, reference);
  r.kl = kl_divergence(reference, estimate);
  r.mode_locations = find_modes(estimate.normalized());
  r.mode_count = r.mode_locations.size();
  return r;
}

void to_json(nlohmann::json& j, const ComparisonReport& r) {
  j = nlohmann::json{{"tv", r.tv},
                     {"kl", r.kl},
                     {"mode_locations", r.mode_locations},
                     {"mode_count", r.mode_count}};
}

void write_grid_csv(std::ostream& out, const DensityGrid& grid,
                    const std::vector<std::string>& comments) {
  for (const auto& c : comments) out << '#' << c << '\n';
  if (grid.dims() == 1) {
    out << "theta_1,density\n";
    for (std::size_t i = 0; i < grid.size(); ++i)
      out << format_double(grid.axis(0)[i]) << ',' << format_double(grid.at(i)) << '\n';
  } else {
    out << "theta_1,theta_2,density\n";
    const auto& x = grid.axis(0);
    const auto& y = grid.axis(1);
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t j = 0; j < y.size(); ++j)
        out << format_double(x[i]) << ',' << format_double(y[j]) << ','
            << format_double(grid.at(i, j)) << '\n';
  }
}

DensityGrid read_grid_csv(std::istream& in, std::vector<std::string>* comments) {
  std::string line;
  int dims = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line[0] == '#') {
      if (comments) comments->push_back(line.substr(1));
      continue;
    }
    if (line == "theta_1,density") dims = 1;
    else if (line == "theta_1,theta_2,density") dims = 2;
    else throw InvalidParameter("density grid CSV: unexpected header '" + line + "'");
    break;
  }
  if (dims == 0) throw InvalidParameter("density grid CSV: missing header");

  std::vector<std::vector<double>> cols(dims + 1);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    for (int c = 0; c <= dims; ++c) {
      if (!std::getline(row, cell, ','))
        throw InvalidParameter("density grid CSV: short row");
      cols[c].push_back(parse_csv_double(cell));
    }
  }
  if (dims == 1) return DensityGrid({cols[0]}, cols[1]);

  Axis x;
  for (double v : cols[0])
    if (x.empty() || v != x.back()) x.push_back(v);
  if (x.empty() || cols[1].size() % x.size() != 0)
    throw InvalidParameter("density grid CSV: rows do not form a rectangle");
  const std::size_t ny = cols[1].size() / x.size();
  Axis y(cols[1].begin(), cols[1].begin() + static_cast<std::ptrdiff_t>(ny));
  return DensityGrid({x, y}, cols[2]);
}

}  // namespace kaspe
