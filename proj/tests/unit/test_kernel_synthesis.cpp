#include <cmath>
#include <limits>
#include <sstream>

#include <doctest.h>

#include "kaspe/errors.hpp"
#include "kaspe/kernel_synthesis.hpp"
#include "kaspe/rng.hpp"

using namespace kaspe;

namespace {

// theta ~ N(0, 1), y = theta + N(0, 1). With s0 = 0 and h = 1 the acceptance
// probability is E exp(-y^2 / 2) = 1 / sqrt(3).
Problem toy_problem() {
  Problem p;
  p.dim = 1;
  p.sample_prior = [](Rng& rng) { return Vector::Constant(1, rng.normal()); };
  p.log_prior = [](const Vector& t) { return -0.5 * t.squaredNorm(); };
  p.simulate = [](const Vector& t, Rng& rng) { return Vector::Constant(1, t(0) + rng.normal()); };
  return p;
}

std::vector<Vector> gaussian_pilot(Rng& rng, int count, int dim, double spread) {
  std::vector<Vector> out;
  for (int i = 0; i < count; ++i) {
    Vector v(dim);
    for (int k = 0; k < dim; ++k) v(k) = spread * rng.normal();
    out.push_back(v);
  }
  return out;
}

}  // namespace

TEST_CASE("squared-exponential kernel values") {
  const auto kind = KernelKind::SquaredExponential;
  CHECK(kernel_value(kind, Vector::Zero(3)) == 1.0);
  CHECK(kernel_value(kind, (Vector(2) << 0.6, 0.8).finished()) ==
        doctest::Approx(0.6065306597126334).epsilon(1e-15));

  Rng rng(1);
  for (int ray = 0; ray < 100; ++ray) {
    Vector dir(3);
    for (int k = 0; k < 3; ++k) dir(k) = rng.normal();
    dir.normalize();
    double prev = 1.0;
    for (int r = 0; r < 50; ++r) {
      const double v = kernel_value(kind, dir * (0.2 * r));
      CHECK(v <= prev);
      CHECK(v > 0.0);
      CHECK(v <= 1.0);
      prev = v;
    }
  }
}

TEST_CASE("kernel weights honour the bandwidth") {
  const Vector s = Vector::Constant(1, 2.0), s0 = Vector::Zero(1);
  CHECK(kernel_weight({KernelKind::SquaredExponential, 2.0}, s, s0) ==
        doctest::Approx(std::exp(-0.5)));
  CHECK(log_kernel_weight({KernelKind::SquaredExponential, 1e-200}, s, s0) < -1e300);
  CHECK(kernel_weight(KernelSpec::constant(), s, s0) == 1.0);
  CHECK(log_kernel_weight(KernelSpec::constant(), s, s0) == 0.0);
  CHECK_THROWS_AS(kernel_weight({KernelKind::SquaredExponential, 0.0}, s, s0), InvalidParameter);
  CHECK(kernel_kind_from_string(to_string(KernelKind::SquaredExponential)) ==
        KernelKind::SquaredExponential);
  CHECK_THROWS_AS(kernel_kind_from_string("box"), InvalidConfig);
}

TEST_CASE("bandwidth limits of generation") {
  const auto p = toy_problem();
  const auto id = SummarySpec::identity(1);
  const Vector s0 = Vector::Zero(1);
  const auto all = generate(p, id, KernelSpec::constant(), s0, 2000, 5);
  CHECK(all.n == 2000);
  CHECK(all.n_eff == 2000);
  for (const auto& r : all.records) CHECK(r.weight == 1);

  const auto none = generate(p, id, {KernelKind::SquaredExponential, 1e-12}, s0, 2000, 5);
  CHECK(none.n_eff == 0);
  CHECK(none.records.size() == 2000);
}

TEST_CASE("acceptance fraction matches the pilot estimate") {
  const auto p = toy_problem();
  const auto id = SummarySpec::identity(1);
  const Vector s0 = Vector::Zero(1);
  const std::size_t n = 100000;
  const auto data = generate(p, id, {KernelKind::SquaredExponential, 1.0}, s0, n, 9);
  const auto pilot = pilot_summaries(p, id, 100000, 10);
  const double a = expected_acceptance(pilot, s0, KernelKind::SquaredExponential, 1.0);
  const double se = std::sqrt(a * (1.0 - a) / static_cast<double>(n));
  const double rate = static_cast<double>(data.n_eff) / static_cast<double>(n);
  CHECK(std::abs(rate - a) <= 3.0 * se);
  CHECK(std::abs(a - 1.0 / std::sqrt(3.0)) <= 0.01);
}

TEST_CASE("acceptance fraction is unbiased") {
  const auto p = toy_problem();
  const auto id = SummarySpec::identity(1);
  const Vector s0 = Vector::Zero(1);
  const double a = 1.0 / std::sqrt(3.0);
  const int reps = 200;
  const std::size_t n = 1000;
  double total = 0.0;
  for (int r = 0; r < reps; ++r)
    total += static_cast<double>(
        generate(p, id, {KernelKind::SquaredExponential, 1.0}, s0, n, 1000 + r).n_eff);
  const double mean = total / (reps * static_cast<double>(n));
  CHECK(std::abs(mean - a) <= 4.0 * std::sqrt(a * (1.0 - a) / (reps * static_cast<double>(n))));
}

TEST_CASE("expected acceptance is monotone in the bandwidth") {
  Rng rng(2);
  const auto kind = KernelKind::SquaredExponential;
  for (int set = 0; set < 50; ++set) {
    const int dim = 1 + set % 4;
    const auto pilot = gaussian_pilot(rng, 200, dim, 0.5 + rng.uniform() * 3.0);
    Vector s0(dim);
    for (int k = 0; k < dim; ++k) s0(k) = rng.normal();
    for (int i = 0; i < 20; ++i) {
      const double h = std::pow(10.0, -3.0 + 6.0 * i / 19.0);
      CHECK(expected_acceptance(pilot, s0, kind, 2.0 * h) >= expected_acceptance(pilot, s0, kind, h));
    }
  }
  const std::vector<Vector> single{Vector::Constant(2, 0.3)};
  for (double h : {1e-9, 1.0, 1e9})
    CHECK(expected_acceptance(single, single[0], kind, h) == 1.0);
  const auto pilot = gaussian_pilot(rng, 100, 2, 1.0);
  CHECK(expected_acceptance(pilot, Vector::Zero(2), kind, 1e12) == doctest::Approx(1.0));
}

TEST_CASE("bandwidth selection") {
  Rng rng(3);
  const auto kind = KernelKind::SquaredExponential;
  for (int set = 0; set < 20; ++set) {
    const int dim = 1 + set % 3;
    const auto pilot = gaussian_pilot(rng, 1000, dim, 1.0 + rng.uniform());
    const Vector s0 = Vector::Zero(dim);
    const double target = 0.05 + 0.4 * rng.uniform();
    const double h = select_bandwidth(pilot, s0, kind, target);
    CHECK(expected_acceptance(pilot, s0, kind, h) >= target);
    CHECK(std::abs(expected_acceptance(pilot, s0, kind, h) - target) <= 1e-3);
    // Smallest such h: a slightly smaller bandwidth misses the target.
    CHECK(expected_acceptance(pilot, s0, kind, h * (1.0 - 2e-3)) < target);
  }

  const auto pilot = gaussian_pilot(rng, 500, 2, 1.0);
  const double target = 1.0 - 1e-12;
  const double big = select_bandwidth(pilot, Vector::Zero(2), kind, target);
  CHECK(big > 1e4);
  CHECK(expected_acceptance(pilot, Vector::Zero(2), kind, big) >= target);

  // Degenerate pilot: every bandwidth works, the lower bracket comes back.
  const std::vector<Vector> single{Vector::Constant(2, 1.5)};
  const double floor_h = select_bandwidth(single, single[0], kind, 0.5);
  CHECK(floor_h > 0.0);
  CHECK(floor_h <= 1e-12);

  CHECK_THROWS_AS(select_bandwidth(pilot, Vector::Zero(2), kind, 0.0), InvalidParameter);
  CHECK_THROWS_AS(select_bandwidth(pilot, Vector::Zero(2), kind, 1.0), InvalidParameter);
}

TEST_CASE("simulator failures regenerate on fresh streams") {
  auto p = toy_problem();
  p.simulate = [](const Vector& t, Rng& rng) -> Vector {
    if (t(0) > 0.5) throw NumericalFailure("toy failure");
    return Vector::Constant(1, t(0) + rng.normal());
  };
  const auto id = SummarySpec::identity(1);
  const std::uint64_t seed = 77;
  const auto data = generate(p, id, {KernelKind::SquaredExponential, 1.0}, Vector::Zero(1), 500, seed);
  CHECK(data.regenerated > 0);

  // Replay the documented stream schedule: slot i, attempt a.
  std::size_t replayed = 0;
  for (std::size_t i = 0; i < data.records.size(); ++i) {
    for (std::uint64_t a = 0;; ++a) {
      Rng rng(derive_seed(seed, {i, a}));
      const Vector theta = p.sample_prior(rng);
      if (theta(0) > 0.5) {
        ++replayed;
        continue;
      }
      const Vector s = p.simulate(theta, rng);
      CHECK(data.records[i].theta == theta);
      CHECK(data.records[i].summary == s);
      const double u = rng.uniform();
      CHECK(data.records[i].weight == (u < kernel_value(KernelKind::SquaredExponential, s) ? 1 : 0));
      break;
    }
  }
  CHECK(replayed == data.regenerated);

  p.simulate = [](const Vector&, Rng&) -> Vector { throw NumericalFailure("always"); };
  CHECK_THROWS_AS(generate(p, id, KernelSpec::constant(), Vector::Zero(1), 3, 1), NumericalFailure);
}

TEST_CASE("generation does not depend on the worker count") {
  const auto p = toy_problem();
  const auto id = SummarySpec::identity(1);
  const Vector s0 = Vector::Zero(1);
  const auto one = generate(p, id, {KernelKind::SquaredExponential, 0.7}, s0, 3000, 4, 1);
  const auto four = generate(p, id, {KernelKind::SquaredExponential, 0.7}, s0, 3000, 4, 4);
  REQUIRE(one.records.size() == four.records.size());
  for (std::size_t i = 0; i < one.records.size(); ++i) {
    CHECK(one.records[i].theta == four.records[i].theta);
    CHECK(one.records[i].summary == four.records[i].summary);
    CHECK(one.records[i].weight == four.records[i].weight);
  }
  CHECK(one.n_eff == four.n_eff);
  CHECK(pilot_summaries(p, id, 100, 3, 1) == pilot_summaries(p, id, 100, 3, 3));
}

TEST_CASE("dataset CSV and sidecar round trip") {
  const auto p = toy_problem();
  const auto id = SummarySpec::identity(1);
  for (const KernelSpec k : {KernelSpec{KernelKind::SquaredExponential, 0.37}, KernelSpec::constant()}) {
    const auto data = generate(p, id, k, Vector::Zero(1), 200, 12);
    std::stringstream ss;
    write_dataset_csv(ss, data, {"config_hash=abc seed=12"});
    std::vector<std::string> comments;
    auto back = read_dataset_csv(ss, &comments);
    apply_sidecar(back, dataset_sidecar(data));
    REQUIRE(comments.size() == 1);
    CHECK(comments[0] == "config_hash=abc seed=12");
    CHECK(back.n == data.n);
    CHECK(back.n_eff == data.n_eff);
    CHECK(back.seed == data.seed);
    CHECK(back.kernel.bandwidth == data.kernel.bandwidth);
    REQUIRE(back.records.size() == data.records.size());
    for (std::size_t i = 0; i < data.records.size(); ++i) {
      CHECK(back.records[i].theta == data.records[i].theta);
      CHECK(back.records[i].summary == data.records[i].summary);
      CHECK(back.records[i].weight == data.records[i].weight);
    }
    std::stringstream again;
    write_dataset_csv(again, back, {"config_hash=abc seed=12"});
    std::stringstream first;
    write_dataset_csv(first, data, {"config_hash=abc seed=12"});
    CHECK(again.str() == first.str());
  }
  CHECK(dataset_sidecar(generate(p, id, KernelSpec::constant(), Vector::Zero(1), 5, 1))["h"] == "inf");
}
