#include "kaspe/pipeline.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "kaspe/errors.hpp"
#include "kaspe/rng.hpp"

namespace kaspe {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Fixed seeds for the simulated observed data of each experiment.
constexpr std::uint64_t kObserveSeed[] = {20240611ULL, 20240612ULL, 41ULL};

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Walks one JSON object, remembering which keys were consumed so anything
// left over can be reported as unknown.
class ObjectReader {
 public:
  ObjectReader(json j, std::string path) : j_(std::move(j)), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where(), "expected an object");
  }

  std::string at(const std::string& key) const { return path_ + "/" + key; }
  bool has(const std::string& key) const { return j_.contains(key); }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  template <class T>
  T get(const std::string& key, T fallback) {
    if (!has(key)) return fallback;
    return convert<T>(key);
  }

  template <class T>
  T require(const std::string& key) {
    if (!has(key)) throw ConfigError(at(key), "missing required key");
    return convert<T>(key);
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw ConfigError(at(key), "unknown key");
  }

 private:
  std::string where() const { return path_.empty() ? "/" : path_; }

  template <class T>
  T convert(const std::string& key) {
    const json& v = raw(key);
    if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw ConfigError(at(key), "expected a number");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(at(key), "expected an integer");
      if constexpr (std::is_unsigned_v<T>)
        if (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)
          throw ConfigError(at(key), "expected a nonnegative integer");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(at(key), "expected a string");
    }
    try {
      return v.get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(at(key), std::string("wrong type: ") + e.what());
    }
  }

  json j_;
  std::string path_;
  std::set<std::string> seen_;
};

void check(bool ok, const std::string& path, const std::string& what) {
  if (!ok) throw ConfigError(path, what);
}

Vector vector_from(const std::vector<double>& v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<long>(v.size()));
}

std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

Experiment experiment_from(const std::string& s, const std::string& path) {
  if (s == "normal-gamma") return Experiment::NormalGamma;
  if (s == "gaussian-mixture") return Experiment::GaussianMixture;
  if (s == "fitzhugh-nagumo") return Experiment::FitzHughNagumo;
  throw ConfigError(path, "unknown experiment '" + s + "'");
}

Method method_from(const std::string& s, const std::string& path) {
  if (s == "kaspe") return Method::Kaspe;
  if (s == "mdn") return Method::Mdn;
  if (s == "abc") return Method::Abc;
  throw ConfigError(path, "unknown method '" + s + "'");
}

void parse_model(const json& j, RunConfig& c) {
  ObjectReader r(j, "/model");
  switch (c.experiment) {
    case Experiment::NormalGamma: {
      auto& ng = c.normal_gamma;
      ng.eta0 = r.get("eta0", ng.eta0);
      ng.lambda0 = r.get("lambda0", ng.lambda0);
      ng.alpha0 = r.get("alpha0", ng.alpha0);
      ng.beta0 = r.get("beta0", ng.beta0);
      ng.m = c.m;
      break;
    }
    case Experiment::GaussianMixture: {
      auto& g = c.mixture_regression;
      g = GaussianMixtureRegressionConfig::with_default_times(c.m);
      g.p1 = r.get("p1", g.p1);
      g.p2 = r.get("p2", g.p2);
      g.sigma1 = r.get("sigma1", g.sigma1);
      g.sigma2 = r.get("sigma2", g.sigma2);
      if (r.has("prior_mean")) {
        const auto pm = r.get<std::vector<double>>("prior_mean", {});
        check(pm.size() == 2, r.at("prior_mean"), "expected two values");
        g.prior_mean = vector_from(pm);
      }
      g.prior_cov_scale = r.get("prior_cov_scale", g.prior_cov_scale);
      g.time_points = r.get("time_points", g.time_points);
      check(static_cast<int>(g.time_points.size()) == c.m, r.at("time_points"),
            "expected m time points");
      break;
    }
    case Experiment::FitzHughNagumo: {
      auto& f = c.fitzhugh_nagumo;
      const double window = r.get("window", FitzHughNagumoConfig::kDefaultWindow);
      check(window > 0.0, r.at("window"), "must be positive");
      f = FitzHughNagumoConfig::with_default_times(c.m, window);
      f.theta1 = r.get("theta1", f.theta1);
      f.theta2 = r.get("theta2", f.theta2);
      f.zeta = r.get("zeta", f.zeta);
      f.v0 = r.get("v0", f.v0);
      f.r0 = r.get("r0", f.r0);
      f.gamma_lo = r.get("gamma_lo", f.gamma_lo);
      f.gamma_hi = r.get("gamma_hi", f.gamma_hi);
      f.noise_sd = r.get("noise_sd", f.noise_sd);
      f.rk4_step = r.get("rk4_step", f.rk4_step);
      f.time_points = r.get("time_points", f.time_points);
      check(static_cast<int>(f.time_points.size()) == c.m, r.at("time_points"),
            "expected m time points");
      break;
    }
  }
  r.finish();
  try {
    switch (c.experiment) {
      case Experiment::NormalGamma: validate(c.normal_gamma); break;
      case Experiment::GaussianMixture: validate(c.mixture_regression); break;
      case Experiment::FitzHughNagumo: validate(c.fitzhugh_nagumo); break;
    }
  } catch (const Error& e) {
    throw ConfigError("/model", e.what());
  }
}

json model_json(const RunConfig& c) {
  switch (c.experiment) {
    case Experiment::NormalGamma: {
      const auto& ng = c.normal_gamma;
      return {{"eta0", ng.eta0}, {"lambda0", ng.lambda0}, {"alpha0", ng.alpha0}, {"beta0", ng.beta0}};
    }
    case Experiment::GaussianMixture: {
      const auto& g = c.mixture_regression;
      return {{"p1", g.p1},
              {"p2", g.p2},
              {"sigma1", g.sigma1},
              {"sigma2", g.sigma2},
              {"prior_mean", to_std(g.prior_mean)},
              {"prior_cov_scale", g.prior_cov_scale},
              {"time_points", g.time_points}};
    }
    case Experiment::FitzHughNagumo: {
      const auto& f = c.fitzhugh_nagumo;
      return {{"theta1", f.theta1},     {"theta2", f.theta2},     {"zeta", f.zeta},
              {"v0", f.v0},             {"r0", f.r0},             {"gamma_lo", f.gamma_lo},
              {"gamma_hi", f.gamma_hi}, {"noise_sd", f.noise_sd}, {"rk4_step", f.rk4_step},
              {"time_points", f.time_points}};
    }
  }
  return json::object();
}

void parse_kernel(const json& j, RunConfig& c) {
  ObjectReader r(j, "/kernel");
  c.kernel = kernel_kind_from_string(r.get<std::string>("kind", "squared-exponential"));
  const bool mdn = c.method == Method::Mdn;
  c.bandwidth_mode = mdn ? BandwidthMode::Infinite : BandwidthMode::Auto;
  if (r.has("bandwidth")) {
    const json& b = r.raw("bandwidth");
    if (b.is_string() && b.get<std::string>() == "auto") {
      c.bandwidth_mode = BandwidthMode::Auto;
    } else if (b.is_string() && b.get<std::string>() == "inf") {
      c.bandwidth_mode = BandwidthMode::Infinite;
    } else if (b.is_number()) {
      c.bandwidth_mode = BandwidthMode::Fixed;
      c.bandwidth = b.get<double>();
      check(c.bandwidth > 0.0 && std::isfinite(c.bandwidth), r.at("bandwidth"),
            "must be positive and finite");
    } else {
      throw ConfigError(r.at("bandwidth"), "expected a number, \"auto\" or \"inf\"");
    }
  }
  if (mdn)
    check(c.bandwidth_mode == BandwidthMode::Infinite, r.at("bandwidth"),
          "mdn forbids a finite bandwidth");
  if (c.method == Method::Abc)
    check(c.bandwidth_mode != BandwidthMode::Infinite, r.at("bandwidth"),
          "abc needs a finite bandwidth");
  c.target_rate = r.get("target_rate", c.target_rate);
  check(c.target_rate > 0.0 && c.target_rate < 1.0, r.at("target_rate"), "must lie in (0, 1)");
  c.pilot_size = r.get("pilot_size", c.pilot_size);
  check(c.pilot_size >= 1, r.at("pilot_size"), "must be >= 1");
  r.finish();
}

void parse_network(const json& j, RunConfig& c) {
  ObjectReader r(j, "/network");
  c.hidden = r.get("hidden", c.hidden);
  for (int w : c.hidden) check(w >= 1, r.at("hidden"), "widths must be >= 1");
  if (r.has("activation")) {
    try {
      c.activation = activation_from_string(r.get<std::string>("activation", ""));
    } catch (const Error& e) {
      throw ConfigError(r.at("activation"), e.what());
    }
  }
  c.components = r.get("components", c.components);
  check(c.components >= 1, r.at("components"), "must be >= 1");
  r.finish();
}

void parse_training(const json& j, RunConfig& c) {
  ObjectReader r(j, "/training");
  auto& t = c.training;
  t.batch_size = r.get("batch_size", t.batch_size);
  t.max_epochs = r.get("max_epochs", t.max_epochs);
  t.learning_rate = r.get("learning_rate", t.learning_rate);
  t.adam_beta1 = r.get("adam_beta1", t.adam_beta1);
  t.adam_beta2 = r.get("adam_beta2", t.adam_beta2);
  t.adam_epsilon = r.get("adam_epsilon", t.adam_epsilon);
  t.patience = r.get("patience", t.patience);
  t.validation_fraction = r.get("validation_fraction", t.validation_fraction);
  r.finish();
  try {
    validate(t);
  } catch (const Error& e) {
    throw ConfigError("/training", e.what());
  }
}

void parse_abc(const json& j, RunConfig& c) {
  ObjectReader r(j, "/abc");
  auto& a = c.abc;
  a.chain_length = r.get("chain_length", a.chain_length);
  a.burn_in = r.get("burn_in", a.burn_in);
  a.n_temperatures = r.get("n_temperatures", a.n_temperatures);
  a.bandwidth_ladder = r.get("ladder_factors", a.bandwidth_ladder);
  a.swap_interval = r.get("swap_interval", a.swap_interval);
  a.adapt_interval = r.get("adapt_interval", a.adapt_interval);
  a.initial_proposal_scale = r.get("initial_proposal_scale", a.initial_proposal_scale);
  r.finish();
  AbcConfig probe = a;
  probe.kernel.bandwidth = 1.0;
  try {
    validate(probe);
  } catch (const Error& e) {
    throw ConfigError("/abc", e.what());
  }
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// Artifact I/O.

void write_text(const fs::path& file, const std::string& text) {
  fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary);
  if (!out) throw Error("cannot write " + file.string());
  out << text;
}

void write_json(const fs::path& file, const json& j) { write_text(file, j.dump(2) + "\n"); }

json stamp(const RunConfig& cfg, json j) {
  j["config_hash"] = config_hash(cfg);
  j["seed"] = cfg.seed;
  return j;
}

std::ifstream open_upstream(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw StalenessError("missing upstream artifact " + file.string());
  return in;
}

json read_json_checked(const RunConfig& cfg, const fs::path& file) {
  auto in = open_upstream(file);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw StalenessError(file.string() + " is not valid JSON: " + e.what());
  }
  if (!j.contains("config_hash") || j["config_hash"] != config_hash(cfg) || !j.contains("seed") ||
      j["seed"] != cfg.seed)
    throw StalenessError(file.string() + " was produced by a different config or seed");
  return j;
}

void check_comments(const RunConfig& cfg, const fs::path& file,
                    const std::vector<std::string>& comments) {
  if (comments.empty() || comments.front() != metadata_comment(cfg))
    throw StalenessError(file.string() + " was produced by a different config or seed");
}

fs::path out_path(const RunConfig& cfg, const char* name) { return fs::path(cfg.output_dir) / name; }

Vector json_vector(const json& j) { return vector_from(j.get<std::vector<double>>()); }

struct StoredObservation {
  Observation obs;
  Vector s0;
};

StoredObservation load_observation(const RunConfig& cfg) {
  const json j = read_json_checked(cfg, out_path(cfg, "observed.json"));
  StoredObservation o{{json_vector(j.at("true_theta")), json_vector(j.at("y"))}, {}};
  o.s0 = summarize(make_summary(cfg), o.obs.y);
  return o;
}

std::optional<double> load_pilot(const RunConfig& cfg) {
  if (cfg.bandwidth_mode != BandwidthMode::Auto) return std::nullopt;
  return read_json_checked(cfg, out_path(cfg, "pilot.json")).at("h").get<double>();
}

void write_grid(const RunConfig& cfg, const fs::path& file, const DensityGrid& grid) {
  std::ostringstream os;
  write_grid_csv(os, grid, {metadata_comment(cfg)});
  write_text(file, os.str());
}

}  // namespace

std::string to_string(Experiment e) {
  switch (e) {
    case Experiment::NormalGamma: return "normal-gamma";
    case Experiment::GaussianMixture: return "gaussian-mixture";
    case Experiment::FitzHughNagumo: return "fitzhugh-nagumo";
  }
  return "unknown";
}

std::string to_string(Method m) {
  switch (m) {
    case Method::Kaspe: return "kaspe";
    case Method::Mdn: return "mdn";
    case Method::Abc: return "abc";
  }
  return "unknown";
}

RunConfig parse_run_config(const json& j) {
  RunConfig c;
  ObjectReader r(j, "");
  c.experiment = experiment_from(r.require<std::string>("experiment"), "/experiment");
  c.method = method_from(r.require<std::string>("method"), "/method");
  c.m = r.get("m", c.experiment == Experiment::FitzHughNagumo ? 6 : 4);
  check(c.m >= 1, "/m", "must be >= 1");

  parse_model(r.has("model") ? r.raw("model") : json::object(), c);

  if (r.has("true_theta")) {
    const auto t = r.get<std::vector<double>>("true_theta", {});
    check(static_cast<int>(t.size()) == parameter_dim(c), "/true_theta",
          "expected " + std::to_string(parameter_dim(c)) + " values");
    c.true_theta = vector_from(t);
  }
  c.observe_seed = r.get("observe_seed", kObserveSeed[static_cast<int>(c.experiment)]);

  {
    ObjectReader s(r.has("summary") ? r.raw("summary") : json::object(), "/summary");
    try {
      c.summary = summary_kind_from_string(s.get<std::string>("kind", "identity"));
    } catch (const Error& e) {
      throw ConfigError("/summary/kind", e.what());
    }
    c.basis_count = s.get("basis_count", c.basis_count);
    c.period = s.get("period", c.period);
    s.finish();
    try {
      make_summary(c);
    } catch (const Error& e) {
      throw ConfigError("/summary", e.what());
    }
  }

  parse_kernel(r.has("kernel") ? r.raw("kernel") : json::object(), c);
  c.n = r.get("n", c.n);
  check(c.n >= 10, "/n", "must be >= 10");
  parse_network(r.has("network") ? r.raw("network") : json::object(), c);
  parse_training(r.has("training") ? r.raw("training") : json::object(), c);
  parse_abc(r.has("abc") ? r.raw("abc") : json::object(), c);
  {
    ObjectReader e(r.has("evaluation") ? r.raw("evaluation") : json::object(), "/evaluation");
    c.grid_size = e.get("grid_size", c.grid_size);
    check(c.grid_size == 0 || c.grid_size >= 10, "/evaluation/grid_size", "must be 0 or >= 10");
    check(c.grid_size == 0 || c.experiment != Experiment::FitzHughNagumo || c.grid_size >= 100,
          "/evaluation/grid_size", "the fitzhugh-nagumo oracle needs >= 100 nodes");
    e.finish();
  }
  c.replications = r.get("replications", c.replications);
  check(c.replications >= 1, "/replications", "must be >= 1");
  c.seed = r.get("seed", c.seed);
  c.workers = r.get("workers", c.workers);
  check(c.workers >= 1, "/workers", "must be >= 1");
  c.output_dir = r.get("output_dir", c.output_dir);
  if (r.has("matrix")) {
    c.matrix = r.raw("matrix");
    check(c.matrix.is_array(), "/matrix", "expected an array of override objects");
    for (std::size_t i = 0; i < c.matrix.size(); ++i)
      check(c.matrix[i].is_object(), "/matrix/" + std::to_string(i), "expected an object");
  }
  r.finish();
  c.source = j;
  return c;
}

RunConfig load_run_config(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("", "cannot open config file " + file.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("", "malformed JSON in " + file.string() + ": " + e.what());
  }
  return parse_run_config(j);
}

json to_json(const RunConfig& c) {
  json kernel = {{"kind", to_string(c.kernel)},
                 {"target_rate", c.target_rate},
                 {"pilot_size", c.pilot_size}};
  switch (c.bandwidth_mode) {
    case BandwidthMode::Auto: kernel["bandwidth"] = "auto"; break;
    case BandwidthMode::Infinite: kernel["bandwidth"] = "inf"; break;
    case BandwidthMode::Fixed: kernel["bandwidth"] = c.bandwidth; break;
  }
  const auto& t = c.training;
  const auto& a = c.abc;
  json j = {
      {"experiment", to_string(c.experiment)},
      {"method", to_string(c.method)},
      {"m", c.m},
      {"model", model_json(c)},
      {"observe_seed", c.observe_seed},
      {"summary", {{"kind", to_string(c.summary)}, {"basis_count", c.basis_count}, {"period", c.period}}},
      {"kernel", kernel},
      {"n", c.n},
      {"network",
       {{"hidden", c.hidden}, {"activation", to_string(c.activation)}, {"components", c.components}}},
      {"training",
       {{"batch_size", t.batch_size},
        {"max_epochs", t.max_epochs},
        {"learning_rate", t.learning_rate},
        {"adam_beta1", t.adam_beta1},
        {"adam_beta2", t.adam_beta2},
        {"adam_epsilon", t.adam_epsilon},
        {"patience", t.patience},
        {"validation_fraction", t.validation_fraction}}},
      {"abc",
       {{"chain_length", a.chain_length},
        {"burn_in", a.burn_in},
        {"n_temperatures", a.n_temperatures},
        {"ladder_factors", a.bandwidth_ladder},
        {"swap_interval", a.swap_interval},
        {"adapt_interval", a.adapt_interval},
        {"initial_proposal_scale", a.initial_proposal_scale}}},
      {"evaluation", {{"grid_size", c.grid_size}}},
      {"replications", c.replications},
      {"seed", c.seed},
      {"workers", c.workers},
      {"output_dir", c.output_dir},
      {"matrix", c.matrix}};
  if (c.true_theta) j["true_theta"] = to_std(*c.true_theta);
  return j;
}

std::string config_hash(const RunConfig& cfg) {
  json j = to_json(cfg);
  for (const char* k : {"seed", "output_dir", "replications", "workers", "matrix"}) j.erase(k);
  return hex(fnv1a(j.dump()));
}

std::string metadata_comment(const RunConfig& cfg) {
  return "config_hash=" + config_hash(cfg) + " seed=" + std::to_string(cfg.seed);
}

int parameter_dim(const RunConfig& cfg) {
  switch (cfg.experiment) {
    case Experiment::NormalGamma:
    case Experiment::GaussianMixture: return 2;
    case Experiment::FitzHughNagumo: return 1;
  }
  return 0;
}

Problem make_problem(const RunConfig& cfg) {
  switch (cfg.experiment) {
    case Experiment::NormalGamma: return normal_gamma_problem(cfg.normal_gamma);
    case Experiment::GaussianMixture: return gmr_problem(cfg.mixture_regression);
    case Experiment::FitzHughNagumo: return fn_problem(cfg.fitzhugh_nagumo);
  }
  throw InvalidConfig("unknown experiment");
}

SummarySpec make_summary(const RunConfig& cfg) {
  const std::vector<double>* times = nullptr;
  if (cfg.experiment == Experiment::GaussianMixture) times = &cfg.mixture_regression.time_points;
  if (cfg.experiment == Experiment::FitzHughNagumo) times = &cfg.fitzhugh_nagumo.time_points;
  switch (cfg.summary) {
    case SummaryKind::Identity: return SummarySpec::identity(cfg.m);
    case SummaryKind::MeanVariance: return SummarySpec::mean_variance();
    case SummaryKind::ComponentwiseLeastSquares:
      if (cfg.experiment != Experiment::GaussianMixture)
        throw InvalidConfig("componentwise least squares applies to gaussian-mixture only");
      return SummarySpec::componentwise_least_squares(*times);
    case SummaryKind::Fourier:
      if (!times) throw InvalidConfig("the Fourier summary needs observation times");
      return SummarySpec::fourier(*times, cfg.basis_count, cfg.period);
  }
  throw InvalidConfig("unknown summary kind");
}

Vector default_true_theta(const RunConfig& cfg) {
  switch (cfg.experiment) {
    case Experiment::NormalGamma: {
      Rng rng(derive_seed(cfg.observe_seed, {0}));
      return normal_gamma_problem(cfg.normal_gamma).sample_prior(rng);
    }
    case Experiment::GaussianMixture: return (Vector(2) << 2.0, 1.0).finished();
    case Experiment::FitzHughNagumo: return (Vector(1) << 3.0).finished();
  }
  throw InvalidConfig("unknown experiment");
}

Observation make_observation(const RunConfig& cfg) {
  Observation o;
  o.true_theta = cfg.true_theta ? *cfg.true_theta : default_true_theta(cfg);
  Rng rng(derive_seed(cfg.observe_seed, {1}));
  o.y = make_problem(cfg).simulate(o.true_theta, rng);
  return o;
}

PosteriorOracle make_oracle(const RunConfig& cfg, const Vector& y) {
  switch (cfg.experiment) {
    case Experiment::NormalGamma:
      return PosteriorOracle::normal_gamma(ng_posterior(cfg.normal_gamma, y));
    case Experiment::GaussianMixture:
      return PosteriorOracle::mixture(gmr_posterior(cfg.mixture_regression, y));
    case Experiment::FitzHughNagumo:
      return PosteriorOracle::grid(
          fn_posterior_grid(cfg.fitzhugh_nagumo, y, cfg.grid_size ? cfg.grid_size : 3000));
  }
  throw InvalidConfig("unknown experiment");
}

std::vector<Axis> evaluation_axes(const RunConfig& cfg, const PosteriorOracle& oracle) {
  const int nodes = cfg.grid_size ? cfg.grid_size : 400;
  switch (oracle.kind) {
    case PosteriorOracle::Kind::NormalGammaClosedForm:
      return ng_default_axes(std::get<NormalGammaConfig>(oracle.payload), nodes);
    case PosteriorOracle::Kind::GaussianMixtureClosedForm:
      return gmr_default_axes(std::get<GaussianMixture>(oracle.payload), nodes);
    case PosteriorOracle::Kind::GridNormalized:
      return std::get<DensityGrid>(oracle.payload).axes();
  }
  throw InvalidConfig("unknown oracle");
}

std::uint64_t stage_seed(const RunConfig& cfg, const char* stage) {
  return derive_seed(cfg.seed, {fnv1a(stage)});
}

PilotResult run_pilot(const RunConfig& cfg, const Vector& s0) {
  const auto pilot = pilot_summaries(make_problem(cfg), make_summary(cfg),
                                     static_cast<std::size_t>(cfg.pilot_size),
                                     stage_seed(cfg, "pilot"), cfg.workers);
  const double h = select_bandwidth(pilot, s0, cfg.kernel, cfg.target_rate);
  return {h, expected_acceptance(pilot, s0, cfg.kernel, h)};
}

KernelSpec resolve_kernel(const RunConfig& cfg, std::optional<double> pilot_h) {
  switch (cfg.bandwidth_mode) {
    case BandwidthMode::Fixed: return {cfg.kernel, cfg.bandwidth};
    case BandwidthMode::Infinite: return KernelSpec::constant(cfg.kernel);
    case BandwidthMode::Auto:
      if (!pilot_h) throw StalenessError("bandwidth is \"auto\" but no pilot result is available");
      return {cfg.kernel, *pilot_h};
  }
  throw InvalidConfig("unknown bandwidth mode");
}

SyntheticDataset run_generate(const RunConfig& cfg, const Vector& s0, const KernelSpec& kernel) {
  return generate(make_problem(cfg), make_summary(cfg), kernel, s0, cfg.n,
                  stage_seed(cfg, "generate"), cfg.workers);
}

NetworkSpec make_network_spec(const RunConfig& cfg) {
  NetworkSpec spec;
  spec.input_dim = make_summary(cfg).output_dim();
  spec.hidden = cfg.hidden;
  spec.activation = cfg.activation;
  spec.components = cfg.components;
  spec.dim = parameter_dim(cfg);
  return spec;
}

TrainingResult run_train(const RunConfig& cfg, const SyntheticDataset& data) {
  TrainingConfig t = cfg.training;
  t.rng_seed = stage_seed(cfg, "train");
  return train(make_network_spec(cfg), data, t);
}

AbcConfig make_abc_config(const RunConfig& cfg, const KernelSpec& kernel) {
  AbcConfig a = cfg.abc;
  a.kernel = kernel;
  a.rng_seed = stage_seed(cfg, "abc");
  if (!a.bandwidth_ladder.empty())
    for (auto& f : a.bandwidth_ladder) f *= kernel.bandwidth;
  return a;
}

LearningRun run_learning_pipeline(const RunConfig& cfg) {
  if (cfg.method == Method::Abc) throw InvalidConfig("abc is not a learning method");
  LearningRun run;
  run.observation = make_observation(cfg);
  const Vector s0 = summarize(make_summary(cfg), run.observation.y);
  std::optional<double> h;
  if (cfg.bandwidth_mode == BandwidthMode::Auto) h = run_pilot(cfg, s0).bandwidth;
  run.kernel = resolve_kernel(cfg, h);
  run.dataset = run_generate(cfg, s0, run.kernel);
  run.training = run_train(cfg, run.dataset);
  run.estimate = estimate_posterior(make_network_spec(cfg), run.training.weights, s0);
  return run;
}

// ---------------------------------------------------------------------------

void cmd_observe(const RunConfig& cfg) {
  const Observation o = make_observation(cfg);
  const Vector s0 = summarize(make_summary(cfg), o.y);
  write_json(out_path(cfg, "observed.json"),
             stamp(cfg, {{"observe_seed", cfg.observe_seed},
                         {"true_theta", to_std(o.true_theta)},
                         {"y", to_std(o.y)},
                         {"s0", to_std(s0)}}));
  write_json(out_path(cfg, "config.json"), to_json(cfg));
}

void cmd_pilot(const RunConfig& cfg) {
  const auto obs = load_observation(cfg);
  const PilotResult p = run_pilot(cfg, obs.s0);
  write_json(out_path(cfg, "pilot.json"), stamp(cfg, {{"h", p.bandwidth},
                                                      {"achieved_rate", p.achieved_rate},
                                                      {"target_rate", cfg.target_rate},
                                                      {"pilot_size", cfg.pilot_size}}));
}

void cmd_generate(const RunConfig& cfg) {
  if (cfg.method == Method::Abc) throw InvalidConfig("generate applies to kaspe and mdn only");
  const auto obs = load_observation(cfg);
  const SyntheticDataset data = run_generate(cfg, obs.s0, resolve_kernel(cfg, load_pilot(cfg)));
  std::ostringstream os;
  write_dataset_csv(os, data, {metadata_comment(cfg)});
  write_text(out_path(cfg, "dataset.csv"), os.str());
  write_json(out_path(cfg, "dataset.json"), stamp(cfg, dataset_sidecar(data)));
}

void cmd_train(const RunConfig& cfg) {
  const auto csv = out_path(cfg, "dataset.csv");
  auto in = open_upstream(csv);
  std::vector<std::string> comments;
  SyntheticDataset data = read_dataset_csv(in, &comments);
  check_comments(cfg, csv, comments);
  apply_sidecar(data, read_json_checked(cfg, out_path(cfg, "dataset.json")));

  const TrainingResult res = run_train(cfg, data);
  json j = network_to_json(make_network_spec(cfg), res.weights);
  j["training"] = {{"best_epoch", res.trace.best_epoch},
                   {"best_val_loss", res.trace.best_val_loss},
                   {"epochs", res.trace.epochs.size()},
                   {"failed", res.trace.failed},
                   {"failure", res.trace.failure}};
  write_json(out_path(cfg, "network.json"), stamp(cfg, j));
  std::ostringstream os;
  write_trace_csv(os, res.trace, {metadata_comment(cfg)});
  write_text(out_path(cfg, "trace.csv"), os.str());
}

void cmd_estimate(const RunConfig& cfg) {
  const json j = read_json_checked(cfg, out_path(cfg, "network.json"));
  const auto [spec, weights] = network_from_json(j);
  const auto obs = load_observation(cfg);
  const GaussianMixture est = estimate_posterior(spec, weights, obs.s0);
  write_json(out_path(cfg, "estimate.json"), stamp(cfg, {{"mixture", est}}));
  const auto axes = evaluation_axes(cfg, make_oracle(cfg, obs.obs.y));
  write_grid(cfg, out_path(cfg, "estimate_grid.csv"), grid_from_mixture(est, axes));
}

void cmd_abc(const RunConfig& cfg) {
  if (cfg.method != Method::Abc) throw InvalidConfig("abc command needs method \"abc\"");
  const auto obs = load_observation(cfg);
  const AbcConfig a = make_abc_config(cfg, resolve_kernel(cfg, load_pilot(cfg)));
  const AbcChain chain = run_parallel_tempering(a, make_problem(cfg), make_summary(cfg), obs.s0);
  const std::vector<std::string> meta{metadata_comment(cfg)};
  {
    std::ostringstream os;
    write_chain_csv(os, chain.samples, a.burn_in + 1, meta);
    write_text(out_path(cfg, "chain.csv"), os.str());
  }
  {
    std::ostringstream os;
    write_autocorrelation_csv(os, autocorrelation(chain.samples, 100), meta);
    write_text(out_path(cfg, "autocorrelation.csv"), os.str());
  }
  write_json(out_path(cfg, "abc_diagnostics.json"), stamp(cfg, diagnostics_json(chain)));
  const auto axes = evaluation_axes(cfg, make_oracle(cfg, obs.obs.y));
  write_grid(cfg, out_path(cfg, "estimate_grid.csv"), kde(chain.samples, axes));
}

void cmd_evaluate(const RunConfig& cfg) {
  const auto obs = load_observation(cfg);
  const auto file = out_path(cfg, "estimate_grid.csv");
  auto in = open_upstream(file);
  std::vector<std::string> comments;
  const DensityGrid estimate = read_grid_csv(in, &comments);
  check_comments(cfg, file, comments);

  const PosteriorOracle oracle = make_oracle(cfg, obs.obs.y);
  const DensityGrid reference = oracle.tabulate(estimate.axes());
  write_grid(cfg, out_path(cfg, "oracle_grid.csv"), reference);
  json report = compare(estimate, reference);
  report["oracle_modes"] = find_modes(reference);
  write_json(out_path(cfg, "report.json"), stamp(cfg, report));
}

void cmd_run(const RunConfig& cfg) {
  cmd_observe(cfg);
  if (cfg.bandwidth_mode == BandwidthMode::Auto) cmd_pilot(cfg);
  if (cfg.method == Method::Abc) {
    cmd_abc(cfg);
  } else {
    cmd_generate(cfg);
    cmd_train(cfg);
    cmd_estimate(cfg);
  }
  cmd_evaluate(cfg);
}

std::vector<RunConfig> replicate_cells(const RunConfig& cfg) {
  std::vector<json> patches;
  if (cfg.matrix.empty()) patches.push_back(json::object());
  else
    for (const auto& c : cfg.matrix) patches.push_back(c);

  std::vector<RunConfig> cells;
  for (std::size_t i = 0; i < patches.size(); ++i) {
    json merged = cfg.source.empty() ? to_json(cfg) : cfg.source;
    merged.erase("matrix");
    merged["seed"] = cfg.seed;
    merged["output_dir"] = cfg.output_dir;
    merged.merge_patch(patches[i]);
    RunConfig cell;
    try {
      cell = parse_run_config(merged);
    } catch (const ConfigError& e) {
      throw ConfigError("/matrix/" + std::to_string(i) + e.path(), e.what());
    }
    if (!cfg.matrix.empty())
      cell.output_dir = (fs::path(cfg.output_dir) /
                         (std::to_string(i) + "_" + to_string(cell.experiment) + "_m" +
                          std::to_string(cell.m) + "_" + to_string(cell.method)))
                            .string();
    cells.push_back(std::move(cell));
  }
  return cells;
}

void cmd_replicate(const RunConfig& cfg) {
  const auto cells = replicate_cells(cfg);
  json summary = json::array();
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const RunConfig& cell = cells[i];
    const fs::path base(cell.output_dir);
    json reps = json::array();
    for (int r = 0; r < cell.replications; ++r) {
      RunConfig rep = cell;
      rep.seed = cell.seed + static_cast<std::uint64_t>(r);
      rep.output_dir = (base / ("rep_" + std::to_string(r))).string();
      cmd_run(rep);
      json report = read_json_checked(rep, out_path(rep, "report.json"));
      reps.push_back({{"seed", rep.seed},
                      {"dir", rep.output_dir},
                      {"tv", report["tv"]},
                      {"kl", report["kl"]},
                      {"mode_count", report["mode_count"]}});
    }
    summary.push_back({{"cell", i},
                       {"experiment", to_string(cell.experiment)},
                       {"method", to_string(cell.method)},
                       {"m", cell.m},
                       {"config_hash", config_hash(cell)},
                       {"replications", reps}});
  }
  write_json(fs::path(cfg.output_dir) / "replicates.json", summary);
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const InvalidConfig*>(&e) ||
      dynamic_cast<const InvalidParameter*>(&e))
    return 2;
  if (dynamic_cast<const NumericalFailure*>(&e)) return 3;
  if (dynamic_cast<const StalenessError*>(&e)) return 4;
  return 1;
}

}  // namespace kaspe
