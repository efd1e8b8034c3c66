#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <sys/wait.h>
#include <unistd.h>

#include <doctest.h>

#include "kaspe/errors.hpp"
#include "kaspe/pipeline.hpp"

using namespace kaspe;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() /
                     ("kaspe_unit_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Drops '#' metadata lines, which carry the config hash.
std::string strip_comments(const std::string& text) {
  std::istringstream in(text);
  std::string line, out;
  while (std::getline(in, line))
    if (line.empty() || line[0] != '#') out += line + "\n";
  return out;
}

json small_learning(const std::string& experiment, const std::string& method) {
  return {{"experiment", experiment},
          {"method", method},
          {"n", 1500},
          {"kernel", {{"pilot_size", 400}, {"target_rate", 0.3}}},
          {"network", {{"hidden", {8, 8}}, {"components", 3}}},
          {"training", {{"max_epochs", 15}, {"patience", 5}}},
          {"evaluation", {{"grid_size", 60}}}};
}

ConfigError config_error(const json& j) {
  try {
    parse_run_config(j);
  } catch (const ConfigError& e) {
    return e;
  }
  FAIL("expected a config error");
  return ConfigError("", "");
}

int run_cli(const std::string& args) {
  const int status = std::system((std::string(KASPE_CLI_PATH) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config errors carry the offending JSON path") {
  json base{{"experiment", "normal-gamma"}, {"method", "kaspe"}};
  CHECK_NOTHROW(parse_run_config(base));

  CHECK(config_error({{"method", "kaspe"}}).path() == "/experiment");
  CHECK(config_error({{"experiment", "lotka"}, {"method", "kaspe"}}).path() == "/experiment");
  auto j = base;
  j["bogus"] = 1;
  CHECK(config_error(j).path() == "/bogus");
  j = base;
  j["kernel"] = {{"bandwdth", 1.0}};
  CHECK(config_error(j).path() == "/kernel/bandwdth");
  j = base;
  j["training"] = {{"batch_size", "big"}};
  CHECK(config_error(j).path() == "/training/batch_size");
  j = base;
  j["n"] = 5;
  CHECK(config_error(j).path() == "/n");
  j = base;
  j["model"] = {{"lambda0", -1.0}};
  CHECK(config_error(j).path() == "/model");
  j = base;
  j["summary"] = {{"kind", "pca"}};
  CHECK(config_error(j).path() == "/summary/kind");

  j = base;
  j["method"] = "mdn";
  j["kernel"] = {{"bandwidth", 0.5}};
  CHECK(config_error(j).path() == "/kernel/bandwidth");
  j["kernel"] = {{"bandwidth", "inf"}};
  CHECK_NOTHROW(parse_run_config(j));
  j["method"] = "abc";
  CHECK(config_error(j).path() == "/kernel/bandwidth");

  j = base;
  j["experiment"] = "fitzhugh-nagumo";
  j["m"] = 6;
  j["model"] = {{"time_points", {1.0, 2.0}}};
  CHECK(config_error(j).path() == "/model/time_points");
  j = base;
  j["experiment"] = "fitzhugh-nagumo";
  j["evaluation"] = {{"grid_size", 50}};
  CHECK(config_error(j).path() == "/evaluation/grid_size");
}

TEST_CASE("defaults and method-specific settings") {
  const auto ng = parse_run_config({{"experiment", "normal-gamma"}, {"method", "kaspe"}});
  CHECK(ng.m == 4);
  CHECK(ng.n == 125000);
  CHECK(ng.components == 20);
  CHECK(ng.bandwidth_mode == BandwidthMode::Auto);
  CHECK(ng.training.validation_fraction == 0.25);
  CHECK(ng.replications == 5);
  const auto mdn = parse_run_config({{"experiment", "normal-gamma"}, {"method", "mdn"}});
  CHECK(mdn.bandwidth_mode == BandwidthMode::Infinite);
  const auto fn = parse_run_config({{"experiment", "fitzhugh-nagumo"}, {"method", "abc"}});
  CHECK(fn.m == 6);
  CHECK(default_true_theta(fn)(0) == 3.0);
  const auto gm = parse_run_config({{"experiment", "gaussian-mixture"}, {"method", "kaspe"}});
  CHECK(default_true_theta(gm) == Eigen::Vector2d(2.0, 1.0));
}

TEST_CASE("config hash ignores bookkeeping and spelled-out defaults") {
  const json a{{"experiment", "normal-gamma"}, {"method", "kaspe"}};
  const json b{{"experiment", "normal-gamma"}, {"method", "kaspe"}, {"n", 125000},
               {"seed", 9},        {"output_dir", "elsewhere"}, {"workers", 2},
               {"replications", 3}};
  CHECK(config_hash(parse_run_config(a)) == config_hash(parse_run_config(b)));
  json c = a;
  c["n"] = 1000;
  CHECK(config_hash(parse_run_config(a)) != config_hash(parse_run_config(c)));
  // The resolved config reparses to itself.
  const auto cfg = parse_run_config(c);
  CHECK(to_json(parse_run_config(to_json(cfg))) == to_json(cfg));
}

TEST_CASE("exit codes") {
  CHECK(exit_code_for(ConfigError("/x", "bad")) == 2);
  CHECK(exit_code_for(InvalidConfig("bad")) == 2);
  CHECK(exit_code_for(InvalidParameter("bad")) == 2);
  CHECK(exit_code_for(NumericalFailure("nan")) == 3);
  CHECK(exit_code_for(DegenerateSample("empty")) == 3);
  CHECK(exit_code_for(StalenessError("old")) == 4);
  CHECK(exit_code_for(std::runtime_error("other")) == 1);
}

TEST_CASE("stages reject artifacts from another config or seed") {
  const auto dir = scratch("stale");
  auto cfg = parse_run_config(small_learning("normal-gamma", "kaspe"));
  cfg.output_dir = dir.string();
  cmd_observe(cfg);
  cmd_pilot(cfg);

  auto other = cfg;
  other.n = 2000;
  CHECK_THROWS_AS(cmd_generate(other), StalenessError);
  auto reseeded = cfg;
  reseeded.seed = 2;
  CHECK_THROWS_AS(cmd_generate(reseeded), StalenessError);

  cmd_generate(cfg);
  CHECK_THROWS_AS(cmd_train(other), StalenessError);
  auto fresh = cfg;
  fresh.output_dir = scratch("empty").string();
  CHECK_THROWS_AS(cmd_train(fresh), StalenessError);
}

TEST_CASE("every artifact records the config hash and seed") {
  const auto dir = scratch("stamps");
  auto cfg = parse_run_config(small_learning("normal-gamma", "kaspe"));
  cfg.output_dir = dir.string();
  cmd_run(cfg);
  const std::string meta = "#" + metadata_comment(cfg);
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    const std::string text = slurp(entry.path());
    if (entry.path().extension() == ".csv") {
      CHECK_MESSAGE(text.rfind(meta + "\n", 0) == 0, name);
    } else if (name != "config.json") {
      const json j = json::parse(text);
      CHECK_MESSAGE(j["config_hash"] == config_hash(cfg), name);
      CHECK_MESSAGE(j["seed"] == cfg.seed, name);
    }
  }
  const json report = json::parse(slurp(dir / "report.json"));
  CHECK(report["tv"].get<double>() >= 0.0);
  CHECK(report["tv"].get<double>() <= 1.0);
  CHECK(report.contains("mode_locations"));
}

TEST_CASE("mdn equals kaspe with an infinite bandwidth") {
  auto mj = small_learning("normal-gamma", "mdn");
  auto kj = small_learning("normal-gamma", "kaspe");
  kj["kernel"]["bandwidth"] = "inf";
  auto mdn = parse_run_config(mj);
  auto kaspe = parse_run_config(kj);
  mdn.output_dir = scratch("mdn").string();
  kaspe.output_dir = scratch("kaspe_inf").string();
  cmd_run(mdn);
  cmd_run(kaspe);
  for (const char* f : {"dataset.csv", "trace.csv", "estimate_grid.csv", "oracle_grid.csv"})
    CHECK_MESSAGE(strip_comments(slurp(fs::path(mdn.output_dir) / f)) ==
                      strip_comments(slurp(fs::path(kaspe.output_dir) / f)),
                  f);
  for (const char* f : {"network.json", "estimate.json", "report.json", "dataset.json"}) {
    json a = json::parse(slurp(fs::path(mdn.output_dir) / f));
    json b = json::parse(slurp(fs::path(kaspe.output_dir) / f));
    a.erase("config_hash");
    b.erase("config_hash");
    CHECK_MESSAGE(a == b, f);
  }

  const auto rm = run_learning_pipeline(mdn);
  const auto rk = run_learning_pipeline(kaspe);
  CHECK(rm.training.weights == rk.training.weights);
  CHECK(rm.estimate == rk.estimate);
  CHECK(rm.dataset.n_eff == rm.dataset.n);
}

TEST_CASE("evaluating the oracle against itself gives zero divergence") {
  for (const char* exp : {"normal-gamma", "gaussian-mixture", "fitzhugh-nagumo"}) {
    const auto dir = scratch(std::string("self_") + exp);
    auto j = small_learning(exp, "kaspe");
    if (std::string(exp) == "fitzhugh-nagumo") j["evaluation"]["grid_size"] = 400;
    auto cfg = parse_run_config(j);
    cfg.output_dir = dir.string();
    cmd_observe(cfg);
    const auto obs = make_observation(cfg);
    const auto oracle = make_oracle(cfg, obs.y);
    const auto grid = oracle.tabulate(evaluation_axes(cfg, oracle));
    {
      std::ofstream out(dir / "estimate_grid.csv", std::ios::binary);
      write_grid_csv(out, grid, {metadata_comment(cfg)});
    }
    cmd_evaluate(cfg);
    const json report = json::parse(slurp(dir / "report.json"));
    CHECK(report["tv"].get<double>() == 0.0);
    CHECK(report["kl"].get<double>() == 0.0);
    CHECK(report["mode_locations"] == report["oracle_modes"]);
  }
}

TEST_CASE("artifacts round trip byte for byte") {
  const auto dir = scratch("roundtrip");
  auto cfg = parse_run_config(small_learning("gaussian-mixture", "kaspe"));
  cfg.output_dir = dir.string();
  cmd_run(cfg);
  auto abc = parse_run_config({{"experiment", "gaussian-mixture"},
                               {"method", "abc"},
                               {"kernel", {{"pilot_size", 400}, {"target_rate", 0.3}}},
                               {"abc", {{"chain_length", 2000}, {"burn_in", 500}, {"n_temperatures", 2}}},
                               {"evaluation", {{"grid_size", 50}}}});
  abc.output_dir = scratch("roundtrip_abc").string();
  cmd_run(abc);

  for (const fs::path& file : {dir / "estimate_grid.csv", dir / "oracle_grid.csv",
                               fs::path(abc.output_dir) / "estimate_grid.csv"}) {
    const std::string text = slurp(file);
    std::istringstream in(text);
    std::vector<std::string> comments;
    const auto g = read_grid_csv(in, &comments);
    std::ostringstream out;
    write_grid_csv(out, g, comments);
    CHECK_MESSAGE(out.str() == text, file.string());
  }
  {
    const std::string text = slurp(dir / "dataset.csv");
    std::istringstream in(text);
    std::vector<std::string> comments;
    const auto d = read_dataset_csv(in, &comments);
    std::ostringstream out;
    write_dataset_csv(out, d, comments);
    CHECK(out.str() == text);
  }
  {
    const std::string text = slurp(fs::path(abc.output_dir) / "chain.csv");
    std::istringstream in(text);
    std::vector<std::string> comments;
    const auto xs = read_chain_csv(in, &comments);
    std::ostringstream out;
    write_chain_csv(out, xs, abc.abc.burn_in + 1, comments);
    CHECK(out.str() == text);
  }
  for (const auto& base : {dir, fs::path(abc.output_dir)})
    for (const auto& entry : fs::directory_iterator(base))
      if (entry.path().extension() == ".json") {
        const std::string text = slurp(entry.path());
        CHECK_MESSAGE(json::parse(text).dump(2) + "\n" == text, entry.path().string());
      }
  const json net = json::parse(slurp(dir / "network.json"));
  const auto [spec, w] = network_from_json(net);
  json again = network_to_json(spec, w);
  for (const auto& [k, v] : again.items()) CHECK_MESSAGE(net[k] == v, k);
}

TEST_CASE("replications are reproducible") {
  const auto dir = scratch("replicate");
  auto j = small_learning("normal-gamma", "kaspe");
  j["replications"] = 2;
  j["seed"] = 40;
  j["output_dir"] = dir.string();
  j["matrix"] = json::array({json::object(), {{"method", "mdn"}, {"m", 7}}});
  const auto cfg = parse_run_config(j);
  cmd_replicate(cfg);
  const json summary = json::parse(slurp(dir / "replicates.json"));
  REQUIRE(summary.size() == 2);
  CHECK(summary[1]["m"] == 7);
  CHECK(summary[1]["method"] == "mdn");
  CHECK(summary[0]["replications"][1]["seed"] == 41);

  const fs::path rep = dir / "0_normal-gamma_m4_kaspe" / "rep_1";
  REQUIRE(fs::exists(rep / "report.json"));
  auto again = parse_run_config(j);
  again.seed = 41;
  again.output_dir = scratch("replicate_again").string();
  cmd_run(again);
  for (const auto& entry : fs::directory_iterator(rep))
    if (entry.path().filename() != "config.json")
      CHECK_MESSAGE(slurp(entry.path()) == slurp(fs::path(again.output_dir) / entry.path().filename()),
                  entry.path().filename().string());
  CHECK(fs::exists(dir / "1_normal-gamma_m7_mdn" / "rep_0" / "report.json"));
}

TEST_CASE("command line exit codes") {
  const auto dir = scratch("cli");
  const auto write = [&](const std::string& name, const json& j) {
    std::ofstream(dir / name) << j.dump();
    return (dir / name).string();
  };
  const auto good = write("good.json", small_learning("normal-gamma", "kaspe"));
  const auto bad = write("bad.json", {{"experiment", "normal-gamma"}, {"method", "kaspe"}, {"oops", 1}});
  auto other = small_learning("normal-gamma", "kaspe");
  other["n"] = 2000;
  const auto changed = write("changed.json", other);
  const std::string out = " --out " + (dir / "run").string();

  CHECK(run_cli("observe --config " + bad + out) == 2);
  CHECK(run_cli("observe --config " + (dir / "missing.json").string() + out) == 2);
  CHECK(run_cli("observe --config " + good + out) == 0);
  CHECK(run_cli("pilot --config " + good + out) == 0);
  CHECK(run_cli("generate --config " + changed + out) == 4);
  CHECK(run_cli("generate --config " + good + " --seed 5" + out) == 4);
  CHECK(run_cli("generate --config " + good + out) == 0);
  CHECK(run_cli("bogus --config " + good) == 2);

  auto tiny = small_learning("normal-gamma", "kaspe");
  tiny["kernel"] = {{"bandwidth", 1e-12}};
  const auto degenerate = write("degenerate.json", tiny);
  const std::string out2 = " --out " + (dir / "degenerate").string();
  CHECK(run_cli("run --config " + degenerate + out2) == 3);
}
