#include <cstdint>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "kaspe/errors.hpp"
#include "kaspe/pipeline.hpp"

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Kernel-adaptive synthetic posterior estimation experiments"};
  app.require_subcommand(1);

  const std::map<std::string, std::pair<std::string, std::function<void(const kaspe::RunConfig&)>>>
      commands{
          {"observe", {"simulate the observed data set", kaspe::cmd_observe}},
          {"pilot", {"select the kernel bandwidth from a pilot run", kaspe::cmd_pilot}},
          {"generate", {"generate kernel-weighted synthetic training data", kaspe::cmd_generate}},
          {"train", {"train the mixture density network", kaspe::cmd_train}},
          {"estimate", {"evaluate the trained network at the observed summary", kaspe::cmd_estimate}},
          {"abc", {"run parallel-tempering ABC-MCMC and a KDE", kaspe::cmd_abc}},
          {"evaluate", {"compare the estimate grid against the oracle", kaspe::cmd_evaluate}},
          {"run", {"run every stage of the configured method", kaspe::cmd_run}},
          {"replicate", {"run all cells and replications", kaspe::cmd_replicate}},
      };

  Options opt;
  std::function<void(const kaspe::RunConfig&)> action;
  for (const auto& [name, entry] : commands) {
    auto* sub = app.add_subcommand(name, entry.first);
    sub->add_option("--config", opt.config, "JSON run configuration")->required();
    sub->add_option("--seed", opt.seed, "override the configured seed");
    sub->add_option("--out", opt.out, "override the output directory");
    sub->callback([&action, fn = entry.second] { action = fn; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    kaspe::RunConfig cfg = kaspe::load_run_config(opt.config);
    if (opt.seed) cfg.seed = *opt.seed;
    if (opt.out) cfg.output_dir = *opt.out;
    action(cfg);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kaspe::exit_code_for(e);
  }
  return 0;
}
