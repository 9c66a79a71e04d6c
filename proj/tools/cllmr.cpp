// cllmr: runs one pipeline stage against a config file and an output directory.
//
//   cllmr prepare-data --config run.json
//   cllmr train --config run.json --out runs/a --seed 3
//   cllmr ablate --config run.json --variant wo_sse

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "cllmr/config.hpp"
#include "cllmr/http_transport.hpp"
#include "cllmr/pipeline.hpp"

namespace {

struct Flags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<double> alpha;
  std::string variant;
  bool force = false;
};

int run(cllmr::pipeline::Stage stage, const Flags& f) {
  using namespace cllmr;
  auto cfg = config::parse_config(f.config);
  if (f.seed) cfg.seed = *f.seed;
  if (f.alpha) cfg.inference.alpha = *f.alpha;
  config::validate(cfg);

  pipeline::RunOptions opt;
  opt.out = f.out.empty() ? cfg.resolve(cfg.output_dir) : std::filesystem::path(f.out);
  opt.force = f.force;
  if (!f.variant.empty()) opt.variant = f.variant;
  profiles::HttplibTransport transport;
  pipeline::run_stage(stage, cfg, opt, transport);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cllmr: counterfactual LLM-profile recommendation pipeline"};
  app.require_subcommand(1);
  Flags flags;
  std::optional<cllmr::pipeline::Stage> chosen;

  for (auto stage : cllmr::pipeline::all_stages()) {
    const std::string name = cllmr::pipeline::to_string(stage);
    auto* sub = app.add_subcommand(name, "run the " + name + " stage");
    sub->add_option("--config", flags.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", flags.out, "output directory (overrides output_dir)");
    sub->add_option("--seed", flags.seed, "master seed (overrides seed)");
    sub->add_flag("--force", flags.force, "rerun even when the stage manifest is up to date");
    if (stage == cllmr::pipeline::Stage::ablate)
      sub->add_option("--variant", flags.variant, "variant name or 'all'")->default_str("all");
    if (stage == cllmr::pipeline::Stage::evaluate || stage == cllmr::pipeline::Stage::ablate ||
        stage == cllmr::pipeline::Stage::sweep)
      sub->add_option("--alpha", flags.alpha, "counterfactual strength (overrides inference.alpha)");
    sub->callback([&chosen, stage] { chosen = stage; });
  }

  CLI11_PARSE(app, argc, argv);

  try {
    return run(*chosen, flags);
  } catch (const cllmr::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const cllmr::DependencyError& e) {
    std::cerr << "dependency error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
