// unlearn: experiment driver for SAE feature-clamping unlearning on a toy world.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "unlearn/common.hpp"
#include "unlearn/experiment.hpp"

namespace {

struct GlobalFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
  int threads = 0;
};

int run_stages(const GlobalFlags& g, const std::vector<unlearn::Stage>& stages) {
  unlearn::ExperimentConfig cfg;
  if (!g.config.empty()) cfg = unlearn::load_experiment_config(g.config);
  if (g.seed) cfg.seed = *g.seed;
  if (!g.out.empty()) cfg.out = g.out;
  if (g.threads > 0) unlearn::set_num_threads(g.threads);
  unlearn::Experiment exp(cfg, std::cerr);
  for (auto s : stages) exp.run(s, g.force);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unlearning by SAE feature clamping on a synthetic world"};
  app.require_subcommand(1);
  GlobalFlags g;
  app.add_option("--config", g.config, "experiment config (JSON)");
  app.add_option("--seed", g.seed, "global seed, overrides the config");
  app.add_option("--out", g.out, "output directory, overrides the config");
  app.add_flag("--force", g.force, "rerun stages even when up to date");
  app.add_option("--threads", g.threads, "worker threads (default: hardware concurrency)")->check(CLI::NonNegativeNumber);

  std::vector<unlearn::Stage> stages;
  for (auto s : unlearn::all_stages()) {
    auto* sub = app.add_subcommand(unlearn::stage_name(s), "run the " + unlearn::stage_name(s) + " stage");
    sub->fallthrough();
    sub->callback([&stages, s] { stages = {s}; });
  }
  auto* all = app.add_subcommand("run", "run every stage in dependency order");
  all->fallthrough();
  all->callback([&stages] { stages = unlearn::all_stages(); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    return run_stages(g, stages);
  } catch (const unlearn::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const unlearn::RuntimeError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
