#include "greenlab/harness.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>

using namespace greenlab;

namespace {

struct Common {
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  int threads = 0;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* threads_opt = nullptr;
  CLI::Option* out_opt = nullptr;
};

void add_common(CLI::App& app, Common& c) {
  app.add_option("--config", c.config, "TOML experiment config")->envname("GREENLAB_CONFIG")->check(CLI::ExistingFile);
  c.out_opt = app.add_option("--out", c.out, "output directory")->envname("GREENLAB_OUT");
  c.seed_opt = app.add_option("--seed", c.seed, "RNG seed")->envname("GREENLAB_SEED");
  c.threads_opt = app.add_option("--threads", c.threads, "worker threads")->envname("GREENLAB_THREADS")->check(CLI::PositiveNumber);
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
  if (c.out_opt->count()) cfg.out = c.out;
  if (c.seed_opt->count()) cfg.seed = c.seed;
  if (c.threads_opt->count()) cfg.threads = c.threads;
  return cfg;
}

// keeps only the requested stage; the space stage always runs
void only(ExperimentConfig& cfg, Stage st) {
  cfg.heat.enabled = st == Stage::Heat;
  cfg.green.enabled = st == Stage::Green;
  cfg.maximal.enabled = st == Stage::Maximal;
  cfg.flow.enabled = st == Stage::Flow;
  cfg.transport.enabled = st == Stage::Transport;
  cfg.dimension.enabled = st == Stage::Dimension;
}

int run(const ExperimentConfig& cfg, const std::vector<std::string>& plots) {
  auto bundle = run_experiment(cfg);
  auto files = write_bundle(bundle, cfg.out);
  for (const auto& name : plots) {
    std::string text = emit_plot_data(bundle, name);
    write_file(std::filesystem::path(cfg.out) / (name + ".dat"), text);
  }
  std::size_t failed = 0;
  for (const auto& c : bundle.checks)
    if (!c.pass) {
      ++failed;
      std::cout << "FAIL " << c.stage << "." << c.id << " = " << format_number(c.value) << " not in ["
                << format_number(c.lo) << ", " << format_number(c.hi) << "] (" << c.anchor << ")\n";
    }
  for (const auto& f : bundle.failures)
    std::cout << "ERROR " << f.stage << " [" << f.kind << "] " << f.message << " (" << f.anchor << ")\n";
  std::cout << bundle.checks.size() - failed << "/" << bundle.checks.size() << " checks passed, "
            << bundle.failures.size() << " errors; wrote " << files.size() << " files to " << cfg.out << "\n";
  return bundle.passed() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"greenlab: Green functions, flows and transport on metric measure spaces"};
  app.require_subcommand(1);

  auto* space = app.add_subcommand("space", "metric measure spaces");
  auto* space_build = space->add_subcommand("build", "build the space and report its volume profile");
  space->require_subcommand(1);

  auto* verify = app.add_subcommand("verify", "run one verification stage");
  verify->require_subcommand(1);
  auto* v_heat = verify->add_subcommand("heat", "heat kernel checks");
  auto* v_green = verify->add_subcommand("green", "Green function checks");
  auto* v_max = verify->add_subcommand("maximal", "maximal function checks");

  auto* flow = app.add_subcommand("flow", "regular Lagrangian flows");
  flow->require_subcommand(1);
  auto* flow_run = flow->add_subcommand("run", "integrate the configured field and run the flow checks");

  auto* transport = app.add_subcommand("transport", "optimal transport");
  transport->require_subcommand(1);
  auto* t_geo = transport->add_subcommand("geodesic", "W2 plans, geodesics and entropy convexity");

  auto* dimension = app.add_subcommand("dimension", "dimension estimation");
  dimension->require_subcommand(1);
  auto* d_scan = dimension->add_subcommand("scan", "estimate the dimension and check its constancy");

  auto* report = app.add_subcommand("report", "full pipeline");
  report->require_subcommand(1);
  auto* r_emit = report->add_subcommand("emit", "run every enabled stage and write the report bundle");
  std::vector<std::string> plots;
  r_emit->add_option("--plot", plots, "also check that these plot series exist");

  std::vector<std::pair<CLI::App*, std::optional<Stage>>> leaves{
      {space_build, Stage::Space}, {v_heat, Stage::Heat},          {v_green, Stage::Green},
      {v_max, Stage::Maximal},     {flow_run, Stage::Flow},        {t_geo, Stage::Transport},
      {d_scan, Stage::Dimension},  {r_emit, std::nullopt}};
  std::vector<Common> common(leaves.size());
  for (std::size_t i = 0; i < leaves.size(); ++i) add_common(*leaves[i].first, common[i]);

  CLI11_PARSE(app, argc, argv);

  try {
    for (std::size_t i = 0; i < leaves.size(); ++i) {
      if (!leaves[i].first->parsed()) continue;
      ExperimentConfig cfg = resolve(common[i]);
      if (leaves[i].second) only(cfg, *leaves[i].second);
      return run(cfg, plots);
    }
  } catch (const Error& e) {
    std::cerr << "greenlab: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
