#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "quasicausal/errors.hpp"
#include "quasicausal/microdata.hpp"
#include "quasicausal/pipeline.hpp"

namespace {

using namespace quasicausal;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitEstimation = 4;

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::config: return kExitConfig;
    case ErrorKind::data: return kExitData;
    case ErrorKind::estimation: return kExitEstimation;
  }
  return kExitEstimation;
}

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> jobs;
};

void add_flags(CLI::App* app, Flags& f, bool config_required) {
  auto* c = app->add_option("--config", f.config, "run configuration (JSON)");
  if (config_required) c->required();
  app->add_option("--seed", f.seed, "run seed (also reseeds the simulation)");
  app->add_option("--out", f.out, "output directory");
  app->add_option("--jobs", f.jobs, "worker threads")->check(CLI::PositiveNumber);
}

pipeline::RunConfig resolve(const Flags& f) {
  auto config = pipeline::load_config(f.config);
  pipeline::apply_overrides(config, {f.seed, f.jobs, f.out});
  return config;
}

int report_counts(const char* what, const pipeline::EstimateOutput& out) {
  std::cout << what << ": " << out.n_ok << " ok, " << out.n_failed << " failed\n";
  return out.n_ok == 0 ? kExitEstimation : kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quasi-experimental causal inference pipeline"};
  app.require_subcommand(1);
  Flags f;
  auto* simulate = app.add_subcommand("simulate", "simulate a population and write individuals.csv, panel.csv, truth.json");
  auto* estimate = app.add_subcommand("estimate", "run the estimator grid and write report.json with plot series");
  auto* mediate = app.add_subcommand("mediate", "run the mediation grid and merge it into report.json");
  auto* report = app.add_subcommand("report", "summarize report.json and write report.csv");
  add_flags(simulate, f, true);
  add_flags(estimate, f, true);
  add_flags(mediate, f, true);
  add_flags(report, f, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (simulate->parsed()) {
      const auto s = pipeline::cmd_simulate(resolve(f));
      std::cout << "wrote " << s.output_dir << "/{individuals.csv,panel.csv,truth.json}\n";
      for (const char* k : {"n_g1", "n_g2", "n_g3", "g1_treated_share_post1801", "g1_deaths_observed",
                            "g1_migrants", "g1_excluded_late_vaccinated"})
        if (s.moments.count(k)) std::cout << "  " << k << " = " << microdata::format_double(s.moments.at(k)) << '\n';
      return kExitOk;
    }
    if (estimate->parsed()) return report_counts("estimate", pipeline::cmd_estimate(resolve(f)));
    if (mediate->parsed()) return report_counts("mediate", pipeline::cmd_mediate(resolve(f)));
    if (report->parsed()) {
      std::string dir;
      if (f.out) {
        dir = *f.out;
      } else if (!f.config.empty()) {
        dir = resolve(f).output_dir;
      } else {
        throw ConfigError("report needs --out or --config");
      }
      std::cout << pipeline::cmd_report(dir);
      return kExitOk;
    }
  } catch (const Error& e) {
    std::cerr << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitEstimation;
  }
  return kExitConfig;
}
