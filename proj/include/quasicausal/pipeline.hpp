#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "quasicausal/dgp.hpp"
#include "quasicausal/mediation.hpp"
#include "quasicausal/microdata.hpp"

namespace quasicausal::pipeline {

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr int kReportSchemaVersion = 1;

enum class Estimator {
  ols,
  mother_fe,
  did,
  event_study,
  tsls,
  intergen_tsls,
  heckman,
  pretrend_leads,
  cointervention,
  indirect_least_squares,
  cox,
  tsri,
  competing_risks,
  survival,
};
Estimator parse_estimator(const std::string& name);
std::string estimator_name(Estimator e);
const std::vector<Estimator>& all_estimators();

struct InputPaths {
  std::string individuals;
  std::string panel;
  nlohmann::json schema = nlohmann::json::object();  // SchemaConfig section
};

struct MediationConfig {
  std::vector<mediation::MediatorKind> mediators{
      mediation::MediatorKind::child_vaccination, mediation::MediatorKind::parental_occupation,
      mediation::MediatorKind::midwife_assisted, mediation::MediatorKind::epigenetic};
  std::vector<microdata::Outcome> outcomes{microdata::Outcome::years_lived, microdata::Outcome::literacy,
                                           microdata::Outcome::occupational_score};
  std::vector<microdata::Generation> generations{microdata::Generation::G2, microdata::Generation::G3};
  // Logit models carry FE as dummies, so baseline controls cost minutes per row.
  microdata::ControlSet controls = microdata::ControlSet::none;
  bool control_function = true;  // first-stage residual in both models
  int n_draws = 1000;
  int n_reps = 50;
};

/// One analysis run. Exactly one of `inputs` and `simulate` is set.
struct RunConfig {
  int schema_version = kConfigSchemaVersion;
  std::optional<InputPaths> inputs;
  std::optional<dgp::DgpParams> simulate;
  bool simulate_seed_explicit = false;  // simulate.seed given; otherwise the run seed drives the DGP

  std::vector<Estimator> estimators;
  std::vector<microdata::ControlSet> controls{microdata::ControlSet::none, microdata::ControlSet::baseline,
                                              microdata::ControlSet::full};
  std::vector<microdata::Outcome> outcomes{microdata::Outcome::years_lived};
  std::vector<microdata::Generation> generations{microdata::Generation::G1, microdata::Generation::G2,
                                                 microdata::Generation::G3};
  std::vector<std::string> cointerventions{"smallpox_death_rate"};
  int n_leads = 5;
  std::vector<std::pair<double, double>> survival_bands{{2, 10}, {10, 20}, {20, 40}, {40, 60}, {60, 100}};
  MediationConfig mediation;

  std::uint64_t seed = 1;
  int jobs = 1;
  std::string output_dir = "out";

  /// ConfigError for unknown keys, a wrong schema version or bad values.
  static RunConfig from_json(const nlohmann::json& j);
  /// Canonical form embedded in reports (output_dir and jobs excluded).
  nlohmann::json to_json() const;
  /// DGP parameters with the seed rule applied.
  dgp::DgpParams dgp_params() const;
};

RunConfig load_config(const std::string& path);

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::optional<std::string> output_dir;
};
/// Flags win over config scalars; a seed override also reseeds the DGP.
void apply_overrides(RunConfig& config, const Overrides& o);

struct RunData {
  std::vector<microdata::IndividualRecord> records;
  std::vector<microdata::PanelContext> panel;
  std::string source;  // "simulate" or "inputs"
  std::map<std::string, double> moments;  // simulated runs only
};

/// Simulates in memory or loads and validates the input files.
RunData acquire_data(const RunConfig& config);

struct SimulateSummary {
  std::string output_dir;
  std::map<std::string, double> moments;
};
/// Writes individuals.csv, panel.csv and truth.json. ConfigError without a simulate block.
SimulateSummary cmd_simulate(const RunConfig& config);

struct EstimateOutput {
  nlohmann::json report;
  std::size_t n_ok = 0, n_failed = 0;
};

/// Runs the estimator x generation x outcome x control-set grid. Failed cells
/// are recorded with their error and the run continues. Writes report.json,
/// event_study.csv and survival.csv (when those estimators run) to the output
/// directory.
EstimateOutput cmd_estimate(const RunConfig& config, const RunData& data);
EstimateOutput cmd_estimate(const RunConfig& config);

/// Mediation rows keyed "<generation>/<outcome>/<mediator>", merged into
/// report.json under "mediation" (other sections are kept).
EstimateOutput cmd_mediate(const RunConfig& config, const RunData& data);
EstimateOutput cmd_mediate(const RunConfig& config);

/// Flattened cell table (report.csv) and a text summary from report.json.
/// IoError when the report is missing, SchemaError on a version mismatch.
std::string cmd_report(const std::string& output_dir);

/// Stable JSON text used for every report file.
std::string dump_report(const nlohmann::json& report);

}  // namespace quasicausal::pipeline
