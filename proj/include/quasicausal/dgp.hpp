#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "quasicausal/microdata.hpp"

namespace quasicausal::dgp {

enum class MortalityMode {
  additive,      // years lived = baseline + planted effect (linear estimators)
  proportional,  // cause-specific Gompertz hazards with planted hazard ratios
};

struct HazardParams {
  double gompertz_shape = 0.35;       // b in lambda * exp(b * age)
  double gompertz_level = 1.6e-7;     // lambda, G1 (conditional on age 2)
  double offspring_shape = 0.5;       // G2/G3 baseline from birth
  double offspring_level = 4.7e-11;
  double smallpox_share = 0.3;        // share of baseline hazard due to smallpox
  double hr_smallpox = 0.03;          // proportional mode
  double hr_other = 0.33;
  /// Log-hazard loading of the individual confounder in proportional mode.
  double confounder_log_hazard = 0.0;

  bool operator==(const HazardParams&) const = default;
};

struct SelectionParams {
  double base_index = -1.0;        // probit index of out-migration at mean prices
  double rye_coefficient = 0.0;    // per sd of the parish-cohort rye price
  double month_coefficient = 0.0;  // per unit of (month - 6.5) / 3.5
  double error_correlation = 0.0;  // corr(selection error, outcome error)
  double outcome_error_sd = 1.5;
  /// Extra uptake per sd of rye price after 1801 (makes selection bias the treatment).
  double rye_uptake_coupling = 0.0;

  bool operator==(const SelectionParams&) const = default;
};

struct MediatorParams {
  double child_vaccination_base = 0.40;
  double child_vaccination_transmission_g2 = 0.30;
  double child_vaccination_transmission_g3 = 0.25;
  double child_vaccination_effect = 3.0;  // years per vaccinated childhood
  double occupation_transmission = 0.02;  // years per parental occupation point
  double epigenetic_effect_g2 = 0.3;      // mean shift of the mother component per vaccinated ancestor
  double epigenetic_effect_g3 = 0.0;
  double epigenetic_variance = 1.0;       // variance of the mother-level component

  bool operator==(const MediatorParams&) const = default;
};

struct NoiseSds {
  double years = 1.0;          // normal noise added to the Gompertz baseline
  double occupation = 8.0;
  double parish_effect = 1.5;  // parish fixed effect on years
  double cohort_effect = 1.0;
  double region_cohort_effect = 0.5;

  bool operator==(const NoiseSds&) const = default;
};

struct DgpParams {
  std::uint64_t seed = 20240601;
  int n_parishes = 70;
  int n_regions = 6;
  int n_families_per_parish = 330;
  int max_children_per_family = 4;
  std::pair<int, int> cohort_window{1790, 1820};

  double zero_personnel_share = 0.4;
  std::pair<double, double> personnel_base{1.0, 12.0};
  double personnel_jitter = 0.15;      // relative yearly noise
  double personnel_bump_max = 3.0;     // extra personnel from 1806 on
  double pre_shift_max = 0.06;
  double post_shift_level = 0.6;
  std::map<int, double> shock_years{{1805, 1.9}, {1815, 2.1}};

  double first_stage_slope = 0.15;
  double baseline_uptake = 0.27;
  double late_vaccination_share = 0.03;  // vaccinated after age 2 (excluded)
  double family_uptake_loading = 0.05;   // uptake shift per unit family confounder
  double family_outcome_loading = 1.0;   // years per unit family confounder
  double confounder_uptake_loading = 0.0;  // individual confounder, proportional mode

  double true_effect_years_g1 = 11.0;
  double true_effect_years_g2 = 2.2;
  double true_effect_years_g3 = 1.1;
  double true_effect_occscore_g1 = 3.0;

  double offspring_share = 0.37;
  double pair_share = 0.2;  // G2 families with two G1 parents
  int max_offspring = 5;

  double pretrend_slope = 0.0;         // years per cohort x intensity, 1790-1799
  double anticipation_lead1 = 0.0;     // years per unit of next-cohort instrument, pre-1801
  double epidemic_amplification = 0.0;  // years per treated x normalized smallpox death rate

  MortalityMode mortality = MortalityMode::additive;
  HazardParams hazard;
  SelectionParams selection;
  MediatorParams mediator;
  NoiseSds noise;

  /// ParameterError naming the first invalid field.
  void validate() const;
  bool operator==(const DgpParams&) const = default;
};

/// Vaccination probability of a G1 child. Zero before the first post cohort;
/// linear and weakly increasing in the instrument, clamped to [0, 1].
double vaccination_probability(const DgpParams& p, int cohort, double instrument, double family_factor,
                               double rye_sd_units, double confounder);

nlohmann::json to_json(const DgpParams& p);
/// Unknown keys are rejected (ConfigError); missing keys keep defaults.
DgpParams params_from_json(const nlohmann::json& j);

struct PotentialOutcome {
  std::int64_t id = 0;
  double y_untreated = 0.0;  // years lived with treatment (or ancestors' treatment) off
  double y_treated = 0.0;    // switched on; per ancestor for G2/G3
};

struct GroundTruth {
  DgpParams params;
  std::vector<PotentialOutcome> potential;  // additive mode, one per record with an outcome
  std::map<std::string, double> moments;
};

struct Population {
  std::vector<microdata::IndividualRecord> records;
  std::vector<microdata::PanelContext> panel;
  GroundTruth truth;
};

/// Deterministic in params.seed. Records come back with treatment constructed.
Population simulate_population(const DgpParams& params, int jobs = 1);

nlohmann::json truth_to_json(const GroundTruth& truth);

/// individuals.csv, panel.csv and truth.json in out_dir (created if needed).
void write_population(const Population& pop, const std::string& out_dir);

}  // namespace quasicausal::dgp
