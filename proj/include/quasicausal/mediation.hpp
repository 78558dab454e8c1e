#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "quasicausal/microdata.hpp"
#include "quasicausal/regress.hpp"

namespace quasicausal::mediation {

using regress::FitResult;
using regress::Matrix;
using regress::Vector;

enum class Link { linear, logit };
Link parse_link(const std::string& name);
std::string link_name(Link l);

enum class MediatorKind { child_vaccination, parental_occupation, midwife_assisted, epigenetic };
MediatorKind parse_mediator(const std::string& name);
std::string mediator_name(MediatorKind m);
/// Logit for the binary mediators, linear for the continuous ones.
Link default_link(MediatorKind m);

// --- epigenetic mediator -------------------------------------------------------------

struct EpigeneticMediator {
  std::vector<double> values;  // per sample row: shrunken mother component, mean 0
  std::vector<double> raw;     // per sample row: unshrunken mother mean residual, mean 0
  double mother_variance = 0.0;    // between-mother variance component (>= 0)
  double residual_variance = 0.0;  // within-mother residual variance
  std::size_t n_mothers = 0;
  std::size_t n_multi_child_mothers = 0;
};

/// Mother fixed-effects fit of the outcome on sex and child-cohort dummies,
/// one row per child (stacked duplicates collapse). The mother component is
/// the mother's mean residual shrunk by sigma_u^2 / (sigma_u^2 + sigma_e^2 / k)
/// with ANOVA variance components; siblings share one value.
/// IdentificationError when no mother has two children.
EpigeneticMediator build_epigenetic_mediator(const microdata::AnalysisSample& s);

/// Mediator column aligned with the sample rows; NaN where the record has no
/// value. `epigenetic` is used for MediatorKind::epigenetic.
std::vector<double> mediator_values(const microdata::AnalysisSample& s,
                                    const std::vector<microdata::IndividualRecord>& records, MediatorKind kind,
                                    const EpigeneticMediator* epigenetic = nullptr);

// --- decomposition -------------------------------------------------------------------

struct MediationData {
  Vector outcome, treatment, mediator;
  Matrix controls;  // explicit covariates; an intercept is added when `fe` is empty
  std::vector<std::string> control_names;
  regress::FeSpec fe;  // absorbed in linear models, dummy columns in logit models
  Vector instrument;   // empty: no first-stage residual term
  regress::ClusterIds cluster;

  std::size_t size() const { return static_cast<std::size_t>(outcome.size()); }
  /// Rows may repeat; `cluster` is replaced when given.
  MediationData subset(const std::vector<std::size_t>& rows, const regress::ClusterIds* cluster = nullptr) const;
};

/// Rows with a finite mediator and outcome; controls follow the quasi-experimental
/// control sets. With `first_stage_residual` the instrument is carried along.
MediationData mediation_data(const microdata::AnalysisSample& s, const std::vector<double>& mediator,
                             microdata::ControlSet controls, bool first_stage_residual);

struct MediationOptions {
  Link outcome_link = Link::linear;
  Link mediator_link = Link::linear;
  int n_draws = 1000;
  int n_reps = 200;  // 0 disables the bootstrap
  std::uint64_t seed = 1;
  int jobs = 1;
};

struct Effect {
  double estimate = 0.0;                      // mean over quasi-Bayesian draws
  double draw_lower = 0.0, draw_upper = 0.0;  // 2.5 / 97.5 percentiles of the draws
  double se = 0.0;                            // cluster bootstrap (NaN without replicates)
  double lower = 0.0, upper = 0.0;            // bootstrap percentile interval
};

struct MediationResult {
  Effect nde, nie, total;   // total = NDE + NIE per draw
  Effect total_regression;  // treatment effect of the model without the mediator
  double decomposition_gap = 0.0;     // nde + nie - total_regression (point estimates)
  double decomposition_gap_se = 0.0;  // bootstrap
  bool decomposition_consistent = true;  // |gap| <= 3 SE (or exact when no bootstrap)
  FitResult mediator_fit, outcome_fit, total_fit;
  int n_draws = 0, n_reps = 0, n_failed_reps = 0;
  std::size_t n_obs = 0, n_clusters = 0;
  std::vector<std::string> warnings;
};

/// Mediator model M ~ T (+ residual) + controls and outcome model
/// Y ~ T + M (+ residual) + controls, each linear or logit with cluster-robust
/// covariance. Parameters are drawn from their asymptotic normal laws and
///   NDE = E[Y(1, M(0)) - Y(0, M(0))],  NIE = E[Y(1, M(1)) - Y(1, M(0))]
/// are averaged over the sample rows per draw. The cluster bootstrap
/// re-estimates every stage (first stage included) per replicate and
/// evaluates the effects at the replicate's point estimates.
MediationResult mediate(const MediationData& data, const MediationOptions& options = {});

nlohmann::json to_json(const Effect& e);
nlohmann::json to_json(const MediationResult& r);

}  // namespace quasicausal::mediation
