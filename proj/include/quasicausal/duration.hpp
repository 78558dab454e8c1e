#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "quasicausal/microdata.hpp"
#include "quasicausal/regress.hpp"

namespace quasicausal::duration {

using regress::FitResult;
using regress::Matrix;
using regress::Vector;

enum class Ties { efron, breslow };
Ties parse_ties(const std::string& name);
std::string ties_name(Ties t);

/// Counting-process survival data: at risk on (entry, exit], event at exit.
struct SurvivalData {
  std::vector<double> entry, exit;
  std::vector<int> event;
  std::vector<std::int64_t> stratum;
  std::vector<std::int64_t> id;       // tiebreak for a deterministic row order
  std::vector<std::int64_t> cluster;  // empty: each id is its own cluster
  Matrix x;
  std::vector<std::string> names;

  std::size_t size() const { return exit.size(); }
  /// Copies timing and strata from spells; `x` falls back to spell covariates.
  static SurvivalData from_spells(const microdata::SpellTable& spells);
  SurvivalData subset(const std::vector<std::size_t>& rows) const;
};

struct CoxOptions {
  Ties ties = Ties::efron;
  int max_iterations = 100;
  double score_tolerance = 1e-8;  // on max |score|
  int max_halvings = 30;
  double divergence_bound = 30.0;  // |log HR| beyond this is treated as separation
};

/// Baseline cumulative hazard increments at x = 0, one entry per event time.
struct BaselineHazard {
  std::int64_t stratum = 0;
  std::vector<double> time;
  std::vector<double> increment;
};

struct CoxFit {
  std::vector<std::string> names;
  Vector coefficients;  // log hazard ratios
  Matrix vcov;          // cluster-robust (score-residual sandwich)
  Matrix naive_vcov;    // inverse information
  Vector score;         // at the solution
  double log_partial_likelihood = 0.0;
  Ties ties = Ties::efron;
  std::size_t n_obs = 0, n_events = 0, n_clusters = 0;
  std::size_t n_strata = 0, n_informative_strata = 0;
  int iterations = 0;
  std::vector<BaselineHazard> baseline;
  Vector covariate_means;
  double max_time = 0.0;  // last exit time with a subject at risk

  std::optional<int> index_of(const std::string& name) const;
  double coef(const std::string& name) const;
  double se(const std::string& name) const;
  double hazard_ratio(const std::string& name) const;
};

struct PartialLikelihood {
  double log_likelihood = 0.0;
  Vector score;
  Matrix information;
};

/// Log partial likelihood, analytic score and information at `beta`.
PartialLikelihood partial_likelihood(const SurvivalData& d, const Vector& beta, Ties ties = Ties::efron);

/// Newton-Raphson with step halving from beta = 0; converged when the max
/// abs score is below the tolerance. IdentificationError when a covariate
/// does not vary within any risk set; SeparationError when the likelihood is
/// monotone; ConvergenceError otherwise.
CoxFit cox_fit(const SurvivalData& d, const CoxOptions& options = {});

/// Cox fit with one baseline hazard per stratum (`strata` replaces d.stratum).
/// Strata without events or covariate variation contribute nothing; when no
/// stratum is informative an IdentificationError is raised.
CoxFit stratified_cox(SurvivalData d, const std::vector<std::int64_t>& strata, const CoxOptions& options = {});

// --- two-stage residual inclusion --------------------------------------------------

/// Variance-stabilized binary residuals
///   r = [A(y) - A(p)] / (p (1 - p))^(1/6),  A(u) = B(2/3, 2/3; u).
/// DomainError unless every p lies in (0, 1).
Vector anscombe_residuals(const Vector& y, const Vector& p);
/// Residuals of a logit fit evaluated on its full design matrix.
Vector anscombe_residuals(const FitResult& logit, const Matrix& design, const Vector& y);

struct TsriOptions {
  microdata::ControlSet controls = microdata::ControlSet::none;
  CoxOptions cox;
  /// Stage 1 (and hence the hazard model) uses G1 cohorts in this window,
  /// where the instrument moves vaccination.
  std::pair<int, int> cohorts{microdata::kFirstPostCohort, 1820};
  bool include_residual = true;  // false gives the naive Cox model on the same rows
};

struct TsriResult {
  CoxFit fit;              // "treated" (or per-cause terms), "residual", controls
  FitResult first_stage;   // logit of treatment on "instrument" and controls
  double first_stage_f = 0.0;
  std::size_t n_persons = 0;
  std::vector<int> causes;       // competing risks only
  std::vector<int> inestimable;  // causes without events
};

/// Stage 1 logit of treatment on the instrument and controls, stage 2 Cox
/// fit with the Anscombe residual as a covariate. Controls enter both
/// stages as dummies: baseline = parish and region x cohort, full adds
/// family and parish covariates. Clusters are parishes.
TsriResult tsri_hazard(const microdata::SpellTable& spells, const std::vector<microdata::IndividualRecord>& records,
                       const microdata::InstrumentTable& instrument, const TsriOptions& options = {});

/// Lunn-McNeil competing risks: baseline hazards stratified by cause (the
/// spell stratum), treatment interacted with each cause, the stage-1
/// residual shared. A spell table that is not cause-stacked is one cause and
/// reproduces tsri_hazard.
TsriResult competing_risks(const microdata::SpellTable& spells, const std::vector<microdata::IndividualRecord>& records,
                           const microdata::InstrumentTable& instrument, const TsriOptions& options = {});

// --- survival curves ---------------------------------------------------------------

/// Right-continuous step function S on [start, ...): S(start) = 1 and
/// value[k] holds on [time[k], time[k+1]).
struct StepSurvival {
  std::vector<double> time;
  std::vector<double> value;

  double at(double age) const;
  /// Exact integral of the step function over [lo, hi].
  double integral(double lo, double hi) const;
};

StepSurvival survival_steps(const CoxFit& fit, const Vector& profile, double start_age,
                            std::optional<std::int64_t> stratum = std::nullopt);

struct BandExpectancy {
  double lo = 0.0, hi = 0.0;
  double treated = 0.0, untreated = 0.0;
  double added = 0.0;
  bool extrapolated = false;  // band extends past the last observed risk set
};

struct SurvivalCurve {
  std::vector<double> age;
  std::vector<double> s_treated, s_untreated;
  std::vector<BandExpectancy> bands;
  BandExpectancy total;  // [start_age, 100]
};

inline constexpr double kMaxAge = 100.0;

/// Breslow baseline, S(a) = S0(a)^exp(x'beta) per arm, restricted means
/// per band capped at age 100 (exact step integrals).
SurvivalCurve survival_and_expectancy(const CoxFit& fit, const Vector& treated_profile,
                                      const Vector& untreated_profile, double start_age,
                                      const std::vector<std::pair<double, double>>& bands,
                                      std::optional<std::int64_t> stratum = std::nullopt);

/// Covariate means with the treatment column set to 1 and 0.
std::pair<Vector, Vector> arm_profiles(const CoxFit& fit, const std::string& treatment = "treated");

/// CSV with columns age, S_treated, S_untreated, added_band (the added
/// lifetime of the band containing the age; empty outside every band).
void write_survival_csv(const SurvivalCurve& curve, const std::string& path);

// --- sensitivity -------------------------------------------------------------------

struct EValue {
  double e_value = 1.0;
  double e_value_ci = 1.0;
};

/// Risk-ratio E-value with protective ratios inverted; the CI value uses
/// the bound nearer the null (1 when the interval covers it).
EValue e_value(double hazard_ratio, double ci_bound);

}  // namespace quasicausal::duration
