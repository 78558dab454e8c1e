#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "quasicausal/microdata.hpp"
#include "quasicausal/regress.hpp"

namespace quasicausal::quasi_exp {

using microdata::AnalysisSample;
using microdata::ControlSet;
using regress::FitResult;
using regress::Matrix;
using regress::Vector;

/// Exogenous regressors and absorbed factors implied by a control set.
///   none     : intercept only
///   baseline : parish, cohort and region x cohort FE
///   full     : baseline + family covariates x cohort and parish covariates x cohort
struct ControlDesign {
  Matrix exog;
  std::vector<std::string> names;
  regress::FeSpec fe;
};

ControlDesign control_design(const AnalysisSample& s, ControlSet controls);

/// Caller-supplied extra covariates (e.g. an inverse Mills ratio), one row per sample row.
struct ExtraControls {
  Matrix x;
  std::vector<std::string> names;
  bool empty() const { return x.cols() == 0; }
};

// --- mother fixed effects ------------------------------------------------------

/// Sibling comparison. Rows of mothers without within-mother treatment
/// variation are dropped before fitting; `none` absorbs only the mother FE,
/// `baseline`/`full` add the corresponding FE and interactions.
FitResult mother_fe(const AnalysisSample& s, ControlSet controls, const ExtraControls& extra = {});

/// Rows kept by mother_fe (mothers with treatment variation).
std::vector<std::size_t> mothers_with_variation(const AnalysisSample& s);

// --- difference in differences -------------------------------------------------

/// Coefficient on Post x intensity (named "post_x_intensity"). Parish and
/// cohort FE are always absorbed (`none` adds nothing else). Requires pre and
/// post cohorts; DesignError when the regressor is spanned by the FE.
FitResult did(const AnalysisSample& s, ControlSet controls, const ExtraControls& extra = {});

struct EventStudyResult {
  std::vector<int> cohorts;  // every cohort in the sample, ascending
  Vector coefficients;       // 0 for the reference cohorts
  Vector se;
  Vector lower, upper;       // 95% CI with t(G-1) critical value
  std::vector<bool> reference;
  regress::WaldTest pre_trend;  // joint test of the pre-period coefficients, F(q, G-1)
  // Same joint test calibrated by the wild cluster restricted bootstrap; the
  // F reference over-rejects with skewed residuals and few high-intensity parishes.
  std::optional<regress::WildWaldTest> pre_trend_wild;
  FitResult fit;
};

struct PreTrendBootstrap {
  int n_reps = 999;  // 0 skips the bootstrap
  std::uint64_t seed = 1;
};

/// Intensity x cohort interactions with 1790 and 1800 as references.
EventStudyResult event_study(const AnalysisSample& s, const microdata::DidIntensity& intensity,
                             ControlSet controls, std::pair<int, int> reference = {1790, 1800},
                             const PreTrendBootstrap& bootstrap = {});

// --- shift-share 2SLS ------------------------------------------------------------

struct ArConfidenceSet {
  double lower = 0.0, upper = 0.0;
  bool empty = false;
  bool open_lower = false, open_upper = false;  // accepted at the grid edge
  int grid_points = 401;
};

struct IvDiagnostics {
  double kp_f = 0.0;       // cluster-robust Wald F of the excluded instrument
  double ar_stat = 0.0;    // Anderson-Rubin F at beta0 = 0
  double ar_pvalue = 1.0;
  ArConfidenceSet ar_ci;
  bool weak_instrument = false;
  std::string warning;
  FitResult first_stage;
  FitResult reduced_form;
};

struct TslsResult {
  FitResult fit;  // second stage; first coefficient is "treated"
  IvDiagnostics diagnostics;
};

/// Just-identified 2SLS with the same absorption and controls in both stages.
/// Covariance is CR1 from structural residuals. A first-stage F below 1e-6
/// sets weak_instrument; an instrument with no variation left after
/// absorption raises IdentificationError.
TslsResult tsls(const AnalysisSample& s, ControlSet controls, const ExtraControls& extra = {});

/// 2SLS on a stacked G2/G3 sample (ancestor treatment and instrument).
TslsResult intergen_tsls(const AnalysisSample& stacked, ControlSet controls, const ExtraControls& extra = {});

/// Anderson-Rubin F and p-value at beta0 (regression of y - beta0 T on the instrument).
std::pair<double, double> anderson_rubin(const AnalysisSample& s, ControlSet controls, double beta0,
                                         const ExtraControls& extra = {});

// --- Heckman selection -----------------------------------------------------------

enum class OutcomeEstimator { ols, mother_fe, tsls };
OutcomeEstimator parse_outcome_estimator(const std::string& name);

struct HeckmanResult {
  FitResult selection;  // probit of "outcome observed"
  FitResult fit;        // outcome model on selected rows, with "imr"
  Vector imr;           // per selected row
  std::size_t n_selected = 0, n_total = 0;
};

/// Rye price (parish covariate) and birth month per sample row.
Matrix selection_predictors(const AnalysisSample& s, const std::vector<microdata::IndividualRecord>& records);

/// `s` must keep rows with missing outcomes (NaN): those are the non-selected.
/// Stage 1 probit of selection on cohort dummies and predictor x cohort
/// interactions; stage 2 runs `estimator` on selected rows with the inverse
/// Mills ratio as an extra control.
HeckmanResult heckman_correct(const AnalysisSample& s, const Matrix& predictors, OutcomeEstimator estimator,
                              ControlSet controls);

/// The uncorrected counterpart of the stage-2 fit.
FitResult run_outcome_estimator(const AnalysisSample& s, OutcomeEstimator estimator, ControlSet controls,
                                const ExtraControls& extra = {});

// --- small pieces ----------------------------------------------------------------

/// did_estimate / treated_share; DomainError unless share in (0, 1].
double indirect_least_squares(double did_estimate, double treated_share);

struct LeadResult {
  int lead = 0;
  double coefficient = 0.0;
  double se = 0.0;
  std::size_t n_obs = 0;
};

/// Reduced forms of the outcome on the k-cohort lead of the instrument,
/// estimated on cohorts in `window` (default: pre-vaccine cohorts). Lead 0 is
/// the ordinary reduced form on the same rows. Returns leads 0..n_leads.
std::vector<LeadResult> pretrend_leads(const AnalysisSample& s, const microdata::InstrumentTable& instrument,
                                       int n_leads = 5, ControlSet controls = ControlSet::baseline,
                                       std::pair<int, int> window = {1790, 1800});

/// Reduced form with instrument x (cointervention / its sample mean) and the
/// normalized cointervention main effect. Coefficients "instrument",
/// "instrument_x_<name>", "<name>".
FitResult cointervention_interactions(const AnalysisSample& s, const std::string& cointervention,
                                      ControlSet controls);

// --- serialization ---------------------------------------------------------------

nlohmann::json to_json(const FitResult& fit);
nlohmann::json to_json(const IvDiagnostics& d);
nlohmann::json to_json(const EventStudyResult& e);

}  // namespace quasicausal::quasi_exp
