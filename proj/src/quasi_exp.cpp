#include "quasicausal/quasi_exp.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <unordered_map>

#include "quasicausal/errors.hpp"
#include "quasicausal/stats.hpp"

namespace quasicausal::quasi_exp {

using microdata::kFamilyCovariateNames;
using microdata::kParishCovariateNames;

namespace {

/// Column block x_k * 1[cohort == c] for every cohort level.
void append_cohort_interactions(const Matrix& x, const std::vector<std::string>& x_names,
                                const std::vector<std::int64_t>& cohort, Matrix& out,
                                std::vector<std::string>& names) {
  std::vector<std::string> levels;
  const Matrix d = regress::dummy_columns(cohort, false, &levels, "");
  const Eigen::Index base = out.cols();
  out.conservativeResize(x.rows(), base + x.cols() * d.cols());
  Eigen::Index c = base;
  for (Eigen::Index k = 0; k < x.cols(); ++k)
    for (Eigen::Index l = 0; l < d.cols(); ++l, ++c) {
      out.col(c) = x.col(k).cwiseProduct(d.col(l));
      names.push_back(x_names[static_cast<std::size_t>(k)] + "_x_c" + levels[static_cast<std::size_t>(l)]);
    }
}

enum class FeMode { controls, two_way, mother };

ControlDesign make_controls(const AnalysisSample& s, ControlSet controls, FeMode mode) {
  ControlDesign d;
  const auto n = static_cast<Eigen::Index>(s.size());
  d.exog.resize(n, 0);
  const bool rich = controls != ControlSet::none;
  if (mode == FeMode::mother) d.fe.factors.push_back({"mother", s.mother});
  if (rich || mode == FeMode::two_way) {
    d.fe.factors.push_back({"parish", s.parish});
    d.fe.factors.push_back({"cohort", s.cohort});
  }
  if (rich) d.fe.factors.push_back({"region_cohort", s.region_cohort});
  if (d.fe.empty()) {
    d.exog = Matrix::Ones(n, 1);
    d.names.push_back("intercept");
  }
  if (controls == ControlSet::full) {
    std::vector<std::string> fam{"male"};
    for (const char* c : kFamilyCovariateNames) fam.emplace_back(c);
    append_cohort_interactions(s.family_x, fam, s.cohort, d.exog, d.names);
    const std::vector<std::string> par(kParishCovariateNames.begin(), kParishCovariateNames.end());
    append_cohort_interactions(s.parish_x, par, s.cohort, d.exog, d.names);
  }
  return d;
}

void require_outcomes(const AnalysisSample& s) {
  if (s.size() == 0) throw EstimationError("empty estimation sample");
  if (!s.outcome.allFinite())
    throw EstimationError("sample contains missing outcomes; subset to observed rows first");
}

/// [primary | controls | extra] after absorbing the control FE, plus the
/// demeaned outcome and per-column spanned flags.
struct Prepared {
  Matrix x;
  std::vector<std::string> names;
  Eigen::Index n_primary = 0;
  std::vector<bool> spanned;
  Matrix ys;  // demeaned dependent variables, one per column
  regress::FeSpec fe;
};

Prepared prepare(const AnalysisSample& s, const Matrix& primary, const std::vector<std::string>& primary_names,
                 const Matrix& dependents, ControlSet controls, FeMode mode, const ExtraControls& extra) {
  if (!extra.empty() && extra.x.rows() != static_cast<Eigen::Index>(s.size()))
    throw EstimationError("extra controls must have one row per sample row");
  auto cd = make_controls(s, controls, mode);
  Prepared p;
  const auto n = static_cast<Eigen::Index>(s.size());
  p.n_primary = primary.cols();
  p.x.resize(n, primary.cols() + cd.exog.cols() + extra.x.cols());
  p.x << primary, cd.exog, extra.x;
  p.names = primary_names;
  p.names.insert(p.names.end(), cd.names.begin(), cd.names.end());
  p.names.insert(p.names.end(), extra.names.begin(), extra.names.end());
  p.fe = std::move(cd.fe);
  p.spanned.assign(static_cast<std::size_t>(p.x.cols()), false);
  p.ys = dependents;
  if (p.fe.empty()) return p;
  const regress::FeProjector proj(p.fe, static_cast<std::size_t>(n));
  for (Eigen::Index j = 0; j < p.ys.cols(); ++j) proj.demean(p.ys.col(j));
  const double tol = proj.options().spanned_tolerance;
  for (Eigen::Index j = 0; j < p.x.cols(); ++j) {
    const double raw = p.x.col(j).norm();
    proj.demean(p.x.col(j));
    if (p.x.col(j).norm() <= tol * raw) {
      p.x.col(j).setZero();
      p.spanned[static_cast<std::size_t>(j)] = true;
    }
  }
  return p;
}

bool primary_identified(const Prepared& p, Eigen::Index j) {
  if (p.spanned[static_cast<std::size_t>(j)] || p.x.col(j).squaredNorm() == 0.0) return false;
  return true;
}

FitResult fit_prepared(const Prepared& p, Eigen::Index dep, const std::vector<std::int64_t>& clusters) {
  return regress::ols(p.x, p.ys.col(dep), clusters, p.names);
}

std::vector<std::size_t> rows_where(std::size_t n, const std::function<bool(std::size_t)>& keep) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < n; ++i)
    if (keep(i)) rows.push_back(i);
  return rows;
}

Matrix column(const Vector& v) { return Matrix(v); }

}  // namespace

ControlDesign control_design(const AnalysisSample& s, ControlSet controls) {
  return make_controls(s, controls, FeMode::controls);
}

// --- mother FE -------------------------------------------------------------------

std::vector<std::size_t> mothers_with_variation(const AnalysisSample& s) {
  std::unordered_map<std::int64_t, std::pair<double, double>> range;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double t = s.treatment[static_cast<Eigen::Index>(i)];
    auto [it, fresh] = range.try_emplace(s.mother[i], t, t);
    if (!fresh) {
      it->second.first = std::min(it->second.first, t);
      it->second.second = std::max(it->second.second, t);
    }
  }
  return rows_where(s.size(), [&](std::size_t i) {
    const auto& r = range.at(s.mother[i]);
    return r.first != r.second;
  });
}

FitResult mother_fe(const AnalysisSample& s, ControlSet controls, const ExtraControls& extra) {
  require_outcomes(s);
  const auto rows = mothers_with_variation(s);
  if (rows.empty()) throw IdentificationError("mother_fe: no mother has within-family treatment variation");
  const auto sub = s.subset(rows);
  ExtraControls ex;
  if (!extra.empty()) {
    ex.names = extra.names;
    ex.x.resize(static_cast<Eigen::Index>(rows.size()), extra.x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i)
      ex.x.row(static_cast<Eigen::Index>(i)) = extra.x.row(static_cast<Eigen::Index>(rows[i]));
  }
  const auto p = prepare(sub, column(sub.treatment), {"treated"}, column(sub.outcome), controls, FeMode::mother, ex);
  if (!primary_identified(p, 0)) throw IdentificationError("mother_fe: treatment absorbed by the fixed effects");
  return fit_prepared(p, 0, sub.cluster);
}

// --- DID ---------------------------------------------------------------------------

namespace {

void require_pre_post(const AnalysisSample& s, const char* what) {
  bool pre = false, post = false;
  for (auto c : s.cohort) (microdata::is_post(static_cast<int>(c)) ? post : pre) = true;
  if (!pre) throw DesignError(std::string(what) + ": no pre-period cohorts");
  if (!post) throw DesignError(std::string(what) + ": no post-period cohorts");
}

}  // namespace

FitResult did(const AnalysisSample& s, ControlSet controls, const ExtraControls& extra) {
  require_outcomes(s);
  require_pre_post(s, "did");
  const auto p = prepare(s, column(s.did_regressor), {"post_x_intensity"}, column(s.outcome), controls,
                         FeMode::two_way, extra);
  if (!primary_identified(p, 0))
    throw DesignError("did: Post x intensity is collinear with the fixed effects (no intensity variation)");
  auto fit = fit_prepared(p, 0, s.cluster);
  if (!fit.index_of("post_x_intensity"))
    throw DesignError("did: Post x intensity is collinear with the controls");
  return fit;
}

EventStudyResult event_study(const AnalysisSample& s, const microdata::DidIntensity& intensity,
                             ControlSet controls, std::pair<int, int> reference,
                             const PreTrendBootstrap& bootstrap) {
  require_outcomes(s);
  require_pre_post(s, "event_study");
  EventStudyResult out;
  std::set<int> levels;
  for (auto c : s.cohort) levels.insert(static_cast<int>(c));
  out.cohorts.assign(levels.begin(), levels.end());
  const auto n_pre = std::count_if(out.cohorts.begin(), out.cohorts.end(),
                                   [](int c) { return !microdata::is_post(c); });
  if (n_pre < 3) throw DesignError("event_study: fewer than 3 pre-period cohorts");

  Vector c_p(static_cast<Eigen::Index>(s.size()));
  for (std::size_t i = 0; i < s.size(); ++i) c_p[static_cast<Eigen::Index>(i)] = intensity.at(s.parish[i]);

  std::vector<int> est_cohorts;
  std::vector<std::string> names;
  for (int c : out.cohorts) {
    const bool ref = c == reference.first || c == reference.second;
    out.reference.push_back(ref);
    if (ref) continue;
    est_cohorts.push_back(c);
    names.push_back("intensity_x_c" + std::to_string(c));
  }
  Matrix primary = Matrix::Zero(static_cast<Eigen::Index>(s.size()), static_cast<Eigen::Index>(est_cohorts.size()));
  std::map<int, Eigen::Index> col;
  for (std::size_t k = 0; k < est_cohorts.size(); ++k) col[est_cohorts[k]] = static_cast<Eigen::Index>(k);
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto it = col.find(static_cast<int>(s.cohort[i]));
    if (it != col.end()) primary(static_cast<Eigen::Index>(i), it->second) = c_p[static_cast<Eigen::Index>(i)];
  }
  const auto p = prepare(s, primary, names, column(s.outcome), controls, FeMode::two_way, {});
  for (Eigen::Index j = 0; j < p.n_primary; ++j)
    if (!primary_identified(p, j))
      throw DesignError("event_study: " + names[static_cast<std::size_t>(j)] + " is collinear with the fixed effects");
  out.fit = fit_prepared(p, 0, s.cluster);

  const auto k = static_cast<Eigen::Index>(out.cohorts.size());
  out.coefficients = Vector::Zero(k);
  out.se = Vector::Zero(k);
  out.lower = Vector::Zero(k);
  out.upper = Vector::Zero(k);
  const double df = static_cast<double>(out.fit.n_clusters) - 1.0;
  const double crit = stats::t_quantile(0.975, df);
  std::vector<int> pre_idx, pre_design_idx;
  for (Eigen::Index j = 0; j < k; ++j) {
    if (out.reference[static_cast<std::size_t>(j)]) continue;
    const int c = out.cohorts[static_cast<std::size_t>(j)];
    const auto idx = out.fit.index_of("intensity_x_c" + std::to_string(c));
    if (!idx) throw DesignError("event_study: cohort " + std::to_string(c) + " interaction not estimable");
    out.coefficients[j] = out.fit.coefficients[*idx];
    out.se[j] = std::sqrt(out.fit.vcov(*idx, *idx));
    out.lower[j] = out.coefficients[j] - crit * out.se[j];
    out.upper[j] = out.coefficients[j] + crit * out.se[j];
    if (!microdata::is_post(c)) {
      pre_idx.push_back(*idx);
      pre_design_idx.push_back(static_cast<int>(col.at(c)));  // primary columns lead the design
    }
  }
  if (!pre_idx.empty()) {
    out.pre_trend = regress::wald_test(out.fit, pre_idx);
    if (bootstrap.n_reps > 0)
      out.pre_trend_wild =
          regress::wild_cluster_wald(p.x, p.ys.col(0), s.cluster, pre_design_idx, bootstrap.n_reps, bootstrap.seed);
  }
  return out;
}

// --- 2SLS --------------------------------------------------------------------------

namespace {

/// Per-cluster sums of w_i * v_i.
Vector cluster_sums(const Vector& w, const Vector& v, const std::vector<int>& dense, int g) {
  Vector out = Vector::Zero(g);
  for (Eigen::Index i = 0; i < w.size(); ++i) out[dense[static_cast<std::size_t>(i)]] += w[i] * v[i];
  return out;
}

std::vector<int> dense_ids(const std::vector<std::int64_t>& clusters, int* g) {
  std::map<std::int64_t, int> ids;
  for (auto c : clusters) ids.emplace(c, 0);
  int k = 0;
  for (auto& [c, v] : ids) v = k++;
  *g = k;
  std::vector<int> out;
  out.reserve(clusters.size());
  for (auto c : clusters) out.push_back(ids.at(c));
  return out;
}

/// Anderson-Rubin statistic as a function of beta0, exploiting linearity of
/// the reduced form of (y - beta0 T) in beta0.
struct ArFunction {
  double c_rf = 0.0, c_fs = 0.0;
  Vector a, b;  // cluster sums of w * e_rf and w * e_fs
  double scale = 1.0;
  double df2 = 1.0;

  double stat(double beta0) const {
    const double c = c_rf - beta0 * c_fs;
    const double v = scale * (a - beta0 * b).squaredNorm();
    if (v <= 0.0) return c == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return c * c / v;
  }
  double pvalue(double beta0) const { return stats::f_sf(stat(beta0), 1.0, df2); }
};

}  // namespace

TslsResult tsls(const AnalysisSample& s, ControlSet controls, const ExtraControls& extra) {
  require_outcomes(s);
  Matrix deps(static_cast<Eigen::Index>(s.size()), 2);
  deps << s.outcome, s.treatment;
  const auto p = prepare(s, column(s.instrument), {"instrument"}, deps, controls, FeMode::controls, extra);
  if (!primary_identified(p, 0))
    throw IdentificationError("tsls: instrument has no variation after absorbing the fixed effects");

  // controls that survive alongside the instrument (same set in every stage)
  const auto sel = regress::select_independent_columns(p.x);
  if (sel.kept.empty() || sel.kept.front() != 0)
    throw IdentificationError("tsls: instrument is collinear with the controls");
  const auto n = p.x.rows();
  const auto k = static_cast<Eigen::Index>(sel.kept.size());
  Matrix zm(n, k);
  std::vector<std::string> fs_names, ss_names{"treated"};
  for (Eigen::Index j = 0; j < k; ++j) {
    const int c = sel.kept[static_cast<std::size_t>(j)];
    zm.col(j) = p.x.col(c);
    fs_names.push_back(p.names[static_cast<std::size_t>(c)]);
    if (j > 0) ss_names.push_back(p.names[static_cast<std::size_t>(c)]);
  }
  const Vector y = p.ys.col(0);
  const Vector t = p.ys.col(1);
  if (t.squaredNorm() == 0.0) throw IdentificationError("tsls: treatment has no variation after absorption");

  TslsResult out;
  auto& d = out.diagnostics;
  d.first_stage = regress::ols(zm, t, s.cluster, fs_names);
  d.reduced_form = regress::ols(zm, y, s.cluster, fs_names);

  Matrix xm = zm;
  xm.col(0) = t;
  const Matrix zx = zm.transpose() * xm;
  // a near-zero first stage is flagged below, not refused
  const Eigen::PartialPivLU<Matrix> lu(zx);
  FitResult& fit = out.fit;
  fit.names = ss_names;
  fit.coefficients = lu.solve(zm.transpose() * y);
  if (!fit.coefficients.allFinite()) throw IdentificationError("tsls: first stage is exactly singular");
  fit.residuals = y - xm * fit.coefficients;
  fit.n_obs = static_cast<std::size_t>(n);
  fit.n_clusters = d.first_stage.n_clusters;
  fit.kept_columns = sel.kept;
  for (int j : sel.dropped) fit.dropped_columns.push_back(p.names[static_cast<std::size_t>(j)]);
  const Matrix a = lu.inverse();
  const Matrix scores = zm.array().colwise() * fit.residuals.array();
  const Matrix meat = regress::cluster_robust_vcov(Matrix::Identity(k, k), scores, s.cluster,
                                                   static_cast<std::size_t>(k));
  fit.vcov = a * meat * a.transpose();
  fit.vcov = 0.5 * (fit.vcov + fit.vcov.transpose()).eval();
  const double tss = y.squaredNorm();
  fit.r_squared = tss > 0.0 ? 1.0 - fit.residuals.squaredNorm() / tss : 0.0;

  // diagnostics
  const double fs_se = d.first_stage.se("instrument");
  d.kp_f = std::isfinite(fs_se) && fs_se > 0.0 ? std::pow(d.first_stage.coef("instrument") / fs_se, 2) : 0.0;
  if (d.kp_f < 1e-6) {
    d.weak_instrument = true;
    d.warning = "weak instrument: first-stage F below 1e-6; estimate reported but unreliable";
  } else if (d.kp_f < 10.0) {
    d.warning = "first-stage F below 10";
  }

  ArFunction ar;
  ar.c_rf = d.reduced_form.coefficients[0];
  ar.c_fs = d.first_stage.coefficients[0];
  {
    // w = Z (Z'Z)^-1 e_0, so that coef_0 = w'v for any dependent v.
    const Eigen::HouseholderQR<Matrix> qr(zm);
    const Matrix r = qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();
    Vector e0 = Vector::Zero(k);
    e0[0] = 1.0;
    const Vector u = r.triangularView<Eigen::Upper>().solve(r.transpose().triangularView<Eigen::Lower>().solve(e0));
    const Vector w = zm * u;
    int g = 0;
    const auto dense = dense_ids(s.cluster, &g);
    ar.a = cluster_sums(w, d.reduced_form.residuals, dense, g);
    ar.b = cluster_sums(w, d.first_stage.residuals, dense, g);
    const double gd = g, nd = static_cast<double>(n);
    ar.scale = gd / (gd - 1.0) * (nd - 1.0) / (nd - static_cast<double>(k));
    ar.df2 = gd - 1.0;
  }
  d.ar_stat = ar.stat(0.0);
  d.ar_pvalue = ar.pvalue(0.0);

  const double beta = fit.coefficients[0];
  const double se = std::sqrt(fit.vcov(0, 0));
  auto& ci = d.ar_ci;
  ci.grid_points = 401;
  if (std::isfinite(beta) && std::isfinite(se) && se > 0.0) {
    const double lo = beta - 10.0 * se, hi = beta + 10.0 * se;
    bool any = false;
    for (int i = 0; i < ci.grid_points; ++i) {
      const double b0 = lo + (hi - lo) * i / (ci.grid_points - 1);
      if (ar.pvalue(b0) < 0.05) continue;
      if (!any) ci.lower = b0;
      ci.upper = b0;
      any = true;
      if (i == 0) ci.open_lower = true;
      if (i == ci.grid_points - 1) ci.open_upper = true;
    }
    ci.empty = !any;
  } else {
    ci.empty = true;
  }
  return out;
}

TslsResult intergen_tsls(const AnalysisSample& stacked, ControlSet controls, const ExtraControls& extra) {
  if (!stacked.stacked) throw DesignError("intergen_tsls: sample is not stacked over G1 ancestors");
  return tsls(stacked, controls, extra);
}

std::pair<double, double> anderson_rubin(const AnalysisSample& s, ControlSet controls, double beta0,
                                         const ExtraControls& extra) {
  require_outcomes(s);
  const Vector y0 = s.outcome - beta0 * s.treatment;
  const auto p = prepare(s, column(s.instrument), {"instrument"}, column(y0), controls, FeMode::controls, extra);
  if (!primary_identified(p, 0))
    throw IdentificationError("anderson_rubin: instrument has no variation after absorbing the fixed effects");
  const auto fit = fit_prepared(p, 0, s.cluster);
  const double f = std::pow(fit.coef("instrument") / fit.se("instrument"), 2);
  return {f, stats::f_sf(f, 1.0, static_cast<double>(fit.n_clusters) - 1.0)};
}

// --- Heckman -----------------------------------------------------------------------

OutcomeEstimator parse_outcome_estimator(const std::string& name) {
  if (name == "ols") return OutcomeEstimator::ols;
  if (name == "mother_fe") return OutcomeEstimator::mother_fe;
  if (name == "tsls") return OutcomeEstimator::tsls;
  throw ConfigError("unknown estimator '" + name + "' (expected ols, mother_fe or tsls)");
}

Matrix selection_predictors(const AnalysisSample& s, const std::vector<microdata::IndividualRecord>& records) {
  Matrix out(static_cast<Eigen::Index>(s.size()), 2);
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    out(r, 0) = s.parish_x(r, 4);  // rye_price
    out(r, 1) = records.at(s.record_index[i]).birth_month;
  }
  return out;
}

FitResult run_outcome_estimator(const AnalysisSample& s, OutcomeEstimator estimator, ControlSet controls,
                                const ExtraControls& extra) {
  switch (estimator) {
    case OutcomeEstimator::ols: {
      require_outcomes(s);
      const auto p = prepare(s, column(s.treatment), {"treated"}, column(s.outcome), controls, FeMode::controls,
                             extra);
      if (!primary_identified(p, 0)) throw IdentificationError("ols: treatment absorbed by the fixed effects");
      return fit_prepared(p, 0, s.cluster);
    }
    case OutcomeEstimator::mother_fe: return mother_fe(s, controls, extra);
    case OutcomeEstimator::tsls: return tsls(s, controls, extra).fit;
  }
  throw EstimationError("unknown outcome estimator");
}

HeckmanResult heckman_correct(const AnalysisSample& s, const Matrix& predictors, OutcomeEstimator estimator,
                              ControlSet controls) {
  if (predictors.rows() != static_cast<Eigen::Index>(s.size()))
    throw EstimationError("heckman_correct: one predictor row per sample row required");
  if (!predictors.allFinite()) throw EstimationError("heckman_correct: selection predictors must be observed");
  HeckmanResult out;
  out.n_total = s.size();
  Vector sel(static_cast<Eigen::Index>(s.size()));
  for (Eigen::Index i = 0; i < sel.size(); ++i) sel[i] = std::isfinite(s.outcome[i]) ? 1.0 : 0.0;
  out.n_selected = static_cast<std::size_t>(sel.sum());
  if (out.n_selected == 0 || out.n_selected == s.size())
    throw DesignError("heckman_correct: selection rate is " + std::string(out.n_selected == 0 ? "0" : "1"));

  std::vector<std::string> names;
  Matrix z = regress::dummy_columns(s.cohort, false, &names, "c");
  const std::vector<std::string> pn{"rye_price", "birth_month"};
  append_cohort_interactions(predictors, pn, s.cohort, z, names);
  out.selection = regress::probit_fit(z, sel, s.cluster, names);
  const Vector index = regress::linear_index(out.selection, z);

  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (sel[static_cast<Eigen::Index>(i)] > 0.5) rows.push_back(i);
  out.imr.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    out.imr[static_cast<Eigen::Index>(i)] = stats::inverse_mills(index[static_cast<Eigen::Index>(rows[i])]);
  const auto selected = s.subset(rows);
  ExtraControls extra{column(out.imr), {"imr"}};
  out.fit = run_outcome_estimator(selected, estimator, controls, extra);
  return out;
}

// --- small pieces ------------------------------------------------------------------

double indirect_least_squares(double did_estimate, double treated_share) {
  if (!(treated_share > 0.0) || treated_share > 1.0)
    throw DomainError("indirect_least_squares: treated share must lie in (0, 1]");
  return did_estimate / treated_share;
}

std::vector<LeadResult> pretrend_leads(const AnalysisSample& s, const microdata::InstrumentTable& instrument,
                                       int n_leads, ControlSet controls, std::pair<int, int> window) {
  require_outcomes(s);
  if (n_leads < 0) throw DesignError("pretrend_leads: n_leads must be non-negative");
  // common rows: in the window and with every lead available
  std::vector<std::size_t> rows;
  std::vector<std::vector<double>> leads(static_cast<std::size_t>(n_leads) + 1);
  for (std::size_t i = 0; i < s.size(); ++i) {
    const int c = static_cast<int>(s.cohort[i]);
    if (c < window.first || c > window.second) continue;
    std::vector<double> z;
    for (int k = 0; k <= n_leads; ++k) {
      const auto v = instrument.find(s.parish[i], c + k);
      if (!v) break;
      z.push_back(*v);
    }
    if (static_cast<int>(z.size()) != n_leads + 1) continue;
    rows.push_back(i);
    for (int k = 0; k <= n_leads; ++k) leads[static_cast<std::size_t>(k)].push_back(z[static_cast<std::size_t>(k)]);
  }
  std::set<std::int64_t> cohorts;
  for (auto i : rows) cohorts.insert(s.cohort[i]);
  if (cohorts.size() < 2)
    throw DesignError("pretrend_leads: pre-period too short for " + std::to_string(n_leads) + " leads");
  const auto sub = s.subset(rows);
  std::vector<LeadResult> out;
  for (int k = 0; k <= n_leads; ++k) {
    const auto& zk = leads[static_cast<std::size_t>(k)];
    const Vector z = Eigen::Map<const Vector>(zk.data(), static_cast<Eigen::Index>(zk.size()));
    const auto p = prepare(sub, column(z), {"instrument_lead"}, column(sub.outcome), controls, FeMode::controls, {});
    if (!primary_identified(p, 0))
      throw DesignError("pretrend_leads: lead " + std::to_string(k) + " has no variation after absorption");
    const auto fit = fit_prepared(p, 0, sub.cluster);
    out.push_back({k, fit.coef("instrument_lead"), fit.se("instrument_lead"), fit.n_obs});
  }
  return out;
}

FitResult cointervention_interactions(const AnalysisSample& s, const std::string& cointervention,
                                      ControlSet controls) {
  require_outcomes(s);
  const auto it = std::find(kParishCovariateNames.begin(), kParishCovariateNames.end(), cointervention);
  if (it == kParishCovariateNames.end()) throw ConfigError("unknown cointervention '" + cointervention + "'");
  const auto col = static_cast<Eigen::Index>(it - kParishCovariateNames.begin());
  const Vector raw = s.parish_x.col(col);
  const double m = raw.mean();
  if (!(std::abs(m) > 0.0) || !std::isfinite(m))
    throw NormalizationError("cointervention '" + cointervention + "' has zero mean");
  const Vector c = raw / m;
  Matrix primary(static_cast<Eigen::Index>(s.size()), 3);
  primary << s.instrument, s.instrument.cwiseProduct(c), c;
  const auto p = prepare(s, primary, {"instrument", "instrument_x_" + cointervention, cointervention},
                         column(s.outcome), controls, FeMode::controls, {});
  for (Eigen::Index j = 0; j < 2; ++j)
    if (!primary_identified(p, j))
      throw IdentificationError("cointervention_interactions: " + p.names[static_cast<std::size_t>(j)] +
                                " has no variation after absorption");
  return fit_prepared(p, 0, s.cluster);
}

// --- JSON --------------------------------------------------------------------------

nlohmann::json to_json(const FitResult& fit) {
  nlohmann::json coefs = nlohmann::json::array();
  for (std::size_t j = 0; j < fit.names.size(); ++j) {
    const auto i = static_cast<Eigen::Index>(j);
    coefs.push_back({{"name", fit.names[j]},
                     {"estimate", fit.coefficients[i]},
                     {"se", std::sqrt(fit.vcov(i, i))}});
  }
  nlohmann::json j = {{"coefficients", coefs},
                      {"n_obs", fit.n_obs},
                      {"n_clusters", fit.n_clusters},
                      {"dropped_columns", fit.dropped_columns},
                      {"r_squared", fit.r_squared}};
  if (fit.log_likelihood) j["log_likelihood"] = *fit.log_likelihood;
  return j;
}

nlohmann::json to_json(const IvDiagnostics& d) {
  auto summary = [](const FitResult& f) {
    return nlohmann::json{{"instrument", f.coefficients[0]}, {"se", std::sqrt(f.vcov(0, 0))}};
  };
  return {{"kp_f", d.kp_f},
          {"ar_stat", d.ar_stat},
          {"ar_pvalue", d.ar_pvalue},
          {"ar_ci",
           {{"lower", d.ar_ci.lower},
            {"upper", d.ar_ci.upper},
            {"empty", d.ar_ci.empty},
            {"open_lower", d.ar_ci.open_lower},
            {"open_upper", d.ar_ci.open_upper},
            {"grid_points", d.ar_ci.grid_points}}},
          {"weak_instrument", d.weak_instrument},
          {"warning", d.warning},
          {"first_stage", summary(d.first_stage)},
          {"reduced_form", summary(d.reduced_form)}};
}

nlohmann::json to_json(const EventStudyResult& e) {
  nlohmann::json series = nlohmann::json::array();
  for (std::size_t j = 0; j < e.cohorts.size(); ++j) {
    const auto i = static_cast<Eigen::Index>(j);
    series.push_back({{"cohort", e.cohorts[j]},
                      {"estimate", e.coefficients[i]},
                      {"se", e.se[i]},
                      {"lower", e.lower[i]},
                      {"upper", e.upper[i]},
                      {"reference", static_cast<bool>(e.reference[j])}});
  }
  return {{"series", series},
          {"pre_trend",
           {{"F", e.pre_trend.statistic},
            {"df1", e.pre_trend.df1},
            {"df2", e.pre_trend.df2},
            {"p_value", e.pre_trend.p_value}}},
          {"pre_trend_wild", e.pre_trend_wild ? nlohmann::json{{"F", e.pre_trend_wild->statistic},
                                                               {"df1", e.pre_trend_wild->df1},
                                                               {"p_value", e.pre_trend_wild->p_value},
                                                               {"n_reps", e.pre_trend_wild->n_reps}}
                                              : nlohmann::json(nullptr)},
          {"n_obs", e.fit.n_obs},
          {"n_clusters", e.fit.n_clusters}};
}

}  // namespace quasicausal::quasi_exp
