// Acceptance checks, one per criterion. Usage: acceptance [N ...]; no
// arguments runs every criterion. Prints one PASS/FAIL line per criterion and
// exits non-zero when any fails.

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "quasicausal/dgp.hpp"
#include "quasicausal/duration.hpp"
#include "quasicausal/errors.hpp"
#include "quasicausal/mediation.hpp"
#include "quasicausal/microdata.hpp"
#include "quasicausal/pipeline.hpp"
#include "quasicausal/quasi_exp.hpp"
#include "quasicausal/regress.hpp"
#include "quasicausal/stats.hpp"

using namespace quasicausal;
using microdata::ControlSet;
using microdata::Generation;
using regress::Matrix;
using regress::Vector;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Verdict {
  bool pass = true;
  std::string detail;

  /// Records one condition; the verdict passes only if every condition holds.
  void require(bool ok, const std::string& what) {
    pass = pass && ok;
    if (!detail.empty()) detail += "; ";
    detail += what + (ok ? "" : " [failed]");
  }
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}
std::string fmt(const char* f, double a, double b) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}
std::string fmt(const char* f, double a, double b, double c) {
  char buf[192];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

double mean(const std::vector<double>& v) { return stats::mean(v); }
double mc_se(const std::vector<double>& v) {
  return std::sqrt(stats::variance(v) / static_cast<double>(v.size()));
}

/// Simulated population with the sample builders used by the estimators.
struct World {
  dgp::Population pop;
  microdata::PanelIndex index;
  microdata::InstrumentTable z;
  microdata::DidIntensity intensity;

  explicit World(const dgp::DgpParams& p)
      : pop(dgp::simulate_population(p)),
        index(pop.panel),
        z(microdata::build_instrument(pop.panel)),
        intensity(microdata::build_did_intensity(pop.panel)) {}

  microdata::AnalysisSample g1(const microdata::SampleOptions& o = {}) const {
    return microdata::build_g1_sample(pop.records, index, z, intensity, o);
  }
  microdata::AnalysisSample stacked(Generation g) const {
    microdata::SampleOptions o;
    o.generation = g;
    return microdata::build_stacked_sample(pop.records, index, z, o);
  }
};

dgp::DgpParams seeded(std::uint64_t seed) {
  dgp::DgpParams p;
  p.seed = seed;
  return p;
}

// --- 1: fixed-effect absorption --------------------------------------------------

Verdict fe_equivalence() {
  Verdict v;
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (int rep = 0; rep < 10; ++rep) {
    std::mt19937_64 g(700 + rep);
    std::normal_distribution<double> nd;
    const int n = 80 + 15 * rep, k = 3;
    const int l1 = 4 + rep % 3, l2 = 3 + rep % 4, l3 = 2 + rep % 2;
    std::uniform_int_distribution<int> d1(0, l1 - 1), d2(0, l2 - 1), d3(0, l3 - 1);
    Matrix x(n, k);
    Vector y(n);
    std::vector<std::int64_t> f1, f2, f3, cl;
    for (int i = 0; i < n; ++i) {
      f1.push_back(d1(g));
      f2.push_back(100 + 7 * d2(g));
      f3.push_back(d3(g));
      cl.push_back(f1.back());
      for (int j = 0; j < k; ++j) x(i, j) = nd(g) + 0.4 * static_cast<double>(f1.back()) - 0.2 * f3.back();
      y[i] = x.row(i).sum() + 0.3 * static_cast<double>(f2.back() - 100) + f3.back() + nd(g);
    }
    const regress::FeSpec fe{{{"a", f1}, {"b", f2}, {"c", f3}}};
    const auto absorbed = regress::absorb_fe(x, y, fe);
    const auto fit = regress::ols(absorbed.design, absorbed.outcome, cl);

    // oracle: explicit indicator columns (all levels of the first factor,
    // the rest minus their first level), column-pivoted least squares
    auto indicators = [n](const std::vector<std::int64_t>& codes, bool drop_first) {
      std::map<std::int64_t, int> levels;
      for (auto c : codes) levels.emplace(c, 0);
      int col = 0;
      for (auto& [code, idx] : levels) idx = col++;
      const int start = drop_first ? 1 : 0;
      Matrix d = Matrix::Zero(n, col - start);
      for (int i = 0; i < n; ++i) {
        const int c = levels.at(codes[static_cast<std::size_t>(i)]);
        if (c >= start) d(i, c - start) = 1.0;
      }
      return d;
    };
    const Matrix da = indicators(f1, false), db = indicators(f2, true), dc = indicators(f3, true);
    Matrix full(n, k + da.cols() + db.cols() + dc.cols());
    full << x, da, db, dc;
    const Vector beta = full.colPivHouseholderQr().solve(y);
    worst = std::max(worst, (fit.coefficients - beta.head(k)).cwiseAbs().maxCoeff());
  }
  const double secs = seconds_since(t0);
  v.require(worst < 1e-8, fmt("max |absorbed - dummy| = %.2e over 10 designs", worst));
  v.require(secs < 1.0, fmt("%.3f s", secs));
  return v;
}

// --- 2: 2SLS ratio identity -----------------------------------------------------

Verdict ratio_identity() {
  Verdict v;
  double worst = 0.0, estimation = 0.0;
  int n_checked = 0;
  for (std::uint64_t seed : {7, 8, 9}) {
    auto p = seeded(seed);
    p.n_parishes = 24;
    p.n_families_per_parish = 80;
    const World w(p);
    std::vector<microdata::AnalysisSample> samples{w.g1(), w.stacked(Generation::G2), w.stacked(Generation::G3)};
    for (std::size_t s = 0; s < samples.size(); ++s)
      for (auto c : {ControlSet::none, ControlSet::baseline}) {
        const auto t0 = Clock::now();
        const auto r = s == 0 ? quasi_exp::tsls(samples[s], c) : quasi_exp::intergen_tsls(samples[s], c);
        estimation += seconds_since(t0);
        const double ratio = r.diagnostics.reduced_form.coef("instrument") / r.diagnostics.first_stage.coef("instrument");
        worst = std::max(worst, std::abs(r.fit.coef("treated") - ratio));
        ++n_checked;
      }
  }
  v.require(worst < 1e-8, fmt("max |2SLS - RF/FS| = %.2e over %.0f samples", worst, n_checked));
  v.require(estimation < 1.0, fmt("estimation %.3f s", estimation));
  return v;
}

// --- 3-4: Monte Carlo recovery ---------------------------------------------------

Verdict recovery_g1() {
  Verdict v;
  const auto t0 = Clock::now();
  std::vector<double> beta, first;
  int strong = 0;
  const dgp::DgpParams planted;
  for (int r = 0; r < 20; ++r) {
    const World w(seeded(1000 + static_cast<std::uint64_t>(r)));
    const auto res = quasi_exp::tsls(w.g1(), ControlSet::baseline);
    beta.push_back(res.fit.coef("treated"));
    first.push_back(res.diagnostics.first_stage.coef("instrument"));
    strong += res.diagnostics.kp_f > 10.0;
  }
  const double secs = seconds_since(t0);
  v.require(std::abs(mean(beta) - planted.true_effect_years_g1) <= 0.5,
            fmt("mean 2SLS %.3f vs planted %.1f", mean(beta), planted.true_effect_years_g1));
  v.require(std::abs(mean(first) - planted.first_stage_slope) <= 0.02,
            fmt("mean first stage %.4f vs %.2f", mean(first), planted.first_stage_slope));
  v.require(strong >= 19, fmt("KP-F > 10 in %.0f/20", strong));
  v.require(secs < 120.0, fmt("%.1f s", secs));
  return v;
}

Verdict recovery_g2_g3() {
  Verdict v;
  const auto t0 = Clock::now();
  std::vector<double> b2, b3;
  const dgp::DgpParams planted;
  for (int r = 0; r < 20; ++r) {
    const World w(seeded(1000 + static_cast<std::uint64_t>(r)));
    b2.push_back(quasi_exp::intergen_tsls(w.stacked(Generation::G2), ControlSet::baseline).fit.coef("treated"));
    b3.push_back(quasi_exp::intergen_tsls(w.stacked(Generation::G3), ControlSet::baseline).fit.coef("treated"));
  }
  const double secs = seconds_since(t0);
  v.require(std::abs(mean(b2) - planted.true_effect_years_g2) <= 0.3, fmt("G2 mean %.3f vs %.1f", mean(b2), planted.true_effect_years_g2));
  v.require(std::abs(mean(b3) - planted.true_effect_years_g3) <= 0.3, fmt("G3 mean %.3f vs %.1f", mean(b3), planted.true_effect_years_g3));
  v.require(secs < 120.0, fmt("%.1f s", secs));
  return v;
}

// --- 5: mother FE ------------------------------------------------------------------

Verdict mother_fe_consistency() {
  Verdict v;
  const auto t0 = Clock::now();
  std::vector<double> naive, within;
  const dgp::DgpParams planted;
  for (int r = 0; r < 10; ++r) {
    auto p = seeded(1000 + static_cast<std::uint64_t>(r));
    // family-level confounder moves both uptake and the outcome
    p.family_uptake_loading = 0.15;
    p.family_outcome_loading = 3.0;
    const World w(p);
    const auto s = w.g1();
    naive.push_back(quasi_exp::run_outcome_estimator(s, quasi_exp::OutcomeEstimator::ols, ControlSet::none).coef("treated"));
    within.push_back(quasi_exp::mother_fe(s, ControlSet::none).coef("treated"));
  }
  const double secs = seconds_since(t0);
  const double bias_naive = std::abs(mean(naive) - planted.true_effect_years_g1);
  const double bias_within = std::abs(mean(within) - planted.true_effect_years_g1);
  v.require(bias_naive > 5.0 * bias_within, fmt("bias naive %.3f vs mother FE %.3f", bias_naive, bias_within));
  v.require(bias_within <= 0.5, fmt("mother FE mean %.3f", mean(within)));
  v.require(secs < 60.0, fmt("%.1f s", secs));
  return v;
}

// --- 6: event-study size -----------------------------------------------------------

Verdict event_study_size() {
  Verdict v;
  int joint = 0, analytic = 0, leads_ok = 0, leads = 0;
  const int reps = 100;
  for (int r = 0; r < reps; ++r) {
    const World w(seeded(1000 + static_cast<std::uint64_t>(r)));
    const auto s = w.g1();
    const auto e = quasi_exp::event_study(s, w.intensity, ControlSet::baseline, {1790, 1800},
                                          {999, 5000 + static_cast<std::uint64_t>(r)});
    joint += e.pre_trend_wild->p_value < 0.05;
    analytic += e.pre_trend.p_value < 0.05;
    for (const auto& l : quasi_exp::pretrend_leads(s, w.z, 5, ControlSet::baseline)) {
      if (l.lead == 0) continue;
      ++leads;
      leads_ok += std::abs(l.coefficient) <= 2.0 * l.se;
    }
  }
  const double rate = static_cast<double>(joint) / reps;
  v.require(rate >= 0.02 && rate <= 0.10,
            fmt("joint pre-trend rejections %.0f/%.0f (analytic F: %.0f)", joint, reps, analytic));
  const double share = static_cast<double>(leads_ok) / leads;
  v.require(share >= 0.90, fmt("leads within 2 SE %.0f/%.0f", leads_ok, leads));
  return v;
}

// --- 7: Heckman ----------------------------------------------------------------------

Verdict heckman_bias() {
  Verdict v;
  std::vector<double> naive, corrected;
  const dgp::DgpParams planted;
  for (int r = 0; r < 50; ++r) {
    auto p = seeded(1000 + static_cast<std::uint64_t>(r));
    // migration depends on rye prices and birth month, its error is
    // correlated with the outcome error, and rye prices also move uptake
    p.family_uptake_loading = 0.0;
    p.selection.rye_coefficient = 1.0;
    p.selection.month_coefficient = 0.5;
    p.selection.error_correlation = 0.9;
    p.selection.rye_uptake_coupling = 0.3;
    p.selection.outcome_error_sd = 3.0;
    const World w(p);
    microdata::SampleOptions o;
    o.keep_missing_outcome = true;
    const auto s = w.g1(o);
    const auto h = quasi_exp::heckman_correct(s, quasi_exp::selection_predictors(s, w.pop.records),
                                              quasi_exp::OutcomeEstimator::ols, ControlSet::baseline);
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (std::isfinite(s.outcome[static_cast<Eigen::Index>(i)])) rows.push_back(i);
    naive.push_back(quasi_exp::run_outcome_estimator(s.subset(rows), quasi_exp::OutcomeEstimator::ols,
                                                     ControlSet::baseline).coef("treated"));
    corrected.push_back(h.fit.coef("treated"));
  }
  const double bn = mean(naive) - planted.true_effect_years_g1, bc = mean(corrected) - planted.true_effect_years_g1;
  v.require(std::abs(bc) < std::abs(bn), fmt("mean bias naive %.4f, corrected %.4f", bn, bc));
  v.require(std::abs(bc) <= 2.0 * mc_se(corrected), fmt("corrected within %.2f MC SE (MC SE %.4f)",
                                                         std::abs(bc) / mc_se(corrected), mc_se(corrected)));
  return v;
}

// --- 8: Cox engine -------------------------------------------------------------------

duration::SurvivalData small_survival(std::vector<double> exit, std::vector<int> event, std::vector<double> x) {
  duration::SurvivalData d;
  d.exit = std::move(exit);
  d.event = std::move(event);
  d.x = Eigen::Map<Vector>(x.data(), static_cast<Eigen::Index>(x.size()));
  d.names = {"x"};
  for (std::size_t i = 0; i < d.exit.size(); ++i) {
    d.entry.push_back(0.0);
    d.stratum.push_back(0);
    d.id.push_back(static_cast<std::int64_t>(i));
  }
  return d;
}

double golden_max(const std::function<double(double)>& f, double lo, double hi) {
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  while (hi - lo > 1e-11) {
    const double a = hi - phi * (hi - lo), c = lo + phi * (hi - lo);
    if (f(a) < f(c)) lo = a;
    else hi = c;
  }
  return 0.5 * (lo + hi);
}

/// Gompertz proportional hazards with a 40% treated share and uniform censoring.
duration::SurvivalData gompertz(std::uint64_t seed, int n, double log_hr) {
  std::mt19937_64 g(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  duration::SurvivalData d;
  d.x.resize(n, 1);
  d.names = {"treated"};
  const double lambda = 1e-3, b = 0.08;
  for (int i = 0; i < n; ++i) {
    const double x = u(g) < 0.4 ? 1.0 : 0.0;
    const double t = std::log1p(-b * std::log(u(g)) / (lambda * std::exp(log_hr * x))) / b;
    const double c = 20.0 + 80.0 * u(g);
    d.x(i, 0) = x;
    d.entry.push_back(0.0);
    d.exit.push_back(std::min(t, c));
    d.event.push_back(t <= c ? 1 : 0);
    d.stratum.push_back(0);
    d.id.push_back(i);
  }
  return d;
}

Verdict cox_correctness() {
  Verdict v;
  // analytic score against central differences: delayed entry, ties, strata
  std::mt19937_64 g(31);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> nd;
  duration::SurvivalData d;
  const int n = 300, p = 3;
  d.x.resize(n, p);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < p; ++j) d.x(i, j) = j == 0 ? (u(g) < 0.5 ? 1.0 : 0.0) : nd(g);
    const double entry = u(g) < 0.3 ? std::floor(3.0 * u(g)) : 0.0;
    d.entry.push_back(entry);
    d.exit.push_back(std::ceil(entry + 0.5 + 8.0 * u(g)));
    d.event.push_back(u(g) < 0.7 ? 1 : 0);
    d.stratum.push_back(i % 2);
    d.id.push_back(i);
  }
  d.names = {"x0", "x1", "x2"};
  const Vector beta = (Vector(p) << 0.3, -0.2, 0.15).finished();
  double worst = 0.0;
  for (auto ties : {duration::Ties::efron, duration::Ties::breslow}) {
    const auto pl = duration::partial_likelihood(d, beta, ties);
    for (int j = 0; j < p; ++j) {
      const double h = 1e-5;
      Vector up = beta, dn = beta;
      up[j] += h;
      dn[j] -= h;
      const double fd = (duration::partial_likelihood(d, up, ties).log_likelihood -
                         duration::partial_likelihood(d, dn, ties).log_likelihood) / (2.0 * h);
      worst = std::max(worst, std::abs(fd - pl.score[j]));
    }
  }
  v.require(worst < 1e-4, fmt("max |score - FD| = %.2e", worst));

  // two subjects with tied deaths: l(b) = b - log(e^b + 1) - log((e^b + 1) / 2)
  const auto two = small_survival({1.0, 1.0}, {1, 1}, {1.0, 0.0});
  auto two_closed = [](double b) { return b - std::log(std::exp(b) + 1.0) - std::log(0.5 * (std::exp(b) + 1.0)); };
  double ll_gap = 0.0;
  for (double b : {-1.0, 0.2, 1.7})
    ll_gap = std::max(ll_gap, std::abs(duration::partial_likelihood(two, Vector::Constant(1, b)).log_likelihood - two_closed(b)));
  const double two_fit = duration::cox_fit(two).coefficients[0];
  const double two_grid = golden_max(two_closed, -10.0, 10.0);
  v.require(ll_gap < 1e-12 && std::abs(two_fit - two_grid) < 1e-6,
            fmt("two subjects: fit %.8f, grid %.8f, likelihood gap %.1e", two_fit, two_grid, ll_gap));

  // five subjects, distinct times
  const auto five = small_survival({1.0, 2.0, 3.0, 4.0, 5.0}, {1, 1, 1, 0, 1}, {1.0, 0.0, 1.0, 1.0, 0.0});
  auto five_closed = [](double b) {
    const double e = std::exp(b);
    return (b - std::log(3 * e + 2)) - std::log(2 * e + 2) + (b - std::log(2 * e + 1));
  };
  const double five_fit = duration::cox_fit(five).coefficients[0];
  const double five_grid = golden_max(five_closed, -10.0, 10.0);
  v.require(std::abs(five_fit - five_grid) < 1e-6, fmt("five subjects: fit %.8f, grid %.8f", five_fit, five_grid));

  const auto big = duration::cox_fit(gompertz(42, 5000, std::log(0.32)));
  v.require(std::abs(big.coefficients[0] - std::log(0.32)) <= 0.1,
            fmt("N = 5000: HR %.4f (log error %.4f)", std::exp(big.coefficients[0]),
                big.coefficients[0] - std::log(0.32)));
  return v;
}

// --- 9-10: two-stage residual inclusion and competing risks ------------------------

struct HazardWorld {
  dgp::Population pop;
  microdata::InstrumentTable z;
};

HazardWorld proportional_world(std::uint64_t seed, double uptake_loading, double log_hazard_loading) {
  auto p = seeded(seed);
  p.mortality = dgp::MortalityMode::proportional;
  p.confounder_uptake_loading = uptake_loading;
  p.hazard.confounder_log_hazard = log_hazard_loading;
  HazardWorld w{dgp::simulate_population(p), {}};
  w.z = microdata::build_instrument(w.pop.panel);
  return w;
}

double all_cause_log_hr(const dgp::DgpParams& p) {
  const double s = p.hazard.smallpox_share;
  return std::log(s * p.hazard.hr_smallpox + (1.0 - s) * p.hazard.hr_other);
}

Verdict tsri_deconfounding() {
  Verdict v;
  const double target = all_cause_log_hr(dgp::DgpParams{});
  std::vector<double> naive_bias, tsri_bias;
  int significant = 0, clean_insignificant = 0;
  const int reps = 10;
  duration::TsriOptions naive;
  naive.include_residual = false;
  for (int r = 0; r < reps; ++r) {
    const auto seed = 2000 + static_cast<std::uint64_t>(r);
    const auto conf = proportional_world(seed, 0.4, 0.7);
    const auto cs = microdata::build_spells(conf.pop.records, microdata::CauseMode::all_cause);
    const auto a = duration::tsri_hazard(cs, conf.pop.records, conf.z);
    const auto b = duration::tsri_hazard(cs, conf.pop.records, conf.z, naive);
    tsri_bias.push_back(a.fit.coef("treated") - target);
    naive_bias.push_back(b.fit.coef("treated") - target);
    significant += std::abs(a.fit.coef("residual")) > 1.96 * a.fit.se("residual");

    const auto clean = proportional_world(seed, 0.0, 0.0);
    const auto t = duration::tsri_hazard(microdata::build_spells(clean.pop.records, microdata::CauseMode::all_cause),
                                         clean.pop.records, clean.z);
    clean_insignificant += std::abs(t.fit.coef("residual")) <= 1.96 * t.fit.se("residual");
  }
  const double bn = std::abs(mean(naive_bias)), bt = std::abs(mean(tsri_bias));
  v.require(bn > 3.0 * bt, fmt("mean |bias| naive %.4f vs 2SRI %.4f", bn, bt));
  v.require(significant == reps, fmt("residual significant under confounding %.0f/%.0f", significant, reps));
  // a 5% test: about one clean replicate in twenty rejects by chance
  v.require(clean_insignificant >= 8, fmt("insignificant without confounding %.0f/%.0f", clean_insignificant, reps));
  return v;
}

Verdict competing_risks_recovery() {
  Verdict v;
  const dgp::DgpParams planted;
  std::vector<double> c0, c1;
  bool identical = true;
  for (int r = 0; r < 10; ++r) {
    const auto w = proportional_world(2000 + static_cast<std::uint64_t>(r), 0.0, 0.0);
    const auto stacked = microdata::build_spells(w.pop.records, microdata::CauseMode::competing);
    const auto cr = duration::competing_risks(stacked, w.pop.records, w.z);
    c0.push_back(cr.fit.coef("treated_x_cause0"));
    c1.push_back(cr.fit.coef("treated_x_cause1"));
    if (r < 2) {
      const auto all = microdata::build_spells(w.pop.records, microdata::CauseMode::all_cause);
      const auto one = duration::competing_risks(all, w.pop.records, w.z);
      const auto ref = duration::tsri_hazard(all, w.pop.records, w.z);
      identical = identical && one.fit.names == ref.fit.names && one.fit.coefficients == ref.fit.coefficients &&
                  one.fit.vcov == ref.fit.vcov;
    }
  }
  const double e0 = mean(c0) - std::log(planted.hazard.hr_smallpox);
  const double e1 = mean(c1) - std::log(planted.hazard.hr_other);
  v.require(std::abs(e0) <= 0.15, fmt("smallpox HR %.4f (log error %.4f)", std::exp(mean(c0)), e0));
  v.require(std::abs(e1) <= 0.15, fmt("other-cause HR %.4f (log error %.4f)", std::exp(mean(c1)), e1));
  v.require(identical, "single-cause stacking equals the 2SRI hazard fit bit for bit");
  return v;
}

// --- 11: survival curves ---------------------------------------------------------------

Verdict survival_math() {
  Verdict v;
  const double lambda = 0.1, horizon = 10.0, step = 1e-4;
  duration::StepSurvival s;
  for (int k = 0; k * step <= horizon + 1e-12; ++k) {
    s.time.push_back(k * step);
    s.value.push_back(std::exp(-lambda * (k + 0.5) * step));
  }
  s.value.front() = 1.0;
  const double rmst = s.integral(0.0, horizon), exact = (1.0 - std::exp(-lambda * horizon)) / lambda;
  v.require(std::abs(rmst - exact) < 1e-4, fmt("exponential RMST %.6f vs %.6f", rmst, exact));

  std::vector<duration::CoxFit> fits;
  for (std::uint64_t seed : {3, 4, 5}) fits.push_back(duration::cox_fit(gompertz(seed, 2000, -0.8)));
  const auto w = proportional_world(11, 0.0, 0.0);
  fits.push_back(duration::tsri_hazard(microdata::build_spells(w.pop.records, microdata::CauseMode::all_cause),
                                       w.pop.records, w.z).fit);
  const std::vector<std::pair<double, double>> bands{{2, 10}, {10, 20}, {20, 40}, {40, 60}, {60, 100}};
  bool monotone = true, starts_at_one = true;
  double sum_gap = 0.0;
  for (const auto& fit : fits) {
    const auto [treated, untreated] = duration::arm_profiles(fit);
    const auto curve = duration::survival_and_expectancy(fit, treated, untreated, 2.0, bands);
    starts_at_one = starts_at_one && curve.s_treated.front() == 1.0 && curve.s_untreated.front() == 1.0;
    for (std::size_t k = 1; k < curve.age.size(); ++k)
      monotone = monotone && curve.s_treated[k] <= curve.s_treated[k - 1] &&
                 curve.s_untreated[k] <= curve.s_untreated[k - 1];
    double t = 0.0, u = 0.0;
    for (const auto& b : curve.bands) {
      t += b.treated;
      u += b.untreated;
    }
    sum_gap = std::max({sum_gap, std::abs(t - curve.total.treated), std::abs(u - curve.total.untreated)});
  }
  v.require(monotone && starts_at_one, fmt("S monotone with S(start) = 1 on %.0f fits", static_cast<double>(fits.size())));
  v.require(sum_gap < 1e-8, fmt("max |sum of bands - total| = %.1e", sum_gap));
  return v;
}

// --- 12: E-value ---------------------------------------------------------------------------

Verdict e_value_checks() {
  Verdict v;
  v.require(duration::e_value(1.0, 1.0).e_value == 1.0, "E(1) = 1");
  const double e = duration::e_value(0.32, 0.32).e_value;
  const double rr = 1.0 / 0.32;
  const double oracle = rr + std::sqrt(rr * (rr - 1.0));
  v.require(std::abs(e - oracle) < 1e-12, fmt("E(0.32) = %.6f, formula %.6f", e, oracle));
  v.require(std::abs(e - 5.704) <= 0.001, fmt("target 5.704 +- 0.001, off by %.5f", e - 5.704));
  bool decreasing = true;
  double prev = std::numeric_limits<double>::infinity();
  for (double hr = 0.01; hr < 1.0; hr += 0.01) {
    const double x = duration::e_value(hr, hr).e_value;
    decreasing = decreasing && x < prev;
    prev = x;
  }
  v.require(decreasing, "strictly decreasing on (0, 1)");
  return v;
}

// --- 13: mediation ------------------------------------------------------------------------

/// Linear treatment -> mediator -> outcome system with a covariate and 50 clusters.
mediation::MediationData linear_paths(std::uint64_t seed, int n, double a, double b, double c, bool noise) {
  std::mt19937_64 g(seed);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  mediation::MediationData d;
  d.outcome.resize(n);
  d.treatment.resize(n);
  d.mediator.resize(n);
  d.controls.resize(n, 1);
  d.control_names = {"x"};
  for (int i = 0; i < n; ++i) {
    const double x = nd(g);
    const double t = u(g) < 0.5 ? 1.0 : 0.0;
    const double m = noise ? nd(g) : 0.5 + a * t + 0.3 * x + nd(g);
    d.outcome[i] = 1.0 + c * t + (noise ? 0.0 : b * m) + 0.2 * x + nd(g);
    d.treatment[i] = t;
    d.mediator[i] = m;
    d.controls(i, 0) = x;
    d.cluster.push_back(i % 50);
  }
  return d;
}

Verdict mediation_recovery() {
  Verdict v;
  const double a = 0.6, b = 1.5, c = 0.8;
  mediation::MediationOptions o;
  o.mediator_link = mediation::Link::linear;
  o.outcome_link = mediation::Link::linear;
  o.n_draws = 200;
  o.n_reps = 0;
  std::vector<double> nie, nde, gap, noise_nie;
  for (int r = 0; r < 50; ++r) {
    o.seed = 300 + static_cast<std::uint64_t>(r);
    const auto res = mediation::mediate(linear_paths(900 + static_cast<std::uint64_t>(r), 2000, a, b, c, false), o);
    nie.push_back(res.nie.estimate);
    nde.push_back(res.nde.estimate);
    gap.push_back(res.total.estimate - res.total_regression.estimate);
    noise_nie.push_back(
        mediation::mediate(linear_paths(5900 + static_cast<std::uint64_t>(r), 2000, a, b, c, true), o).nie.estimate);
  }
  v.require(std::abs(mean(nie) - a * b) <= 3.0 * mc_se(nie),
            fmt("NIE %.4f vs a*b %.2f (MC SE %.4f)", mean(nie), a * b, mc_se(nie)));
  v.require(std::abs(mean(nde) - c) <= 3.0 * mc_se(nde), fmt("NDE %.4f vs %.2f (MC SE %.4f)", mean(nde), c, mc_se(nde)));
  v.require(std::abs(mean(gap)) <= 3.0 * mc_se(gap), fmt("NDE + NIE - total %.2e (MC SE %.2e)", mean(gap), mc_se(gap)));
  v.require(std::abs(mean(noise_nie)) <= 3.0 * mc_se(noise_nie),
            fmt("noise mediator NIE %.5f (MC SE %.5f)", mean(noise_nie), mc_se(noise_nie)));
  return v;
}

// --- 14: indirect least squares ---------------------------------------------------------

Verdict ils_arithmetic() {
  Verdict v;
  auto rounded = [](double x) { return std::round(x * 1000.0) / 1000.0; };
  const double g1 = quasi_exp::indirect_least_squares(4.5, 0.35);
  const double g2 = quasi_exp::indirect_least_squares(7.2, 0.35);
  v.require(g1 == 4.5 / 0.35 && rounded(g1) == 12.857, fmt("4.5 / 0.35 = %.6f", g1));
  v.require(g2 == 7.2 / 0.35 && rounded(g2) == 20.571, fmt("7.2 / 0.35 = %.6f", g2));
  return v;
}

// --- 15: determinism ------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

Verdict determinism() {
  Verdict v;
  const nlohmann::json j = {
      {"schema_version", 1},
      {"simulate", {{"n_parishes", 24}, {"n_families_per_parish", 80}}},
      {"controls", {"none", "baseline"}},
      {"mediation", {{"n_draws", 100}, {"n_reps", 5}, {"controls", "none"}, {"outcomes", {"years_lived", "literacy"}}}},
      {"seed", 7}};
  std::vector<std::string> reports;
  std::size_t n_cells = 0;
  for (int run = 0; run < 2; ++run) {
    auto config = pipeline::RunConfig::from_json(j);
    config.output_dir = (fs::temp_directory_path() / ("qc_acceptance_run" + std::to_string(run))).string();
    config.jobs = run == 0 ? 1 : 2;
    fs::remove_all(config.output_dir);
    const auto est = pipeline::cmd_estimate(config);
    pipeline::cmd_mediate(config);
    n_cells = est.n_ok + est.n_failed;
    reports.push_back(slurp(fs::path(config.output_dir) / "report.json"));
  }
  v.require(!reports[0].empty() && reports[0] == reports[1],
            fmt("report.json identical across two runs (%.0f cells, %.0f bytes)", static_cast<double>(n_cells),
                static_cast<double>(reports[0].size())));
  return v;
}

struct Criterion {
  int id;
  const char* name;
  Verdict (*run)();
};

const Criterion kCriteria[] = {
    {1, "fe_equivalence", fe_equivalence},
    {2, "tsls_ratio_identity", ratio_identity},
    {3, "monte_carlo_g1", recovery_g1},
    {4, "monte_carlo_g2_g3", recovery_g2_g3},
    {5, "mother_fe_consistency", mother_fe_consistency},
    {6, "event_study_size", event_study_size},
    {7, "heckman_bias_reduction", heckman_bias},
    {8, "cox_correctness", cox_correctness},
    {9, "tsri_deconfounding", tsri_deconfounding},
    {10, "competing_risks", competing_risks_recovery},
    {11, "survival_math", survival_math},
    {12, "e_value", e_value_checks},
    {13, "mediation", mediation_recovery},
    {14, "indirect_least_squares", ils_arithmetic},
    {15, "determinism", determinism},
};

}  // namespace

int main(int argc, char** argv) {
  std::vector<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.push_back(std::atoi(argv[i]));
  int failures = 0;
  for (const auto& c : kCriteria) {
    if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), c.id) == wanted.end()) continue;
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail = std::string("error: ") + e.what();
    }
    failures += !v.pass;
    std::printf("criterion %02d %-24s %s  %s  [%.1f s]\n", c.id, c.name, v.pass ? "PASS" : "FAIL", v.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
