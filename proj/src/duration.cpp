#include "quasicausal/duration.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>

#include "quasicausal/errors.hpp"
#include "quasicausal/stats.hpp"

namespace quasicausal::duration {

using microdata::ControlSet;
using microdata::IndividualRecord;
using microdata::SpellTable;

Ties parse_ties(const std::string& name) {
  if (name == "efron") return Ties::efron;
  if (name == "breslow") return Ties::breslow;
  throw ConfigError("unknown ties method '" + name + "' (expected efron or breslow)");
}

std::string ties_name(Ties t) { return t == Ties::efron ? "efron" : "breslow"; }

SurvivalData SurvivalData::from_spells(const SpellTable& spells) {
  SurvivalData d;
  d.entry = spells.entry;
  d.exit = spells.exit;
  d.event = spells.event;
  d.stratum = spells.stratum;
  d.id = spells.id;
  d.x = spells.covariates;
  d.names = spells.covariate_names;
  return d;
}

SurvivalData SurvivalData::subset(const std::vector<std::size_t>& rows) const {
  SurvivalData d;
  d.names = names;
  d.x.resize(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = rows[i];
    d.entry.push_back(entry[r]);
    d.exit.push_back(exit[r]);
    d.event.push_back(event[r]);
    d.stratum.push_back(stratum[r]);
    d.id.push_back(id[r]);
    if (!cluster.empty()) d.cluster.push_back(cluster[r]);
    d.x.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(r));
  }
  return d;
}

std::optional<int> CoxFit::index_of(const std::string& name) const {
  for (std::size_t j = 0; j < names.size(); ++j)
    if (names[j] == name) return static_cast<int>(j);
  return std::nullopt;
}

double CoxFit::coef(const std::string& name) const {
  const auto j = index_of(name);
  if (!j) throw EstimationError("coefficient '" + name + "' not in the hazard model");
  return coefficients[*j];
}

double CoxFit::se(const std::string& name) const {
  const auto j = index_of(name);
  if (!j) throw EstimationError("coefficient '" + name + "' not in the hazard model");
  return std::sqrt(vcov(*j, *j));
}

double CoxFit::hazard_ratio(const std::string& name) const { return std::exp(coef(name)); }

// --- partial likelihood engine ------------------------------------------------------

namespace {

struct Stratum {
  std::int64_t code = 0;
  std::vector<int> by_exit;   // exit descending
  std::vector<int> by_entry;  // entry descending
  std::vector<double> times;  // distinct event times, descending
  bool informative = false;
};

struct Layout {
  std::vector<Stratum> strata;
  std::vector<int> cluster;  // dense
  int n_clusters = 0;
  std::size_t n_events = 0;
};

void check_data(const SurvivalData& d) {
  const std::size_t n = d.size();
  if (d.entry.size() != n || d.event.size() != n || d.stratum.size() != n || d.id.size() != n ||
      static_cast<std::size_t>(d.x.rows()) != n)
    throw EstimationError("survival data columns have different lengths");
  if (!d.cluster.empty() && d.cluster.size() != n) throw EstimationError("cluster ids do not match spells");
  if (d.names.size() != static_cast<std::size_t>(d.x.cols()))
    throw EstimationError("covariate names do not match covariate columns");
  for (std::size_t i = 0; i < n; ++i)
    if (!(d.exit[i] > d.entry[i])) throw EstimationError("spell with exit <= entry");
  if (!d.x.allFinite()) throw EstimationError("non-finite covariate value");
}

Layout make_layout(const SurvivalData& d) {
  check_data(d);
  Layout L;
  std::map<std::int64_t, std::vector<int>> groups;
  for (std::size_t i = 0; i < d.size(); ++i) groups[d.stratum[i]].push_back(static_cast<int>(i));
  for (auto& [code, rows] : groups) {
    Stratum s;
    s.code = code;
    s.by_exit = rows;
    std::sort(s.by_exit.begin(), s.by_exit.end(), [&](int a, int b) {
      if (d.exit[a] != d.exit[b]) return d.exit[a] > d.exit[b];
      return d.id[a] != d.id[b] ? d.id[a] > d.id[b] : a > b;
    });
    s.by_entry = rows;
    std::sort(s.by_entry.begin(), s.by_entry.end(), [&](int a, int b) {
      if (d.entry[a] != d.entry[b]) return d.entry[a] > d.entry[b];
      return d.id[a] != d.id[b] ? d.id[a] > d.id[b] : a > b;
    });
    for (int r : s.by_exit)
      if (d.event[r] && (s.times.empty() || s.times.back() != d.exit[r])) s.times.push_back(d.exit[r]);
    L.n_events += static_cast<std::size_t>(std::count_if(rows.begin(), rows.end(), [&](int r) { return d.event[r] != 0; }));
    if (!s.times.empty() && rows.size() >= 2)
      for (Eigen::Index j = 0; j < d.x.cols() && !s.informative; ++j)
        for (int r : rows)
          if (d.x(r, j) != d.x(rows.front(), j)) {
            s.informative = true;
            break;
          }
    L.strata.push_back(std::move(s));
  }
  const auto& cl = d.cluster.empty() ? d.id : d.cluster;
  std::map<std::int64_t, int> ids;
  for (auto c : cl) ids.emplace(c, 0);
  for (auto& [c, v] : ids) v = L.n_clusters++;
  L.cluster.reserve(cl.size());
  for (auto c : cl) L.cluster.push_back(ids.at(c));
  return L;
}

struct Evaluation {
  double loglik = 0.0;
  Vector score;
  Matrix info;
  Matrix cluster_scores;  // n_clusters x p, when requested
  std::vector<BaselineHazard> baseline;
};

Evaluation evaluate(const SurvivalData& d, const Layout& L, const Vector& beta, Ties ties, bool want_info,
                    bool want_residuals) {
  const Eigen::Index p = d.x.cols();
  const auto n = static_cast<Eigen::Index>(d.size());
  const Vector eta = d.x * beta;
  const double shift = n > 0 ? eta.maxCoeff() : 0.0;
  const Vector w = (eta.array() - shift).exp();
  Evaluation ev;
  ev.score = Vector::Zero(p);
  if (want_info) ev.info = Matrix::Zero(p, p);
  if (want_residuals) ev.cluster_scores = Matrix::Zero(L.n_clusters, p);
  Vector c = Vector::Zero(n);

  constexpr Eigen::Index kBlock = 256;
  Matrix block(want_info ? kBlock : 0, p);
  Eigen::Index filled = 0;
  auto flush = [&] {
    if (filled == 0) return;
    ev.info.noalias() -= block.topRows(filled).transpose() * block.topRows(filled);
    filled = 0;
  };

  Vector a1(p), b1(p), gup(p), d1(p), dx(p), s1(p), xb(p), g_t(p), gd_t(p), m_t(p);
  std::vector<int> deaths;
  for (const auto& st : L.strata) {
    double a0 = 0.0, b0 = 0.0, hup = 0.0;
    a1.setZero();
    b1.setZero();
    gup.setZero();
    std::size_t ia = 0, ib = 0;
    BaselineHazard base;
    base.stratum = st.code;
    for (double t : st.times) {
      deaths.clear();
      while (ia < st.by_exit.size() && d.exit[st.by_exit[ia]] >= t) {
        const int j = st.by_exit[ia++];
        a0 += w[j];
        a1.noalias() += w[j] * d.x.row(j).transpose();
        c[j] = -hup;
        if (want_residuals) ev.cluster_scores.row(L.cluster[j]).noalias() -= w[j] * gup.transpose();
        if (d.event[j] && d.exit[j] == t) deaths.push_back(j);
      }
      while (ib < st.by_entry.size() && d.entry[st.by_entry[ib]] >= t) {
        const int j = st.by_entry[ib++];
        b0 += w[j];
        b1.noalias() += w[j] * d.x.row(j).transpose();
        c[j] += hup;
        if (want_residuals) ev.cluster_scores.row(L.cluster[j]).noalias() += w[j] * gup.transpose();
      }
      const double s0 = a0 - b0;
      s1 = a1 - b1;
      double d0 = 0.0;
      d1.setZero();
      dx.setZero();
      for (int j : deaths) {
        d0 += w[j];
        d1.noalias() += w[j] * d.x.row(j).transpose();
        dx.noalias() += d.x.row(j).transpose();
        ev.loglik += eta[j] - shift;
      }
      ev.score += dx;
      const auto nd = static_cast<double>(deaths.size());
      double h_t = 0.0, hd_t = 0.0;
      g_t.setZero();
      gd_t.setZero();
      m_t.setZero();
      for (std::size_t l = 0; l < deaths.size(); ++l) {
        const double f = ties == Ties::efron ? static_cast<double>(l) / nd : 0.0;
        const double s0l = s0 - f * d0;
        if (!(s0l > 0.0)) throw EstimationError("cox: empty risk set at an event time");
        xb = (s1 - f * d1) / s0l;
        ev.loglik -= std::log(s0l);
        ev.score -= xb;
        h_t += 1.0 / s0l;
        hd_t += f / s0l;
        m_t += xb;
        if (want_residuals) {
          g_t += xb / s0l;
          gd_t += f * xb / s0l;
        }
        if (want_info) {
          block.row(filled++) = xb.transpose();
          if (filled == kBlock) flush();
        }
      }
      m_t /= nd;
      for (int j : deaths) {
        c[j] -= hd_t;
        if (want_residuals)
          ev.cluster_scores.row(L.cluster[j]).noalias() += (d.x.row(j) - m_t.transpose() - w[j] * gd_t.transpose());
      }
      hup += h_t;
      if (want_residuals) gup += g_t;
      base.time.push_back(t);
      base.increment.push_back(h_t * std::exp(-shift));
    }
    // subjects exiting before the first event time are never at risk; the
    // entry sweep below must cancel to zero for them
    for (; ia < st.by_exit.size(); ++ia) {
      const int j = st.by_exit[ia];
      c[j] = -hup;
      if (want_residuals) ev.cluster_scores.row(L.cluster[j]).noalias() -= w[j] * gup.transpose();
    }
    // subjects never removed were at risk from the first event time on
    for (; ib < st.by_entry.size(); ++ib) {
      const int j = st.by_entry[ib];
      c[j] += hup;
      if (want_residuals) ev.cluster_scores.row(L.cluster[j]).noalias() += w[j] * gup.transpose();
    }
    std::reverse(base.time.begin(), base.time.end());
    std::reverse(base.increment.begin(), base.increment.end());
    ev.baseline.push_back(std::move(base));
  }
  const Vector wc = w.cwiseProduct(c);
  if (want_info) {
    flush();
    ev.info.noalias() += d.x.transpose() * (d.x.array().colwise() * wc.array()).matrix();
    ev.info = 0.5 * (ev.info + ev.info.transpose()).eval();
  }
  if (want_residuals)
    for (Eigen::Index j = 0; j < n; ++j) ev.cluster_scores.row(L.cluster[j]).noalias() -= wc[j] * d.x.row(j);
  return ev;
}

CoxFit fit_with_layout(const SurvivalData& d, const Layout& L, const CoxOptions& o) {
  const Eigen::Index p = d.x.cols();
  if (p == 0) throw EstimationError("cox: no covariates");
  if (L.n_events == 0) throw EstimationError("cox: no events");
  Vector beta = Vector::Zero(p);
  Evaluation cur = evaluate(d, L, beta, o.ties, true, false);

  for (Eigen::Index j = 0; j < p; ++j)
    if (!(cur.info(j, j) > 1e-12 * std::max(1.0, cur.info.diagonal().cwiseAbs().maxCoeff())))
      throw IdentificationError("cox: covariate '" + d.names[static_cast<std::size_t>(j)] +
                                "' does not vary within risk sets");
  {
    const Eigen::SelfAdjointEigenSolver<Matrix> eig(cur.info);
    if (eig.eigenvalues().minCoeff() <= 1e-12 * eig.eigenvalues().maxCoeff())
      throw IdentificationError("cox: covariates are collinear within risk sets");
  }

  bool converged = false;
  int iter = 0;
  for (; iter < o.max_iterations; ++iter) {
    const Eigen::LDLT<Matrix> ldlt(cur.info);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
      throw SeparationError("cox: information matrix degenerate (monotone likelihood)");
    Vector step = ldlt.solve(cur.score);
    // a vanishing score with a unit-sized Newton step is a monotone likelihood
    if (cur.score.cwiseAbs().maxCoeff() < o.score_tolerance && step.cwiseAbs().maxCoeff() < 1e-4) {
      converged = true;
      break;
    }
    // ascent is judged up to the rounding floor of the log likelihood
    const double slack = 1e-12 * std::max(1.0, std::abs(cur.loglik));
    Evaluation next = evaluate(d, L, beta + step, o.ties, true, false);
    int h = 0;
    for (; h < o.max_halvings && !(next.loglik >= cur.loglik - slack); ++h) {
      step *= 0.5;
      next = evaluate(d, L, beta + step, o.ties, true, false);
    }
    if (!(next.loglik >= cur.loglik - slack)) {
      // no ascent left: accept when at the floating-point floor of the score
      if (cur.score.cwiseAbs().maxCoeff() < 1e3 * o.score_tolerance) converged = true;
      break;
    }
    beta += step;
    cur = std::move(next);
    if (beta.cwiseAbs().maxCoeff() > o.divergence_bound)
      throw SeparationError("cox: coefficients diverge (monotone partial likelihood)");
  }
  if (!converged) throw ConvergenceError("cox: Newton did not converge in " + std::to_string(o.max_iterations) +
                                         " iterations");

  const Evaluation fin = evaluate(d, L, beta, o.ties, true, true);
  CoxFit fit;
  fit.names = d.names;
  fit.coefficients = beta;
  fit.score = fin.score;
  fit.log_partial_likelihood = fin.loglik;
  fit.ties = o.ties;
  fit.n_obs = d.size();
  fit.n_events = L.n_events;
  fit.n_clusters = static_cast<std::size_t>(L.n_clusters);
  fit.n_strata = L.strata.size();
  fit.n_informative_strata =
      static_cast<std::size_t>(std::count_if(L.strata.begin(), L.strata.end(), [](const Stratum& s) { return s.informative; }));
  fit.iterations = iter;
  fit.baseline = fin.baseline;
  const Eigen::LDLT<Matrix> ldlt(fin.info);
  fit.naive_vcov = ldlt.solve(Matrix::Identity(p, p));
  fit.naive_vcov = 0.5 * (fit.naive_vcov + fit.naive_vcov.transpose()).eval();
  if (L.n_clusters >= 2) {
    const double g = L.n_clusters;
    const Matrix meat = fin.cluster_scores.transpose() * fin.cluster_scores;
    fit.vcov = g / (g - 1.0) * fit.naive_vcov * meat * fit.naive_vcov;
    fit.vcov = 0.5 * (fit.vcov + fit.vcov.transpose()).eval();
  } else {
    fit.vcov = fit.naive_vcov;
  }
  fit.covariate_means = d.x.colwise().mean().transpose();
  fit.max_time = *std::max_element(d.exit.begin(), d.exit.end());
  return fit;
}

}  // namespace

PartialLikelihood partial_likelihood(const SurvivalData& d, const Vector& beta, Ties ties) {
  const Layout L = make_layout(d);
  const auto ev = evaluate(d, L, beta, ties, true, false);
  return {ev.loglik, ev.score, ev.info};
}

CoxFit cox_fit(const SurvivalData& d, const CoxOptions& options) {
  const Layout L = make_layout(d);
  return fit_with_layout(d, L, options);
}

CoxFit stratified_cox(SurvivalData d, const std::vector<std::int64_t>& strata, const CoxOptions& options) {
  if (strata.size() != d.size()) throw EstimationError("stratified_cox: one stratum code per spell required");
  d.stratum = strata;
  const Layout L = make_layout(d);
  if (std::none_of(L.strata.begin(), L.strata.end(), [](const Stratum& s) { return s.informative; }))
    throw IdentificationError("stratified_cox: no stratum has both events and covariate variation");
  return fit_with_layout(d, L, options);
}

// --- Anscombe residuals ---------------------------------------------------------------

Vector anscombe_residuals(const Vector& y, const Vector& p) {
  if (y.size() != p.size()) throw EstimationError("anscombe_residuals: size mismatch");
  constexpr double a = 2.0 / 3.0;
  Vector r(y.size());
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (!(p[i] > 0.0 && p[i] < 1.0)) throw DomainError("anscombe_residuals: fitted probability outside (0, 1)");
    if (!(y[i] >= 0.0 && y[i] <= 1.0)) throw DomainError("anscombe_residuals: outcome outside [0, 1]");
    r[i] = (stats::incomplete_beta(a, a, y[i]) - stats::incomplete_beta(a, a, p[i])) /
           std::pow(p[i] * (1.0 - p[i]), 1.0 / 6.0);
  }
  return r;
}

Vector anscombe_residuals(const FitResult& logit, const Matrix& design, const Vector& y) {
  return anscombe_residuals(y, regress::binary_probabilities(regress::BinaryLink::logit,
                                                               design(Eigen::all, logit.kept_columns),
                                                               logit.coefficients));
}

// --- 2SRI ----------------------------------------------------------------------------

namespace {

struct Persons {
  std::vector<std::size_t> records;                   // record indices, ascending
  std::map<std::size_t, Eigen::Index> row_of_record;  // record index -> person row
};

Persons select_persons(const SpellTable& spells, const std::vector<IndividualRecord>& records,
                       const microdata::InstrumentTable& z, std::pair<int, int> cohorts) {
  std::set<std::size_t> keep;
  for (auto ri : spells.record_index) {
    const auto& r = records.at(ri);
    if (r.generation != microdata::Generation::G1 || r.excluded) continue;
    if (r.cohort < cohorts.first || r.cohort > cohorts.second) continue;
    if (!z.find(r.parish, r.cohort)) continue;
    keep.insert(ri);
  }
  Persons p;
  p.records.assign(keep.begin(), keep.end());
  for (std::size_t i = 0; i < p.records.size(); ++i) p.row_of_record[p.records[i]] = static_cast<Eigen::Index>(i);
  return p;
}

/// Person-level control dummies and covariates (no intercept).
Matrix person_controls(const Persons& P, const std::vector<IndividualRecord>& records, ControlSet controls,
                       std::vector<std::string>& names) {
  const auto n = static_cast<Eigen::Index>(P.records.size());
  Matrix out(n, 0);
  if (controls == ControlSet::none) return out;
  std::vector<std::int64_t> parish, rc;
  for (auto ri : P.records) {
    parish.push_back(records[ri].parish);
    rc.push_back(microdata::region_cohort_code(records[ri].region, records[ri].cohort));
  }
  const Matrix dp = regress::dummy_columns(parish, true, &names, "parish_");
  const Matrix dr = regress::dummy_columns(rc, true, &names, "region_cohort_");
  out.resize(n, dp.cols() + dr.cols());
  out << dp, dr;
  if (controls == ControlSet::full) {
    Matrix fx(n, microdata::kFamilyCovariates + 1);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& r = records[P.records[static_cast<std::size_t>(i)]];
      fx(i, 0) = r.sex == microdata::Sex::male ? 1.0 : 0.0;
      for (int k = 0; k < microdata::kFamilyCovariates; ++k) fx(i, k + 1) = r.family_covariates[static_cast<std::size_t>(k)];
    }
    names.emplace_back("male");
    for (const char* c : microdata::kFamilyCovariateNames) names.emplace_back(c);
    Matrix both(n, out.cols() + fx.cols());
    both << out, fx;
    out = std::move(both);
  }
  return out;
}

TsriResult two_stage(const SpellTable& spells, const std::vector<IndividualRecord>& records,
                     const microdata::InstrumentTable& z, const TsriOptions& o, bool per_cause) {
  const Persons P = select_persons(spells, records, z, o.cohorts);
  if (P.records.empty()) throw EstimationError("2SRI: no spells for G1 persons in the cohort window");
  const auto np = static_cast<Eigen::Index>(P.records.size());

  std::vector<std::string> ctrl_names;
  const Matrix ctrl = person_controls(P, records, o.controls, ctrl_names);
  Matrix s1(np, 2 + ctrl.cols());
  Vector t(np);
  std::vector<std::int64_t> parish;
  for (Eigen::Index i = 0; i < np; ++i) {
    const auto& r = records[P.records[static_cast<std::size_t>(i)]];
    s1(i, 0) = 1.0;
    s1(i, 1) = z.at(r.parish, r.cohort);
    t[i] = r.treated ? 1.0 : 0.0;
    parish.push_back(r.parish);
  }
  s1.rightCols(ctrl.cols()) = ctrl;
  std::vector<std::string> s1_names{"intercept", "instrument"};
  s1_names.insert(s1_names.end(), ctrl_names.begin(), ctrl_names.end());
  const auto sel = regress::select_independent_columns(s1);
  if (sel.kept.size() < 2 || sel.kept[1] != 1)
    throw IdentificationError("2SRI: instrument is collinear with the controls");

  TsriResult out;
  out.n_persons = P.records.size();
  out.first_stage = regress::logit_fit(s1(Eigen::all, sel.kept), t, parish,
                                       [&] {
                                         std::vector<std::string> v;
                                         for (int j : sel.kept) v.push_back(s1_names[static_cast<std::size_t>(j)]);
                                         return v;
                                       }());
  out.first_stage_f = std::pow(out.first_stage.coef("instrument") / out.first_stage.se("instrument"), 2);
  const Vector resid = anscombe_residuals(out.first_stage, s1(Eigen::all, sel.kept), t);

  // stage 2 rows: every spell of a selected person
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < spells.size(); ++i)
    if (P.row_of_record.count(spells.record_index[i])) rows.push_back(i);

  std::vector<int> causes{0};
  if (per_cause && spells.cause_stacked) {
    std::set<int> cs;
    for (auto i : rows) cs.insert(static_cast<int>(spells.stratum[i]));
    causes.assign(cs.begin(), cs.end());
  }
  std::vector<int> estimable;
  for (int c : causes) {
    bool any = false;
    for (auto i : rows)
      if ((!spells.cause_stacked || spells.stratum[i] == c) && spells.event[i]) any = true;
    (any ? estimable : out.inestimable).push_back(c);
  }
  if (estimable.empty()) throw EstimationError("2SRI: no events");
  if (per_cause) out.causes = causes;

  std::vector<int> ctrl_cols;  // kept control columns (indices into ctrl)
  for (int j : sel.kept)
    if (j >= 2) ctrl_cols.push_back(j - 2);
  const bool stacked_terms = per_cause && spells.cause_stacked;
  const auto n_treat = static_cast<Eigen::Index>(stacked_terms ? estimable.size() : 1);
  const auto n_res = static_cast<Eigen::Index>(o.include_residual ? 1 : 0);
  SurvivalData d;
  const auto n = static_cast<Eigen::Index>(rows.size());
  d.x = Matrix::Zero(n, n_treat + n_res + static_cast<Eigen::Index>(ctrl_cols.size()));
  if (stacked_terms)
    for (int c : estimable) d.names.push_back("treated_x_cause" + std::to_string(c));
  else
    d.names.emplace_back("treated");
  if (o.include_residual) d.names.emplace_back("residual");
  for (int j : ctrl_cols) d.names.push_back(ctrl_names[static_cast<std::size_t>(j)]);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto si = rows[static_cast<std::size_t>(i)];
    const auto pr = P.row_of_record.at(spells.record_index[si]);
    const auto& r = records[spells.record_index[si]];
    d.entry.push_back(spells.entry[si]);
    d.exit.push_back(spells.exit[si]);
    d.event.push_back(spells.event[si]);
    d.stratum.push_back(spells.stratum[si]);
    d.id.push_back(spells.id[si]);
    d.cluster.push_back(r.parish);
    if (stacked_terms) {
      const auto it = std::find(estimable.begin(), estimable.end(), static_cast<int>(spells.stratum[si]));
      if (it != estimable.end()) d.x(i, it - estimable.begin()) = t[pr];
    } else {
      d.x(i, 0) = t[pr];
    }
    if (o.include_residual) d.x(i, n_treat) = resid[pr];
    for (std::size_t k = 0; k < ctrl_cols.size(); ++k)
      d.x(i, n_treat + n_res + static_cast<Eigen::Index>(k)) = ctrl(pr, ctrl_cols[k]);
  }
  out.fit = cox_fit(d, o.cox);
  return out;
}

}  // namespace

TsriResult tsri_hazard(const SpellTable& spells, const std::vector<IndividualRecord>& records,
                       const microdata::InstrumentTable& instrument, const TsriOptions& options) {
  if (spells.cause_stacked) throw DesignError("tsri_hazard: use competing_risks for cause-stacked spells");
  return two_stage(spells, records, instrument, options, false);
}

TsriResult competing_risks(const SpellTable& spells, const std::vector<IndividualRecord>& records,
                           const microdata::InstrumentTable& instrument, const TsriOptions& options) {
  return two_stage(spells, records, instrument, options, true);
}

// --- survival ------------------------------------------------------------------------

double StepSurvival::at(double age) const {
  if (time.empty() || age < time.front()) return 1.0;
  const auto it = std::upper_bound(time.begin(), time.end(), age);
  return value[static_cast<std::size_t>(it - time.begin()) - 1];
}

double StepSurvival::integral(double lo, double hi) const {
  if (!(hi > lo)) return 0.0;
  std::vector<double> parts;
  double a = lo;
  // segment [time[k], time[k+1]) carries value[k]; before time[0] the value is 1
  if (time.empty()) return hi - lo;
  if (a < time.front()) {
    const double b = std::min(hi, time.front());
    parts.push_back(b - a);
    a = b;
  }
  auto k = static_cast<std::size_t>(std::upper_bound(time.begin(), time.end(), a) - time.begin());
  if (k == 0) k = 1;
  for (std::size_t s = k - 1; s < time.size() && a < hi; ++s) {
    const double end = s + 1 < time.size() ? std::min(hi, time[s + 1]) : hi;
    if (end > a) parts.push_back(value[s] * (end - a));
    a = std::max(a, end);
  }
  return stats::compensated_sum(parts);
}

StepSurvival survival_steps(const CoxFit& fit, const Vector& profile, double start_age,
                            std::optional<std::int64_t> stratum) {
  if (profile.size() != fit.coefficients.size()) throw EstimationError("survival: profile length mismatch");
  const BaselineHazard* base = nullptr;
  if (stratum) {
    for (const auto& b : fit.baseline)
      if (b.stratum == *stratum) base = &b;
    if (!base) throw EstimationError("survival: unknown stratum " + std::to_string(*stratum));
  } else {
    if (fit.baseline.size() != 1) throw EstimationError("survival: choose a stratum of a stratified fit");
    base = &fit.baseline.front();
  }
  const double risk = std::exp(profile.dot(fit.coefficients));
  StepSurvival s;
  s.time.push_back(start_age);
  s.value.push_back(1.0);
  double h = 0.0;
  for (std::size_t k = 0; k < base->time.size(); ++k) {
    h += base->increment[k];
    if (base->time[k] <= start_age) continue;
    s.time.push_back(base->time[k]);
    s.value.push_back(std::exp(-h * risk));
  }
  return s;
}

SurvivalCurve survival_and_expectancy(const CoxFit& fit, const Vector& treated_profile,
                                      const Vector& untreated_profile, double start_age,
                                      const std::vector<std::pair<double, double>>& bands,
                                      std::optional<std::int64_t> stratum) {
  const auto st = survival_steps(fit, treated_profile, start_age, stratum);
  const auto su = survival_steps(fit, untreated_profile, start_age, stratum);
  SurvivalCurve out;
  for (std::size_t k = 0; k < st.time.size() && st.time[k] <= kMaxAge; ++k) {
    out.age.push_back(st.time[k]);
    out.s_treated.push_back(st.value[k]);
    out.s_untreated.push_back(su.value[k]);
  }
  auto band = [&](double lo, double hi) {
    BandExpectancy b;
    b.lo = lo;
    b.hi = hi;
    const double a = std::max(lo, start_age), e = std::min(hi, kMaxAge);
    b.treated = st.integral(a, e);
    b.untreated = su.integral(a, e);
    b.added = b.treated - b.untreated;
    b.extrapolated = e > fit.max_time;
    return b;
  };
  for (const auto& [lo, hi] : bands) {
    if (!(hi > lo)) throw EstimationError("survival: band upper bound must exceed the lower bound");
    out.bands.push_back(band(lo, hi));
  }
  out.total = band(start_age, kMaxAge);
  return out;
}

std::pair<Vector, Vector> arm_profiles(const CoxFit& fit, const std::string& treatment) {
  const auto j = fit.index_of(treatment);
  if (!j) throw EstimationError("survival: no '" + treatment + "' coefficient");
  Vector t = fit.covariate_means, u = fit.covariate_means;
  t[*j] = 1.0;
  u[*j] = 0.0;
  return {t, u};
}

void write_survival_csv(const SurvivalCurve& curve, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << "age,S_treated,S_untreated,added_band\n";
  for (std::size_t k = 0; k < curve.age.size(); ++k) {
    const double a = curve.age[k];
    std::string added;
    for (const auto& b : curve.bands)
      if (a >= b.lo && a < b.hi) {
        added = microdata::format_double(b.added);
        break;
      }
    out << microdata::format_double(a) << ',' << microdata::format_double(curve.s_treated[k]) << ','
        << microdata::format_double(curve.s_untreated[k]) << ',' << added << '\n';
  }
  if (!out) throw IoError("failed writing " + path);
}

// --- E-value -------------------------------------------------------------------------

namespace {

double e_of_ratio(double rr) {
  if (rr < 1.0) rr = 1.0 / rr;
  return rr + std::sqrt(rr * (rr - 1.0));
}

}  // namespace

EValue e_value(double hazard_ratio, double ci_bound) {
  if (!(hazard_ratio > 0.0) || !std::isfinite(hazard_ratio)) throw DomainError("e_value: hazard ratio must be positive");
  if (!(ci_bound > 0.0) || !std::isfinite(ci_bound)) throw DomainError("e_value: CI bound must be positive");
  EValue e;
  e.e_value = e_of_ratio(hazard_ratio);
  const bool covers = hazard_ratio < 1.0 ? ci_bound >= 1.0 : ci_bound <= 1.0;
  e.e_value_ci = hazard_ratio == 1.0 || covers ? 1.0 : e_of_ratio(ci_bound);
  return e;
}

}  // namespace quasicausal::duration
