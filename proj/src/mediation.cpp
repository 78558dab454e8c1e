#include "quasicausal/mediation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <unordered_map>

#include "quasicausal/errors.hpp"
#include "quasicausal/quasi_exp.hpp"
#include "quasicausal/rng.hpp"
#include "quasicausal/stats.hpp"

namespace quasicausal::mediation {

using microdata::AnalysisSample;
using microdata::ControlSet;

Link parse_link(const std::string& name) {
  if (name == "linear") return Link::linear;
  if (name == "logit") return Link::logit;
  throw ConfigError("unknown link '" + name + "' (linear, logit)");
}

std::string link_name(Link l) { return l == Link::linear ? "linear" : "logit"; }

MediatorKind parse_mediator(const std::string& name) {
  if (name == "child_vaccination") return MediatorKind::child_vaccination;
  if (name == "parental_occupation") return MediatorKind::parental_occupation;
  if (name == "midwife_assisted") return MediatorKind::midwife_assisted;
  if (name == "epigenetic") return MediatorKind::epigenetic;
  throw ConfigError("unknown mediator '" + name +
                    "' (child_vaccination, parental_occupation, midwife_assisted, epigenetic)");
}

std::string mediator_name(MediatorKind m) {
  switch (m) {
    case MediatorKind::child_vaccination: return "child_vaccination";
    case MediatorKind::parental_occupation: return "parental_occupation";
    case MediatorKind::midwife_assisted: return "midwife_assisted";
    case MediatorKind::epigenetic: return "epigenetic";
  }
  return "";
}

Link default_link(MediatorKind m) {
  return m == MediatorKind::child_vaccination || m == MediatorKind::midwife_assisted ? Link::logit : Link::linear;
}

// --- epigenetic mediator -------------------------------------------------------------

EpigeneticMediator build_epigenetic_mediator(const AnalysisSample& s) {
  // one row per child
  std::map<std::size_t, std::size_t> first_row;
  for (std::size_t i = 0; i < s.size(); ++i) first_row.try_emplace(s.record_index[i], i);
  const auto n = static_cast<Eigen::Index>(first_row.size());
  if (n == 0) throw EstimationError("epigenetic mediator: empty sample");
  std::vector<std::size_t> rows;
  for (const auto& [rec, row] : first_row) rows.push_back(row);

  Vector y(n);
  std::vector<std::int64_t> mother, cohort;
  Vector male(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto r = rows[static_cast<std::size_t>(i)];
    y[i] = s.outcome[static_cast<Eigen::Index>(r)];
    male[i] = s.family_x.cols() > 0 ? s.family_x(static_cast<Eigen::Index>(r), 0) : 0.0;
    mother.push_back(s.mother[r]);
    cohort.push_back(s.child_cohort[r]);
  }
  if (!y.allFinite()) throw EstimationError("epigenetic mediator: outcome must be observed on every row");

  std::unordered_map<std::int64_t, int> mother_code;
  for (auto m : mother) mother_code.try_emplace(m, static_cast<int>(mother_code.size()));
  const auto n_mothers = static_cast<Eigen::Index>(mother_code.size());
  std::vector<int> mcode;
  Vector k = Vector::Zero(n_mothers);
  for (auto m : mother) {
    mcode.push_back(mother_code.at(m));
    k[mcode.back()] += 1.0;
  }
  const auto multi = static_cast<std::size_t>((k.array() >= 2.0).count());
  if (multi == 0) throw IdentificationError("epigenetic mediator: every mother has a single child");

  Matrix x(n, 1);
  x.col(0) = male;
  {
    const Matrix d = regress::dummy_columns(cohort, true);
    Matrix both(n, 1 + d.cols());
    both << x, d;
    x = std::move(both);
  }
  // within-mother regression on the covariates that vary among siblings
  const regress::FeProjector proj(regress::FeSpec{{{"mother", mother}}}, static_cast<std::size_t>(n));
  Matrix xd = x;
  Vector yd = y;
  proj.demean(yd);
  for (Eigen::Index j = 0; j < xd.cols(); ++j) proj.demean(xd.col(j));
  const auto sel = regress::select_independent_columns(xd);
  Vector beta = Vector::Zero(x.cols());
  if (!sel.kept.empty()) {
    const Matrix xk = xd(Eigen::all, sel.kept);
    const Vector b = xk.colPivHouseholderQr().solve(yd);
    for (std::size_t j = 0; j < sel.kept.size(); ++j) beta[sel.kept[j]] = b[static_cast<Eigen::Index>(j)];
  }
  const Vector r = y - x * beta;
  Vector mu = Vector::Zero(n_mothers);
  for (Eigen::Index i = 0; i < n; ++i) mu[mcode[i]] += r[i];
  mu.array() /= k.array();

  const double rbar = r.mean();
  double sse = 0.0, ssb = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) sse += std::pow(r[i] - mu[mcode[i]], 2);
  for (Eigen::Index m = 0; m < n_mothers; ++m) ssb += k[m] * std::pow(mu[m] - rbar, 2);
  const double df_e = static_cast<double>(n - n_mothers) - static_cast<double>(sel.kept.size());
  if (!(df_e > 0.0)) throw IdentificationError("epigenetic mediator: no within-mother degrees of freedom");
  const double s2e = sse / df_e;
  const double nn = static_cast<double>(n);
  const double n0 = nn - k.squaredNorm() / nn;
  const double s2u = std::max(0.0, (ssb - static_cast<double>(n_mothers - 1) * s2e) / n0);

  Vector shrunk(n_mothers), rawm(n_mothers);
  for (Eigen::Index m = 0; m < n_mothers; ++m) {
    const double lambda = s2u > 0.0 ? s2u / (s2u + s2e / k[m]) : 0.0;
    rawm[m] = mu[m] - rbar;
    shrunk[m] = lambda * rawm[m];
  }

  EpigeneticMediator out;
  out.mother_variance = s2u;
  out.residual_variance = s2e;
  out.n_mothers = static_cast<std::size_t>(n_mothers);
  out.n_multi_child_mothers = multi;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const int m = mother_code.at(s.mother[i]);
    out.values.push_back(shrunk[m]);
    out.raw.push_back(rawm[m]);
  }
  const double cv = stats::compensated_sum(out.values) / static_cast<double>(s.size());
  const double cr = stats::compensated_sum(out.raw) / static_cast<double>(s.size());
  for (auto& v : out.values) v -= cv;
  for (auto& v : out.raw) v -= cr;
  return out;
}

std::vector<double> mediator_values(const AnalysisSample& s, const std::vector<microdata::IndividualRecord>& records,
                                    MediatorKind kind, const EpigeneticMediator* epigenetic) {
  constexpr double nan = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> out(s.size(), nan);
  if (kind == MediatorKind::epigenetic) {
    if (!epigenetic || epigenetic->values.size() != s.size())
      throw EstimationError("epigenetic mediator must be built on the same sample");
    return epigenetic->values;
  }
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto& r = records.at(s.record_index[i]);
    switch (kind) {
      case MediatorKind::child_vaccination:
        if (r.child_vaccinated) out[i] = *r.child_vaccinated ? 1.0 : 0.0;
        break;
      case MediatorKind::parental_occupation: {
        // mean of paternal and maternal occupational scores at birth
        const double v = 0.5 * (r.family_covariates[0] + r.family_covariates[1]);
        if (std::isfinite(v)) out[i] = v;
        break;
      }
      case MediatorKind::midwife_assisted: out[i] = r.midwife_assisted ? 1.0 : 0.0; break;
      case MediatorKind::epigenetic: break;
    }
  }
  return out;
}

// --- data ----------------------------------------------------------------------------

MediationData MediationData::subset(const std::vector<std::size_t>& rows, const regress::ClusterIds* new_cluster) const {
  std::vector<Eigen::Index> idx(rows.begin(), rows.end());
  MediationData d;
  d.outcome = outcome(idx);
  d.treatment = treatment(idx);
  d.mediator = mediator(idx);
  d.controls = controls(idx, Eigen::all);
  d.control_names = control_names;
  if (instrument.size() > 0) d.instrument = instrument(idx);
  for (const auto& f : fe.factors) {
    regress::Factor g{f.name, {}};
    for (auto r : rows) g.codes.push_back(f.codes[r]);
    d.fe.factors.push_back(std::move(g));
  }
  if (new_cluster) {
    d.cluster = *new_cluster;
  } else {
    for (auto r : rows) d.cluster.push_back(cluster[r]);
  }
  return d;
}

MediationData mediation_data(const AnalysisSample& s, const std::vector<double>& mediator, ControlSet controls,
                             bool first_stage_residual) {
  if (mediator.size() != s.size()) throw EstimationError("mediator must have one value per sample row");
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (std::isfinite(mediator[i]) && std::isfinite(s.outcome[static_cast<Eigen::Index>(i)])) rows.push_back(i);
  if (rows.empty()) throw ValidationError("mediator is missing on every row");
  const auto sub = s.subset(rows);
  const auto cd = quasi_exp::control_design(sub, controls);
  MediationData d;
  d.outcome = sub.outcome;
  d.treatment = sub.treatment;
  d.mediator.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) d.mediator[static_cast<Eigen::Index>(i)] = mediator[rows[i]];
  std::vector<int> keep;
  for (std::size_t j = 0; j < cd.names.size(); ++j)
    if (cd.names[j] != "intercept") {
      keep.push_back(static_cast<int>(j));
      d.control_names.push_back(cd.names[j]);
    }
  d.controls = cd.exog(Eigen::all, keep);
  d.fe = cd.fe;
  if (first_stage_residual) d.instrument = sub.instrument;
  d.cluster = sub.cluster;
  return d;
}

// --- estimation ----------------------------------------------------------------------

namespace {

constexpr int kHermiteNodes = 20;

double logistic(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

/// Nodes and weights for E[f(Z)], Z ~ N(0, 1) (Golub-Welsch).
const std::pair<Vector, Vector>& hermite_rule() {
  static const std::pair<Vector, Vector> rule = [] {
    Matrix j = Matrix::Zero(kHermiteNodes, kHermiteNodes);
    for (int i = 1; i < kHermiteNodes; ++i) j(i, i - 1) = j(i - 1, i) = std::sqrt(i / 2.0);
    const Eigen::SelfAdjointEigenSolver<Matrix> es(j);
    Vector nodes = std::sqrt(2.0) * es.eigenvalues();
    Vector weights = es.eigenvectors().row(0).transpose().array().square();
    return std::pair{nodes, weights};
  }();
  return rule;
}

/// Fixed part of every model: the design block after the primary columns.
struct Controls {
  Matrix logit_block;  // intercept, controls, FE dummies
  std::vector<std::string> logit_names;
  Matrix linear_block;  // controls (demeaned when FE are absorbed), intercept without FE
  std::vector<std::string> linear_names;
  std::optional<regress::FeProjector> projector;
};

Controls make_controls(const MediationData& d, bool need_logit) {
  const auto n = static_cast<Eigen::Index>(d.size());
  Controls c;
  if (d.fe.empty()) {
    c.linear_block.resize(n, 1 + d.controls.cols());
    c.linear_block << Vector::Ones(n), d.controls;
    c.linear_names.emplace_back("intercept");
    c.linear_names.insert(c.linear_names.end(), d.control_names.begin(), d.control_names.end());
  } else {
    c.projector.emplace(d.fe, d.size());
    c.linear_block = d.controls;
    for (Eigen::Index j = 0; j < c.linear_block.cols(); ++j) c.projector->demean(c.linear_block.col(j));
    c.linear_names = d.control_names;
  }
  if (need_logit) {
    std::vector<Matrix> blocks{Vector::Ones(n), d.controls};
    c.logit_names.emplace_back("intercept");
    c.logit_names.insert(c.logit_names.end(), d.control_names.begin(), d.control_names.end());
    for (const auto& f : d.fe.factors) blocks.push_back(regress::dummy_columns(f.codes, true, &c.logit_names, f.name + "_"));
    Eigen::Index cols = 0;
    for (const auto& b : blocks) cols += b.cols();
    c.logit_block.resize(n, cols);
    Eigen::Index at = 0;
    for (const auto& b : blocks) {
      c.logit_block.middleCols(at, b.cols()) = b;
      at += b.cols();
    }
  }
  return c;
}

struct Model {
  Link link = Link::linear;
  FitResult fit;
  Matrix design;  // logit: kept design columns
  std::vector<int> primary;  // coefficient positions of the primary terms
  Vector rest;    // linear: fitted value minus primary-term contributions
  double sigma = 0.0;
};

/// `primary` columns come first; the leading `n_moved` of them are the terms
/// set by the potential-outcome interventions.
Model fit_model(Link link, const Vector& y, const Matrix& primary, const std::vector<std::string>& primary_names,
                int n_moved, const Controls& c, const regress::ClusterIds& cluster) {
  const auto n = primary.rows();
  Model m;
  m.link = link;
  std::vector<std::string> names = primary_names;
  if (link == Link::logit) {
    Matrix x(n, primary.cols() + c.logit_block.cols());
    x << primary, c.logit_block;
    names.insert(names.end(), c.logit_names.begin(), c.logit_names.end());
    m.fit = regress::logit_fit(x, y, cluster, names);
    m.design = x(Eigen::all, m.fit.kept_columns);
  } else {
    Matrix p = primary;
    Vector yd = y;
    if (c.projector) {
      c.projector->demean(yd);
      for (Eigen::Index j = 0; j < p.cols(); ++j) c.projector->demean(p.col(j));
    }
    Matrix x(n, p.cols() + c.linear_block.cols());
    x << p, c.linear_block;
    names.insert(names.end(), c.linear_names.begin(), c.linear_names.end());
    m.fit = regress::ols(x, yd, cluster, names);
    const Vector fitted = y - m.fit.residuals;
    const double dof = static_cast<double>(n) - static_cast<double>(m.fit.coefficients.size());
    m.sigma = std::sqrt(m.fit.residuals.squaredNorm() / std::max(1.0, dof));
    m.rest = fitted;
  }
  for (std::size_t j = 0; j < primary_names.size(); ++j) {
    const auto idx = m.fit.index_of(primary_names[j]);
    if (!idx) throw IdentificationError("mediation: term '" + primary_names[j] + "' is collinear with the controls");
    m.primary.push_back(*idx);
  }
  if (link == Link::linear)
    for (int j = 0; j < n_moved; ++j) m.rest -= m.fit.coefficients[m.primary[static_cast<std::size_t>(j)]] * primary.col(j);
  return m;
}

/// First-stage residual of treatment on the instrument and the controls.
Vector first_stage_residual(const MediationData& d, const Controls& c) {
  Matrix z = d.instrument;
  Vector t = d.treatment;
  if (c.projector) {
    c.projector->demean(t);
    c.projector->demean(z.col(0));
  }
  Matrix x(z.rows(), 1 + c.linear_block.cols());
  x << z, c.linear_block;
  std::vector<std::string> names{"instrument"};
  names.insert(names.end(), c.linear_names.begin(), c.linear_names.end());
  const auto fs = regress::ols(x, t, d.cluster, names);
  if (!fs.index_of("instrument")) throw IdentificationError("mediation: instrument is collinear with the controls");
  return fs.residuals;
}

struct Fitted {
  Model mediator, outcome, total;
  Vector t, m;  // observed treatment and mediator
};

Fitted fit_all(const MediationData& d, const MediationOptions& o) {
  if (d.size() == 0) throw EstimationError("mediation: empty sample");
  const bool need_logit = o.outcome_link == Link::logit || o.mediator_link == Link::logit;
  const Controls c = make_controls(d, need_logit);
  const auto n = static_cast<Eigen::Index>(d.size());
  const bool with_res = d.instrument.size() > 0;
  Vector res;
  if (with_res) res = first_stage_residual(d, c);

  auto block = [&](std::initializer_list<const Vector*> cols) {
    Matrix x(n, static_cast<Eigen::Index>(cols.size()) + (with_res ? 1 : 0));
    Eigen::Index j = 0;
    for (const Vector* v : cols) x.col(j++) = *v;
    if (with_res) x.col(j) = res;
    return x;
  };
  std::vector<std::string> mnames{"treated"}, onames{"treated", "mediator"};
  if (with_res) {
    mnames.emplace_back("first_stage_residual");
    onames.emplace_back("first_stage_residual");
  }
  Fitted f;
  f.t = d.treatment;
  f.m = d.mediator;
  f.mediator = fit_model(o.mediator_link, d.mediator, block({&d.treatment}), mnames, 1, c, d.cluster);
  f.outcome = fit_model(o.outcome_link, d.outcome, block({&d.treatment, &d.mediator}), onames, 2, c, d.cluster);
  f.total = fit_model(o.outcome_link, d.outcome, block({&d.treatment}), mnames, 1, c, d.cluster);
  return f;
}

struct Decomposition {
  double nde = 0.0, nie = 0.0;
};

/// Effects for one parameter configuration. `theta_m` / `theta_y` are full
/// coefficient vectors of the mediator and outcome models.
Decomposition decompose(const Fitted& f, const Vector& theta_m, const Vector& theta_y) {
  const auto& M = f.mediator;
  const auto& Y = f.outcome;
  const double a = theta_m[M.primary[0]];
  const double c1 = theta_y[Y.primary[0]];
  const double b = theta_y[Y.primary[1]];
  const auto n = static_cast<Eigen::Index>(f.t.size());

  // mediator side: per-row P(M = 1 | t) or the linear mean shift
  Vector p0, p1;
  if (M.link == Link::logit) {
    const Vector base = M.design * theta_m - a * f.t;
    p0 = base.unaryExpr([](double v) { return logistic(v); });
    p1 = (base.array() + a).matrix().unaryExpr([](double v) { return logistic(v); });
  }
  Decomposition out;
  if (Y.link == Link::linear) {
    const double dm = M.link == Link::linear ? a : (p1 - p0).mean();
    out.nde = c1;
    out.nie = b * dm;
    return out;
  }
  const Vector kappa = Y.design * theta_y - c1 * f.t - b * f.m;
  // E[Y(t, M(t'))] averaged over rows
  auto ey = [&](double t, int tp) {
    std::vector<double> terms(static_cast<std::size_t>(n));
    if (M.link == Link::logit) {
      const Vector& p = tp ? p1 : p0;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double k = kappa[i] + c1 * t;
        terms[static_cast<std::size_t>(i)] = p[i] * logistic(k + b) + (1.0 - p[i]) * logistic(k);
      }
    } else {
      const auto& [nodes, weights] = hermite_rule();
      for (Eigen::Index i = 0; i < n; ++i) {
        const double nu = M.rest[i] + a * tp;
        double acc = 0.0;
        for (int q = 0; q < kHermiteNodes; ++q)
          acc += weights[q] * logistic(kappa[i] + c1 * t + b * (nu + M.sigma * nodes[q]));
        terms[static_cast<std::size_t>(i)] = acc;
      }
    }
    return stats::compensated_sum(terms) / static_cast<double>(n);
  };
  const double y10 = ey(1.0, 0), y00 = ey(0.0, 0), y11 = ey(1.0, 1);
  out.nde = y10 - y00;
  out.nie = y11 - y10;
  return out;
}

double total_effect(const Model& T, const Vector& theta, const Vector& t) {
  const double c = theta[T.primary[0]];
  if (T.link == Link::linear) return c;
  const Vector base = T.design * theta - c * t;
  std::vector<double> terms(static_cast<std::size_t>(base.size()));
  for (Eigen::Index i = 0; i < base.size(); ++i)
    terms[static_cast<std::size_t>(i)] = logistic(base[i] + c) - logistic(base[i]);
  return stats::compensated_sum(terms) / static_cast<double>(base.size());
}

/// Symmetric square root of a covariance matrix (negative eigenvalues clipped).
Matrix covariance_root(const Matrix& v) {
  const Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (v + v.transpose()));
  const Vector s = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * s.asDiagonal() * es.eigenvectors().transpose();
}

/// One draw of a model's coefficients. Linear models perturb only the primary
/// terms (controls cancel from every contrast).
Vector draw(const Model& m, const Matrix& root, KeyedRng& rng) {
  Vector theta = m.fit.coefficients;
  if (m.link == Link::logit) {
    Vector z(theta.size());
    for (auto& v : z) v = rng.normal();
    theta += root * z;
  } else {
    Vector z(static_cast<Eigen::Index>(m.primary.size()));
    for (auto& v : z) v = rng.normal();
    const Vector shift = root * z;
    for (std::size_t j = 0; j < m.primary.size(); ++j) theta[m.primary[j]] += shift[static_cast<Eigen::Index>(j)];
  }
  return theta;
}

Matrix draw_root(const Model& m) {
  if (m.link == Link::logit) return covariance_root(m.fit.vcov);
  std::vector<int> p(m.primary.begin(), m.primary.end());
  return covariance_root(m.fit.vcov(p, p));
}

Effect summarize(const std::vector<double>& draws) {
  Effect e;
  e.estimate = stats::compensated_sum(draws) / static_cast<double>(draws.size());
  e.draw_lower = stats::quantile(draws, 0.025);
  e.draw_upper = stats::quantile(draws, 0.975);
  e.se = e.lower = e.upper = std::numeric_limits<double>::quiet_NaN();
  return e;
}

void validate(const MediationData& d, const MediationOptions& o) {
  const auto n = static_cast<Eigen::Index>(d.size());
  if (o.n_draws < 1) throw ParameterError("mediation: n_draws must be >= 1");
  if (o.n_reps < 0 || o.n_reps == 1) throw ParameterError("mediation: n_reps must be 0 or >= 2");
  if (o.jobs < 1) throw ParameterError("mediation: jobs must be >= 1");
  if (d.treatment.size() != n || d.mediator.size() != n || d.controls.rows() != n ||
      d.cluster.size() != d.size() || (d.instrument.size() != 0 && d.instrument.size() != n))
    throw EstimationError("mediation: inconsistent data dimensions");
  if (!d.outcome.allFinite() || !d.treatment.allFinite() || !d.mediator.allFinite())
    throw EstimationError("mediation: outcome, treatment and mediator must be finite");
  auto binary = [](const Vector& v) { return (v.array() == 0.0 || v.array() == 1.0).all(); };
  if (o.mediator_link == Link::logit && !binary(d.mediator))
    throw DomainError("mediation: a logit mediator model needs a 0/1 mediator");
  if (o.outcome_link == Link::logit && !binary(d.outcome))
    throw DomainError("mediation: a logit outcome model needs a 0/1 outcome");
}

}  // namespace

MediationResult mediate(const MediationData& data, const MediationOptions& o) {
  validate(data, o);
  const Fitted f = fit_all(data, o);

  MediationResult r;
  r.n_draws = o.n_draws;
  r.n_obs = data.size();
  r.n_clusters = regress::count_clusters(data.cluster);
  if (o.n_draws < 100) r.warnings.emplace_back("n_draws below 100: quasi-Bayesian summaries are imprecise");

  const Matrix root_m = draw_root(f.mediator), root_y = draw_root(f.outcome);
  std::vector<double> nde(static_cast<std::size_t>(o.n_draws)), nie(nde.size()), tot(nde.size());
  for (int k = 0; k < o.n_draws; ++k) {
    KeyedRng rng(o.seed, static_cast<std::uint64_t>(k), Stream::mediation);
    const Vector tm = draw(f.mediator, root_m, rng);
    const Vector ty = draw(f.outcome, root_y, rng);
    const auto dec = decompose(f, tm, ty);
    const auto i = static_cast<std::size_t>(k);
    nde[i] = dec.nde;
    nie[i] = dec.nie;
    tot[i] = dec.nde + dec.nie;
  }
  r.nde = summarize(nde);
  r.nie = summarize(nie);
  r.total = summarize(tot);

  const auto point = decompose(f, f.mediator.fit.coefficients, f.outcome.fit.coefficients);
  const double te = total_effect(f.total, f.total.fit.coefficients, f.t);
  r.total_regression.estimate = te;
  r.total_regression.se = f.total.link == Link::linear ? f.total.fit.se("treated")
                                                       : std::numeric_limits<double>::quiet_NaN();
  r.total_regression.lower = r.total_regression.upper = std::numeric_limits<double>::quiet_NaN();
  r.total_regression.draw_lower = r.total_regression.draw_upper = std::numeric_limits<double>::quiet_NaN();
  r.decomposition_gap = point.nde + point.nie - te;
  r.decomposition_gap_se = std::numeric_limits<double>::quiet_NaN();
  r.mediator_fit = f.mediator.fit;
  r.outcome_fit = f.outcome.fit;
  r.total_fit = f.total.fit;

  if (o.n_reps > 0) {
    const regress::BootstrapEstimator est = [&](const regress::BootstrapDraw& b) {
      const auto sub = data.subset(b.rows, &b.cluster_of_row);
      const Fitted g = fit_all(sub, o);
      const auto dec = decompose(g, g.mediator.fit.coefficients, g.outcome.fit.coefficients);
      const double t = total_effect(g.total, g.total.fit.coefficients, g.t);
      Vector v(5);
      v << dec.nde, dec.nie, dec.nde + dec.nie, t, dec.nde + dec.nie - t;
      return v;
    };
    const auto boot = regress::cluster_bootstrap(est, data.cluster, o.n_reps, mix64(o.seed ^ 0x6d656469ULL), o.jobs);
    Effect* targets[] = {&r.nde, &r.nie, &r.total, &r.total_regression};
    for (int j = 0; j < 4; ++j) {
      targets[j]->se = boot.se[j];
      targets[j]->lower = boot.lower[j];
      targets[j]->upper = boot.upper[j];
    }
    r.decomposition_gap_se = boot.se[4];
    r.n_reps = boot.n_reps;
    r.n_failed_reps = boot.n_failed;
    if (boot.n_failed > 0)
      r.warnings.push_back(std::to_string(boot.n_failed) + " bootstrap replicates failed and were skipped");
    r.decomposition_consistent = std::abs(r.decomposition_gap) <= 3.0 * r.decomposition_gap_se + 1e-10 * (1.0 + std::abs(te));
  } else {
    r.decomposition_consistent = std::abs(r.decomposition_gap) <= 1e-8 * (1.0 + std::abs(te));
  }
  return r;
}

nlohmann::json to_json(const Effect& e) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  return {{"estimate", num(e.estimate)}, {"draw_ci", {num(e.draw_lower), num(e.draw_upper)}},
          {"se", num(e.se)},             {"ci", {num(e.lower), num(e.upper)}}};
}

nlohmann::json to_json(const MediationResult& r) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  auto term = [&](const FitResult& f, const std::string& name) {
    return nlohmann::json{{"coef", num(f.coef(name))}, {"se", num(f.se(name))}};
  };
  nlohmann::json j;
  j["natural_direct_effect"] = to_json(r.nde);
  j["natural_indirect_effect"] = to_json(r.nie);
  j["total_effect"] = to_json(r.total);
  j["total_effect_regression"] = to_json(r.total_regression);
  j["decomposition_gap"] = num(r.decomposition_gap);
  j["decomposition_gap_se"] = num(r.decomposition_gap_se);
  j["decomposition_consistent"] = r.decomposition_consistent;
  j["mediator_model_treated"] = term(r.mediator_fit, "treated");
  j["outcome_model_treated"] = term(r.outcome_fit, "treated");
  j["outcome_model_mediator"] = term(r.outcome_fit, "mediator");
  j["n_draws"] = r.n_draws;
  j["n_reps"] = r.n_reps;
  j["n_failed_reps"] = r.n_failed_reps;
  j["n_obs"] = r.n_obs;
  j["n_clusters"] = r.n_clusters;
  j["warnings"] = r.warnings;
  return j;
}

}  // namespace quasicausal::mediation
