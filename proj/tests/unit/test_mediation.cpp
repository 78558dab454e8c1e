#include <doctest.h>

#include <cmath>
#include <map>
#include <random>
#include <set>

#include "quasicausal/errors.hpp"
#include "quasicausal/mediation.hpp"
#include "quasicausal/stats.hpp"

using namespace quasicausal;
using namespace quasicausal::mediation;

namespace {

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct Paths {
  double a = 0.6, b = 1.5, c = 0.8;
  Link mediator = Link::linear, outcome = Link::linear;
  bool group_effects = false;
  bool noise_mediator = false;  // mediator unrelated to treatment and outcome
};

/// Treatment -> mediator -> outcome with a shared covariate x; clusters of 40.
MediationData synth(std::uint64_t seed, int n, const Paths& p) {
  std::mt19937_64 g(seed);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  MediationData d;
  d.outcome.resize(n);
  d.treatment.resize(n);
  d.mediator.resize(n);
  d.controls.resize(n, 1);
  d.control_names = {"x"};
  std::vector<double> group_shift(25);
  for (auto& s : group_shift) s = p.group_effects ? nd(g) : 0.0;
  regress::Factor grp{"group", {}};
  for (int i = 0; i < n; ++i) {
    const int gi = i % 25;
    const double x = nd(g);
    const double t = u(g) < 0.5 ? 1.0 : 0.0;
    double m;
    if (p.noise_mediator) m = nd(g);
    else if (p.mediator == Link::linear) m = 0.5 + p.a * t + 0.3 * x + group_shift[gi] + nd(g);
    else m = u(g) < logistic(-0.3 + p.a * t + 0.5 * x + group_shift[gi]) ? 1.0 : 0.0;
    const double bm = p.noise_mediator ? 0.0 : p.b * m;
    double y;
    if (p.outcome == Link::linear) y = 1.0 + p.c * t + bm + 0.2 * x + group_shift[gi] + nd(g);
    else y = u(g) < logistic(-0.5 + p.c * t + bm + 0.3 * x + group_shift[gi]) ? 1.0 : 0.0;
    d.outcome[i] = y;
    d.treatment[i] = t;
    d.mediator[i] = m;
    d.controls(i, 0) = x;
    d.cluster.push_back(i / 40);
    grp.codes.push_back(gi);
  }
  if (p.group_effects) d.fe.factors.push_back(std::move(grp));
  return d;
}

MediationOptions options(const Paths& p, int draws = 400, int reps = 60) {
  MediationOptions o;
  o.mediator_link = p.mediator;
  o.outcome_link = p.outcome;
  o.n_draws = draws;
  o.n_reps = reps;
  o.seed = 11;
  return o;
}

}  // namespace

TEST_CASE("linear-linear system: NIE -> a*b, NDE -> c', decomposition matches the total effect") {
  const Paths p;
  const auto d = synth(1, 6000, p);
  const auto r = mediate(d, options(p));
  CHECK(std::abs(r.nie.estimate - p.a * p.b) < 3.0 * r.nie.se);
  CHECK(std::abs(r.nde.estimate - p.c) < 3.0 * r.nde.se);
  CHECK(std::abs(r.total.estimate - r.total_regression.estimate) < 3.0 * r.total_regression.se);
  // omitted-variable identity on the point estimates
  CHECK(std::abs(r.decomposition_gap) < 1e-10);
  CHECK(r.decomposition_consistent);
  CHECK(r.nde.se > 0.0);
  CHECK(r.nie.lower < r.nie.estimate);
  CHECK(r.nie.upper > r.nie.estimate);
  CHECK(r.nie.draw_lower < r.nie.draw_upper);
  CHECK(r.n_reps == 60);
  CHECK(r.n_clusters == 150);
  CHECK(r.warnings.empty());
  // quasi-Bayesian mean of the product equals the plug-in product up to draw noise
  CHECK(std::abs(r.nie.estimate - r.mediator_fit.coef("treated") * r.outcome_fit.coef("mediator")) < 0.02);
}

TEST_CASE("absorbed fixed effects in linear models and dummies in logit models") {
  Paths p;
  p.group_effects = true;
  const auto d = synth(2, 5000, p);
  const auto r = mediate(d, options(p, 300, 40));
  CHECK(std::abs(r.nie.estimate - p.a * p.b) < 3.0 * r.nie.se);
  CHECK(std::abs(r.nde.estimate - p.c) < 3.0 * r.nde.se);
  CHECK_FALSE(r.outcome_fit.index_of("intercept").has_value());

  Paths q = p;
  q.mediator = Link::logit;
  const auto dl = synth(3, 5000, q);
  const auto rl = mediate(dl, options(q, 300, 40));
  CHECK(rl.mediator_fit.index_of("group_1").has_value());
  CHECK(rl.mediator_fit.index_of("intercept").has_value());
}

TEST_CASE("independent-noise mediator: NIE vanishes and NDE equals the total effect") {
  Paths p;
  p.noise_mediator = true;
  const auto d = synth(4, 6000, p);
  const auto r = mediate(d, options(p));
  CHECK(std::abs(r.nie.estimate) < 2.0 * r.nie.se);
  CHECK(std::abs(r.nde.estimate - r.total_regression.estimate) < 3.0 * r.nde.se);
  CHECK(std::abs(r.nde.estimate - p.c) < 3.0 * r.nde.se);
}

TEST_CASE("binary mediator: logit mediator model recovers b times the probability shift") {
  Paths p;
  p.mediator = Link::logit;
  p.a = 1.0;
  const auto d = synth(5, 8000, p);
  double shift = 0.0;
  for (Eigen::Index i = 0; i < d.controls.rows(); ++i) {
    const double x = d.controls(i, 0);
    shift += logistic(-0.3 + p.a + 0.5 * x) - logistic(-0.3 + 0.5 * x);
  }
  shift /= static_cast<double>(d.size());
  const auto r = mediate(d, options(p));
  CHECK(std::abs(r.nie.estimate - p.b * shift) < 3.0 * r.nie.se);
  CHECK(std::abs(r.nde.estimate - p.c) < 3.0 * r.nde.se);
}

TEST_CASE("logit outcome: potential outcomes on the probability scale") {
  Paths p;
  p.mediator = Link::logit;
  p.outcome = Link::logit;
  p.a = 1.0;
  p.b = 1.0;
  const auto d = synth(6, 10000, p);
  // truth evaluated on the sample covariates with the planted parameters
  double nde = 0.0, nie = 0.0;
  for (Eigen::Index i = 0; i < d.controls.rows(); ++i) {
    const double x = d.controls(i, 0);
    const double p0 = logistic(-0.3 + 0.5 * x), p1 = logistic(-0.3 + p.a + 0.5 * x);
    auto ey = [&](double t, double pm) {
      const double k = -0.5 + p.c * t + 0.3 * x;
      return pm * logistic(k + p.b) + (1.0 - pm) * logistic(k);
    };
    nde += ey(1, p0) - ey(0, p0);
    nie += ey(1, p1) - ey(1, p0);
  }
  nde /= static_cast<double>(d.size());
  nie /= static_cast<double>(d.size());
  const auto r = mediate(d, options(p, 200, 40));
  CHECK(std::abs(r.nde.estimate - nde) < 3.0 * r.nde.se);
  CHECK(std::abs(r.nie.estimate - nie) < 3.0 * r.nie.se);
  CHECK(std::abs(r.decomposition_gap) < 3.0 * r.decomposition_gap_se);

  Paths q = p;
  q.mediator = Link::linear;
  q.b = 0.5;
  const auto dq = synth(7, 10000, q);
  double nde_q = 0.0, nie_q = 0.0;
  const int m = 4000;
  for (Eigen::Index i = 0; i < dq.controls.rows(); ++i) {
    const double x = dq.controls(i, 0);
    // E over the unit-normal mediator error by the midpoint rule on [-8, 8]
    auto ey = [&](double t, double tp) {
      double acc = 0.0;
      for (int k = 0; k < m; ++k) {
        const double z = -8.0 + 16.0 * (k + 0.5) / m;
        const double med = 0.5 + q.a * tp + 0.3 * x + z;
        acc += stats::normal_pdf(z) * logistic(-0.5 + q.c * t + q.b * med + 0.3 * x);
      }
      return acc * 16.0 / m;
    };
    if (i % 50 != 0) continue;  // a subsample keeps the oracle cheap
    nde_q += ey(1, 0) - ey(0, 0);
    nie_q += ey(1, 1) - ey(1, 0);
  }
  nde_q /= static_cast<double>((dq.size() + 49) / 50);
  nie_q /= static_cast<double>((dq.size() + 49) / 50);
  const auto rq = mediate(dq, options(q, 200, 40));
  CHECK(std::abs(rq.nde.estimate - nde_q) < 3.0 * rq.nde.se + 0.005);
  CHECK(std::abs(rq.nie.estimate - nie_q) < 3.0 * rq.nie.se + 0.005);
}

TEST_CASE("first-stage residual removes treatment confounding (control function)") {
  const int n = 8000;
  std::mt19937_64 g(8);
  std::normal_distribution<double> nd;
  MediationData d;
  d.outcome.resize(n);
  d.treatment.resize(n);
  d.mediator.resize(n);
  d.instrument.resize(n);
  d.controls.resize(n, 0);
  const double a = 0.5, b = 1.0, c = 0.7;
  for (int i = 0; i < n; ++i) {
    const double z = nd(g), u = nd(g);
    const double t = z + u + nd(g);
    const double m = a * t + nd(g);
    d.instrument[i] = z;
    d.treatment[i] = t;
    d.mediator[i] = m;
    d.outcome[i] = c * t + b * m + 2.0 * u + nd(g);
    d.cluster.push_back(i / 40);
  }
  MediationOptions o;
  o.n_draws = 300;
  o.n_reps = 60;
  const auto cf = mediate(d, o);
  CHECK(std::abs(cf.nde.estimate - c) < 3.0 * cf.nde.se);
  CHECK(std::abs(cf.nie.estimate - a * b) < 3.0 * cf.nie.se);
  CHECK(cf.outcome_fit.index_of("first_stage_residual").has_value());

  auto naive = d;
  naive.instrument.resize(0);
  const auto nv = mediate(naive, o);
  CHECK(std::abs(nv.nde.estimate - c) > 5.0 * nv.nde.se);
}

TEST_CASE("determinism, warnings and argument checks") {
  const Paths p;
  const auto d = synth(9, 2000, p);
  auto o = options(p, 50, 20);
  const auto r1 = mediate(d, o);
  o.jobs = 3;
  const auto r3 = mediate(d, o);
  CHECK(to_json(r1).dump() == to_json(r3).dump());
  CHECK(r1.warnings.size() == 1);
  CHECK(r1.n_draws == 50);
  o.seed = 12;
  CHECK(to_json(mediate(d, o)).dump() != to_json(r1).dump());

  o.n_draws = 0;
  CHECK_THROWS_AS(mediate(d, o), ParameterError);
  o.n_draws = 10;
  o.n_reps = 1;
  CHECK_THROWS_AS(mediate(d, o), ParameterError);
  o.n_reps = 0;
  const auto nb = mediate(d, o);
  CHECK(std::isnan(nb.nde.se));
  CHECK(nb.decomposition_consistent);
  o.mediator_link = Link::logit;
  CHECK_THROWS_AS(mediate(d, o), DomainError);

  // a later-listed control equal to the treatment is dropped; a treatment
  // spanned by the absorbed factors is not identified
  auto dup = d;
  dup.controls.col(0) = dup.treatment;
  o.mediator_link = Link::linear;
  CHECK(mediate(dup, o).mediator_fit.dropped_columns == std::vector<std::string>{"x"});
  auto spanned = d;
  regress::Factor f{"arm", {}};
  for (Eigen::Index i = 0; i < d.treatment.size(); ++i) f.codes.push_back(static_cast<std::int64_t>(d.treatment[i]));
  spanned.fe.factors.push_back(f);
  CHECK_THROWS_AS(mediate(spanned, o), IdentificationError);
}

// --- epigenetic mediator -------------------------------------------------------------

namespace {

microdata::AnalysisSample families(std::uint64_t seed, int n_mothers, double mother_sd, int min_kids = 2,
                                   int max_kids = 4) {
  std::mt19937_64 g(seed);
  std::normal_distribution<double> nd;
  std::uniform_int_distribution<int> kids(min_kids, max_kids), year(1840, 1860);
  microdata::AnalysisSample s;
  std::vector<double> y, sex;
  std::size_t rec = 0;
  for (int m = 0; m < n_mothers; ++m) {
    const double um = mother_sd * nd(g);
    const int k = kids(g);
    for (int c = 0; c < k; ++c) {
      const int cohort = year(g);
      const double male = nd(g) > 0 ? 1.0 : 0.0;
      y.push_back(40.0 + um + 0.8 * male + 0.1 * (cohort - 1850) + nd(g));
      sex.push_back(male);
      s.record_index.push_back(rec++);
      s.mother.push_back(1000 + m);
      s.child_cohort.push_back(cohort);
      s.cluster.push_back(m % 30);
      s.parish.push_back(m % 30);
      s.cohort.push_back(1800);
      s.region_cohort.push_back(1800);
    }
  }
  const auto n = static_cast<Eigen::Index>(y.size());
  s.outcome = Eigen::Map<Vector>(y.data(), n);
  s.family_x = Matrix::Zero(n, 8);
  s.family_x.col(0) = Eigen::Map<Vector>(sex.data(), n);
  s.parish_x = Matrix::Zero(n, 6);
  s.treatment = s.instrument = s.did_regressor = Vector::Zero(n);
  return s;
}

double sample_variance(const std::vector<double>& v) { return stats::variance(v); }

}  // namespace

TEST_CASE("epigenetic mediator: siblings share one centred value") {
  const auto s = families(1, 400, 1.0);
  const auto e = build_epigenetic_mediator(s);
  REQUIRE(e.values.size() == s.size());
  std::map<std::int64_t, double> by_mother;
  for (std::size_t i = 0; i < s.size(); ++i) {
    auto [it, fresh] = by_mother.try_emplace(s.mother[i], e.values[i]);
    CHECK(it->second == e.values[i]);
  }
  CHECK(std::abs(stats::mean(e.values)) < 1e-12);
  CHECK(std::abs(stats::mean(e.raw)) < 1e-12);
  CHECK(e.n_mothers == 400);
  CHECK(e.n_multi_child_mothers == 400);
}

TEST_CASE("epigenetic mediator: variance recovery and the no-shared-component limit") {
  const auto s = families(2, 6000, 1.0);
  const auto e = build_epigenetic_mediator(s);
  CHECK(std::abs(e.mother_variance - 1.0) < 0.1);
  CHECK(std::abs(e.residual_variance - 1.0) < 0.05);
  // BLUP variance is sigma_u^2 times the average shrinkage factor
  std::map<std::int64_t, int> kids;
  for (auto m : s.mother) ++kids[m];
  double expected = 0.0;
  for (auto m : s.mother) expected += e.mother_variance / (e.mother_variance + e.residual_variance / kids[m]);
  expected *= e.mother_variance / static_cast<double>(s.size());
  CHECK(sample_variance(e.values) == doctest::Approx(expected).epsilon(0.1));

  const auto small = build_epigenetic_mediator(families(3, 300, 0.0));
  const auto large = build_epigenetic_mediator(families(3, 20000, 0.0));
  CHECK(sample_variance(large.values) < 1e-3);
  CHECK(large.mother_variance < 0.05);
  CHECK(sample_variance(large.values) <= sample_variance(small.values) + 1e-3);
}

TEST_CASE("epigenetic mediator: stacked duplicates and single-child families") {
  auto s = families(4, 200, 1.0);
  const auto base = build_epigenetic_mediator(s);
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < s.size(); ++i) {
    rows.push_back(i);
    if (i % 3 == 0) rows.push_back(i);
  }
  const auto stacked = s.subset(rows);
  const auto e = build_epigenetic_mediator(stacked);
  CHECK(e.mother_variance == doctest::Approx(base.mother_variance).epsilon(1e-12));
  for (std::size_t i = 0; i + 1 < rows.size(); ++i)
    if (rows[i] == rows[i + 1]) CHECK(e.values[i] == e.values[i + 1]);

  CHECK_THROWS_AS(build_epigenetic_mediator(families(5, 50, 1.0, 1, 1)), IdentificationError);
}
