#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "quasicausal/dgp.hpp"
#include "quasicausal/errors.hpp"
#include "quasicausal/regress.hpp"
#include "quasicausal/stats.hpp"

using namespace quasicausal;
using namespace quasicausal::microdata;

namespace {

std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

double post_treated_share(const dgp::Population& pop) {
  double n = 0, t = 0;
  for (const auto& r : pop.records)
    if (r.generation == Generation::G1 && is_post(r.cohort) && !r.excluded) {
      n += 1;
      t += r.treated ? 1 : 0;
    }
  return t / n;
}

double correlation(const regress::Vector& a, const regress::Vector& b) {
  const double ma = a.mean(), mb = b.mean();
  const auto da = (a.array() - ma).matrix(), db = (b.array() - mb).matrix();
  return da.dot(db) / std::sqrt(da.squaredNorm() * db.squaredNorm());
}

}  // namespace

TEST_CASE("identical seed gives identical population; parallel equals serial") {
  dgp::DgpParams p;
  p.n_parishes = 12;
  p.n_families_per_parish = 50;
  const auto a = dgp::simulate_population(p, 1);
  const auto b = dgp::simulate_population(p, 1);
  const auto c = dgp::simulate_population(p, 4);
  CHECK(a.records == b.records);
  CHECK(a.records == c.records);
  CHECK(a.panel == c.panel);
  CHECK(a.truth.moments == c.truth.moments);

  const auto root = std::filesystem::temp_directory_path() / "qc_test_dgp_det";
  std::filesystem::remove_all(root);
  dgp::write_population(a, (root / "a").string());
  dgp::write_population(c, (root / "c").string());
  for (const char* f : {"individuals.csv", "panel.csv", "truth.json"})
    CHECK(read_text(root / "a" / f) == read_text(root / "c" / f));

  p.seed += 1;
  CHECK_FALSE(dgp::simulate_population(p).records == a.records);
}

TEST_CASE("invalid parameters are rejected before generation") {
  dgp::DgpParams p;
  p.baseline_uptake = 1.4;
  CHECK_THROWS_AS(dgp::simulate_population(p), ParameterError);
  p = {};
  p.n_parishes = 0;
  CHECK_THROWS_AS(p.validate(), ParameterError);
  p = {};
  p.true_effect_years_g2 = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(p.validate(), ParameterError);
  p = {};
  p.selection.error_correlation = 1.5;
  CHECK_THROWS_AS(p.validate(), ParameterError);
  try {
    p.validate();
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::config);
  }
}

TEST_CASE("default calibration: instrument and intensity ranges, uptake share, sizes") {
  const auto pop = dgp::simulate_population({});
  const auto& m = pop.truth.moments;
  const auto z = build_instrument(pop.panel);
  const auto d = build_did_intensity(pop.panel);
  double zmin = 1e9, zmax = 0, imin = 1e9, imax = 0;
  for (const auto& [k, v] : z.value) zmin = std::min(zmin, v), zmax = std::max(zmax, v);
  for (const auto& [k, v] : d.intensity) imin = std::min(imin, v), imax = std::max(imax, v);
  MESSAGE("instrument max " << zmax << ", intensity max " << imax << ", treated share "
                            << m.at("g1_treated_share_post1801") << ", G1 records " << m.at("n_g1"));
  CHECK(zmin == 0.0);
  CHECK(zmax == doctest::Approx(4.2).epsilon(0.2));
  CHECK(imin == 0.0);
  CHECK(imax == doctest::Approx(2.0).epsilon(0.25));
  CHECK(m.at("instrument_max") == zmax);
  CHECK(m.at("g1_treated_share_post1801") > 0.2);
  CHECK(m.at("g1_treated_share_post1801") < 0.5);
  CHECK(m.at("n_g1") == doctest::Approx(50000).epsilon(0.05));
  CHECK(m.at("n_g2") > 10000);
  CHECK(m.at("n_g3") > 10000);
  for (const auto& r : pop.records)
    if (r.generation == Generation::G1 && !is_post(r.cohort)) CHECK_FALSE(r.vaccinated_age.has_value());
}

TEST_CASE("zero first-stage slope leaves only the baseline uptake rate") {
  dgp::DgpParams p;
  p.first_stage_slope = 0.0;
  const auto pop = dgp::simulate_population(p);
  const double share = post_treated_share(pop);
  // binomial tolerance on roughly 30k post-1801 records
  CHECK(std::abs(share - p.baseline_uptake) < 4 * std::sqrt(0.25 / 25000.0));
  const PanelIndex idx(pop.panel);
  SampleOptions o;
  o.cohorts = std::pair{1801, 1820};
  const auto s = build_g1_sample(pop.records, idx, build_instrument(pop.panel), build_did_intensity(pop.panel), o);
  CHECK(std::abs(correlation(s.instrument, s.treatment)) < 4.0 / std::sqrt(static_cast<double>(s.size())));
}

TEST_CASE("vaccination probability is zero before 1801 and weakly increasing in the instrument") {
  dgp::DgpParams p;
  CHECK(dgp::vaccination_probability(p, 1800, 3.0, 1.0, 0.0, 0.0) == 0.0);
  for (int cohort : {1801, 1805, 1815, 1820})
    for (double u : {-1.0, 1.0}) {
      double prev = -1.0;
      for (double z = 0.0; z <= 8.0; z += 0.25) {
        const double pv = dgp::vaccination_probability(p, cohort, z, u, 0.5, 0.0);
        CHECK(pv >= prev);
        CHECK(pv >= 0.0);
        CHECK(pv <= 1.0);
        prev = pv;
      }
    }
}

TEST_CASE("empirical first stage is monotone: high-lag parishes vaccinate more in every post cohort") {
  const auto pop = dgp::simulate_population({});
  const auto z = build_instrument(pop.panel);
  for (int t = 1801; t <= 1820; ++t) {
    // split parish-cohort cells at the median instrument of the cohort
    std::vector<double> zs;
    for (const auto& [k, v] : z.value)
      if (k.second == t) zs.push_back(v);
    const double med = stats::quantile(zs, 0.5);
    double n_hi = 0, t_hi = 0, n_lo = 0, t_lo = 0;
    for (const auto& r : pop.records) {
      if (r.generation != Generation::G1 || r.cohort != t || r.excluded) continue;
      const double v = z.at(r.parish, r.cohort);
      (v > med ? n_hi : n_lo) += 1;
      (v > med ? t_hi : t_lo) += r.treated ? 1 : 0;
    }
    CHECK(t_hi / n_hi >= t_lo / n_lo);
  }
}

namespace {

/// Pre-1801 years lived on the instrument one cohort ahead, parish and
/// cohort effects absorbed.
regress::FitResult anticipation_fit(const dgp::Population& pop) {
  const PanelIndex idx(pop.panel);
  const auto z = build_instrument(pop.panel);
  SampleOptions o;
  o.cohorts = std::pair{1790, 1800};
  const auto s = build_g1_sample(pop.records, idx, z, build_did_intensity(pop.panel), o);
  regress::Matrix x(static_cast<Eigen::Index>(s.size()), 1);
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto& r = pop.records[s.record_index[i]];
    x(static_cast<Eigen::Index>(i), 0) = z.at(r.parish, r.cohort + 1);
  }
  const regress::FeSpec fe{{{"parish", s.parish}, {"cohort", s.cohort}}};
  const auto a = regress::absorb_fe(x, s.outcome, fe);
  return regress::ols(a.design, a.outcome, s.cluster, {"lead1"});
}

}  // namespace

TEST_CASE("no anticipation: pre-1801 outcomes do not load on the next cohort's instrument") {
  const auto fit = anticipation_fit(dgp::simulate_population({}));
  CHECK(std::abs(fit.coef("lead1")) < 2.0 * fit.se("lead1"));

  dgp::DgpParams p;
  p.anticipation_lead1 = 3.0;
  const auto planted = anticipation_fit(dgp::simulate_population(p));
  CHECK(planted.coef("lead1") == doctest::Approx(3.0).epsilon(0.15));
}

TEST_CASE("potential outcomes average to the planted effects") {
  const auto pop = dgp::simulate_population({});
  const auto& m = pop.truth.moments;
  CHECK(m.at("g1_mean_potential_effect") == doctest::Approx(11.0).epsilon(1e-12));
  CHECK(m.at("g2_mean_potential_effect") == doctest::Approx(2.2).epsilon(0.05));
  CHECK(m.at("g3_mean_potential_effect") == doctest::Approx(1.1).epsilon(0.08));
  CHECK(pop.truth.potential.size() == pop.records.size());

  dgp::DgpParams null;
  null.true_effect_years_g1 = 0.0;
  const auto z = dgp::simulate_population(null);
  CHECK(z.truth.moments.at("g1_mean_potential_effect") == 0.0);
}

TEST_CASE("truth.json echoes every parameter and round-trips") {
  dgp::DgpParams p;
  p.seed = 99;
  p.pretrend_slope = 0.25;
  p.shock_years = {{1806, 1.5}};
  p.mortality = dgp::MortalityMode::proportional;
  p.hazard.hr_smallpox = 0.05;
  p.selection.rye_coefficient = -0.4;
  p.mediator.epigenetic_variance = 2.5;
  p.noise.occupation = 3.0;
  const auto j = dgp::to_json(p);
  CHECK(dgp::params_from_json(j) == p);
  for (const char* key : {"seed", "n_parishes", "n_families_per_parish", "cohort_window", "personnel_base",
                          "shock_years", "first_stage_slope", "true_effect_years_g1", "true_effect_years_g2",
                          "true_effect_years_g3", "true_effect_occscore_g1", "mediator_params",
                          "selection_params", "hazard_params", "noise_sds"})
    CHECK_MESSAGE(j.contains(key), key);
  CHECK(j.size() == 34);

  dgp::DgpParams small;
  small.n_parishes = 4;
  small.n_regions = 2;
  small.n_families_per_parish = 10;
  const auto pop = dgp::simulate_population(small);
  const auto dir = std::filesystem::temp_directory_path() / "qc_test_dgp_truth";
  std::filesystem::remove_all(dir);
  dgp::write_population(pop, dir.string());
  const auto truth = nlohmann::json::parse(read_text(dir / "truth.json"));
  CHECK(truth.at("params") == dgp::to_json(small));
  CHECK(truth.at("moments").contains("g1_treated_share_post1801"));

  CHECK_THROWS_AS(dgp::params_from_json(nlohmann::json::parse(R"({"seeed": 1})")), ConfigError);
  CHECK_THROWS_AS(dgp::params_from_json(nlohmann::json::parse(R"({"hazard_params": {"hr": 1}})")), ConfigError);
  CHECK_THROWS_AS(dgp::params_from_json(nlohmann::json::parse(R"({"n_parishes": "many"})")), ConfigError);
}

TEST_CASE("proportional mode: ages truncated at 100, treated live longer") {
  dgp::DgpParams p;
  p.mortality = dgp::MortalityMode::proportional;
  p.n_parishes = 20;
  const auto pop = dgp::simulate_population(p);
  double n[2] = {}, age[2] = {};
  for (const auto& r : pop.records) {
    CHECK(r.last_observed_age <= 100.0);
    if (r.death_age) CHECK(*r.death_age <= r.last_observed_age);
    if (r.generation != Generation::G1 || r.migrated || r.excluded || !is_post(r.cohort)) continue;
    const int t = r.treated ? 1 : 0;
    n[t] += 1;
    age[t] += r.last_observed_age;
  }
  CHECK(age[1] / n[1] > age[0] / n[0] + 1.0);
}

TEST_CASE("G2 and G3 records link to G1 ancestors and respect generation windows") {
  const auto pop = dgp::simulate_population({});
  CHECK(validate_records(pop.records).empty());
  CHECK(validate_panel(pop.panel).empty());
  std::set<std::int64_t> g1;
  for (const auto& r : pop.records)
    if (r.generation == Generation::G1) g1.insert(r.id);
  std::size_t paired = 0, g2 = 0;
  for (const auto& r : pop.records) {
    if (r.generation == Generation::G1) continue;
    REQUIRE_FALSE(r.g1_ancestor_ids.empty());
    for (auto a : r.g1_ancestor_ids) CHECK(g1.count(a) == 1);
    CHECK(r.mother_id.has_value());
    CHECK(r.child_vaccinated.has_value());
    if (r.generation == Generation::G2) {
      ++g2;
      paired += r.g1_ancestor_ids.size() == 2 ? 1 : 0;
    }
  }
  const double share = static_cast<double>(paired) / static_cast<double>(g2);
  CHECK(share > 0.1);
  CHECK(share < 0.45);
}
