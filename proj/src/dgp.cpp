#include "quasicausal/dgp.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>
#include <unordered_map>

#include <json.hpp>

#include "quasicausal/errors.hpp"
#include "quasicausal/rng.hpp"
#include "quasicausal/stats.hpp"

namespace quasicausal::dgp {

using microdata::DeathCause;
using microdata::DisabilityCause;
using microdata::Generation;
using microdata::IndividualRecord;
using microdata::PanelContext;
using microdata::Sex;

namespace {

constexpr std::int64_t kG1IdScale = 1'000'000;
constexpr std::int64_t kMotherBase = 900'000'000;
constexpr std::int64_t kG2Base = 2'000'000'000;
constexpr std::int64_t kG3Base = 3'000'000'000;
constexpr std::int64_t kSpouseBase = 5'000'000'000;
constexpr std::int64_t kG2FamilyBase = 7'000'000'000;

void require(bool ok, const std::string& what) {
  if (!ok) throw ParameterError("invalid DGP parameter: " + what);
}

bool finite(double x) { return std::isfinite(x); }
bool prob(double x) { return x >= 0.0 && x <= 1.0; }

/// Gompertz age at death from `start` with hazard level * exp(shape * age).
double gompertz_age(KeyedRng& rng, double level, double shape, double start) {
  const double e = -std::log(rng.uniform());
  return std::log(std::exp(shape * start) + shape * e / level) / shape;
}

double clamp01(double p) { return std::clamp(p, 0.0, 1.0); }

struct PanelDraws {
  std::vector<PanelContext> rows;
  std::map<std::int64_t, std::int64_t> region_of;
  std::map<std::int64_t, double> parish_effect;
  std::map<int, double> cohort_effect;
  std::map<std::pair<std::int64_t, int>, double> region_cohort_effect;
};

PanelDraws simulate_panel(const DgpParams& p) {
  PanelDraws d;
  const int first = p.cohort_window.first - 1;
  const int last = p.cohort_window.second;
  std::map<int, double> shift, rye_national;
  for (int t = first; t <= last; ++t) {
    KeyedRng rng(p.seed, static_cast<std::uint64_t>(t), Stream::national);
    double s;
    if (const auto it = p.shock_years.find(t); it != p.shock_years.end()) s = it->second;
    else if (microdata::is_post(t)) s = p.post_shift_level * rng.uniform(0.5, 1.5);
    else s = rng.uniform(0.0, p.pre_shift_max);
    shift[t] = std::max(0.0, s);
    rye_national[t] = 10.0 + rng.normal();
    d.cohort_effect[t] = p.noise.cohort_effect * rng.normal();
  }
  for (int pi = 0; pi < p.n_parishes; ++pi) {
    const std::int64_t parish = pi + 1;
    KeyedRng rng(p.seed, static_cast<std::uint64_t>(parish), Stream::parish);
    const std::int64_t region = pi % p.n_regions + 1;
    d.region_of[parish] = region;
    const bool null_parish = rng.bernoulli(p.zero_personnel_share);
    const double base = null_parish ? 0.0
                                  : p.personnel_base.first + (p.personnel_base.second - p.personnel_base.first) *
                                                                 std::pow(rng.uniform(), 1.4);
    const double bump = null_parish ? 0.0 : rng.uniform(0.0, p.personnel_bump_max);
    const double urban = rng.uniform(0.0, 0.3);
    const double rye_level = rng.normal(0.0, 0.5);
    const double potato = rng.uniform(0.0, 5.0);
    const double priests = static_cast<double>(rng.uniform_int(1, 4));
    d.parish_effect[parish] = p.noise.parish_effect * rng.normal();
    for (int t = first; t <= last; ++t) {
      PanelContext row;
      row.parish = parish;
      row.cohort = t;
      double personnel = 0.0;
      if (!null_parish) {
        personnel = std::round(base * (1.0 + p.personnel_jitter * rng.normal()) + (t >= 1806 ? bump : 0.0));
        personnel = std::max(personnel, 0.0);
      }
      row.church_personnel = personnel;
      row.national_shift = shift[t];
      row.midwives = static_cast<double>(rng.uniform_int(0, 5));
      row.priests = priests;
      row.smallpox_death_rate = 0.01 * std::exp(0.5 * rng.normal());
      row.urban_share = urban;
      row.students_per_capita = rng.uniform(0.0, 0.01);
      row.rye_price = rye_national[t] + rye_level + rng.normal();
      row.potato_seeds_per_km2 = potato;
      d.rows.push_back(row);
      d.region_cohort_effect[{region, t}] = 0.0;
    }
  }
  for (auto& [key, v] : d.region_cohort_effect) {
    KeyedRng rng(p.seed, static_cast<std::uint64_t>(key.first * 10000 + key.second), Stream::national);
    rng.next_u64();
    v = p.noise.region_cohort_effect * rng.normal();
  }
  return d;
}

struct Context {
  const DgpParams& p;
  const PanelDraws& panel;
  microdata::PanelIndex index;
  microdata::InstrumentTable instrument;
  microdata::DidIntensity intensity;
  double rye_mean = 0.0, rye_sd = 1.0, smallpox_mean = 1.0;
};

struct G1Output {
  std::vector<IndividualRecord> records;
  std::vector<PotentialOutcome> potential;
};

G1Output simulate_parish(const Context& c, std::int64_t parish) {
  const DgpParams& p = c.p;
  G1Output out;
  const std::int64_t region = c.panel.region_of.at(parish);
  for (int f = 0; f < p.n_families_per_parish; ++f) {
    const std::int64_t mother = kMotherBase + parish * 10'000 + f;
    KeyedRng fam(p.seed, static_cast<std::uint64_t>(mother), Stream::family);
    const double u = fam.bernoulli(0.5) ? 1.0 : -1.0;
    std::array<double, microdata::kFamilyCovariates> fx{};
    fx[0] = 40.0 + 4.0 * u + fam.normal(0.0, 8.0);
    fx[1] = 30.0 + 3.0 * u + fam.normal(0.0, 6.0);
    fx[2] = fam.bernoulli(0.5 + 0.1 * u) ? 1.0 : 0.0;
    fx[3] = fam.bernoulli(0.35 + 0.1 * u) ? 1.0 : 0.0;
    fx[4] = fam.uniform(0.0, 0.5);
    fx[5] = fam.bernoulli(0.9) ? 1.0 : 0.0;
    fx[6] = fam.bernoulli(0.1) ? 1.0 : 0.0;
    const int n_children = fam.uniform_int(1, p.max_children_per_family);
    int cohort = fam.uniform_int(p.cohort_window.first - 4, p.cohort_window.second);
    for (int k = 0; k < n_children; ++k) {
      if (k > 0) cohort += fam.uniform_int(1, 3);
      if (cohort > p.cohort_window.second) break;
      if (cohort < p.cohort_window.first) continue;
      const std::int64_t id = parish * kG1IdScale + f * 10 + k + 1;
      const PanelContext& pc = c.index.at(parish, cohort);
      const double z = c.instrument.at(parish, cohort);
      const double rye = (pc.rye_price - c.rye_mean) / c.rye_sd;
      const double pox = pc.smallpox_death_rate / c.smallpox_mean;

      IndividualRecord r;
      r.id = id;
      r.generation = Generation::G1;
      r.mother_id = mother;
      r.parish = parish;
      r.region = region;
      r.cohort = cohort;
      r.family_covariates = fx;
      KeyedRng ind(p.seed, static_cast<std::uint64_t>(id), Stream::individual);
      r.sex = ind.bernoulli(0.5) ? Sex::male : Sex::female;
      r.birth_month = ind.uniform_int(1, 12);
      const double w = ind.normal();
      r.midwife_assisted = ind.bernoulli(std::min(0.9, 0.05 + 0.05 * pc.midwives));

      KeyedRng vac(p.seed, static_cast<std::uint64_t>(id), Stream::vaccination);
      bool treated = false;
      const double u_vac = vac.uniform();
      const double u_age = vac.uniform();
      const double u_late = vac.uniform();
      if (microdata::is_post(cohort)) {
        treated = u_vac < vaccination_probability(p, cohort, z, u, rye, w);
        if (treated) r.vaccinated_age = 0.1 + 1.9 * u_age;
        else if (u_late < p.late_vaccination_share) r.vaccinated_age = 2.05 + 3.95 * u_age;
      }

      KeyedRng sel(p.seed, static_cast<std::uint64_t>(id), Stream::selection);
      const double v = sel.normal();
      const double e_other = sel.normal();
      const double month = (r.birth_month - 6.5) / 3.5;
      const bool migrates = p.selection.base_index + p.selection.rye_coefficient * rye +
                                p.selection.month_coefficient * month + v > 0.0;
      const double rho = p.selection.error_correlation;
      const double e_sel = p.selection.outcome_error_sd * (rho * v + std::sqrt(1.0 - rho * rho) * e_other);

      KeyedRng mort(p.seed, static_cast<std::uint64_t>(id), Stream::mortality);
      const double tr = treated ? 1.0 : 0.0;
      const double hr_s = treated ? p.hazard.hr_smallpox : 1.0;
      const double hr_o = treated ? p.hazard.hr_other : 1.0;
      const double s = p.hazard.smallpox_share;
      const double p_smallpox = s * hr_s / (s * hr_s + (1.0 - s) * hr_o);
      std::optional<double> death;
      double years_untreated = 0.0, years_treated = 0.0;
      if (p.mortality == MortalityMode::additive) {
        double t0 = gompertz_age(mort, p.hazard.gompertz_level, p.hazard.gompertz_shape, 2.0) - 2.0;
        t0 += c.panel.parish_effect.at(parish) + c.panel.cohort_effect.at(cohort) +
              c.panel.region_cohort_effect.at({region, cohort}) + p.family_outcome_loading * u + e_sel +
              p.noise.years * mort.normal();
        if (cohort <= 1799) t0 += p.pretrend_slope * (cohort - 1790) * c.intensity.at(parish);
        if (!microdata::is_post(cohort)) t0 += p.anticipation_lead1 * c.instrument.at(parish, cohort + 1);
        t0 = std::clamp(t0, 0.05, 87.0);
        const double effect = p.true_effect_years_g1 + p.epidemic_amplification * (pox - 1.0);
        years_untreated = t0;
        years_treated = t0 + effect;
        death = std::min(100.0, 2.0 + t0 + tr * effect);
      } else {
        const double level = p.hazard.gompertz_level * (s * hr_s + (1.0 - s) * hr_o) *
                             std::exp(p.hazard.confounder_log_hazard * w);
        const double age = gompertz_age(mort, level, p.hazard.gompertz_shape, 2.0);
        if (age < 100.0) death = age;
      }
      const bool smallpox_death = mort.uniform() < p_smallpox;
      const double full_exit = death.value_or(100.0);

      KeyedRng out_rng(p.seed, static_cast<std::uint64_t>(id), Stream::outcome);
      const double occ = 40.0 + p.true_effect_occscore_g1 * tr + 0.3 * (fx[0] - 40.0) +
                         out_rng.normal(0.0, p.noise.occupation);
      const bool literate = out_rng.bernoulli(clamp01(0.35 + 0.15 * tr + 0.05 * u));
      const bool disabled = out_rng.bernoulli(0.4);
      const double onset = 2.0 + (full_exit - 2.0) * out_rng.uniform(0.5, 1.0);
      const bool pox_disability = out_rng.bernoulli(treated ? 0.1 : 0.4);
      const double mig_age = 2.0 + out_rng.uniform() * (std::min(full_exit, 40.0) - 2.0);

      if (migrates) {
        r.migrated = true;
        r.last_observed_age = mig_age;
        if (disabled && onset < mig_age) {
          r.disability_onset_age = onset;
          r.disability_cause = pox_disability ? DisabilityCause::smallpox_related : DisabilityCause::other;
        }
      } else {
        r.last_observed_age = full_exit;
        if (death) {
          r.death_age = *death;
          r.death_cause = smallpox_death ? DeathCause::smallpox : DeathCause::other;
        }
        r.literacy_good = literate;
        r.occupational_score = occ;
        if (disabled && onset < full_exit) {
          r.disability_onset_age = onset;
          r.disability_cause = pox_disability ? DisabilityCause::smallpox_related : DisabilityCause::other;
        }
      }
      out.records.push_back(r);
      if (p.mortality == MortalityMode::additive)
        out.potential.push_back({id, years_untreated, years_treated});
    }
  }
  return out;
}

struct Offspring {
  std::vector<IndividualRecord> records;
  std::vector<PotentialOutcome> potential;
};

/// Child-generation outcomes. `n_treated` counts vaccinated G1 ancestors.
struct ChildOutcome {
  double years;
  bool vaccinated;
};

double child_years(const DgpParams& p, double base, double n_treated, bool vaccinated, double epi,
                   double occ_dev, double direct, bool use_occupation) {
  return base + direct * n_treated + p.mediator.child_vaccination_effect * (vaccinated ? 1.0 : 0.0) + epi +
         (use_occupation ? p.mediator.occupation_transmission * occ_dev : 0.0);
}

}  // namespace

double vaccination_probability(const DgpParams& p, int cohort, double instrument, double family_factor,
                               double rye_sd_units, double confounder) {
  if (!microdata::is_post(cohort)) return 0.0;
  return clamp01(p.baseline_uptake + p.first_stage_slope * instrument + p.family_uptake_loading * family_factor +
                 p.selection.rye_uptake_coupling * rye_sd_units + p.confounder_uptake_loading * confounder);
}

void DgpParams::validate() const {
  require(n_parishes >= 2, "n_parishes must be ≥ 2");
  require(n_regions >= 1 && n_regions <= n_parishes, "n_regions must be in [1, n_parishes]");
  require(n_families_per_parish >= 1, "n_families_per_parish must be ≥ 1");
  require(max_children_per_family >= 1 && max_children_per_family <= 8, "max_children_per_family must be in [1, 8]");
  require(cohort_window.first == 1790 && cohort_window.second == 1820, "cohort_window must be (1790, 1820)");
  require(prob(zero_personnel_share) && zero_personnel_share < 1.0, "zero_personnel_share must be in [0, 1)");
  require(personnel_base.first >= 0.0 && personnel_base.first <= personnel_base.second, "personnel_base range");
  require(personnel_jitter >= 0.0 && personnel_bump_max >= 0.0, "personnel jitter/bump must be ≥ 0");
  require(pre_shift_max >= 0.0 && post_shift_level >= 0.0, "national shifts must be ≥ 0");
  for (const auto& [year, s] : shock_years)
    require(year >= 1801 && year <= 1820 && s >= 0.0 && finite(s), "shock_years must be post-1800 with shift ≥ 0");
  require(prob(first_stage_slope) && finite(first_stage_slope), "first_stage_slope must be a probability per unit");
  require(prob(baseline_uptake), "baseline_uptake must be in [0, 1]");
  require(prob(late_vaccination_share), "late_vaccination_share must be in [0, 1]");
  require(prob(std::abs(family_uptake_loading)), "family_uptake_loading must be in [-1, 1]");
  require(prob(std::abs(confounder_uptake_loading)), "confounder_uptake_loading must be in [-1, 1]");
  for (double e : {true_effect_years_g1, true_effect_years_g2, true_effect_years_g3, true_effect_occscore_g1,
                   family_outcome_loading, pretrend_slope, anticipation_lead1, epidemic_amplification})
    require(finite(e), "effects must be finite");
  require(std::abs(true_effect_years_g1) <= 12.0, "true_effect_years_g1 must be within ±12 years");
  require(prob(offspring_share) && prob(pair_share) && pair_share < 0.5, "offspring_share in [0,1], pair_share in [0, 0.5)");
  require(max_offspring >= 1 && max_offspring <= 12, "max_offspring must be in [1, 12]");
  require(hazard.gompertz_shape > 0.0 && hazard.gompertz_level > 0.0 && hazard.offspring_shape > 0.0 &&
              hazard.offspring_level > 0.0, "Gompertz parameters must be > 0");
  require(prob(hazard.smallpox_share), "smallpox_share must be in [0, 1]");
  require(hazard.hr_smallpox > 0.0 && hazard.hr_other > 0.0, "hazard ratios must be > 0");
  require(finite(hazard.confounder_log_hazard), "confounder_log_hazard must be finite");
  require(std::abs(selection.error_correlation) <= 1.0, "selection.error_correlation must be in [-1, 1]");
  require(selection.outcome_error_sd >= 0.0, "selection.outcome_error_sd must be ≥ 0");
  for (double e : {selection.base_index, selection.rye_coefficient, selection.month_coefficient,
                   selection.rye_uptake_coupling})
    require(finite(e), "selection parameters must be finite");
  require(prob(mediator.child_vaccination_base), "child_vaccination_base must be in [0, 1]");
  require(prob(mediator.child_vaccination_base + 2.0 * mediator.child_vaccination_transmission_g2) &&
              prob(mediator.child_vaccination_base + 2.0 * mediator.child_vaccination_transmission_g3),
          "child vaccination probability with two vaccinated ancestors must stay in [0, 1]");
  require(mediator.epigenetic_variance >= 0.0, "epigenetic_variance must be ≥ 0");
  for (double s : {noise.years, noise.occupation, noise.parish_effect, noise.cohort_effect, noise.region_cohort_effect})
    require(s >= 0.0 && finite(s), "noise sds must be ≥ 0");
}

Population simulate_population(const DgpParams& p, int jobs) {
  p.validate();
  const PanelDraws panel = simulate_panel(p);
  Context c{p, panel, microdata::PanelIndex(panel.rows), microdata::build_instrument(panel.rows),
            microdata::build_did_intensity(panel.rows)};
  {
    std::vector<double> rye, pox;
    for (const auto& r : panel.rows) {
      rye.push_back(r.rye_price);
      pox.push_back(r.smallpox_death_rate);
    }
    c.rye_mean = stats::mean(rye);
    c.rye_sd = std::sqrt(stats::variance(rye));
    c.smallpox_mean = stats::mean(pox);
  }

  // G1, parallel over parishes; merged in parish order.
  std::vector<G1Output> parts(static_cast<std::size_t>(p.n_parishes));
  {
    const int n_threads = std::max(1, std::min(jobs, p.n_parishes));
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t)
      pool.emplace_back([&, t] {
        for (int pi = t; pi < p.n_parishes; pi += n_threads)
          parts[static_cast<std::size_t>(pi)] = simulate_parish(c, pi + 1);
      });
    for (auto& th : pool) th.join();
  }
  Population pop;
  pop.panel = panel.rows;
  pop.truth.params = p;
  for (auto& part : parts) {
    pop.records.insert(pop.records.end(), part.records.begin(), part.records.end());
    pop.truth.potential.insert(pop.truth.potential.end(), part.potential.begin(), part.potential.end());
  }
  microdata::construct_treatment(pop.records);
  const std::size_t n_g1 = pop.records.size();

  const auto& m = p.mediator;
  const double direct_g2 = p.true_effect_years_g2 - m.child_vaccination_transmission_g2 * m.child_vaccination_effect -
                           m.epigenetic_effect_g2 - m.occupation_transmission * p.true_effect_occscore_g1;
  const double direct_g3 = p.true_effect_years_g3 - m.child_vaccination_transmission_g3 * m.child_vaccination_effect -
                           m.epigenetic_effect_g3;

  // --- G2 -------------------------------------------------------------------
  std::vector<std::size_t> parents;
  for (std::size_t i = 0; i < n_g1; ++i) {
    const auto& r = pop.records[i];
    if (r.migrated || r.last_observed_age < 21.0) continue;
    KeyedRng rng(p.seed, static_cast<std::uint64_t>(r.id), Stream::offspring);
    if (rng.bernoulli(p.offspring_share)) parents.push_back(i);
  }
  std::sort(parents.begin(), parents.end(), [&](std::size_t a, std::size_t b) {
    const auto ka = mix64(p.seed ^ static_cast<std::uint64_t>(pop.records[a].id));
    const auto kb = mix64(p.seed ^ static_cast<std::uint64_t>(pop.records[b].id));
    return ka != kb ? ka < kb : a < b;
  });
  std::vector<int> partner(parents.size(), -1);
  const double initiate = p.pair_share / (1.0 - p.pair_share);
  for (std::size_t i = 0; i < parents.size(); ++i) {
    if (partner[i] >= 0) continue;
    const auto& a = pop.records[parents[i]];
    KeyedRng rng(p.seed, static_cast<std::uint64_t>(a.id), Stream::pairing);
    if (!rng.bernoulli(initiate)) continue;
    for (std::size_t j = i + 1; j < parents.size() && j < i + 400; ++j) {
      const auto& b = pop.records[parents[j]];
      if (partner[j] >= 0 || b.sex == a.sex || b.parish == a.parish || std::abs(b.cohort - a.cohort) > 5) continue;
      partner[i] = static_cast<int>(j);
      partner[j] = static_cast<int>(i);
      break;
    }
  }

  std::int64_t next_g2 = kG2Base;
  std::vector<IndividualRecord> g2;
  for (std::size_t i = 0; i < parents.size(); ++i) {
    if (partner[i] >= 0 && static_cast<std::size_t>(partner[i]) < i) continue;  // family owned by first partner
    const IndividualRecord& a = pop.records[parents[i]];
    const IndividualRecord* b = partner[i] >= 0 ? &pop.records[parents[static_cast<std::size_t>(partner[i])]] : nullptr;
    const IndividualRecord* mother_rec = a.sex == Sex::female ? &a : (b && b->sex == Sex::female ? b : nullptr);
    const IndividualRecord* father_rec = a.sex == Sex::male ? &a : (b && b->sex == Sex::male ? b : nullptr);
    const std::int64_t family = kG2FamilyBase + a.id;
    KeyedRng fam(p.seed, static_cast<std::uint64_t>(family), Stream::family);
    const double n_treated = (a.treated ? 1.0 : 0.0) + (b && b->treated ? 1.0 : 0.0);
    const double epi_noise = std::sqrt(m.epigenetic_variance) * fam.normal();
    const double father_occ = father_rec ? father_rec->occupational_score.value_or(40.0) : fam.normal(40.0, 8.0);
    const double mother_occ = mother_rec ? mother_rec->occupational_score.value_or(30.0) : fam.normal(30.0, 6.0);
    // occupation of G1 parents with their own treatment switched off
    const double father_occ0 = father_occ - (father_rec && father_rec->treated ? p.true_effect_occscore_g1 : 0.0);
    const double mother_occ0 = mother_occ - (mother_rec && mother_rec->treated ? p.true_effect_occscore_g1 : 0.0);
    const bool father_lit = father_rec ? father_rec->literacy_good.value_or(false) : fam.bernoulli(0.5);
    const bool mother_lit = mother_rec ? mother_rec->literacy_good.value_or(false) : fam.bernoulli(0.35);
    const double nonsurv = fam.uniform(0.0, 0.5);
    const bool married = fam.bernoulli(0.9);
    const bool sib_ext = fam.bernoulli(0.1);
    const std::int64_t mother_id = mother_rec ? mother_rec->id : kSpouseBase + a.id;
    const int n_children = fam.uniform_int(1, p.max_offspring);
    const double parent_exit = std::min(a.last_observed_age, b ? b->last_observed_age : 100.0);
    for (int k = 0; k < n_children; ++k) {
      const double birth_age = fam.uniform(20.0, 40.0);
      if (birth_age >= parent_exit) continue;
      const int cohort = a.cohort + static_cast<int>(std::floor(birth_age));
      IndividualRecord r;
      r.id = next_g2++;
      r.generation = Generation::G2;
      r.mother_id = mother_id;
      r.g1_ancestor_ids = {a.id};
      if (b) r.g1_ancestor_ids.push_back(b->id);
      std::sort(r.g1_ancestor_ids.begin(), r.g1_ancestor_ids.end());
      r.parish = mother_rec ? mother_rec->parish : a.parish;
      r.region = mother_rec ? mother_rec->region : a.region;
      r.cohort = cohort;
      r.family_covariates = {father_occ, mother_occ, father_lit ? 1.0 : 0.0, mother_lit ? 1.0 : 0.0,
                             nonsurv, married ? 1.0 : 0.0, sib_ext ? 1.0 : 0.0};
      KeyedRng ind(p.seed, static_cast<std::uint64_t>(r.id), Stream::individual);
      r.sex = ind.bernoulli(0.5) ? Sex::male : Sex::female;
      r.birth_month = ind.uniform_int(1, 12);
      r.midwife_assisted = ind.bernoulli(0.3);
      const double u_cv = ind.uniform();
      const bool cv = u_cv < m.child_vaccination_base + m.child_vaccination_transmission_g2 * n_treated;
      const bool cv0 = u_cv < m.child_vaccination_base;
      const bool cv_all = u_cv < m.child_vaccination_base +
                                     m.child_vaccination_transmission_g2 * static_cast<double>(r.g1_ancestor_ids.size());
      r.child_vaccinated = cv;
      KeyedRng mort(p.seed, static_cast<std::uint64_t>(r.id), Stream::mortality);
      double base = gompertz_age(mort, p.hazard.offspring_level, p.hazard.offspring_shape, 0.0);
      base += 0.5 * (p.noise.years * mort.normal() + p.noise.cohort_effect * mort.normal());
      base = std::clamp(base, 8.0, 80.0);
      const double occ_dev = (father_occ - 40.0) + (mother_occ - 30.0);
      const double occ_dev0 = (father_occ0 - 40.0) + (mother_occ0 - 30.0);
      const double n_anc = static_cast<double>(r.g1_ancestor_ids.size());
      const double y = child_years(p, base, n_treated, cv, m.epigenetic_effect_g2 * n_treated + epi_noise, occ_dev,
                                   direct_g2, true);
      const double y0 = child_years(p, base, 0.0, cv0, epi_noise, occ_dev0, direct_g2, true);
      const double y1 = child_years(p, base, n_anc, cv_all, m.epigenetic_effect_g2 * n_anc + epi_noise,
                                    occ_dev0 + p.true_effect_occscore_g1 * n_anc, direct_g2, true);
      const double death = std::clamp(y, 0.01, 100.0);
      r.death_age = death;
      r.last_observed_age = death;
      r.death_cause = mort.bernoulli(cv ? 0.02 : 0.2) ? DeathCause::smallpox : DeathCause::other;
      KeyedRng orng(p.seed, static_cast<std::uint64_t>(r.id), Stream::outcome);
      r.occupational_score = 40.0 + 0.3 * (father_occ - 40.0) + orng.normal(0.0, p.noise.occupation);
      r.literacy_good = orng.bernoulli(clamp01(0.4 + 0.05 * n_treated));
      if (orng.bernoulli(0.4)) {
        r.disability_onset_age = death * orng.uniform(0.5, 1.0);
        r.disability_cause = orng.bernoulli(cv ? 0.1 : 0.4) ? DisabilityCause::smallpox_related : DisabilityCause::other;
      }
      pop.truth.potential.push_back({r.id, y0, y0 + (y1 - y0) / n_anc});
      g2.push_back(std::move(r));
    }
  }

  // --- G3 -------------------------------------------------------------------
  std::unordered_map<std::int64_t, const IndividualRecord*> g1_by_id;
  for (std::size_t i = 0; i < n_g1; ++i) g1_by_id.emplace(pop.records[i].id, &pop.records[i]);
  std::int64_t next_g3 = kG3Base;
  std::vector<IndividualRecord> g3;
  for (const auto& parent : g2) {
    if (parent.last_observed_age < 21.0) continue;
    KeyedRng rng(p.seed, static_cast<std::uint64_t>(parent.id), Stream::offspring);
    if (!rng.bernoulli(p.offspring_share)) continue;
    double n_treated = 0.0;
    for (auto aid : parent.g1_ancestor_ids) n_treated += g1_by_id.at(aid)->treated ? 1.0 : 0.0;
    const double n_anc = static_cast<double>(parent.g1_ancestor_ids.size());
    KeyedRng fam(p.seed, static_cast<std::uint64_t>(parent.id), Stream::family);
    const double epi_noise = std::sqrt(m.epigenetic_variance) * fam.normal();
    const std::int64_t mother_id = parent.sex == Sex::female ? parent.id : kSpouseBase + parent.id;
    const double parent_occ = parent.occupational_score.value_or(40.0);
    std::array<double, microdata::kFamilyCovariates> fx{};
    if (parent.sex == Sex::male) {
      fx[0] = parent_occ;
      fx[1] = fam.normal(30.0, 6.0);
    } else {
      fx[0] = fam.normal(40.0, 8.0);
      fx[1] = parent_occ;
    }
    fx[2] = fam.bernoulli(0.55) ? 1.0 : 0.0;
    fx[3] = fam.bernoulli(0.45) ? 1.0 : 0.0;
    fx[4] = fam.uniform(0.0, 0.4);
    fx[5] = fam.bernoulli(0.9) ? 1.0 : 0.0;
    fx[6] = fam.bernoulli(0.1) ? 1.0 : 0.0;
    const int n_children = fam.uniform_int(1, p.max_offspring);
    for (int k = 0; k < n_children; ++k) {
      const double birth_age = fam.uniform(20.0, 40.0);
      if (birth_age >= parent.last_observed_age) continue;
      IndividualRecord r;
      r.id = next_g3++;
      r.generation = Generation::G3;
      r.mother_id = mother_id;
      r.g1_ancestor_ids = parent.g1_ancestor_ids;
      r.parish = parent.parish;
      r.region = parent.region;
      r.cohort = parent.cohort + static_cast<int>(std::floor(birth_age));
      r.family_covariates = fx;
      KeyedRng ind(p.seed, static_cast<std::uint64_t>(r.id), Stream::individual);
      r.sex = ind.bernoulli(0.5) ? Sex::male : Sex::female;
      r.birth_month = ind.uniform_int(1, 12);
      r.midwife_assisted = ind.bernoulli(0.4);
      const double u_cv = ind.uniform();
      const bool cv = u_cv < m.child_vaccination_base + m.child_vaccination_transmission_g3 * n_treated;
      const bool cv0 = u_cv < m.child_vaccination_base;
      const bool cv_all = u_cv < m.child_vaccination_base + m.child_vaccination_transmission_g3 * n_anc;
      r.child_vaccinated = cv;
      KeyedRng mort(p.seed, static_cast<std::uint64_t>(r.id), Stream::mortality);
      double base = gompertz_age(mort, p.hazard.offspring_level, p.hazard.offspring_shape, 0.0);
      base += 0.5 * (p.noise.years * mort.normal() + p.noise.cohort_effect * mort.normal());
      base = std::clamp(base, 8.0, 80.0);
      const double y = child_years(p, base, n_treated, cv, m.epigenetic_effect_g3 * n_treated + epi_noise, 0.0,
                                   direct_g3, false);
      const double y0 = child_years(p, base, 0.0, cv0, epi_noise, 0.0, direct_g3, false);
      const double y1 = child_years(p, base, n_anc, cv_all, m.epigenetic_effect_g3 * n_anc + epi_noise, 0.0,
                                    direct_g3, false);
      const double death = std::clamp(y, 0.01, 100.0);
      r.death_age = death;
      r.last_observed_age = death;
      r.death_cause = mort.bernoulli(cv ? 0.01 : 0.1) ? DeathCause::smallpox : DeathCause::other;
      KeyedRng orng(p.seed, static_cast<std::uint64_t>(r.id), Stream::outcome);
      r.occupational_score = 40.0 + 0.3 * (fx[0] - 40.0) + orng.normal(0.0, p.noise.occupation);
      r.literacy_good = orng.bernoulli(0.5);
      if (orng.bernoulli(0.4)) {
        r.disability_onset_age = death * orng.uniform(0.5, 1.0);
        r.disability_cause = orng.bernoulli(cv ? 0.1 : 0.3) ? DisabilityCause::smallpox_related : DisabilityCause::other;
      }
      pop.truth.potential.push_back({r.id, y0, y0 + (y1 - y0) / n_anc});
      g3.push_back(std::move(r));
    }
  }
  pop.records.insert(pop.records.end(), g2.begin(), g2.end());
  pop.records.insert(pop.records.end(), g3.begin(), g3.end());

  // --- summary moments ---------------------------------------------------------
  auto& mo = pop.truth.moments;
  double post = 0.0, post_treated = 0.0, deaths = 0.0, migrants = 0.0, excluded = 0.0;
  for (std::size_t i = 0; i < n_g1; ++i) {
    const auto& r = pop.records[i];
    migrants += r.migrated ? 1.0 : 0.0;
    excluded += r.excluded ? 1.0 : 0.0;
    deaths += r.death_age ? 1.0 : 0.0;
    if (microdata::is_post(r.cohort) && !r.excluded) {
      post += 1.0;
      post_treated += r.treated ? 1.0 : 0.0;
    }
  }
  mo["n_g1"] = static_cast<double>(n_g1);
  mo["n_g2"] = static_cast<double>(g2.size());
  mo["n_g3"] = static_cast<double>(g3.size());
  mo["g1_deaths_observed"] = deaths;
  mo["g1_migrants"] = migrants;
  mo["g1_excluded_late_vaccinated"] = excluded;
  mo["g1_treated_share_post1801"] = post > 0.0 ? post_treated / post : 0.0;
  double zmax = 0.0;
  for (const auto& [k, v] : c.instrument.value) zmax = std::max(zmax, v);
  double imax = 0.0;
  for (const auto& [k, v] : c.intensity.intensity) imax = std::max(imax, v);
  mo["instrument_max"] = zmax;
  mo["instrument_divisor"] = c.instrument.divisor;
  mo["did_intensity_max"] = imax;
  mo["did_intensity_divisor"] = c.intensity.divisor;
  mo["g2_direct_effect"] = direct_g2;
  mo["g3_direct_effect"] = direct_g3;
  mo["g2_indirect_child_vaccination"] = m.child_vaccination_transmission_g2 * m.child_vaccination_effect;
  mo["g3_indirect_child_vaccination"] = m.child_vaccination_transmission_g3 * m.child_vaccination_effect;
  mo["epidemic_interaction_reduced_form"] = p.first_stage_slope * p.epidemic_amplification;
  std::array<std::vector<double>, 3> diffs;
  std::unordered_map<std::int64_t, int> gen_of;
  for (const auto& r : pop.records) gen_of.emplace(r.id, static_cast<int>(r.generation));
  for (const auto& po : pop.truth.potential)
    diffs[static_cast<std::size_t>(gen_of.at(po.id) - 1)].push_back(po.y_treated - po.y_untreated);
  const char* names[] = {"g1_mean_potential_effect", "g2_mean_potential_effect", "g3_mean_potential_effect"};
  for (std::size_t g = 0; g < 3; ++g)
    if (!diffs[g].empty()) mo[names[g]] = stats::mean(diffs[g]);
  return pop;
}

// --- serialization ------------------------------------------------------------------

nlohmann::json to_json(const DgpParams& p) {
  nlohmann::json j;
  j["seed"] = p.seed;
  j["n_parishes"] = p.n_parishes;
  j["n_regions"] = p.n_regions;
  j["n_families_per_parish"] = p.n_families_per_parish;
  j["max_children_per_family"] = p.max_children_per_family;
  j["cohort_window"] = {p.cohort_window.first, p.cohort_window.second};
  j["zero_personnel_share"] = p.zero_personnel_share;
  j["personnel_base"] = {p.personnel_base.first, p.personnel_base.second};
  j["personnel_jitter"] = p.personnel_jitter;
  j["personnel_bump_max"] = p.personnel_bump_max;
  j["pre_shift_max"] = p.pre_shift_max;
  j["post_shift_level"] = p.post_shift_level;
  nlohmann::json shocks = nlohmann::json::object();
  for (const auto& [y, s] : p.shock_years) shocks[std::to_string(y)] = s;
  j["shock_years"] = shocks;
  j["first_stage_slope"] = p.first_stage_slope;
  j["baseline_uptake"] = p.baseline_uptake;
  j["late_vaccination_share"] = p.late_vaccination_share;
  j["family_uptake_loading"] = p.family_uptake_loading;
  j["family_outcome_loading"] = p.family_outcome_loading;
  j["confounder_uptake_loading"] = p.confounder_uptake_loading;
  j["true_effect_years_g1"] = p.true_effect_years_g1;
  j["true_effect_years_g2"] = p.true_effect_years_g2;
  j["true_effect_years_g3"] = p.true_effect_years_g3;
  j["true_effect_occscore_g1"] = p.true_effect_occscore_g1;
  j["offspring_share"] = p.offspring_share;
  j["pair_share"] = p.pair_share;
  j["max_offspring"] = p.max_offspring;
  j["pretrend_slope"] = p.pretrend_slope;
  j["anticipation_lead1"] = p.anticipation_lead1;
  j["epidemic_amplification"] = p.epidemic_amplification;
  j["mortality"] = p.mortality == MortalityMode::additive ? "additive" : "proportional";
  j["hazard_params"] = {{"gompertz_shape", p.hazard.gompertz_shape},
                        {"gompertz_level", p.hazard.gompertz_level},
                        {"offspring_shape", p.hazard.offspring_shape},
                        {"offspring_level", p.hazard.offspring_level},
                        {"smallpox_share", p.hazard.smallpox_share},
                        {"hr_smallpox", p.hazard.hr_smallpox},
                        {"hr_other", p.hazard.hr_other},
                        {"confounder_log_hazard", p.hazard.confounder_log_hazard}};
  j["selection_params"] = {{"base_index", p.selection.base_index},
                           {"rye_coefficient", p.selection.rye_coefficient},
                           {"month_coefficient", p.selection.month_coefficient},
                           {"error_correlation", p.selection.error_correlation},
                           {"outcome_error_sd", p.selection.outcome_error_sd},
                           {"rye_uptake_coupling", p.selection.rye_uptake_coupling}};
  j["mediator_params"] = {{"child_vaccination_base", p.mediator.child_vaccination_base},
                          {"child_vaccination_transmission_g2", p.mediator.child_vaccination_transmission_g2},
                          {"child_vaccination_transmission_g3", p.mediator.child_vaccination_transmission_g3},
                          {"child_vaccination_effect", p.mediator.child_vaccination_effect},
                          {"occupation_transmission", p.mediator.occupation_transmission},
                          {"epigenetic_effect_g2", p.mediator.epigenetic_effect_g2},
                          {"epigenetic_effect_g3", p.mediator.epigenetic_effect_g3},
                          {"epigenetic_variance", p.mediator.epigenetic_variance}};
  j["noise_sds"] = {{"years", p.noise.years},
                    {"occupation", p.noise.occupation},
                    {"parish_effect", p.noise.parish_effect},
                    {"cohort_effect", p.noise.cohort_effect},
                    {"region_cohort_effect", p.noise.region_cohort_effect}};
  return j;
}

namespace {

template <typename T>
void read_field(const nlohmann::json& j, const std::string& path, T& out) {
  try {
    out = j.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("simulate." + path + " has the wrong type");
  }
}

void reject_unknown(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, v] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

}  // namespace

DgpParams params_from_json(const nlohmann::json& j) {
  DgpParams p;
  if (j.is_null()) return p;
  reject_unknown(j, "simulate",
                 {"seed", "n_parishes", "n_regions", "n_families_per_parish", "max_children_per_family",
                  "cohort_window", "zero_personnel_share", "personnel_base", "personnel_jitter",
                  "personnel_bump_max", "pre_shift_max", "post_shift_level", "shock_years",
                  "first_stage_slope", "baseline_uptake", "late_vaccination_share", "family_uptake_loading",
                  "family_outcome_loading", "confounder_uptake_loading", "true_effect_years_g1",
                  "true_effect_years_g2", "true_effect_years_g3", "true_effect_occscore_g1",
                  "offspring_share", "pair_share", "max_offspring", "pretrend_slope", "anticipation_lead1",
                  "epidemic_amplification", "mortality", "hazard_params", "selection_params",
                  "mediator_params", "noise_sds"});
#define QC_FIELD(name) \
  if (j.contains(#name)) read_field(j.at(#name), #name, p.name)
  QC_FIELD(seed);
  QC_FIELD(n_parishes);
  QC_FIELD(n_regions);
  QC_FIELD(n_families_per_parish);
  QC_FIELD(max_children_per_family);
  QC_FIELD(cohort_window);
  QC_FIELD(zero_personnel_share);
  QC_FIELD(personnel_base);
  QC_FIELD(personnel_jitter);
  QC_FIELD(personnel_bump_max);
  QC_FIELD(pre_shift_max);
  QC_FIELD(post_shift_level);
  QC_FIELD(first_stage_slope);
  QC_FIELD(baseline_uptake);
  QC_FIELD(late_vaccination_share);
  QC_FIELD(family_uptake_loading);
  QC_FIELD(family_outcome_loading);
  QC_FIELD(confounder_uptake_loading);
  QC_FIELD(true_effect_years_g1);
  QC_FIELD(true_effect_years_g2);
  QC_FIELD(true_effect_years_g3);
  QC_FIELD(true_effect_occscore_g1);
  QC_FIELD(offspring_share);
  QC_FIELD(pair_share);
  QC_FIELD(max_offspring);
  QC_FIELD(pretrend_slope);
  QC_FIELD(anticipation_lead1);
  QC_FIELD(epidemic_amplification);
#undef QC_FIELD
  if (j.contains("shock_years")) {
    const auto& s = j.at("shock_years");
    if (!s.is_object()) throw ConfigError("simulate.shock_years must map year -> shift");
    p.shock_years.clear();
    for (const auto& [year, v] : s.items()) {
      int y = 0;
      try {
        y = std::stoi(year);
      } catch (const std::exception&) {
        throw ConfigError("simulate.shock_years key '" + year + "' is not a year");
      }
      read_field(v, "shock_years." + year, p.shock_years[y]);
    }
  }
  if (j.contains("mortality")) {
    std::string m;
    read_field(j.at("mortality"), "mortality", m);
    if (m == "additive") p.mortality = MortalityMode::additive;
    else if (m == "proportional") p.mortality = MortalityMode::proportional;
    else throw ConfigError("simulate.mortality must be 'additive' or 'proportional'");
  }
#define QC_SUB(block, member, name) \
  if (j.contains(block) && j.at(block).contains(#name)) read_field(j.at(block).at(#name), block "." #name, p.member.name)
  if (j.contains("hazard_params")) {
    reject_unknown(j.at("hazard_params"), "simulate.hazard_params",
                   {"gompertz_shape", "gompertz_level", "offspring_shape", "offspring_level", "smallpox_share",
                    "hr_smallpox", "hr_other", "confounder_log_hazard"});
    QC_SUB("hazard_params", hazard, gompertz_shape);
    QC_SUB("hazard_params", hazard, gompertz_level);
    QC_SUB("hazard_params", hazard, offspring_shape);
    QC_SUB("hazard_params", hazard, offspring_level);
    QC_SUB("hazard_params", hazard, smallpox_share);
    QC_SUB("hazard_params", hazard, hr_smallpox);
    QC_SUB("hazard_params", hazard, hr_other);
    QC_SUB("hazard_params", hazard, confounder_log_hazard);
  }
  if (j.contains("selection_params")) {
    reject_unknown(j.at("selection_params"), "simulate.selection_params",
                   {"base_index", "rye_coefficient", "month_coefficient", "error_correlation", "outcome_error_sd",
                    "rye_uptake_coupling"});
    QC_SUB("selection_params", selection, base_index);
    QC_SUB("selection_params", selection, rye_coefficient);
    QC_SUB("selection_params", selection, month_coefficient);
    QC_SUB("selection_params", selection, error_correlation);
    QC_SUB("selection_params", selection, outcome_error_sd);
    QC_SUB("selection_params", selection, rye_uptake_coupling);
  }
  if (j.contains("mediator_params")) {
    reject_unknown(j.at("mediator_params"), "simulate.mediator_params",
                   {"child_vaccination_base", "child_vaccination_transmission_g2",
                    "child_vaccination_transmission_g3", "child_vaccination_effect", "occupation_transmission",
                    "epigenetic_effect_g2", "epigenetic_effect_g3", "epigenetic_variance"});
    QC_SUB("mediator_params", mediator, child_vaccination_base);
    QC_SUB("mediator_params", mediator, child_vaccination_transmission_g2);
    QC_SUB("mediator_params", mediator, child_vaccination_transmission_g3);
    QC_SUB("mediator_params", mediator, child_vaccination_effect);
    QC_SUB("mediator_params", mediator, occupation_transmission);
    QC_SUB("mediator_params", mediator, epigenetic_effect_g2);
    QC_SUB("mediator_params", mediator, epigenetic_effect_g3);
    QC_SUB("mediator_params", mediator, epigenetic_variance);
  }
  if (j.contains("noise_sds")) {
    reject_unknown(j.at("noise_sds"), "simulate.noise_sds",
                   {"years", "occupation", "parish_effect", "cohort_effect", "region_cohort_effect"});
    QC_SUB("noise_sds", noise, years);
    QC_SUB("noise_sds", noise, occupation);
    QC_SUB("noise_sds", noise, parish_effect);
    QC_SUB("noise_sds", noise, cohort_effect);
    QC_SUB("noise_sds", noise, region_cohort_effect);
  }
#undef QC_SUB
  return p;
}

nlohmann::json truth_to_json(const GroundTruth& truth) {
  nlohmann::json j;
  j["params"] = to_json(truth.params);
  nlohmann::json mo = nlohmann::json::object();
  for (const auto& [k, v] : truth.moments) mo[k] = v;
  j["moments"] = mo;
  j["n_potential_outcomes"] = truth.potential.size();
  return j;
}

void write_population(const Population& pop, const std::string& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + out_dir + "': " + ec.message());
  const std::filesystem::path dir(out_dir);
  microdata::write_individuals(pop.records, (dir / "individuals.csv").string());
  microdata::write_panel(pop.panel, (dir / "panel.csv").string());
  std::ofstream out(dir / "truth.json", std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write truth.json in '" + out_dir + "'");
  out << truth_to_json(pop.truth).dump(2) << '\n';
  if (!out) throw IoError("failed writing truth.json");
}

}  // namespace quasicausal::dgp
