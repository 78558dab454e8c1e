#include "quasicausal/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "quasicausal/duration.hpp"
#include "quasicausal/errors.hpp"
#include "quasicausal/quasi_exp.hpp"
#include "quasicausal/rng.hpp"

namespace quasicausal::pipeline {

namespace fs = std::filesystem;
using microdata::ControlSet;
using microdata::Generation;
using microdata::Outcome;
using nlohmann::json;

namespace {

constexpr std::array<std::pair<Estimator, const char*>, 14> kEstimatorNames{{
    {Estimator::ols, "ols"},
    {Estimator::mother_fe, "mother_fe"},
    {Estimator::did, "did"},
    {Estimator::event_study, "event_study"},
    {Estimator::tsls, "tsls"},
    {Estimator::intergen_tsls, "intergen_tsls"},
    {Estimator::heckman, "heckman"},
    {Estimator::pretrend_leads, "pretrend_leads"},
    {Estimator::cointervention, "cointervention"},
    {Estimator::indirect_least_squares, "indirect_least_squares"},
    {Estimator::cox, "cox"},
    {Estimator::tsri, "tsri"},
    {Estimator::competing_risks, "competing_risks"},
    {Estimator::survival, "survival"},
}};

std::string generation_name(Generation g) { return "G" + std::to_string(static_cast<int>(g)); }

Generation parse_generation(const json& v) {
  if (v.is_number_integer()) {
    const int g = v.get<int>();
    if (g >= 1 && g <= 3) return static_cast<Generation>(g);
  } else if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s == "G1") return Generation::G1;
    if (s == "G2") return Generation::G2;
    if (s == "G3") return Generation::G3;
  }
  throw ConfigError("unknown generation " + v.dump());
}

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
}

template <class T, class F>
std::vector<T> parse_list(const json& j, const std::string& key, F parse) {
  if (!j.is_array()) throw ConfigError("'" + key + "' must be an array");
  std::vector<T> out;
  for (const auto& v : j) {
    T x = parse(v);
    if (std::find(out.begin(), out.end(), x) != out.end()) throw ConfigError("duplicate entry in '" + key + "'");
    out.push_back(x);
  }
  if (out.empty()) throw ConfigError("'" + key + "' must not be empty");
  return out;
}

std::string as_string(const json& v, const std::string& key) {
  if (!v.is_string()) throw ConfigError("'" + key + "' must be a string");
  return v.get<std::string>();
}

int as_int(const json& v, const std::string& key, int lo) {
  if (!v.is_number_integer() || v.get<long long>() < lo || v.get<long long>() > 1'000'000'000)
    throw ConfigError("'" + key + "' must be an integer >= " + std::to_string(lo));
  return v.get<int>();
}

MediationConfig parse_mediation(const json& j) {
  reject_unknown(j, {"mediators", "outcomes", "generations", "controls", "control_function", "n_draws", "n_reps"},
                 "mediation");
  MediationConfig m;
  if (j.contains("mediators"))
    m.mediators = parse_list<mediation::MediatorKind>(
        j["mediators"], "mediation.mediators",
        [](const json& v) { return mediation::parse_mediator(as_string(v, "mediation.mediators")); });
  if (j.contains("outcomes"))
    m.outcomes = parse_list<Outcome>(j["outcomes"], "mediation.outcomes", [](const json& v) {
      return microdata::parse_outcome(as_string(v, "mediation.outcomes"));
    });
  if (j.contains("generations"))
    m.generations = parse_list<Generation>(j["generations"], "mediation.generations", parse_generation);
  if (j.contains("controls")) m.controls = microdata::parse_control_set(as_string(j["controls"], "mediation.controls"));
  if (j.contains("control_function")) {
    if (!j["control_function"].is_boolean()) throw ConfigError("'mediation.control_function' must be a boolean");
    m.control_function = j["control_function"].get<bool>();
  }
  if (j.contains("n_draws")) m.n_draws = as_int(j["n_draws"], "mediation.n_draws", 1);
  if (j.contains("n_reps")) {
    m.n_reps = as_int(j["n_reps"], "mediation.n_reps", 0);
    if (m.n_reps == 1) throw ConfigError("'mediation.n_reps' must be 0 or at least 2");
  }
  return m;
}

json mediation_to_json(const MediationConfig& m) {
  json meds = json::array(), outs = json::array(), gens = json::array();
  for (auto k : m.mediators) meds.push_back(mediation::mediator_name(k));
  for (auto o : m.outcomes) outs.push_back(microdata::outcome_name(o));
  for (auto g : m.generations) gens.push_back(generation_name(g));
  return {{"mediators", meds},
          {"outcomes", outs},
          {"generations", gens},
          {"controls", microdata::control_set_name(m.controls)},
          {"control_function", m.control_function},
          {"n_draws", m.n_draws},
          {"n_reps", m.n_reps}};
}

std::uint64_t key_seed(std::uint64_t seed, const std::string& key) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char ch : key) h = (h ^ ch) * 0x100000001b3ULL;
  return mix64(seed ^ mix64(h));
}

std::string kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::config: return "config";
    case ErrorKind::data: return "data";
    case ErrorKind::estimation: return "estimation";
  }
  return "estimation";
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir + "': " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write '" + path.string() + "'");
  f << text;
  if (!f) throw IoError("write failed for '" + path.string() + "'");
}

// Runs tasks on `jobs` threads; slot i always receives task i's result.
void run_parallel(std::size_t n, int jobs, const std::function<void(std::size_t)>& task) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, jobs)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) task(i);
    });
  for (auto& t : pool) t.join();
}

// --- estimation context --------------------------------------------------------------

struct Context {
  const RunConfig& config;
  const RunData& data;
  microdata::PanelIndex index;
  microdata::InstrumentTable instrument;
  microdata::DidIntensity intensity;

  Context(const RunConfig& c, const RunData& d)
      : config(c),
        data(d),
        index(d.panel),
        instrument(microdata::build_instrument(d.panel)),
        intensity(microdata::build_did_intensity(d.panel)) {}

  microdata::AnalysisSample sample(Generation g, Outcome o, bool keep_missing = false) const {
    microdata::SampleOptions so;
    so.generation = g;
    so.outcome = o;
    so.keep_missing_outcome = keep_missing;
    if (g == Generation::G1) return microdata::build_g1_sample(data.records, index, instrument, intensity, so);
    return microdata::build_stacked_sample(data.records, index, instrument, so);
  }
};

// One tsri fit per control set, shared by the tsri and survival cells.
struct TsriMemo {
  std::once_flag once;
  std::optional<duration::TsriResult> value;
};

double se_of(const regress::FitResult& f, const std::string& name) { return f.se(name); }

json headline(const std::string& term, double estimate, double se, std::size_t n_obs, std::size_t n_clusters) {
  return {{"term", term}, {"estimate", estimate}, {"se", se}, {"n_obs", n_obs}, {"n_clusters", n_clusters}};
}

json fit_cell(const regress::FitResult& f, const std::string& term) {
  json j = headline(term, f.coef(term), se_of(f, term), f.n_obs, f.n_clusters);
  j["fit"] = quasi_exp::to_json(f);
  return j;
}

json cox_to_json(const duration::CoxFit& f) {
  json coefs = json::array();
  for (std::size_t k = 0; k < f.names.size(); ++k) {
    const auto i = static_cast<Eigen::Index>(k);
    const double b = f.coefficients[i], se = std::sqrt(f.vcov(i, i));
    coefs.push_back({{"name", f.names[k]}, {"estimate", b}, {"se", se}, {"hazard_ratio", std::exp(b)}});
  }
  return {{"coefficients", coefs},
          {"log_partial_likelihood", f.log_partial_likelihood},
          {"ties", duration::ties_name(f.ties)},
          {"n_obs", f.n_obs},
          {"n_events", f.n_events},
          {"n_clusters", f.n_clusters},
          {"n_strata", f.n_strata},
          {"iterations", f.iterations}};
}

// E-value of a log hazard ratio with the 95% bound nearer the null.
json e_value_json(double b, double se) {
  const double hr = std::exp(b);
  const double bound = b < 0.0 ? std::exp(b + 1.959963984540054 * se) : std::exp(b - 1.959963984540054 * se);
  const auto e = duration::e_value(hr, bound);
  return {{"hazard_ratio", hr}, {"ci_bound", bound}, {"e_value", e.e_value}, {"e_value_ci", e.e_value_ci}};
}

json hazard_cell(const duration::TsriResult& r, const std::string& term) {
  const double b = r.fit.coef(term), se = r.fit.se(term);
  json j = headline(term, b, se, r.fit.n_obs, r.fit.n_clusters);
  j["fit"] = cox_to_json(r.fit);
  j["first_stage_f"] = r.first_stage_f;
  j["n_persons"] = r.n_persons;
  j["e_value"] = e_value_json(b, se);
  return j;
}

struct CellSpec {
  Generation generation;
  std::string outcome;
  std::string estimator;
  ControlSet controls;
  std::function<json()> run;

  std::string key() const {
    return generation_name(generation) + "/" + outcome + "/" + estimator + "/" + microdata::control_set_name(controls);
  }
};

struct CellArtifacts {
  std::optional<quasi_exp::EventStudyResult> event_study;
  std::optional<duration::SurvivalCurve> survival;
};

bool wants(const RunConfig& c, Estimator e) {
  return std::find(c.estimators.begin(), c.estimators.end(), e) != c.estimators.end();
}

json failed_cell(const std::string& kind, const std::string& what) {
  return {{"status", "failed"}, {"error_kind", kind}, {"error", what}};
}

json run_cell(const std::function<json()>& f) {
  try {
    json j = f();
    j["status"] = "ok";
    return j;
  } catch (const Error& e) {
    return failed_cell(kind_name(e.kind()), e.what());
  } catch (const std::exception& e) {
    return failed_cell("estimation", e.what());
  }
}

std::string csv_double(double v) { return std::isfinite(v) ? microdata::format_double(v) : ""; }

json data_section(const RunData& d) {
  json j = {{"source", d.source}, {"n_records", d.records.size()}, {"n_panel_rows", d.panel.size()}};
  if (!d.moments.empty()) j["moments"] = d.moments;
  return j;
}

json read_report(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read '" + path.string() + "'");
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw SchemaError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
  if (!j.is_object() || !j.contains("schema_version") || j["schema_version"] != kReportSchemaVersion)
    throw SchemaError("'" + path.string() + "' has an unsupported report schema version");
  return j;
}

}  // namespace

// --- names -----------------------------------------------------------------------------

Estimator parse_estimator(const std::string& name) {
  for (const auto& [e, n] : kEstimatorNames)
    if (name == n) return e;
  throw ConfigError("unknown estimator '" + name + "'");
}

std::string estimator_name(Estimator e) {
  for (const auto& [k, n] : kEstimatorNames)
    if (k == e) return n;
  return "unknown";
}

const std::vector<Estimator>& all_estimators() {
  static const std::vector<Estimator> all = [] {
    std::vector<Estimator> v;
    for (const auto& [e, n] : kEstimatorNames) v.push_back(e);
    return v;
  }();
  return all;
}

// --- configuration -------------------------------------------------------------------

RunConfig RunConfig::from_json(const json& j) {
  reject_unknown(j,
                 {"schema_version", "inputs", "simulate", "estimators", "controls", "outcomes", "generations",
                  "cointerventions", "n_leads", "survival_bands", "mediation", "seed", "jobs", "output_dir"},
                 "config");
  RunConfig c;
  if (!j.contains("schema_version")) throw ConfigError("missing 'schema_version'");
  if (j["schema_version"] != kConfigSchemaVersion)
    throw ConfigError("unsupported schema_version " + j["schema_version"].dump() + " (expected " +
                      std::to_string(kConfigSchemaVersion) + ")");
  if (j.contains("inputs") == j.contains("simulate"))
    throw ConfigError("exactly one of 'inputs' and 'simulate' is required");
  try {
    if (j.contains("inputs")) {
      const auto& in = j["inputs"];
      reject_unknown(in, {"individuals", "panel", "schema"}, "inputs");
      if (!in.contains("individuals") || !in.contains("panel"))
        throw ConfigError("'inputs' needs 'individuals' and 'panel'");
      InputPaths p;
      p.individuals = as_string(in["individuals"], "inputs.individuals");
      p.panel = as_string(in["panel"], "inputs.panel");
      if (in.contains("schema")) {
        p.schema = in["schema"];
        microdata::SchemaConfig::from_json(p.schema);  // fail early on a bad map
      }
      c.inputs = p;
    } else {
      if (!j["simulate"].is_object()) throw ConfigError("'simulate' must be an object");
      c.simulate = dgp::params_from_json(j["simulate"]);
      c.simulate_seed_explicit = j["simulate"].contains("seed");
    }
    c.estimators = j.contains("estimators")
                       ? parse_list<Estimator>(j["estimators"], "estimators",
                                               [](const json& v) { return parse_estimator(as_string(v, "estimators")); })
                       : all_estimators();
    if (j.contains("controls"))
      c.controls = parse_list<ControlSet>(j["controls"], "controls", [](const json& v) {
        return microdata::parse_control_set(as_string(v, "controls"));
      });
    if (j.contains("outcomes"))
      c.outcomes = parse_list<Outcome>(j["outcomes"], "outcomes", [](const json& v) {
        return microdata::parse_outcome(as_string(v, "outcomes"));
      });
    if (j.contains("generations")) c.generations = parse_list<Generation>(j["generations"], "generations", parse_generation);
    if (j.contains("cointerventions")) {
      c.cointerventions = parse_list<std::string>(j["cointerventions"], "cointerventions", [](const json& v) {
        auto s = as_string(v, "cointerventions");
        const auto& names = microdata::kParishCovariateNames;
        if (std::find(names.begin(), names.end(), s) == names.end())
          throw ConfigError("unknown cointervention '" + s + "'");
        return s;
      });
    }
    if (j.contains("n_leads")) c.n_leads = as_int(j["n_leads"], "n_leads", 1);
    if (j.contains("survival_bands")) {
      c.survival_bands = parse_list<std::pair<double, double>>(j["survival_bands"], "survival_bands", [](const json& v) {
        if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number())
          throw ConfigError("'survival_bands' entries must be [lo, hi] pairs");
        const double lo = v[0].get<double>(), hi = v[1].get<double>();
        if (!(lo < hi) || lo < 0.0 || hi > duration::kMaxAge)
          throw ConfigError("survival band [lo, hi] needs 0 <= lo < hi <= 100");
        return std::pair{lo, hi};
      });
    }
    if (j.contains("mediation")) c.mediation = parse_mediation(j["mediation"]);
    if (j.contains("seed")) {
      const auto& v = j["seed"];
      if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
        throw ConfigError("'seed' must be a non-negative integer");
      c.seed = j["seed"].get<std::uint64_t>();
    }
    if (j.contains("jobs")) c.jobs = as_int(j["jobs"], "jobs", 1);
    if (j.contains("output_dir")) c.output_dir = as_string(j["output_dir"], "output_dir");
  } catch (const json::exception& e) {
    throw ConfigError(e.what());
  }
  return c;
}

json RunConfig::to_json() const {
  json j;
  j["schema_version"] = schema_version;
  if (inputs) j["inputs"] = {{"individuals", inputs->individuals}, {"panel", inputs->panel}, {"schema", inputs->schema}};
  if (simulate) j["simulate"] = dgp::to_json(dgp_params());
  json es = json::array(), cs = json::array(), os = json::array(), gs = json::array(), bands = json::array();
  for (auto e : estimators) es.push_back(estimator_name(e));
  for (auto c : controls) cs.push_back(microdata::control_set_name(c));
  for (auto o : outcomes) os.push_back(microdata::outcome_name(o));
  for (auto g : generations) gs.push_back(generation_name(g));
  for (const auto& [lo, hi] : survival_bands) bands.push_back({lo, hi});
  j["estimators"] = es;
  j["controls"] = cs;
  j["outcomes"] = os;
  j["generations"] = gs;
  j["cointerventions"] = cointerventions;
  j["n_leads"] = n_leads;
  j["survival_bands"] = bands;
  j["mediation"] = mediation_to_json(mediation);
  j["seed"] = seed;
  return j;
}

dgp::DgpParams RunConfig::dgp_params() const {
  if (!simulate) throw ConfigError("no 'simulate' block");
  dgp::DgpParams p = *simulate;
  if (!simulate_seed_explicit) p.seed = seed;
  return p;
}

RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config '" + path + "'");
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw ConfigError("'" + path + "' is not valid JSON: " + e.what());
  }
  return RunConfig::from_json(j);
}

void apply_overrides(RunConfig& config, const Overrides& o) {
  if (o.seed) {
    config.seed = *o.seed;
    config.simulate_seed_explicit = false;
  }
  if (o.jobs) {
    if (*o.jobs < 1) throw ConfigError("--jobs must be at least 1");
    config.jobs = *o.jobs;
  }
  if (o.output_dir) config.output_dir = *o.output_dir;
}

// --- data ------------------------------------------------------------------------------

RunData acquire_data(const RunConfig& config) {
  RunData d;
  if (config.simulate) {
    const auto p = config.dgp_params();
    auto pop = dgp::simulate_population(p, config.jobs);
    d.records = std::move(pop.records);
    d.panel = std::move(pop.panel);
    d.moments = pop.truth.moments;
    d.source = "simulate";
    return d;
  }
  if (!config.inputs) throw ConfigError("no data source configured");
  const auto schema = microdata::SchemaConfig::from_json(config.inputs->schema);
  auto md = microdata::load_microdata(config.inputs->individuals, config.inputs->panel, schema);
  microdata::construct_treatment(md.records);
  d.records = std::move(md.records);
  d.panel = std::move(md.panel);
  d.source = "inputs";
  return d;
}

SimulateSummary cmd_simulate(const RunConfig& config) {
  if (!config.simulate) throw ConfigError("simulate needs a 'simulate' block in the config");
  const auto p = config.dgp_params();
  const auto pop = dgp::simulate_population(p, config.jobs);
  dgp::write_population(pop, config.output_dir);
  return {config.output_dir, pop.truth.moments};
}

// --- estimation grid -------------------------------------------------------------------

EstimateOutput cmd_estimate(const RunConfig& config, const RunData& data) {
  const Context ctx(config, data);
  std::map<ControlSet, TsriMemo> tsri_memo;
  for (auto c : config.controls) tsri_memo[c];

  auto tsri_for = [&](ControlSet c) -> const duration::TsriResult& {
    auto& m = tsri_memo.at(c);
    std::call_once(m.once, [&] {
      const auto spells = microdata::build_spells(data.records, microdata::CauseMode::all_cause);
      duration::TsriOptions o;
      o.controls = c;
      m.value = duration::tsri_hazard(spells, data.records, ctx.instrument, o);
    });
    return *m.value;
  };

  std::vector<CellSpec> cells;
  std::vector<CellArtifacts> artifacts;
  auto add = [&](Generation g, const std::string& outcome, const std::string& est, ControlSet c,
                 std::function<json()> run) { cells.push_back({g, outcome, est, c, std::move(run)}); };

  const bool has_g1 = std::find(config.generations.begin(), config.generations.end(), Generation::G1) !=
                      config.generations.end();
  // Cells that keep artifacts write to the slot of their own index.
  for (auto g : config.generations) {
    for (auto o : config.outcomes) {
      const std::string on = microdata::outcome_name(o);
      for (auto c : config.controls) {
        if (wants(config, Estimator::ols))
          add(g, on, "ols", c, [&ctx, g, o, c] {
            const auto s = ctx.sample(g, o);
            return fit_cell(quasi_exp::run_outcome_estimator(s, quasi_exp::OutcomeEstimator::ols, c), "treated");
          });
        if (g != Generation::G1) {
          if (wants(config, Estimator::intergen_tsls))
            add(g, on, "intergen_tsls", c, [&ctx, g, o, c] {
              const auto r = quasi_exp::intergen_tsls(ctx.sample(g, o), c);
              json j = fit_cell(r.fit, "treated");
              j["diagnostics"] = quasi_exp::to_json(r.diagnostics);
              return j;
            });
          continue;
        }
        if (wants(config, Estimator::mother_fe))
          add(g, on, "mother_fe", c, [&ctx, g, o, c] { return fit_cell(quasi_exp::mother_fe(ctx.sample(g, o), c), "treated"); });
        if (wants(config, Estimator::did))
          add(g, on, "did", c, [&ctx, g, o, c] { return fit_cell(quasi_exp::did(ctx.sample(g, o), c), "post_x_intensity"); });
        if (wants(config, Estimator::indirect_least_squares))
          add(g, on, "indirect_least_squares", c, [&ctx, g, o, c] {
            const auto s = ctx.sample(g, o);
            const auto d = quasi_exp::did(s, c);
            double post = 0.0, treated = 0.0;
            for (std::size_t i = 0; i < s.size(); ++i)
              if (microdata::is_post(static_cast<int>(s.cohort[i]))) {
                post += 1.0;
                treated += s.treatment[static_cast<Eigen::Index>(i)];
              }
            const double share = post > 0.0 ? treated / post : 0.0;
            const double b = quasi_exp::indirect_least_squares(d.coef("post_x_intensity"), share);
            json j = headline("treated", b, d.se("post_x_intensity") / share, d.n_obs, d.n_clusters);
            j["did_estimate"] = d.coef("post_x_intensity");
            j["treated_share"] = share;
            return j;
          });
        if (wants(config, Estimator::event_study)) {
          const std::size_t slot = cells.size();
          add(g, on, "event_study", c, [&ctx, &artifacts, slot, g, o, c] {
            const quasi_exp::PreTrendBootstrap wild{999, key_seed(ctx.config.seed, "event_study")};
            auto e = quasi_exp::event_study(ctx.sample(g, o), ctx.intensity, c, {1790, 1800}, wild);
            json j = quasi_exp::to_json(e);
            j["term"] = "pre_trend_F";
            j["estimate"] = e.pre_trend.statistic;
            artifacts[slot].event_study = std::move(e);
            return j;
          });
        }
        if (wants(config, Estimator::tsls))
          add(g, on, "tsls", c, [&ctx, g, o, c] {
            const auto r = quasi_exp::tsls(ctx.sample(g, o), c);
            json j = fit_cell(r.fit, "treated");
            j["diagnostics"] = quasi_exp::to_json(r.diagnostics);
            return j;
          });
        if (wants(config, Estimator::heckman))
          add(g, on, "heckman", c, [&ctx, g, o, c] {
            const auto s = ctx.sample(g, o, true);
            const auto h = quasi_exp::heckman_correct(s, quasi_exp::selection_predictors(s, ctx.data.records),
                                                      quasi_exp::OutcomeEstimator::ols, c);
            json j = fit_cell(h.fit, "treated");
            j["imr"] = {{"estimate", h.fit.coef("imr")}, {"se", h.fit.se("imr")}};
            j["n_selected"] = h.n_selected;
            j["n_total"] = h.n_total;
            return j;
          });
        if (wants(config, Estimator::pretrend_leads))
          add(g, on, "pretrend_leads", c, [&ctx, g, o, c] {
            const auto leads = quasi_exp::pretrend_leads(ctx.sample(g, o), ctx.instrument, ctx.config.n_leads, c);
            json series = json::array();
            std::size_t within = 0;
            for (const auto& l : leads) {
              series.push_back({{"lead", l.lead}, {"estimate", l.coefficient}, {"se", l.se}, {"n_obs", l.n_obs}});
              if (l.lead > 0 && std::abs(l.coefficient) <= 2.0 * l.se) ++within;
            }
            return json{{"series", series},
                        {"term", "leads_within_2se"},
                        {"estimate", static_cast<double>(within)},
                        {"n_obs", leads.empty() ? 0 : leads.front().n_obs}};
          });
        if (wants(config, Estimator::cointervention))
          for (const auto& name : config.cointerventions)
            add(g, on, "cointervention_" + name, c, [&ctx, g, o, c, name] {
              return fit_cell(quasi_exp::cointervention_interactions(ctx.sample(g, o), name, c),
                              "instrument_x_" + name);
            });
      }
    }
  }

  if (has_g1) {
    for (auto c : config.controls) {
      if (wants(config, Estimator::cox))
        add(Generation::G1, "mortality", "cox", c, [&ctx, &data, c] {
          const auto spells = microdata::build_spells(data.records, microdata::CauseMode::all_cause);
          duration::TsriOptions o;
          o.controls = c;
          o.include_residual = false;
          return hazard_cell(duration::tsri_hazard(spells, data.records, ctx.instrument, o), "treated");
        });
      if (wants(config, Estimator::tsri))
        add(Generation::G1, "mortality", "tsri", c, [&tsri_for, c] {
          const auto& r = tsri_for(c);
          json j = hazard_cell(r, "treated");
          j["residual"] = {{"estimate", r.fit.coef("residual")}, {"se", r.fit.se("residual")}};
          return j;
        });
      if (wants(config, Estimator::competing_risks))
        add(Generation::G1, "mortality", "competing_risks", c, [&ctx, &data, c] {
          const auto spells = microdata::build_spells(data.records, microdata::CauseMode::competing);
          duration::TsriOptions o;
          o.controls = c;
          const auto r = duration::competing_risks(spells, data.records, ctx.instrument, o);
          json j = hazard_cell(r, "treated_x_cause0");
          json causes = json::object();
          for (int k : r.causes) {
            const std::string t = "treated_x_cause" + std::to_string(k);
            if (r.fit.index_of(t)) causes[t] = e_value_json(r.fit.coef(t), r.fit.se(t));
          }
          j["causes"] = causes;
          j["inestimable_causes"] = r.inestimable;
          return j;
        });
      if (wants(config, Estimator::survival)) {
        const std::size_t slot = cells.size();
        add(Generation::G1, "mortality", "survival", c, [&tsri_for, &artifacts, &config, slot, c] {
          const auto& r = tsri_for(c);
          const auto [treated, untreated] = duration::arm_profiles(r.fit);
          auto curve = duration::survival_and_expectancy(r.fit, treated, untreated,
                                                         microdata::spell_start_age(Generation::G1),
                                                         config.survival_bands);
          json bands = json::array();
          for (const auto& b : curve.bands)
            bands.push_back({{"lo", b.lo}, {"hi", b.hi}, {"treated", b.treated}, {"untreated", b.untreated},
                             {"added", b.added}, {"extrapolated", b.extrapolated}});
          json j = {{"term", "added_years"},
                    {"estimate", curve.total.added},
                    {"bands", bands},
                    {"total",
                     {{"lo", curve.total.lo}, {"hi", curve.total.hi}, {"treated", curve.total.treated},
                      {"untreated", curve.total.untreated}, {"added", curve.total.added},
                      {"extrapolated", curve.total.extrapolated}}},
                    {"n_obs", r.fit.n_obs}};
          artifacts[slot].survival = std::move(curve);
          return j;
        });
      }
    }
  }
  if (cells.empty()) throw ConfigError("the estimator selection yields no cells for the chosen generations");

  artifacts.resize(cells.size());
  std::vector<json> results(cells.size());
  run_parallel(cells.size(), config.jobs, [&](std::size_t i) { results[i] = run_cell(cells[i].run); });

  EstimateOutput out;
  json grid = json::object();
  for (std::size_t i = 0; i < cells.size(); ++i) {
    json r = std::move(results[i]);
    r["generation"] = generation_name(cells[i].generation);
    r["outcome"] = cells[i].outcome;
    r["estimator"] = cells[i].estimator;
    r["controls"] = microdata::control_set_name(cells[i].controls);
    (r["status"] == "ok" ? out.n_ok : out.n_failed) += 1;
    grid[cells[i].key()] = std::move(r);
  }

  ensure_dir(config.output_dir);
  const fs::path dir(config.output_dir);
  json files = json::array();
  // Event-study series of every successful cell, in sorted key order.
  std::vector<std::size_t> order(cells.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return cells[a].key() < cells[b].key(); });
  if (wants(config, Estimator::event_study)) {
    std::ostringstream csv;
    csv << "generation,outcome,controls,cohort,estimate,se,lower,upper,reference\n";
    for (auto i : order) {
      const auto& e = artifacts[i].event_study;
      if (!e) continue;
      for (std::size_t k = 0; k < e->cohorts.size(); ++k) {
        const auto t = static_cast<Eigen::Index>(k);
        csv << generation_name(cells[i].generation) << ',' << cells[i].outcome << ','
            << microdata::control_set_name(cells[i].controls) << ',' << e->cohorts[k] << ','
            << csv_double(e->coefficients[t]) << ',' << csv_double(e->se[t]) << ',' << csv_double(e->lower[t])
            << ',' << csv_double(e->upper[t]) << ',' << (e->reference[k] ? 1 : 0) << '\n';
      }
    }
    write_text(dir / "event_study.csv", csv.str());
    files.push_back("event_study.csv");
  }
  // survival.csv comes from the first configured control set with a curve.
  if (wants(config, Estimator::survival)) {
    for (auto c : config.controls) {
      const auto it = std::find_if(order.begin(), order.end(), [&](std::size_t i) {
        return cells[i].estimator == "survival" && cells[i].controls == c && artifacts[i].survival;
      });
      if (it == order.end()) continue;
      duration::write_survival_csv(*artifacts[*it].survival, (dir / "survival.csv").string());
      files.push_back("survival.csv");
      grid[cells[*it].key()]["csv"] = "survival.csv";
      break;
    }
  }

  json report = json::object();
  const fs::path report_path = dir / "report.json";
  if (fs::exists(report_path)) {
    // keep mediation rows from an earlier run on the same configuration
    try {
      auto old = read_report(report_path);
      if (old.contains("mediation") && old["config"] == config.to_json()) {
        report["mediation"] = old["mediation"];
        report["mediation_summary"] = old["mediation_summary"];
      }
    } catch (const Error&) {
    }
  }
  report["schema_version"] = kReportSchemaVersion;
  report["config"] = config.to_json();
  report["data"] = data_section(data);
  report["cells"] = std::move(grid);
  report["files"] = files;
  report["summary"] = {{"n_cells", cells.size()}, {"n_ok", out.n_ok}, {"n_failed", out.n_failed}};
  write_text(report_path, dump_report(report));
  out.report = std::move(report);
  return out;
}

EstimateOutput cmd_estimate(const RunConfig& config) { return cmd_estimate(config, acquire_data(config)); }

// --- mediation grid --------------------------------------------------------------------

EstimateOutput cmd_mediate(const RunConfig& config, const RunData& data) {
  const Context ctx(config, data);
  const auto& mc = config.mediation;
  struct Row {
    Generation g;
    Outcome o;
    mediation::MediatorKind m;
    std::string key() const {
      return generation_name(g) + "/" + microdata::outcome_name(o) + "/" + mediation::mediator_name(m);
    }
  };
  std::vector<Row> rows;
  for (auto g : mc.generations)
    for (auto o : mc.outcomes)
      for (auto m : mc.mediators) rows.push_back({g, o, m});

  std::vector<json> results(rows.size());
  const int inner_jobs = std::max(1, config.jobs / static_cast<int>(std::max<std::size_t>(1, rows.size())));
  run_parallel(rows.size(), config.jobs, [&](std::size_t i) {
    const auto& row = rows[i];
    results[i] = run_cell([&] {
      const auto s = ctx.sample(row.g, row.o);
      std::optional<mediation::EpigeneticMediator> epi;
      if (row.m == mediation::MediatorKind::epigenetic) epi = mediation::build_epigenetic_mediator(s);
      const auto values = mediation::mediator_values(s, data.records, row.m, epi ? &*epi : nullptr);
      const auto md = mediation::mediation_data(s, values, mc.controls, mc.control_function);
      mediation::MediationOptions opt;
      opt.outcome_link = row.o == Outcome::literacy ? mediation::Link::logit : mediation::Link::linear;
      opt.mediator_link = mediation::default_link(row.m);
      opt.n_draws = mc.n_draws;
      opt.n_reps = mc.n_reps;
      opt.seed = key_seed(config.seed, row.key());
      opt.jobs = inner_jobs;
      json j = mediation::to_json(mediation::mediate(md, opt));
      j["outcome_link"] = mediation::link_name(opt.outcome_link);
      j["mediator_link"] = mediation::link_name(opt.mediator_link);
      j["seed"] = opt.seed;
      return j;
    });
  });

  EstimateOutput out;
  json grid = json::object();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    json r = std::move(results[i]);
    r["generation"] = generation_name(rows[i].g);
    r["outcome"] = microdata::outcome_name(rows[i].o);
    r["mediator"] = mediation::mediator_name(rows[i].m);
    (r["status"] == "ok" ? out.n_ok : out.n_failed) += 1;
    grid[rows[i].key()] = std::move(r);
  }

  ensure_dir(config.output_dir);
  const fs::path report_path = fs::path(config.output_dir) / "report.json";
  json report = json::object();
  if (fs::exists(report_path)) {
    try {
      auto old = read_report(report_path);
      if (old["config"] == config.to_json()) report = std::move(old);
    } catch (const Error&) {
    }
  }
  report["schema_version"] = kReportSchemaVersion;
  report["config"] = config.to_json();
  report["data"] = data_section(data);
  report["mediation"] = std::move(grid);
  report["mediation_summary"] = {{"n_rows", rows.size()}, {"n_ok", out.n_ok}, {"n_failed", out.n_failed}};
  write_text(report_path, dump_report(report));
  out.report = std::move(report);
  return out;
}

EstimateOutput cmd_mediate(const RunConfig& config) { return cmd_mediate(config, acquire_data(config)); }

// --- report ----------------------------------------------------------------------------

std::string cmd_report(const std::string& output_dir) {
  const fs::path dir(output_dir);
  const auto report = read_report(dir / "report.json");
  auto num = [](const json& v) { return v.is_number() ? csv_double(v.get<double>()) : std::string(); };
  auto short_num = [](const json& v) {
    if (!v.is_number()) return std::string();
    std::ostringstream s;
    s << std::setprecision(6) << v.get<double>();
    return s.str();
  };

  std::ostringstream csv, text;
  csv << "section,key,status,term,estimate,se,n_obs,error\n";
  auto quoted = [](std::string s) {
    std::string q = "\"";
    for (char ch : s) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
    return q + "\"";
  };
  text << std::setprecision(6);
  text << std::left << std::setw(64) << "cell" << std::setw(8) << "status" << std::right << std::setw(14)
       << "estimate" << std::setw(12) << "se" << std::setw(9) << "n" << '\n';
  auto line = [&](const std::string& key, const json& c, const json& est, const json& se) {
    text << std::left << std::setw(64) << key << ' ' << std::setw(8) << c.value("status", "") << std::right
         << std::setw(14) << short_num(est) << std::setw(12) << short_num(se) << std::setw(9)
         << (c.contains("n_obs") ? c["n_obs"].dump() : std::string()) << '\n';
  };
  std::size_t ok = 0, failed = 0;
  if (report.contains("cells"))
    for (const auto& [key, c] : report["cells"].items()) {
      const bool good = c.value("status", "") == "ok";
      (good ? ok : failed) += 1;
      csv << "cells," << key << ',' << c.value("status", "") << ',' << c.value("term", "") << ','
          << num(c.value("estimate", json())) << ',' << num(c.value("se", json())) << ','
          << (c.contains("n_obs") ? c["n_obs"].dump() : "") << ',' << (good ? "" : quoted(c.value("error", "")))
          << '\n';
      line(key, c, c.value("estimate", json()), c.value("se", json()));
    }
  if (report.contains("mediation"))
    for (const auto& [key, c] : report["mediation"].items()) {
      const bool good = c.value("status", "") == "ok";
      (good ? ok : failed) += 1;
      if (!good) {
        csv << "mediation," << key << ",failed,,,,," << quoted(c.value("error", "")) << '\n';
        line(key, c, json(), json());
        continue;
      }
      for (const auto& [term, field] : {std::pair{"nde", "natural_direct_effect"},
                                        {"nie", "natural_indirect_effect"},
                                        {"total", "total_effect"},
                                        {"total_regression", "total_effect_regression"}}) {
        const auto& e = c[field];
        csv << "mediation," << key << ",ok," << term << ',' << num(e.value("estimate", json())) << ','
            << num(e.value("se", json())) << ',' << c["n_obs"].dump() << ",\n";
        line(key + "/" + std::string(term), c, e.value("estimate", json()), e.value("se", json()));
      }
    }
  write_text(dir / "report.csv", csv.str());
  text << ok << " ok, " << failed << " failed\n";
  return text.str();
}

std::string dump_report(const json& report) { return report.dump(2) + "\n"; }

}  // namespace quasicausal::pipeline
