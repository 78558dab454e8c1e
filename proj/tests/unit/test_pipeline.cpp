#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "quasicausal/errors.hpp"
#include "quasicausal/pipeline.hpp"
#include "quasicausal/quasi_exp.hpp"

using namespace quasicausal;
using namespace quasicausal::pipeline;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("qc_pipeline_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

// Small enough for a unit test; seed 7 leaves every region x cohort cell of
// the post-1801 stage-1 logit with treated and untreated persons.
json small_config() {
  return {{"schema_version", 1},
          {"simulate", {{"n_parishes", 24}, {"n_families_per_parish", 80}}},
          {"controls", {"none", "baseline"}},
          {"mediation", {{"n_draws", 100}, {"n_reps", 0}, {"controls", "none"}, {"outcomes", {"years_lived"}}}},
          {"seed", 7}};
}

}  // namespace

TEST_CASE("config parsing is fail-closed") {
  auto j = small_config();
  CHECK_NOTHROW(RunConfig::from_json(j));

  auto extra = j;
  extra["colour"] = "blue";
  CHECK_THROWS_AS(RunConfig::from_json(extra), ConfigError);
  auto nested = j;
  nested["mediation"]["bootstrap"] = 3;
  CHECK_THROWS_AS(RunConfig::from_json(nested), ConfigError);
  auto dgp_key = j;
  dgp_key["simulate"]["n_villages"] = 3;
  CHECK_THROWS_AS(RunConfig::from_json(dgp_key), ConfigError);

  auto no_version = j;
  no_version.erase("schema_version");
  CHECK_THROWS_AS(RunConfig::from_json(no_version), ConfigError);
  auto wrong_version = j;
  wrong_version["schema_version"] = 2;
  CHECK_THROWS_AS(RunConfig::from_json(wrong_version), ConfigError);

  auto both = j;
  both["inputs"] = {{"individuals", "a.csv"}, {"panel", "b.csv"}};
  CHECK_THROWS_AS(RunConfig::from_json(both), ConfigError);
  auto neither = j;
  neither.erase("simulate");
  CHECK_THROWS_AS(RunConfig::from_json(neither), ConfigError);

  for (const auto& [key, value] : std::vector<std::pair<std::string, json>>{
           {"outcomes", {"height"}},
           {"controls", {"some"}},
           {"estimators", {"lasso"}},
           {"generations", {4}},
           {"cointerventions", {"weather"}},
           {"outcomes", json::array()},
           {"controls", {"none", "none"}},
           {"jobs", 0},
           {"seed", -1},
           {"survival_bands", {{10, 5}}}}) {
    auto bad = j;
    bad[key] = value;
    CAPTURE(key);
    CHECK_THROWS_AS(RunConfig::from_json(bad), ConfigError);
  }
}

TEST_CASE("canonical config round-trips and applies the seed rule") {
  const auto c = RunConfig::from_json(small_config());
  CHECK(c.dgp_params().seed == 7);
  CHECK(c.estimators == all_estimators());
  const auto back = RunConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());

  auto explicit_seed = small_config();
  explicit_seed["simulate"]["seed"] = 99;
  auto e = RunConfig::from_json(explicit_seed);
  CHECK(e.dgp_params().seed == 99);
  apply_overrides(e, {5, 3, std::string("elsewhere")});
  CHECK(e.seed == 5);
  CHECK(e.dgp_params().seed == 5);
  CHECK(e.jobs == 3);
  CHECK(e.output_dir == "elsewhere");
  // output directory and jobs do not enter the canonical form
  CHECK(e.to_json().count("output_dir") == 0);
  CHECK(e.to_json().count("jobs") == 0);
  CHECK_THROWS_AS(apply_overrides(e, {std::nullopt, 0, std::nullopt}), ConfigError);
}

TEST_CASE("simulate writes the population and rejects configs without a simulate block") {
  auto c = RunConfig::from_json(small_config());
  c.output_dir = scratch("simulate").string();
  const auto s = cmd_simulate(c);
  for (const char* f : {"individuals.csv", "panel.csv", "truth.json"}) CHECK(fs::exists(fs::path(c.output_dir) / f));
  const double share = s.moments.at("g1_treated_share_post1801");
  CHECK(share > 0.2);
  CHECK(share < 0.5);

  // loading the written files reproduces the simulated records
  json in = small_config();
  in.erase("simulate");
  in["inputs"] = {{"individuals", (fs::path(c.output_dir) / "individuals.csv").string()},
                  {"panel", (fs::path(c.output_dir) / "panel.csv").string()}};
  const auto loaded = acquire_data(RunConfig::from_json(in));
  const auto simulated = acquire_data(c);
  CHECK(loaded.source == "inputs");
  CHECK(loaded.records == simulated.records);
  CHECK(loaded.panel == simulated.panel);
  CHECK_THROWS_AS(cmd_simulate(RunConfig::from_json(in)), ConfigError);

  json missing = in;
  missing["inputs"]["panel"] = "/nonexistent/panel.csv";
  try {
    acquire_data(RunConfig::from_json(missing));
    FAIL("expected a data error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::data);
  }
}

TEST_CASE("estimate grid: completeness, internal consistency and determinism") {
  auto c = RunConfig::from_json(small_config());
  const auto data = acquire_data(c);
  c.output_dir = scratch("estimate_a").string();
  c.jobs = 1;
  const auto a = cmd_estimate(c, data);
  CHECK(a.n_failed == 0);
  const auto& cells = a.report["cells"];

  std::set<std::string> families;
  for (const auto& [k, cell] : cells.items()) families.insert(cell["estimator"].get<std::string>());
  CHECK(families.size() >= 6);
  CHECK(cells.size() == a.n_ok);
  CHECK(a.report["schema_version"] == kReportSchemaVersion);

  // 2SLS equals reduced form over first stage in its own cell
  for (const char* key : {"G1/years_lived/tsls/none", "G1/years_lived/tsls/baseline", "G2/years_lived/intergen_tsls/baseline"}) {
    CAPTURE(key);
    const auto& d = cells[key]["diagnostics"];
    const double ratio = d["reduced_form"]["instrument"].get<double>() / d["first_stage"]["instrument"].get<double>();
    CHECK(std::abs(cells[key]["estimate"].get<double>() - ratio) < 1e-8);
  }

  // report values equal direct module calls
  const microdata::PanelIndex index(data.panel);
  const auto z = microdata::build_instrument(data.panel);
  const auto intensity = microdata::build_did_intensity(data.panel);
  const auto s = microdata::build_g1_sample(data.records, index, z, intensity, {});
  const auto direct = quasi_exp::tsls(s, microdata::ControlSet::baseline);
  CHECK(cells["G1/years_lived/tsls/baseline"]["estimate"].get<double>() == direct.fit.coef("treated"));
  CHECK(cells["G1/years_lived/did/none"]["estimate"].get<double>() ==
        quasi_exp::did(s, microdata::ControlSet::none).coef("post_x_intensity"));
  const auto& ils = cells["G1/years_lived/indirect_least_squares/none"];
  CHECK(ils["estimate"].get<double>() ==
        quasi_exp::indirect_least_squares(ils["did_estimate"].get<double>(), ils["treated_share"].get<double>()));

  const fs::path dir(c.output_dir);
  CHECK(fs::exists(dir / "event_study.csv"));
  CHECK(fs::exists(dir / "survival.csv"));
  CHECK(slurp(dir / "survival.csv").rfind("age,S_treated,S_untreated,added_band", 0) == 0);

  // byte-identical across reruns and thread counts
  auto c2 = c;
  c2.output_dir = scratch("estimate_b").string();
  c2.jobs = 3;
  cmd_estimate(c2, acquire_data(c2));
  for (const char* f : {"report.json", "event_study.csv", "survival.csv"}) {
    CAPTURE(f);
    CHECK(slurp(dir / f) == slurp(fs::path(c2.output_dir) / f));
  }

  const auto text = cmd_report(c.output_dir);
  CHECK(text.find("G1/years_lived/tsls/baseline") != std::string::npos);
  CHECK(fs::exists(dir / "report.csv"));
}

TEST_CASE("failed cells are recorded and the run continues") {
  auto j = small_config();
  j["simulate"]["max_children_per_family"] = 1;  // no siblings
  j["estimators"] = {"mother_fe", "ols"};
  j["generations"] = {"G1"};
  auto c = RunConfig::from_json(j);
  c.output_dir = scratch("failures").string();
  const auto out = cmd_estimate(c);
  CHECK(out.n_ok == 2);
  CHECK(out.n_failed == 2);
  const auto& cell = out.report["cells"]["G1/years_lived/mother_fe/none"];
  CHECK(cell["status"] == "failed");
  CHECK(cell["error_kind"] == "estimation");
  CHECK(out.report["cells"]["G1/years_lived/ols/none"]["status"] == "ok");

  j["estimators"] = {"mother_fe"};
  auto all_fail = RunConfig::from_json(j);
  all_fail.output_dir = scratch("all_fail").string();
  CHECK(cmd_estimate(all_fail).n_ok == 0);
}

TEST_CASE("mediation grid with an isolated missing mediator") {
  auto c = RunConfig::from_json(small_config());
  c.output_dir = scratch("mediate").string();
  auto data = acquire_data(c);
  for (auto& r : data.records) r.child_vaccinated.reset();

  const auto est = cmd_estimate(c, data);
  const auto out = cmd_mediate(c, data);
  const auto& rows = out.report["mediation"];
  CHECK(rows.size() == c.mediation.mediators.size() * c.mediation.outcomes.size() * c.mediation.generations.size());
  CHECK(out.n_failed == 2);  // child vaccination in G2 and G3
  for (const char* g : {"G2", "G3"}) {
    CHECK(rows[std::string(g) + "/years_lived/child_vaccination"]["status"] == "failed");
    CHECK(rows[std::string(g) + "/years_lived/parental_occupation"]["status"] == "ok");
  }
  const auto& row = rows["G2/years_lived/parental_occupation"];
  CHECK(row.contains("decomposition_consistent"));
  CHECK(row["n_draws"] == 100);
  // estimate cells survive the merge
  CHECK(out.report["cells"] == est.report["cells"]);

  // a later estimate run keeps the mediation rows of the same configuration
  const auto again = cmd_estimate(c, data);
  CHECK(again.report["mediation"] == rows);
}

TEST_CASE("report rejects missing or foreign files") {
  const auto dir = scratch("report");
  CHECK_THROWS_AS(cmd_report(dir.string()), IoError);
  fs::create_directories(dir);
  std::ofstream(dir / "report.json") << R"({"schema_version": 99})";
  CHECK_THROWS_AS(cmd_report(dir.string()), SchemaError);
}
