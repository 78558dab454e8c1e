#include "quasicausal/microdata.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <set>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "quasicausal/errors.hpp"
#include "quasicausal/stats.hpp"

namespace quasicausal::microdata {

namespace {

using Row = std::vector<std::string>;

// Minimal RFC-4180 field splitting (quoted fields may contain commas).
Row split_csv_line(const std::string& line) {
  Row out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<Row> rows;
};

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw SchemaError("'" + path + "' is empty (no header row)");
  t.header = split_csv_line(line);
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    t.rows.push_back(split_csv_line(line));
    if (t.rows.back().size() != t.header.size())
      throw SchemaError("'" + path + "' row " + std::to_string(t.rows.size()) + " has " +
                        std::to_string(t.rows.back().size()) + " fields, header has " +
                        std::to_string(t.header.size()));
  }
  return t;
}

class ColumnLookup {
 public:
  ColumnLookup(const CsvTable& t, const std::vector<std::string>& fields,
               const std::vector<std::string>& required,
               const std::function<std::string(const std::string&)>& column_of,
               const std::string& path) {
    std::unordered_map<std::string, std::size_t> pos;
    for (std::size_t j = 0; j < t.header.size(); ++j) pos.emplace(t.header[j], j);
    for (const auto& f : fields) {
      const auto col = column_of(f);
      const auto it = pos.find(col);
      if (it != pos.end()) {
        index_.emplace(f, it->second);
      } else if (std::find(required.begin(), required.end(), f) != required.end()) {
        throw SchemaError("'" + path + "' is missing required column '" + col + "'");
      }
    }
  }
  const std::string* get(const Row& row, const std::string& field) const {
    const auto it = index_.find(field);
    if (it == index_.end()) return nullptr;
    return &row[it->second];
  }

 private:
  std::unordered_map<std::string, std::size_t> index_;
};

struct ParseContext {
  std::size_t row;
  const char* field;
};

[[noreturn]] void bad_value(const ParseContext& ctx, const std::string& text) {
  throw ValidationError("row " + std::to_string(ctx.row) + ": field '" + ctx.field +
                        "' cannot parse '" + text + "'");
}

std::optional<double> parse_opt_double(const std::string* s, const ParseContext& ctx) {
  if (!s || s->empty()) return std::nullopt;
  double v = 0.0;
  const auto [p, ec] = std::from_chars(s->data(), s->data() + s->size(), v);
  if (ec != std::errc() || p != s->data() + s->size() || !std::isfinite(v)) bad_value(ctx, *s);
  return v;
}

std::optional<std::int64_t> parse_opt_int(const std::string* s, const ParseContext& ctx) {
  if (!s || s->empty()) return std::nullopt;
  std::int64_t v = 0;
  const auto [p, ec] = std::from_chars(s->data(), s->data() + s->size(), v);
  if (ec != std::errc() || p != s->data() + s->size()) bad_value(ctx, *s);
  return v;
}

std::int64_t parse_int(const std::string* s, const ParseContext& ctx) {
  const auto v = parse_opt_int(s, ctx);
  if (!v) bad_value(ctx, s ? *s : "");
  return *v;
}

double parse_double(const std::string* s, const ParseContext& ctx) {
  const auto v = parse_opt_double(s, ctx);
  if (!v) bad_value(ctx, s ? *s : "");
  return *v;
}

std::optional<bool> parse_opt_bool(const std::string* s, const ParseContext& ctx) {
  if (!s || s->empty()) return std::nullopt;
  if (*s == "1" || *s == "true") return true;
  if (*s == "0" || *s == "false") return false;
  bad_value(ctx, *s);
}

std::string fmt_opt(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }
std::string fmt_opt_bool(const std::optional<bool>& v) { return v ? (*v ? "1" : "0") : ""; }

std::string join_ids(const std::vector<std::int64_t>& ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) s += ';';
    s += std::to_string(ids[i]);
  }
  return s;
}

const char* generation_text(Generation g) {
  switch (g) {
    case Generation::G1: return "G1";
    case Generation::G2: return "G2";
    case Generation::G3: return "G3";
  }
  return "G1";
}

std::pair<int, int> cohort_window(Generation g) {
  switch (g) {
    case Generation::G1: return {1790, 1820};
    case Generation::G2: return {1805, 1865};
    case Generation::G3: return {1820, 1910};
  }
  return {0, 0};
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  return out;
}

}  // namespace

// --- schema ------------------------------------------------------------------

const std::vector<std::string>& individual_fields() {
  static const std::vector<std::string> f = [] {
    std::vector<std::string> v{"id",           "generation",        "mother_id",
                               "g1_ancestor_ids", "parish",         "region",
                               "cohort",       "birth_month",       "sex",
                               "vaccinated_age", "death_age",       "last_observed_age",
                               "migrated",     "disability_onset_age", "disability_cause",
                               "death_cause",  "literacy_good",     "occupational_score"};
    for (const char* n : kFamilyCovariateNames) v.emplace_back(n);
    v.emplace_back("midwife_assisted");
    v.emplace_back("child_vaccinated");
    return v;
  }();
  return f;
}

const std::vector<std::string>& panel_fields() {
  static const std::vector<std::string> f{"parish",          "cohort",       "church_personnel",
                                          "national_shift",  "midwives",     "priests",
                                          "smallpox_death_rate", "urban_share", "students_per_capita",
                                          "rye_price",       "potato_seeds_per_km2"};
  return f;
}

SchemaConfig SchemaConfig::from_json(const nlohmann::json& j) {
  SchemaConfig s;
  if (j.is_null()) return s;
  if (!j.is_object()) throw ConfigError("schema must be an object");
  for (const auto& [key, value] : j.items()) {
    if (key != "individuals" && key != "panel")
      throw ConfigError("unknown schema section '" + key + "'");
    const auto& fields = key == "individuals" ? individual_fields() : panel_fields();
    auto& target = key == "individuals" ? s.individual_columns : s.panel_columns;
    if (!value.is_object()) throw ConfigError("schema." + key + " must be an object");
    for (const auto& [field, col] : value.items()) {
      if (std::find(fields.begin(), fields.end(), field) == fields.end())
        throw ConfigError("schema." + key + ": unknown field '" + field + "'");
      if (!col.is_string()) throw ConfigError("schema." + key + "." + field + " must be a string");
      target[field] = col.get<std::string>();
    }
  }
  return s;
}

std::string SchemaConfig::individual_column(const std::string& field) const {
  const auto it = individual_columns.find(field);
  return it == individual_columns.end() ? field : it->second;
}

std::string SchemaConfig::panel_column(const std::string& field) const {
  const auto it = panel_columns.find(field);
  return it == panel_columns.end() ? field : it->second;
}

// --- validation ----------------------------------------------------------------

std::vector<Violation> validate_records(const std::vector<IndividualRecord>& records) {
  std::vector<Violation> v;
  std::set<std::int64_t> ids;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const std::size_t row = i + 1;
    if (!ids.insert(r.id).second) v.push_back({row, "id unique"});
    if (r.last_observed_age < 0.0 || r.last_observed_age > 100.0 ||
        (r.death_age && (*r.death_age > r.last_observed_age || *r.death_age < 0.0)))
      v.push_back({row, "death_age ≤ last_observed_age ≤ 100"});
    if (r.vaccinated_age && *r.vaccinated_age < 0.0) v.push_back({row, "vaccinated_age ≥ 0"});
    if (r.generation != Generation::G1 && r.g1_ancestor_ids.empty())
      v.push_back({row, "G2/G3 requires non-empty g1_ancestor_ids"});
    const auto [lo, hi] = cohort_window(r.generation);
    if (r.cohort < lo || r.cohort > hi)
      v.push_back({row, std::string("cohort within ") + generation_text(r.generation) + " window " +
                            std::to_string(lo) + "–" + std::to_string(hi)});
    if (r.birth_month < 1 || r.birth_month > 12) v.push_back({row, "birth_month in 1..12"});
    if (r.disability_onset_age && (*r.disability_onset_age < 0.0 || *r.disability_onset_age > r.last_observed_age))
      v.push_back({row, "disability_onset_age ≤ last_observed_age"});
    if (r.death_cause && !r.death_age) v.push_back({row, "death_cause requires death_age"});
  }
  return v;
}

std::vector<Violation> validate_panel(const std::vector<PanelContext>& panel) {
  std::vector<Violation> v;
  std::set<ParishCohort> seen;
  std::map<int, double> shift;
  for (std::size_t i = 0; i < panel.size(); ++i) {
    const auto& p = panel[i];
    const std::size_t row = i + 1;
    if (p.church_personnel < 0.0) v.push_back({row, "church_personnel ≥ 0"});
    if (!seen.insert({p.parish, p.cohort}).second) v.push_back({row, "one row per (parish, cohort)"});
    const auto [it, fresh] = shift.emplace(p.cohort, p.national_shift);
    if (!fresh && it->second != p.national_shift)
      v.push_back({row, "national_shift identical across parishes within a cohort"});
    if (p.urban_share < 0.0 || p.urban_share > 1.0) v.push_back({row, "urban_share in [0,1]"});
  }
  return v;
}

namespace {

void throw_violations(const std::string& what, const std::vector<Violation>& v) {
  if (v.empty()) return;
  std::string msg = what + ": " + std::to_string(v.size()) + " violation(s)";
  for (std::size_t i = 0; i < v.size() && i < 20; ++i)
    msg += "; row " + std::to_string(v[i].row) + ": " + v[i].rule;
  throw ValidationError(msg);
}

}  // namespace

// --- ingestion ------------------------------------------------------------------

std::vector<IndividualRecord> load_individuals(const std::string& path, const SchemaConfig& schema) {
  const CsvTable t = read_csv(path);
  const ColumnLookup col(t, individual_fields(),
                         {"id", "generation", "parish", "region", "cohort", "last_observed_age"},
                         [&](const std::string& f) { return schema.individual_column(f); }, path);
  std::vector<IndividualRecord> out;
  out.reserve(t.rows.size());
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const Row& row = t.rows[i];
    const std::size_t n = i + 1;
    auto ctx = [n](const char* f) { return ParseContext{n, f}; };
    IndividualRecord r;
    r.id = parse_int(col.get(row, "id"), ctx("id"));
    const std::string gen = *col.get(row, "generation");
    if (gen == "G1" || gen == "1") r.generation = Generation::G1;
    else if (gen == "G2" || gen == "2") r.generation = Generation::G2;
    else if (gen == "G3" || gen == "3") r.generation = Generation::G3;
    else bad_value(ctx("generation"), gen);
    r.mother_id = parse_opt_int(col.get(row, "mother_id"), ctx("mother_id"));
    if (const auto* s = col.get(row, "g1_ancestor_ids"); s && !s->empty()) {
      std::size_t start = 0;
      while (start <= s->size()) {
        const auto end = std::min(s->find(';', start), s->size());
        const std::string tok = s->substr(start, end - start);
        r.g1_ancestor_ids.push_back(parse_int(&tok, ctx("g1_ancestor_ids")));
        start = end + 1;
      }
    }
    r.parish = parse_int(col.get(row, "parish"), ctx("parish"));
    r.region = parse_int(col.get(row, "region"), ctx("region"));
    r.cohort = static_cast<int>(parse_int(col.get(row, "cohort"), ctx("cohort")));
    r.birth_month = static_cast<int>(parse_opt_int(col.get(row, "birth_month"), ctx("birth_month")).value_or(1));
    if (const auto* s = col.get(row, "sex"); s && !s->empty()) {
      if (*s == "F" || *s == "female") r.sex = Sex::female;
      else if (*s == "M" || *s == "male") r.sex = Sex::male;
      else bad_value(ctx("sex"), *s);
    }
    r.vaccinated_age = parse_opt_double(col.get(row, "vaccinated_age"), ctx("vaccinated_age"));
    r.death_age = parse_opt_double(col.get(row, "death_age"), ctx("death_age"));
    r.last_observed_age = parse_double(col.get(row, "last_observed_age"), ctx("last_observed_age"));
    r.migrated = parse_opt_bool(col.get(row, "migrated"), ctx("migrated")).value_or(false);
    r.disability_onset_age = parse_opt_double(col.get(row, "disability_onset_age"), ctx("disability_onset_age"));
    if (const auto* s = col.get(row, "disability_cause"); s && !s->empty()) {
      if (*s == "smallpox_related") r.disability_cause = DisabilityCause::smallpox_related;
      else if (*s == "other") r.disability_cause = DisabilityCause::other;
      else bad_value(ctx("disability_cause"), *s);
    }
    if (const auto* s = col.get(row, "death_cause"); s && !s->empty()) {
      if (*s == "smallpox") r.death_cause = DeathCause::smallpox;
      else if (*s == "other") r.death_cause = DeathCause::other;
      else bad_value(ctx("death_cause"), *s);
    }
    r.literacy_good = parse_opt_bool(col.get(row, "literacy_good"), ctx("literacy_good"));
    r.occupational_score = parse_opt_double(col.get(row, "occupational_score"), ctx("occupational_score"));
    for (int k = 0; k < kFamilyCovariates; ++k)
      r.family_covariates[static_cast<std::size_t>(k)] =
          parse_opt_double(col.get(row, kFamilyCovariateNames[static_cast<std::size_t>(k)]),
                           ctx(kFamilyCovariateNames[static_cast<std::size_t>(k)]))
              .value_or(0.0);
    r.midwife_assisted = parse_opt_bool(col.get(row, "midwife_assisted"), ctx("midwife_assisted")).value_or(false);
    r.child_vaccinated = parse_opt_bool(col.get(row, "child_vaccinated"), ctx("child_vaccinated"));
    out.push_back(std::move(r));
  }
  throw_violations("'" + path + "'", validate_records(out));
  return out;
}

std::vector<PanelContext> load_panel(const std::string& path, const SchemaConfig& schema) {
  const CsvTable t = read_csv(path);
  const ColumnLookup col(t, panel_fields(), {"parish", "cohort", "church_personnel", "national_shift"},
                         [&](const std::string& f) { return schema.panel_column(f); }, path);
  std::vector<PanelContext> out;
  out.reserve(t.rows.size());
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const Row& row = t.rows[i];
    const std::size_t n = i + 1;
    auto num = [&](const char* f) { return parse_opt_double(col.get(row, f), ParseContext{n, f}).value_or(0.0); };
    PanelContext p;
    p.parish = parse_int(col.get(row, "parish"), ParseContext{n, "parish"});
    p.cohort = static_cast<int>(parse_int(col.get(row, "cohort"), ParseContext{n, "cohort"}));
    p.church_personnel = parse_double(col.get(row, "church_personnel"), ParseContext{n, "church_personnel"});
    p.national_shift = parse_double(col.get(row, "national_shift"), ParseContext{n, "national_shift"});
    p.midwives = num("midwives");
    p.priests = num("priests");
    p.smallpox_death_rate = num("smallpox_death_rate");
    p.urban_share = num("urban_share");
    p.students_per_capita = num("students_per_capita");
    p.rye_price = num("rye_price");
    p.potato_seeds_per_km2 = num("potato_seeds_per_km2");
    out.push_back(p);
  }
  throw_violations("'" + path + "'", validate_panel(out));
  return out;
}

Microdata load_microdata(const std::string& individuals_csv, const std::string& panel_csv,
                         const SchemaConfig& schema) {
  Microdata m;
  m.records = load_individuals(individuals_csv, schema);
  m.panel = load_panel(panel_csv, schema);
  return m;
}

std::string format_double(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw IoError("cannot format number");
  return std::string(buf, p);
}

void write_individuals(const std::vector<IndividualRecord>& records, const std::string& path) {
  auto out = open_out(path);
  const auto& fields = individual_fields();
  for (std::size_t j = 0; j < fields.size(); ++j) out << (j ? "," : "") << fields[j];
  out << '\n';
  for (const auto& r : records) {
    out << r.id << ',' << generation_text(r.generation) << ','
        << (r.mother_id ? std::to_string(*r.mother_id) : "") << ',' << join_ids(r.g1_ancestor_ids)
        << ',' << r.parish << ',' << r.region << ',' << r.cohort << ',' << r.birth_month << ','
        << (r.sex == Sex::female ? "F" : "M") << ',' << fmt_opt(r.vaccinated_age) << ','
        << fmt_opt(r.death_age) << ',' << format_double(r.last_observed_age) << ','
        << (r.migrated ? "1" : "0") << ',' << fmt_opt(r.disability_onset_age) << ','
        << (r.disability_cause ? (*r.disability_cause == DisabilityCause::smallpox_related ? "smallpox_related" : "other") : "")
        << ',' << (r.death_cause ? (*r.death_cause == DeathCause::smallpox ? "smallpox" : "other") : "")
        << ',' << fmt_opt_bool(r.literacy_good) << ',' << fmt_opt(r.occupational_score);
    for (double f : r.family_covariates) out << ',' << format_double(f);
    out << ',' << (r.midwife_assisted ? "1" : "0") << ',' << fmt_opt_bool(r.child_vaccinated) << '\n';
  }
  if (!out) throw IoError("failed writing '" + path + "'");
}

void write_panel(const std::vector<PanelContext>& panel, const std::string& path) {
  auto out = open_out(path);
  const auto& fields = panel_fields();
  for (std::size_t j = 0; j < fields.size(); ++j) out << (j ? "," : "") << fields[j];
  out << '\n';
  for (const auto& p : panel) {
    out << p.parish << ',' << p.cohort << ',' << format_double(p.church_personnel) << ','
        << format_double(p.national_shift) << ',' << format_double(p.midwives) << ','
        << format_double(p.priests) << ',' << format_double(p.smallpox_death_rate) << ','
        << format_double(p.urban_share) << ',' << format_double(p.students_per_capita) << ','
        << format_double(p.rye_price) << ',' << format_double(p.potato_seeds_per_km2) << '\n';
  }
  if (!out) throw IoError("failed writing '" + path + "'");
}

void construct_treatment(std::vector<IndividualRecord>& records) {
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto& r = records[i];
    if (r.vaccinated_age && *r.vaccinated_age < 0.0)
      throw ValidationError("row " + std::to_string(i + 1) + ": vaccinated_age ≥ 0");
    r.treated = r.vaccinated_age && *r.vaccinated_age <= kTreatmentAgeCutoff;
    r.excluded = r.vaccinated_age && *r.vaccinated_age > kTreatmentAgeCutoff;
  }
}

// --- panel-derived regressors ---------------------------------------------------

PanelIndex::PanelIndex(const std::vector<PanelContext>& panel) {
  std::set<std::int64_t> parishes;
  min_cohort_ = panel.empty() ? 0 : panel.front().cohort;
  max_cohort_ = min_cohort_;
  for (const auto& p : panel) {
    rows_.emplace(ParishCohort{p.parish, p.cohort}, p);
    parishes.insert(p.parish);
    min_cohort_ = std::min(min_cohort_, p.cohort);
    max_cohort_ = std::max(max_cohort_, p.cohort);
  }
  parishes_.assign(parishes.begin(), parishes.end());
}

const PanelContext* PanelIndex::find(std::int64_t parish, int cohort) const {
  const auto it = rows_.find({parish, cohort});
  return it == rows_.end() ? nullptr : &it->second;
}

const PanelContext& PanelIndex::at(std::int64_t parish, int cohort) const {
  if (const auto* p = find(parish, cohort)) return *p;
  throw MissingParishError("no panel row for parish " + std::to_string(parish) + ", cohort " +
                           std::to_string(cohort));
}

double InstrumentTable::at(std::int64_t parish, int cohort) const {
  if (const auto v = find(parish, cohort)) return *v;
  throw MissingLagError("no instrument for parish " + std::to_string(parish) + ", cohort " +
                        std::to_string(cohort) + " (needs panel rows at t-1 and t)");
}

std::optional<double> InstrumentTable::find(std::int64_t parish, int cohort) const {
  const auto it = value.find({parish, cohort});
  if (it == value.end()) return std::nullopt;
  return it->second;
}

InstrumentTable build_instrument(const std::vector<PanelContext>& panel,
                                 std::pair<double, double> q) {
  if (!(q.first >= 0.0 && q.first < q.second && q.second <= 1.0))
    throw ParameterError("instrument rescale quantiles must satisfy 0 ≤ low < high ≤ 1");
  InstrumentTable t;
  t.quantiles = q;
  const PanelIndex index(panel);
  std::map<std::int64_t, int> first_year;
  for (const auto& p : panel) {
    auto [it, fresh] = first_year.emplace(p.parish, p.cohort);
    if (!fresh) it->second = std::min(it->second, p.cohort);
  }
  for (const auto& p : panel) {
    if (p.cohort == first_year.at(p.parish)) continue;
    const auto* lag = index.find(p.parish, p.cohort - 1);
    if (!lag)
      throw MissingLagError("parish " + std::to_string(p.parish) + " has no panel row for cohort " +
                            std::to_string(p.cohort - 1) + " (lag of " + std::to_string(p.cohort) + ")");
    t.raw[{p.parish, p.cohort}] = lag->church_personnel * p.national_shift;
  }
  std::vector<double> values;
  values.reserve(t.raw.size());
  for (const auto& [key, v] : t.raw) values.push_back(v);
  if (values.empty()) throw NormalizationError("instrument has no (parish, cohort) cells");
  std::sort(values.begin(), values.end());
  t.divisor = stats::quantile_sorted(values, q.second) - stats::quantile_sorted(values, q.first);
  if (!(t.divisor > 0.0))
    throw NormalizationError("instrument quantile range is zero; cannot rescale");
  for (const auto& [key, v] : t.raw) t.value[key] = v / t.divisor;
  return t;
}

double DidIntensity::at(std::int64_t parish) const {
  const auto it = intensity.find(parish);
  if (it == intensity.end())
    throw MissingParishError("parish " + std::to_string(parish) + " has no pre-window intensity");
  return it->second;
}

double DidIntensity::regressor(std::int64_t parish, int cohort) const {
  return is_post(cohort) ? at(parish) : 0.0;
}

DidIntensity build_did_intensity(const std::vector<PanelContext>& panel, std::pair<int, int> window,
                                 std::pair<double, double> q) {
  DidIntensity d;
  d.quantiles = q;
  std::map<std::int64_t, std::vector<double>> by_parish;
  std::set<std::int64_t> parishes;
  for (const auto& p : panel) {
    parishes.insert(p.parish);
    if (p.cohort >= window.first && p.cohort <= window.second)
      by_parish[p.parish].push_back(p.church_personnel);
  }
  for (auto parish : parishes) {
    const auto it = by_parish.find(parish);
    if (it == by_parish.end())
      throw MissingParishError("parish " + std::to_string(parish) + " has no panel rows in " +
                               std::to_string(window.first) + "–" + std::to_string(window.second));
    d.raw[parish] = stats::mean(it->second);
  }
  std::vector<double> values;
  for (const auto& [p, v] : d.raw) values.push_back(v);
  if (values.empty()) throw NormalizationError("no parishes for DID intensity");
  std::sort(values.begin(), values.end());
  d.divisor = stats::quantile_sorted(values, q.second) - stats::quantile_sorted(values, q.first);
  if (!(d.divisor > 0.0)) throw NormalizationError("DID intensity interquartile range is zero");
  for (const auto& [p, v] : d.raw) d.intensity[p] = v / d.divisor;
  return d;
}

// --- samples ---------------------------------------------------------------------

Outcome parse_outcome(const std::string& name) {
  if (name == "years_lived") return Outcome::years_lived;
  if (name == "disability_free_years") return Outcome::disability_free_years;
  if (name == "literacy") return Outcome::literacy;
  if (name == "occupational_score") return Outcome::occupational_score;
  throw ConfigError("unknown outcome '" + name + "'");
}

std::string outcome_name(Outcome o) {
  switch (o) {
    case Outcome::years_lived: return "years_lived";
    case Outcome::disability_free_years: return "disability_free_years";
    case Outcome::literacy: return "literacy";
    case Outcome::occupational_score: return "occupational_score";
  }
  return "";
}

ControlSet parse_control_set(const std::string& name) {
  if (name == "none") return ControlSet::none;
  if (name == "baseline") return ControlSet::baseline;
  if (name == "full") return ControlSet::full;
  throw ConfigError("unknown control set '" + name + "'");
}

std::string control_set_name(ControlSet c) {
  switch (c) {
    case ControlSet::none: return "none";
    case ControlSet::baseline: return "baseline";
    case ControlSet::full: return "full";
  }
  return "";
}

double spell_start_age(Generation g) { return g == Generation::G1 ? 2.0 : 0.0; }

std::optional<double> outcome_value(const IndividualRecord& r, Outcome o) {
  const double start = spell_start_age(r.generation);
  switch (o) {
    case Outcome::years_lived:
      if (!r.death_age) return std::nullopt;
      return *r.death_age - start;
    case Outcome::disability_free_years: {
      if (!r.death_age) return std::nullopt;
      const double end = r.disability_onset_age ? std::min(*r.disability_onset_age, *r.death_age) : *r.death_age;
      return std::max(0.0, end - start);
    }
    case Outcome::literacy:
      if (!r.literacy_good) return std::nullopt;
      return *r.literacy_good ? 1.0 : 0.0;
    case Outcome::occupational_score:
      return r.occupational_score;
  }
  return std::nullopt;
}

std::int64_t region_cohort_code(std::int64_t region, int cohort) { return region * 10000 + cohort; }

AnalysisSample AnalysisSample::subset(const std::vector<std::size_t>& rows) const {
  AnalysisSample s;
  s.outcome_name = outcome_name;
  s.stacked = stacked;
  const auto n = static_cast<Eigen::Index>(rows.size());
  s.outcome.resize(n);
  s.treatment.resize(n);
  s.instrument.resize(n);
  s.did_regressor.resize(n);
  s.family_x.resize(n, family_x.cols());
  s.parish_x.resize(n, parish_x.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)]);
    const auto ru = rows[static_cast<std::size_t>(i)];
    s.record_index.push_back(record_index[ru]);
    s.outcome[i] = outcome[r];
    s.treatment[i] = treatment[r];
    s.instrument[i] = instrument[r];
    s.did_regressor[i] = did_regressor[r];
    s.family_x.row(i) = family_x.row(r);
    s.parish_x.row(i) = parish_x.row(r);
    s.cluster.push_back(cluster[ru]);
    s.parish.push_back(parish[ru]);
    s.cohort.push_back(cohort[ru]);
    s.region_cohort.push_back(region_cohort[ru]);
    s.mother.push_back(mother[ru]);
    s.child_cohort.push_back(child_cohort[ru]);
    if (!ancestor_id.empty()) s.ancestor_id.push_back(ancestor_id[ru]);
  }
  return s;
}

namespace {

struct RowBuilder {
  AnalysisSample s;
  std::vector<double> y, t, z, did;
  std::vector<std::array<double, kFamilyCovariates + 1>> fx;
  std::vector<std::array<double, kParishCovariateNames.size()>> px;

  void add_covariates(const IndividualRecord& r, const PanelContext* own) {
    std::array<double, kFamilyCovariates + 1> f{};
    f[0] = r.sex == Sex::male ? 1.0 : 0.0;
    for (int k = 0; k < kFamilyCovariates; ++k)
      f[static_cast<std::size_t>(k) + 1] = r.family_covariates[static_cast<std::size_t>(k)];
    fx.push_back(f);
    std::array<double, kParishCovariateNames.size()> p{};
    if (own)
      p = {own->midwives, own->priests, own->smallpox_death_rate, own->students_per_capita,
           own->rye_price, own->urban_share};
    px.push_back(p);
  }

  AnalysisSample finish() {
    const auto n = static_cast<Eigen::Index>(y.size());
    s.outcome = Eigen::Map<regress::Vector>(y.data(), n);
    s.treatment = Eigen::Map<regress::Vector>(t.data(), n);
    s.instrument = Eigen::Map<regress::Vector>(z.data(), n);
    s.did_regressor = Eigen::Map<regress::Vector>(did.data(), n);
    s.family_x.resize(n, kFamilyCovariates + 1);
    s.parish_x.resize(n, static_cast<Eigen::Index>(kParishCovariateNames.size()));
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index k = 0; k < s.family_x.cols(); ++k)
        s.family_x(i, k) = fx[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
      for (Eigen::Index k = 0; k < s.parish_x.cols(); ++k)
        s.parish_x(i, k) = px[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
    }
    return std::move(s);
  }
};

bool in_window(const SampleOptions& o, int cohort) {
  return !o.cohorts || (cohort >= o.cohorts->first && cohort <= o.cohorts->second);
}

}  // namespace

AnalysisSample build_g1_sample(const std::vector<IndividualRecord>& records, const PanelIndex& panel,
                               const InstrumentTable& instrument, const DidIntensity& intensity,
                               const SampleOptions& options) {
  RowBuilder b;
  b.s.outcome_name = outcome_name(options.outcome);
  b.s.stacked = false;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.generation != Generation::G1 || r.excluded || !in_window(options, r.cohort)) continue;
    const auto y = outcome_value(r, options.outcome);
    if (!y && !options.keep_missing_outcome) continue;
    b.s.record_index.push_back(i);
    b.y.push_back(y.value_or(std::numeric_limits<double>::quiet_NaN()));
    b.t.push_back(r.treated ? 1.0 : 0.0);
    b.z.push_back(instrument.at(r.parish, r.cohort));
    b.did.push_back(intensity.regressor(r.parish, r.cohort));
    b.s.cluster.push_back(r.parish);
    b.s.parish.push_back(r.parish);
    b.s.cohort.push_back(r.cohort);
    b.s.region_cohort.push_back(region_cohort_code(r.region, r.cohort));
    b.s.mother.push_back(r.mother_id.value_or(-1 - r.id));
    b.s.child_cohort.push_back(r.cohort);
    b.add_covariates(r, &panel.at(r.parish, r.cohort));
  }
  return b.finish();
}

AnalysisSample build_stacked_sample(const std::vector<IndividualRecord>& records,
                                    const PanelIndex& panel, const InstrumentTable& instrument,
                                    const SampleOptions& options) {
  if (options.generation == Generation::G1)
    throw DesignError("stacked samples are built for G2 or G3");
  std::unordered_map<std::int64_t, std::size_t> by_id;
  for (std::size_t i = 0; i < records.size(); ++i) by_id.emplace(records[i].id, i);
  RowBuilder b;
  b.s.outcome_name = outcome_name(options.outcome);
  b.s.stacked = true;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.generation != options.generation || !in_window(options, r.cohort)) continue;
    const auto y = outcome_value(r, options.outcome);
    if (!y && !options.keep_missing_outcome) continue;
    for (auto aid : r.g1_ancestor_ids) {
      const auto it = by_id.find(aid);
      if (it == by_id.end()) throw ValidationError("record " + std::to_string(r.id) +
                                                   " links unknown G1 ancestor " + std::to_string(aid));
      const auto& a = records[it->second];
      if (a.generation != Generation::G1)
        throw ValidationError("record " + std::to_string(r.id) + " ancestor " + std::to_string(aid) +
                              " is not G1");
      if (a.excluded) continue;
      const auto z = instrument.find(a.parish, a.cohort);
      if (!z) continue;
      b.s.record_index.push_back(i);
      b.s.ancestor_id.push_back(aid);
      b.y.push_back(y.value_or(std::numeric_limits<double>::quiet_NaN()));
      b.t.push_back(a.treated ? 1.0 : 0.0);
      b.z.push_back(*z);
      b.did.push_back(0.0);
      b.s.cluster.push_back(a.parish);
      b.s.parish.push_back(a.parish);
      b.s.cohort.push_back(a.cohort);
      b.s.region_cohort.push_back(region_cohort_code(a.region, a.cohort));
      b.s.mother.push_back(r.mother_id.value_or(-1 - r.id));
      b.s.child_cohort.push_back(r.cohort);
      b.add_covariates(r, panel.find(a.parish, a.cohort));
    }
  }
  return b.finish();
}

// --- spells -------------------------------------------------------------------------

SpellTable build_spells(const std::vector<IndividualRecord>& records, CauseMode mode,
                        std::optional<Generation> generation, EventKind kind) {
  SpellTable t;
  t.cause_stacked = mode == CauseMode::competing;
  t.covariate_names = {"treated"};
  std::vector<double> treated;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (generation && r.generation != *generation) continue;
    if (r.excluded) continue;
    const double entry = spell_start_age(r.generation);
    double exit = r.last_observed_age;
    bool event = false;
    int cause = -1;
    if (kind == EventKind::death) {
      if (r.death_age) {
        exit = *r.death_age;
        event = true;
        cause = static_cast<int>(r.death_cause.value_or(DeathCause::other));
      }
    } else if (r.disability_onset_age) {
      exit = *r.disability_onset_age;
      event = true;
      cause = r.disability_cause.value_or(DisabilityCause::other) == DisabilityCause::smallpox_related ? 0 : 1;
    } else if (r.death_age) {
      exit = *r.death_age;
    }
    if (!(exit > entry)) continue;
    const int copies = mode == CauseMode::competing ? kNumCauses : 1;
    for (int c = 0; c < copies; ++c) {
      t.id.push_back(r.id);
      t.record_index.push_back(i);
      t.entry.push_back(entry);
      t.exit.push_back(exit);
      if (mode == CauseMode::competing) {
        t.cause.push_back(c);
        t.event.push_back(event && cause == c ? 1 : 0);
        t.stratum.push_back(c);
      } else {
        t.cause.push_back(cause);
        t.event.push_back(event ? 1 : 0);
        t.stratum.push_back(0);
      }
      treated.push_back(r.treated ? 1.0 : 0.0);
    }
  }
  t.covariates = Eigen::Map<regress::Matrix>(treated.data(), static_cast<Eigen::Index>(treated.size()), 1);
  return t;
}

}  // namespace quasicausal::microdata
