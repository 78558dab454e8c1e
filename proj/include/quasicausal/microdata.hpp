#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "quasicausal/regress.hpp"

namespace quasicausal::microdata {

enum class Generation { G1 = 1, G2 = 2, G3 = 3 };
enum class Sex { female, male };
enum class DisabilityCause { smallpox_related, other };
enum class DeathCause { smallpox = 0, other = 1 };

inline constexpr int kFamilyCovariates = 7;
/// Column order of IndividualRecord::family_covariates.
inline constexpr std::array<const char*, kFamilyCovariates> kFamilyCovariateNames = {
    "father_occupation", "mother_occupation", "father_literate", "mother_literate",
    "nonsurviving_share", "mother_married",    "sibling_external_death"};

inline constexpr int kTreatmentAgeCutoff = 2;
inline constexpr int kFirstPostCohort = 1801;

struct IndividualRecord {
  std::int64_t id = 0;
  Generation generation = Generation::G1;
  std::optional<std::int64_t> mother_id;
  std::vector<std::int64_t> g1_ancestor_ids;
  std::int64_t parish = 0;
  std::int64_t region = 0;
  int cohort = 0;
  int birth_month = 1;  // 1..12
  Sex sex = Sex::female;
  std::optional<double> vaccinated_age;
  std::optional<double> death_age;
  double last_observed_age = 0.0;
  bool migrated = false;  // left the parish before the end of follow-up
  std::optional<double> disability_onset_age;
  std::optional<DisabilityCause> disability_cause;
  std::optional<DeathCause> death_cause;
  std::optional<bool> literacy_good;
  std::optional<double> occupational_score;
  std::array<double, kFamilyCovariates> family_covariates{};
  bool midwife_assisted = false;
  std::optional<bool> child_vaccinated;

  // set by construct_treatment
  bool treated = false;
  bool excluded = false;

  bool operator==(const IndividualRecord&) const = default;
};

struct PanelContext {
  std::int64_t parish = 0;
  int cohort = 0;
  double church_personnel = 0.0;
  double national_shift = 0.0;
  double midwives = 0.0;
  double priests = 0.0;
  double smallpox_death_rate = 0.0;
  double urban_share = 0.0;
  double students_per_capita = 0.0;
  double rye_price = 0.0;
  double potato_seeds_per_km2 = 0.0;

  bool operator==(const PanelContext&) const = default;
};

/// Logical field -> CSV column name. Unlisted fields keep their logical name.
struct SchemaConfig {
  std::map<std::string, std::string> individual_columns;
  std::map<std::string, std::string> panel_columns;

  static SchemaConfig from_json(const nlohmann::json& j);
  std::string individual_column(const std::string& field) const;
  std::string panel_column(const std::string& field) const;
};

const std::vector<std::string>& individual_fields();
const std::vector<std::string>& panel_fields();

struct Violation {
  std::size_t row = 0;  // 1-based data row (header excluded)
  std::string rule;
};

/// Collected invariant violations for records (rows numbered in list order).
std::vector<Violation> validate_records(const std::vector<IndividualRecord>& records);
std::vector<Violation> validate_panel(const std::vector<PanelContext>& panel);

std::vector<IndividualRecord> load_individuals(const std::string& path, const SchemaConfig& schema = {});
std::vector<PanelContext> load_panel(const std::string& path, const SchemaConfig& schema = {});

struct Microdata {
  std::vector<IndividualRecord> records;
  std::vector<PanelContext> panel;
};
/// Throws SchemaError for missing columns and ValidationError ("row N: rule; ...").
Microdata load_microdata(const std::string& individuals_csv, const std::string& panel_csv,
                         const SchemaConfig& schema = {});

void write_individuals(const std::vector<IndividualRecord>& records, const std::string& path);
void write_panel(const std::vector<PanelContext>& panel, const std::string& path);

/// Shortest text that parses back to the same double.
std::string format_double(double v);

/// treated := vaccinated by age 2 (inclusive); later vaccinees are excluded.
void construct_treatment(std::vector<IndividualRecord>& records);

// --- panel-derived regressors -----------------------------------------------

using ParishCohort = std::pair<std::int64_t, int>;

class PanelIndex {
 public:
  PanelIndex() = default;
  explicit PanelIndex(const std::vector<PanelContext>& panel);
  const PanelContext* find(std::int64_t parish, int cohort) const;
  const PanelContext& at(std::int64_t parish, int cohort) const;  // MissingParishError
  const std::vector<std::int64_t>& parishes() const { return parishes_; }
  int min_cohort() const { return min_cohort_; }
  int max_cohort() const { return max_cohort_; }

 private:
  std::map<ParishCohort, PanelContext> rows_;
  std::vector<std::int64_t> parishes_;
  int min_cohort_ = 0, max_cohort_ = 0;
};

struct InstrumentTable {
  std::map<ParishCohort, double> raw;    // C_{p,t-1} * C_t
  std::map<ParishCohort, double> value;  // raw / divisor
  double divisor = 1.0;                  // q_high - q_low of raw
  std::pair<double, double> quantiles{0.05, 0.95};

  /// Rescaled value; MissingLagError when (parish, cohort) is not covered.
  double at(std::int64_t parish, int cohort) const;
  std::optional<double> find(std::int64_t parish, int cohort) const;
};

/// Shift-share instrument for every panel row that has a t-1 row. Each
/// parish's first panel year only serves as a lag; a gap later raises
/// MissingLagError. NormalizationError when the quantile range is zero.
InstrumentTable build_instrument(const std::vector<PanelContext>& panel,
                                 std::pair<double, double> rescale_quantiles = {0.05, 0.95});

struct DidIntensity {
  std::map<std::int64_t, double> raw;        // mean pre-window personnel
  std::map<std::int64_t, double> intensity;  // raw / divisor
  double divisor = 1.0;
  std::pair<double, double> quantiles{0.25, 0.75};

  double at(std::int64_t parish) const;
  /// Post x intensity; zero before the first post cohort.
  double regressor(std::int64_t parish, int cohort) const;
};

DidIntensity build_did_intensity(const std::vector<PanelContext>& panel,
                                 std::pair<int, int> pre_window = {1790, 1800},
                                 std::pair<double, double> quantiles = {0.25, 0.75});

inline bool is_post(int cohort) { return cohort >= kFirstPostCohort; }

// --- analysis samples --------------------------------------------------------

enum class Outcome { years_lived, disability_free_years, literacy, occupational_score };
Outcome parse_outcome(const std::string& name);
std::string outcome_name(Outcome o);

/// Start age of life-course outcomes: 2 for G1, birth otherwise.
double spell_start_age(Generation g);
/// Outcome value for a record, if observed.
std::optional<double> outcome_value(const IndividualRecord& r, Outcome o);

enum class ControlSet { none, baseline, full };
ControlSet parse_control_set(const std::string& name);
std::string control_set_name(ControlSet c);

inline constexpr std::array<const char*, 6> kParishCovariateNames = {
    "midwives", "priests", "smallpox_death_rate", "students_per_capita", "rye_price", "urban_share"};

/// Columnar estimation sample. All vectors have one entry per row.
struct AnalysisSample {
  std::string outcome_name;
  bool stacked = false;
  std::vector<std::size_t> record_index;  // into the source record list
  regress::Vector outcome;
  regress::Vector treatment;   // own (G1) or ancestor's (stacked) treatment
  regress::Vector instrument;  // own or ancestor's instrument
  regress::Vector did_regressor;
  regress::ClusterIds cluster;
  // fixed-effect codes; for stacked samples these belong to the G1 ancestor
  std::vector<std::int64_t> parish, cohort, region_cohort, mother, child_cohort;
  std::vector<std::int64_t> ancestor_id;  // stacked only
  /// Family covariates (sex first) and parish covariates at the FE
  /// (parish, cohort) of the row; used for interacted controls.
  regress::Matrix family_x;
  regress::Matrix parish_x;

  std::size_t size() const { return record_index.size(); }
  /// Row subset (rows may repeat), keeping column alignment.
  AnalysisSample subset(const std::vector<std::size_t>& rows) const;
};

struct SampleOptions {
  Generation generation = Generation::G1;
  Outcome outcome = Outcome::years_lived;
  /// Optional cohort window filter (inclusive) on the row's own cohort.
  std::optional<std::pair<int, int>> cohorts;
  /// Keep rows with a missing outcome (outcome set to NaN); used for selection models.
  bool keep_missing_outcome = false;
};

std::int64_t region_cohort_code(std::int64_t region, int cohort);

/// G1 sample: one row per treated-or-control record with an observed outcome.
/// Excluded (late-vaccinated) records never enter.
AnalysisSample build_g1_sample(const std::vector<IndividualRecord>& records, const PanelIndex& panel,
                               const InstrumentTable& instrument, const DidIntensity& intensity,
                               const SampleOptions& options);

/// G2/G3 sample stacked over linked G1 ancestors: each child appears once
/// per ancestor, with the ancestor's treatment, instrument and FE codes, and
/// clusters at the ancestor's parish. Ancestors that are excluded or
/// outside the instrument table drop the corresponding stacked row.
AnalysisSample build_stacked_sample(const std::vector<IndividualRecord>& records,
                                    const PanelIndex& panel, const InstrumentTable& instrument,
                                    const SampleOptions& options);

// --- duration spells ---------------------------------------------------------

enum class CauseMode { all_cause, competing };
enum class EventKind { death, disability };

inline constexpr int kNumCauses = 2;

struct SpellTable {
  std::vector<std::int64_t> id;
  std::vector<std::size_t> record_index;
  std::vector<double> entry, exit;
  std::vector<int> event;
  std::vector<int> cause;  // cause of this row (competing) or observed cause (all-cause, -1 if none)
  std::vector<std::int64_t> stratum;
  regress::Matrix covariates;
  std::vector<std::string> covariate_names;
  bool cause_stacked = false;

  std::size_t size() const { return id.size(); }
};

/// One spell per record from the generation start age to the observed exit.
/// Records with exit <= entry contribute nothing. Covariates: "treated".
SpellTable build_spells(const std::vector<IndividualRecord>& records, CauseMode mode,
                        std::optional<Generation> generation = Generation::G1,
                        EventKind kind = EventKind::death);

}  // namespace quasicausal::microdata
