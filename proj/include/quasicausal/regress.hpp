#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace quasicausal::regress {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using ClusterIds = std::vector<std::int64_t>;

/// One categorical factor to absorb; codes are arbitrary integers per row.
struct Factor {
  std::string name;
  std::vector<std::int64_t> codes;
};

struct FeSpec {
  std::vector<Factor> factors;
  bool empty() const { return factors.empty(); }
};

struct AbsorbOptions {
  double tolerance = 1e-10;  // max abs change per sweep
  int max_sweeps = 10000;
  /// A column whose demeaned norm falls below this fraction of its raw norm
  /// lies in the span of the factor indicators and is zeroed exactly.
  double spanned_tolerance = 1e-9;
};

/// Alternating within-group demeaning for a fixed set of factors. Grouping
/// work is done once so the same projector can be applied to many columns.
class FeProjector {
 public:
  FeProjector() = default;
  FeProjector(const FeSpec& fe, std::size_t n_obs, AbsorbOptions options = {});

  /// Demeans in place; returns the number of sweeps used.
  int demean(Eigen::Ref<Vector> v) const;

  std::size_t n_obs() const { return n_obs_; }
  bool empty() const { return groups_.empty(); }
  const AbsorbOptions& options() const { return options_; }

 private:
  struct Grouping {
    std::vector<int> code;
    std::vector<double> inv_count;
    int levels = 0;
  };
  std::vector<Grouping> groups_;
  std::size_t n_obs_ = 0;
  AbsorbOptions options_;
};

struct AbsorbResult {
  Matrix design;
  Vector outcome;
  int max_sweeps_used = 0;
  std::vector<bool> spanned;  // per design column
};

AbsorbResult absorb_fe(const Matrix& design, const Vector& outcome, const FeSpec& fe,
                       const AbsorbOptions& options = {});

/// Coefficients, cluster-robust covariance and fit diagnostics.
struct FitResult {
  std::vector<std::string> names;  // reported (kept) coefficients
  Vector coefficients;
  Matrix vcov;
  std::size_t n_obs = 0;
  std::size_t n_clusters = 0;
  std::vector<std::string> dropped_columns;
  std::vector<int> kept_columns;  // indices into the input design
  double r_squared = 0.0;
  std::optional<double> log_likelihood;
  Vector residuals;
  int iterations = 0;

  std::optional<int> index_of(std::string_view name) const;
  double coef(std::string_view name) const;
  double se(std::string_view name) const;
};

/// In-order rank detection by unpivoted Householder QR: column j is dropped
/// when |R_jj| <= tolerance * max_k |R_kk| (first-listed columns survive).
struct ColumnSelection {
  std::vector<int> kept;
  std::vector<int> dropped;
};
ColumnSelection select_independent_columns(const Matrix& design, double tolerance = 1e-10);

/// CR1 meat/bread combination. `scores` holds x_i * u_i by row.
Matrix cluster_robust_vcov(const Matrix& bread, const Matrix& scores,
                           std::span<const std::int64_t> clusters, std::size_t n_params,
                           bool small_sample_n_correction = true);

std::size_t count_clusters(std::span<const std::int64_t> clusters);

/// OLS with CR1 cluster-robust covariance
///   (G/(G-1)) ((N-1)/(N-K)) (X'X)^-1 (sum_g X_g'u_g u_g'X_g) (X'X)^-1.
FitResult ols(const Matrix& design, const Vector& outcome, std::span<const std::int64_t> clusters,
              std::vector<std::string> names = {});

enum class BinaryLink { probit, logit };

struct BinaryOptions {
  int max_iterations = 100;
  double score_tolerance = 1e-8;
  double step_tolerance = 1e-10;
  int max_halvings = 30;
  double divergence_bound = 1e3;
};

/// Newton-Raphson MLE with step halving. When `clusters` is empty the
/// covariance is the inverse observed information; otherwise a cluster
/// sandwich with G/(G-1) scaling.
FitResult binary_fit(BinaryLink link, const Matrix& design, const Vector& outcome,
                     std::span<const std::int64_t> clusters = {},
                     std::vector<std::string> names = {}, const BinaryOptions& options = {});
FitResult probit_fit(const Matrix& design, const Vector& outcome,
                     std::span<const std::int64_t> clusters = {},
                     std::vector<std::string> names = {});
FitResult logit_fit(const Matrix& design, const Vector& outcome,
                    std::span<const std::int64_t> clusters = {},
                    std::vector<std::string> names = {});

double binary_log_likelihood(BinaryLink link, const Matrix& design, const Vector& outcome,
                             const Vector& beta);
Vector binary_score(BinaryLink link, const Matrix& design, const Vector& outcome,
                    const Vector& beta);
Matrix binary_information(BinaryLink link, const Matrix& design, const Vector& outcome,
                          const Vector& beta);
Vector binary_probabilities(BinaryLink link, const Matrix& design, const Vector& beta);

/// Predicted index using a fit's kept columns of a full design matrix.
Vector linear_index(const FitResult& fit, const Matrix& full_design);

struct WaldTest {
  double statistic = 0.0;  // F form: W / q
  double df1 = 0.0;
  double df2 = 0.0;        // G - 1
  double p_value = 1.0;
};

/// Cluster-robust Wald test of coefficients `indices` = 0, F(q, G-1) reference.
WaldTest wald_test(const FitResult& fit, std::span<const int> indices);

struct WildWaldTest {
  double statistic = 0.0;  // W / q with the CR1 covariance
  double df1 = 0.0;
  double p_value = 1.0;    // share of bootstrap W* >= W
  int n_reps = 0;
};

/// Wild cluster restricted bootstrap of the joint test that the coefficients
/// `indices` of an OLS fit of `outcome` on `design` are zero. Residuals come
/// from the fit without those columns and are flipped per cluster with Webb
/// six-point weights; each replicate refits and recomputes the CR1 Wald
/// statistic. The scale factor cancels, so the p-value does not depend on the
/// small-sample correction. Collinear columns are dropped first; a restricted
/// column among them is an IdentificationError.
WildWaldTest wild_cluster_wald(const Matrix& design, const Vector& outcome,
                               std::span<const std::int64_t> clusters, std::span<const int> indices,
                               int n_reps, std::uint64_t seed);

/// Dummy columns for a factor (levels sorted; the first level is dropped when
/// `drop_first`).
Matrix dummy_columns(std::span<const std::int64_t> codes, bool drop_first,
                     std::vector<std::string>* names = nullptr, std::string_view prefix = "");

// --- pairs-cluster bootstrap ------------------------------------------------

struct BootstrapDraw {
  int replicate = 0;
  std::vector<std::size_t> rows;              // resampled row indices
  std::vector<std::int64_t> cluster_of_row;  // fresh id per drawn cluster
};

using BootstrapEstimator = std::function<Vector(const BootstrapDraw&)>;

struct BootstrapResult {
  Vector se;
  Vector lower;  // 2.5th percentile
  Vector upper;  // 97.5th percentile
  Matrix draws;  // successful replicates by row
  int n_reps = 0;
  int n_failed = 0;
};

/// Whole clusters are resampled with replacement and the estimator is re-run.
/// Replicate r uses a stream keyed by (seed, r), so results do not depend on
/// `jobs`. Throws BootstrapInstabilityError when more than 20% of fits fail.
BootstrapResult cluster_bootstrap(const BootstrapEstimator& estimator,
                                  std::span<const std::int64_t> clusters, int n_reps,
                                  std::uint64_t seed, int jobs = 1);

}  // namespace quasicausal::regress
