#include "quasicausal/regress.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <mutex>
#include <thread>
#include <unordered_map>

#include "quasicausal/errors.hpp"
#include "quasicausal/rng.hpp"
#include "quasicausal/stats.hpp"

namespace quasicausal::regress {

namespace {

std::vector<std::string> default_names(std::vector<std::string> names, Eigen::Index k) {
  if (names.empty()) {
    names.reserve(static_cast<std::size_t>(k));
    for (Eigen::Index j = 0; j < k; ++j) names.push_back("x" + std::to_string(j));
  }
  if (static_cast<Eigen::Index>(names.size()) != k)
    throw EstimationError("names/design column count mismatch");
  return names;
}

/// Dense 0..G-1 index per row; clusters sorted by id.
std::vector<int> dense_clusters(std::span<const std::int64_t> clusters, int* n_groups) {
  std::vector<std::int64_t> uniq(clusters.begin(), clusters.end());
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  std::unordered_map<std::int64_t, int> index;
  index.reserve(uniq.size() * 2);
  for (std::size_t g = 0; g < uniq.size(); ++g) index.emplace(uniq[g], static_cast<int>(g));
  std::vector<int> dense(clusters.size());
  for (std::size_t i = 0; i < clusters.size(); ++i) dense[i] = index.at(clusters[i]);
  *n_groups = static_cast<int>(uniq.size());
  return dense;
}

Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

Matrix nan_matrix(Eigen::Index k) {
  return Matrix::Constant(k, k, std::numeric_limits<double>::quiet_NaN());
}

}  // namespace

// --- fixed-effect absorption -------------------------------------------------

FeProjector::FeProjector(const FeSpec& fe, std::size_t n_obs, AbsorbOptions options)
    : n_obs_(n_obs), options_(options) {
  for (const auto& f : fe.factors) {
    if (f.codes.size() != n_obs)
      throw EstimationError("factor '" + f.name + "' has " + std::to_string(f.codes.size()) +
                            " codes for " + std::to_string(n_obs) + " observations");
    Grouping g;
    std::map<std::int64_t, int> levels;
    for (auto c : f.codes) levels.emplace(c, 0);
    int next = 0;
    for (auto& [code, idx] : levels) idx = next++;
    if (n_obs > 0 && next < 2)
      throw EstimationError("factor '" + f.name + "' has fewer than 2 levels");
    g.levels = next;
    g.code.resize(n_obs);
    std::vector<double> count(static_cast<std::size_t>(next), 0.0);
    for (std::size_t i = 0; i < n_obs; ++i) {
      g.code[i] = levels.at(f.codes[i]);
      count[static_cast<std::size_t>(g.code[i])] += 1.0;
    }
    g.inv_count.resize(count.size());
    for (std::size_t l = 0; l < count.size(); ++l) g.inv_count[l] = 1.0 / count[l];
    groups_.push_back(std::move(g));
  }
}

int FeProjector::demean(Eigen::Ref<Vector> v) const {
  if (groups_.empty()) return 0;
  if (static_cast<std::size_t>(v.size()) != n_obs_)
    throw EstimationError("demean: vector length mismatch");
  std::vector<double> sums;
  const auto n = static_cast<std::size_t>(v.size());
  for (int sweep = 1; sweep <= options_.max_sweeps; ++sweep) {
    double max_change = 0.0;
    for (const auto& g : groups_) {
      sums.assign(static_cast<std::size_t>(g.levels), 0.0);
      for (std::size_t i = 0; i < n; ++i) sums[static_cast<std::size_t>(g.code[i])] += v[i];
      for (std::size_t l = 0; l < sums.size(); ++l) {
        sums[l] *= g.inv_count[l];
        max_change = std::max(max_change, std::abs(sums[l]));
      }
      for (std::size_t i = 0; i < n; ++i) v[i] -= sums[static_cast<std::size_t>(g.code[i])];
    }
    // one factor is an exact projection
    if (groups_.size() == 1 || max_change < options_.tolerance) return sweep;
  }
  throw ConvergenceError("fixed-effect absorption did not converge in " +
                         std::to_string(options_.max_sweeps) + " sweeps");
}

AbsorbResult absorb_fe(const Matrix& design, const Vector& outcome, const FeSpec& fe,
                       const AbsorbOptions& options) {
  if (design.rows() != outcome.size()) throw EstimationError("absorb_fe: row mismatch");
  AbsorbResult out;
  out.design = design;
  out.outcome = outcome;
  out.spanned.assign(static_cast<std::size_t>(design.cols()), false);
  if (fe.empty()) return out;
  const FeProjector projector(fe, static_cast<std::size_t>(outcome.size()), options);
  out.max_sweeps_used = projector.demean(out.outcome);
  for (Eigen::Index j = 0; j < design.cols(); ++j) {
    const double raw = design.col(j).norm();
    out.max_sweeps_used = std::max(out.max_sweeps_used, projector.demean(out.design.col(j)));
    if (out.design.col(j).norm() <= options.spanned_tolerance * raw) {
      out.design.col(j).setZero();
      out.spanned[static_cast<std::size_t>(j)] = true;
    }
  }
  return out;
}

// --- OLS -----------------------------------------------------------------------

std::optional<int> FitResult::index_of(std::string_view name) const {
  for (std::size_t j = 0; j < names.size(); ++j)
    if (names[j] == name) return static_cast<int>(j);
  return std::nullopt;
}

double FitResult::coef(std::string_view name) const {
  const auto j = index_of(name);
  if (!j) throw EstimationError("coefficient '" + std::string(name) + "' not estimated");
  return coefficients[*j];
}

double FitResult::se(std::string_view name) const {
  const auto j = index_of(name);
  if (!j) throw EstimationError("coefficient '" + std::string(name) + "' not estimated");
  return std::sqrt(vcov(*j, *j));
}

ColumnSelection select_independent_columns(const Matrix& design, double tolerance) {
  ColumnSelection sel;
  if (design.cols() == 0) return sel;
  const Eigen::HouseholderQR<Matrix> qr(design);
  const Eigen::Index k = std::min(design.rows(), design.cols());
  double largest = 0.0;
  for (Eigen::Index j = 0; j < k; ++j) largest = std::max(largest, std::abs(qr.matrixQR()(j, j)));
  for (Eigen::Index j = 0; j < design.cols(); ++j) {
    const bool ok = j < k && largest > 0.0 && std::abs(qr.matrixQR()(j, j)) > tolerance * largest;
    (ok ? sel.kept : sel.dropped).push_back(static_cast<int>(j));
  }
  return sel;
}

std::size_t count_clusters(std::span<const std::int64_t> clusters) {
  std::vector<std::int64_t> u(clusters.begin(), clusters.end());
  std::sort(u.begin(), u.end());
  return static_cast<std::size_t>(std::unique(u.begin(), u.end()) - u.begin());
}

Matrix cluster_robust_vcov(const Matrix& bread, const Matrix& scores,
                           std::span<const std::int64_t> clusters, std::size_t n_params,
                           bool small_sample_n_correction) {
  if (static_cast<std::size_t>(scores.rows()) != clusters.size())
    throw EstimationError("cluster ids do not match observations");
  int g_count = 0;
  const auto dense = dense_clusters(clusters, &g_count);
  if (g_count < 2) throw EstimationError("cluster-robust covariance needs at least 2 clusters");
  Matrix sums = Matrix::Zero(g_count, scores.cols());
  for (Eigen::Index i = 0; i < scores.rows(); ++i) sums.row(dense[static_cast<std::size_t>(i)]) += scores.row(i);
  const Matrix meat = sums.transpose() * sums;
  const double g = g_count;
  const double n = static_cast<double>(scores.rows());
  double scale = g / (g - 1.0);
  if (small_sample_n_correction) scale *= (n - 1.0) / (n - static_cast<double>(n_params));
  return symmetrize(scale * bread * meat * bread);
}

FitResult ols(const Matrix& design, const Vector& outcome, std::span<const std::int64_t> clusters,
              std::vector<std::string> names) {
  FitResult fit;
  const Eigen::Index n = design.rows();
  names = default_names(std::move(names), design.cols());
  if (outcome.size() != n) throw EstimationError("ols: outcome/design row mismatch");
  if (static_cast<Eigen::Index>(clusters.size()) != n)
    throw EstimationError("ols: cluster ids required for every observation");
  fit.n_clusters = count_clusters(clusters);
  if (fit.n_clusters < 2) throw EstimationError("ols: fewer than 2 clusters");
  if (design.cols() > n) throw EstimationError("ols: more parameters than observations");

  const auto sel = select_independent_columns(design);
  const auto k = static_cast<Eigen::Index>(sel.kept.size());
  if (k == 0) throw EstimationError("ols: no estimable columns");
  if (k > n) throw EstimationError("ols: more parameters than observations");
  Matrix x(n, k);
  for (Eigen::Index j = 0; j < k; ++j) {
    x.col(j) = design.col(sel.kept[static_cast<std::size_t>(j)]);
    fit.names.push_back(names[static_cast<std::size_t>(sel.kept[static_cast<std::size_t>(j)])]);
  }
  for (int j : sel.dropped) fit.dropped_columns.push_back(names[static_cast<std::size_t>(j)]);
  fit.kept_columns = sel.kept;

  const Eigen::HouseholderQR<Matrix> qr(x);
  fit.coefficients = qr.solve(outcome);
  const Matrix r = qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();
  const Matrix r_inv = r.triangularView<Eigen::Upper>().solve(Matrix::Identity(k, k));
  const Matrix bread = r_inv * r_inv.transpose();
  fit.residuals = outcome - x * fit.coefficients;
  fit.n_obs = static_cast<std::size_t>(n);
  if (k == n) {
    fit.vcov = nan_matrix(k);  // saturated: no residual degrees of freedom
  } else {
    const Matrix scores = x.array().colwise() * fit.residuals.array();
    fit.vcov = cluster_robust_vcov(bread, scores, clusters, static_cast<std::size_t>(k));
  }
  const double ybar = outcome.mean();
  const double tss = (outcome.array() - ybar).square().sum();
  const double ssr = fit.residuals.squaredNorm();
  fit.r_squared = tss > 0.0 ? 1.0 - ssr / tss : 0.0;
  return fit;
}

// --- binary response MLE ---------------------------------------------------------

namespace {

double log1pexp(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct BinaryEval {
  double loglik = 0.0;
  Vector score;
  Vector weights;     // observed-information weights
  Vector generalized; // d loglik_i / d eta_i
};

BinaryEval evaluate(BinaryLink link, const Matrix& x, const Vector& y, const Vector& beta) {
  const Vector eta = x * beta;
  const Eigen::Index n = x.rows();
  BinaryEval e;
  e.weights.resize(n);
  e.generalized.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double h = eta[i];
    if (link == BinaryLink::logit) {
      const double p = logistic(h);
      e.loglik += y[i] * h - log1pexp(h);
      e.generalized[i] = y[i] - p;
      e.weights[i] = p * (1.0 - p);
    } else if (y[i] > 0.5) {
      const double lam = stats::inverse_mills(h);
      e.loglik += stats::normal_log_cdf(h);
      e.generalized[i] = lam;
      e.weights[i] = lam * (h + lam);
    } else {
      const double lam = stats::inverse_mills(-h);
      e.loglik += stats::normal_log_cdf(-h);
      e.generalized[i] = -lam;
      e.weights[i] = lam * (lam - h);
    }
  }
  e.score = x.transpose() * e.generalized;
  return e;
}

Matrix weighted_crossprod(const Matrix& x, const Vector& w) {
  const Matrix xw = x.array().colwise() * w.array();
  return symmetrize(x.transpose() * xw);
}

}  // namespace

double binary_log_likelihood(BinaryLink link, const Matrix& design, const Vector& outcome,
                             const Vector& beta) {
  return evaluate(link, design, outcome, beta).loglik;
}

Vector binary_score(BinaryLink link, const Matrix& design, const Vector& outcome,
                    const Vector& beta) {
  return evaluate(link, design, outcome, beta).score;
}

Matrix binary_information(BinaryLink link, const Matrix& design, const Vector& outcome,
                          const Vector& beta) {
  return weighted_crossprod(design, evaluate(link, design, outcome, beta).weights);
}

Vector binary_probabilities(BinaryLink link, const Matrix& design, const Vector& beta) {
  const Vector eta = design * beta;
  Vector p(eta.size());
  for (Eigen::Index i = 0; i < eta.size(); ++i)
    p[i] = link == BinaryLink::logit ? logistic(eta[i]) : stats::normal_cdf(eta[i]);
  return p;
}

FitResult binary_fit(BinaryLink link, const Matrix& design, const Vector& outcome,
                     std::span<const std::int64_t> clusters, std::vector<std::string> names,
                     const BinaryOptions& options) {
  const Eigen::Index n = design.rows();
  names = default_names(std::move(names), design.cols());
  if (outcome.size() != n) throw EstimationError("binary fit: outcome/design row mismatch");
  double ones = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (outcome[i] != 0.0 && outcome[i] != 1.0)
      throw EstimationError("binary fit: outcome must be 0/1");
    ones += outcome[i];
  }
  if (ones == 0.0 || ones == static_cast<double>(n))
    throw EstimationError("binary fit: outcome has a single class");
  if (!clusters.empty() && static_cast<Eigen::Index>(clusters.size()) != n)
    throw EstimationError("binary fit: cluster ids do not match observations");

  FitResult fit;
  const auto sel = select_independent_columns(design);
  const auto k = static_cast<Eigen::Index>(sel.kept.size());
  if (k == 0) throw EstimationError("binary fit: no estimable columns");
  Matrix x(n, k);
  for (Eigen::Index j = 0; j < k; ++j) {
    x.col(j) = design.col(sel.kept[static_cast<std::size_t>(j)]);
    fit.names.push_back(names[static_cast<std::size_t>(sel.kept[static_cast<std::size_t>(j)])]);
  }
  for (int j : sel.dropped) fit.dropped_columns.push_back(names[static_cast<std::size_t>(j)]);
  fit.kept_columns = sel.kept;

  Vector beta = Vector::Zero(k);
  BinaryEval cur = evaluate(link, x, outcome, beta);
  const Vector initial_info_diag = weighted_crossprod(x, cur.weights).diagonal();
  bool converged = false;
  int iter = 0;
  auto information_collapsed = [&](const Matrix& info) {
    for (Eigen::Index j = 0; j < k; ++j)
      if (info(j, j) < 1e-8 * initial_info_diag[j]) return true;
    return false;
  };
  for (; iter < options.max_iterations; ++iter) {
    const Matrix info = weighted_crossprod(x, cur.weights);
    const Eigen::LDLT<Matrix> ldlt(info);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
      if (information_collapsed(info)) break;
      throw IdentificationError("binary fit: information matrix not positive definite");
    }
    Vector step = ldlt.solve(cur.score);
    // A small score only counts when the implied Newton step is small too;
    // on a separating ridge the score vanishes while the coefficients run off.
    if (cur.score.cwiseAbs().maxCoeff() < options.score_tolerance &&
        step.cwiseAbs().maxCoeff() < 1e-6 * std::max(1.0, beta.cwiseAbs().maxCoeff())) {
      converged = true;
      break;
    }
    BinaryEval next = evaluate(link, x, outcome, beta + step);
    for (int h = 0; h < options.max_halvings && !(next.loglik >= cur.loglik - 1e-12 * std::abs(cur.loglik)); ++h) {
      step *= 0.5;
      next = evaluate(link, x, outcome, beta + step);
    }
    beta += step;
    cur = std::move(next);
    if (step.cwiseAbs().maxCoeff() < options.step_tolerance) {
      converged = true;
      ++iter;
      break;
    }
    if (beta.cwiseAbs().maxCoeff() > options.divergence_bound) break;
  }

  const Matrix info = weighted_crossprod(x, cur.weights);
  if (beta.cwiseAbs().maxCoeff() > options.divergence_bound || information_collapsed(info))
    throw SeparationError("binary fit: coefficients diverge (perfect or quasi-complete separation)");
  if (!converged) throw ConvergenceError("binary fit: Newton did not converge");

  fit.coefficients = beta;
  fit.iterations = iter;
  fit.log_likelihood = cur.loglik;
  fit.n_obs = static_cast<std::size_t>(n);
  const Eigen::LDLT<Matrix> ldlt(info);
  const Matrix bread = ldlt.solve(Matrix::Identity(k, k));
  if (clusters.empty()) {
    fit.vcov = symmetrize(bread);
    fit.n_clusters = static_cast<std::size_t>(n);
  } else {
    fit.n_clusters = count_clusters(clusters);
    const Matrix scores = x.array().colwise() * cur.generalized.array();
    fit.vcov = cluster_robust_vcov(bread, scores, clusters, static_cast<std::size_t>(k), false);
  }
  const Vector p = binary_probabilities(link, x, beta);
  fit.residuals = outcome - p;
  // McFadden pseudo R^2 against the intercept-only likelihood
  const double pbar = ones / static_cast<double>(n);
  const double ll0 = ones * std::log(pbar) + (static_cast<double>(n) - ones) * std::log1p(-pbar);
  fit.r_squared = 1.0 - cur.loglik / ll0;
  return fit;
}

FitResult probit_fit(const Matrix& design, const Vector& outcome,
                     std::span<const std::int64_t> clusters, std::vector<std::string> names) {
  return binary_fit(BinaryLink::probit, design, outcome, clusters, std::move(names));
}

FitResult logit_fit(const Matrix& design, const Vector& outcome,
                    std::span<const std::int64_t> clusters, std::vector<std::string> names) {
  return binary_fit(BinaryLink::logit, design, outcome, clusters, std::move(names));
}

Vector linear_index(const FitResult& fit, const Matrix& full_design) {
  Vector eta = Vector::Zero(full_design.rows());
  for (std::size_t j = 0; j < fit.kept_columns.size(); ++j)
    eta += fit.coefficients[static_cast<Eigen::Index>(j)] * full_design.col(fit.kept_columns[j]);
  return eta;
}

namespace {

/// b' V^+ b; eigenvalues below 1e-12 of the largest count as zero, which
/// guards against a rank-deficient cluster covariance (q > G-1).
double pinv_quadratic(const Vector& b, const Matrix& v, Eigen::Index* rank) {
  const Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrize(v));
  const double top = eig.eigenvalues().cwiseAbs().maxCoeff();
  const Vector proj = eig.eigenvectors().transpose() * b;
  double w = 0.0;
  *rank = 0;
  for (Eigen::Index a = 0; a < b.size(); ++a)
    if (top > 0.0 && eig.eigenvalues()[a] > 1e-12 * top) {
      w += proj[a] * proj[a] / eig.eigenvalues()[a];
      ++*rank;
    }
  return w;
}

/// Webb six-point distribution: +-sqrt(1/2), +-1, +-sqrt(3/2), mean 0, variance 1.
double webb_weight(KeyedRng& rng) {
  static const double values[6] = {-std::sqrt(1.5), -1.0, -std::sqrt(0.5), std::sqrt(0.5), 1.0, std::sqrt(1.5)};
  return values[rng.uniform_int(0, 5)];
}

}  // namespace

WaldTest wald_test(const FitResult& fit, std::span<const int> indices) {
  const auto q = static_cast<Eigen::Index>(indices.size());
  if (q == 0) throw EstimationError("wald_test: no restrictions");
  Vector b(q);
  Matrix v(q, q);
  for (Eigen::Index a = 0; a < q; ++a) {
    b[a] = fit.coefficients[indices[static_cast<std::size_t>(a)]];
    for (Eigen::Index c = 0; c < q; ++c)
      v(a, c) = fit.vcov(indices[static_cast<std::size_t>(a)], indices[static_cast<std::size_t>(c)]);
  }
  Eigen::Index rank = 0;
  const double w = pinv_quadratic(b, v, &rank);
  WaldTest t;
  t.df1 = static_cast<double>(rank);
  t.df2 = static_cast<double>(fit.n_clusters) - 1.0;
  t.statistic = rank > 0 ? w / t.df1 : 0.0;
  t.p_value = rank > 0 ? stats::f_sf(t.statistic, t.df1, t.df2) : 1.0;
  return t;
}

WildWaldTest wild_cluster_wald(const Matrix& design, const Vector& outcome,
                               std::span<const std::int64_t> clusters, std::span<const int> indices,
                               int n_reps, std::uint64_t seed) {
  const Eigen::Index n = design.rows();
  if (outcome.size() != n || static_cast<Eigen::Index>(clusters.size()) != n)
    throw EstimationError("wild_cluster_wald: outcome, design and clusters differ in length");
  if (indices.empty()) throw EstimationError("wild_cluster_wald: no restrictions");
  if (n_reps < 1) throw EstimationError("wild_cluster_wald: needs at least 1 replicate");
  int g_count = 0;
  const auto dense = dense_clusters(clusters, &g_count);
  if (g_count < 2) throw EstimationError("wild_cluster_wald: fewer than 2 clusters");

  const auto sel = select_independent_columns(design);
  std::vector<Eigen::Index> position(static_cast<std::size_t>(design.cols()), -1);
  for (std::size_t j = 0; j < sel.kept.size(); ++j)
    position[static_cast<std::size_t>(sel.kept[j])] = static_cast<Eigen::Index>(j);
  const auto k = static_cast<Eigen::Index>(sel.kept.size());
  const auto q = static_cast<Eigen::Index>(indices.size());
  if (k >= n) throw EstimationError("wild_cluster_wald: no residual degrees of freedom");
  std::vector<Eigen::Index> restricted;
  std::vector<bool> is_restricted(static_cast<std::size_t>(k), false);
  for (int j : indices) {
    if (j < 0 || j >= design.cols()) throw EstimationError("wild_cluster_wald: index out of range");
    const auto p = position[static_cast<std::size_t>(j)];
    if (p < 0) throw IdentificationError("wild_cluster_wald: a tested column is collinear with the others");
    restricted.push_back(p);
    is_restricted[static_cast<std::size_t>(p)] = true;
  }

  Matrix x(n, k);
  for (Eigen::Index j = 0; j < k; ++j) x.col(j) = design.col(sel.kept[static_cast<std::size_t>(j)]);
  const Eigen::HouseholderQR<Matrix> qr(x);
  const Matrix r = qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();
  const Matrix r_inv = r.triangularView<Eigen::Upper>().solve(Matrix::Identity(k, k));
  const Matrix a_inv = r_inv * r_inv.transpose();
  Matrix c(q, k);  // R (X'X)^-1
  for (Eigen::Index a = 0; a < q; ++a) c.row(a) = a_inv.row(restricted[static_cast<std::size_t>(a)]);

  // restricted residuals
  Vector u_r = outcome;
  if (k > q) {
    Matrix x_r(n, k - q);
    Eigen::Index col = 0;
    for (Eigen::Index j = 0; j < k; ++j)
      if (!is_restricted[static_cast<std::size_t>(j)]) x_r.col(col++) = x.col(j);
    u_r -= x_r * Eigen::HouseholderQR<Matrix>(x_r).solve(outcome);
  }

  const Vector beta = qr.solve(outcome);
  const Vector u = outcome - x * beta;
  Matrix s0 = Matrix::Zero(g_count, k);
  Matrix t = Matrix::Zero(g_count, k);  // X_g' u_r,g by row
  for (Eigen::Index i = 0; i < n; ++i) {
    const int g = dense[static_cast<std::size_t>(i)];
    s0.row(g) += u[i] * x.row(i);
    t.row(g) += u_r[i] * x.row(i);
  }
  Vector rb(q);
  for (Eigen::Index a = 0; a < q; ++a) rb[a] = beta[restricted[static_cast<std::size_t>(a)]];
  const Matrix m0 = s0 * c.transpose();
  Eigen::Index rank = 0;
  const double w0 = pinv_quadratic(rb, m0.transpose() * m0, &rank);

  // beta* = beta_r + D v, so R beta* = E v and the cluster score of the
  // replicate is R A^-1 X_g'u*_g = v_g E_g - P_g v with P_g = R A^-1 X_g'X_g D.
  const Matrix d = a_inv * t.transpose();  // k x G
  const Matrix e = c * t.transpose();     // q x G, equals R D
  const Matrix f = x * c.transpose();      // n x q
  std::vector<Matrix> ch(static_cast<std::size_t>(g_count), Matrix::Zero(q, k));
  for (Eigen::Index i = 0; i < n; ++i)
    ch[static_cast<std::size_t>(dense[static_cast<std::size_t>(i)])].noalias() += f.row(i).transpose() * x.row(i);
  std::vector<Matrix> p(static_cast<std::size_t>(g_count));
  for (int g = 0; g < g_count; ++g) p[static_cast<std::size_t>(g)] = ch[static_cast<std::size_t>(g)] * d;

  int exceed = 0;
  Vector v(g_count);
  Matrix m(g_count, q);
  for (int rep = 0; rep < n_reps; ++rep) {
    KeyedRng rng(seed, static_cast<std::uint64_t>(rep), Stream::bootstrap);
    for (int g = 0; g < g_count; ++g) v[g] = webb_weight(rng);
    const Vector eb = e * v;
    for (int g = 0; g < g_count; ++g)
      m.row(g) = (v[g] * e.col(g) - p[static_cast<std::size_t>(g)] * v).transpose();
    Eigen::Index rank_b = 0;
    if (pinv_quadratic(eb, m.transpose() * m, &rank_b) >= w0) ++exceed;
  }

  const double nn = static_cast<double>(n);
  const double gg = g_count;
  const double scale = gg / (gg - 1.0) * (nn - 1.0) / (nn - static_cast<double>(k));
  WildWaldTest out;
  out.df1 = static_cast<double>(rank);
  out.statistic = rank > 0 ? w0 / scale / out.df1 : 0.0;
  out.p_value = static_cast<double>(exceed) / n_reps;
  out.n_reps = n_reps;
  return out;
}

Matrix dummy_columns(std::span<const std::int64_t> codes, bool drop_first,
                     std::vector<std::string>* names, std::string_view prefix) {
  std::vector<std::int64_t> levels(codes.begin(), codes.end());
  std::sort(levels.begin(), levels.end());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
  const std::size_t start = drop_first && !levels.empty() ? 1 : 0;
  std::unordered_map<std::int64_t, Eigen::Index> col;
  for (std::size_t l = start; l < levels.size(); ++l) {
    col.emplace(levels[l], static_cast<Eigen::Index>(l - start));
    if (names) names->push_back(std::string(prefix) + std::to_string(levels[l]));
  }
  Matrix d = Matrix::Zero(static_cast<Eigen::Index>(codes.size()),
                          static_cast<Eigen::Index>(levels.size() - start));
  for (std::size_t i = 0; i < codes.size(); ++i) {
    const auto it = col.find(codes[i]);
    if (it != col.end()) d(static_cast<Eigen::Index>(i), it->second) = 1.0;
  }
  return d;
}

// --- bootstrap -------------------------------------------------------------------

BootstrapResult cluster_bootstrap(const BootstrapEstimator& estimator,
                                  std::span<const std::int64_t> clusters, int n_reps,
                                  std::uint64_t seed, int jobs) {
  if (n_reps < 2) throw EstimationError("bootstrap needs at least 2 replicates");
  int g_count = 0;
  const auto dense = dense_clusters(clusters, &g_count);
  if (g_count < 2) throw EstimationError("bootstrap needs at least 2 clusters");
  std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(g_count));
  for (std::size_t i = 0; i < dense.size(); ++i) members[static_cast<std::size_t>(dense[i])].push_back(i);

  std::vector<std::optional<Vector>> results(static_cast<std::size_t>(n_reps));
  auto run_one = [&](int r) {
    KeyedRng rng(seed, static_cast<std::uint64_t>(r), Stream::bootstrap);
    BootstrapDraw draw;
    draw.replicate = r;
    for (int g = 0; g < g_count; ++g) {
      const int pick = rng.uniform_int(0, g_count - 1);
      for (auto row : members[static_cast<std::size_t>(pick)]) {
        draw.rows.push_back(row);
        draw.cluster_of_row.push_back(g);
      }
    }
    try {
      Vector v = estimator(draw);
      if (v.allFinite()) results[static_cast<std::size_t>(r)] = std::move(v);
    } catch (const std::exception&) {
      // recorded as a failed replicate
    }
  };

  jobs = std::max(1, std::min(jobs, n_reps));
  if (jobs == 1) {
    for (int r = 0; r < n_reps; ++r) run_one(r);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t)
      pool.emplace_back([&, t] {
        for (int r = t; r < n_reps; r += jobs) run_one(r);
      });
    for (auto& th : pool) th.join();
  }

  BootstrapResult out;
  out.n_reps = n_reps;
  std::vector<const Vector*> ok;
  for (const auto& r : results)
    if (r) ok.push_back(&*r);
  out.n_failed = n_reps - static_cast<int>(ok.size());
  if (out.n_failed > n_reps / 5)
    throw BootstrapInstabilityError(std::to_string(out.n_failed) + " of " +
                                    std::to_string(n_reps) + " replicates failed");
  const Eigen::Index k = ok.front()->size();
  out.draws.resize(static_cast<Eigen::Index>(ok.size()), k);
  for (std::size_t r = 0; r < ok.size(); ++r) {
    if (ok[r]->size() != k) throw EstimationError("bootstrap estimator changed output size");
    out.draws.row(static_cast<Eigen::Index>(r)) = ok[r]->transpose();
  }
  out.se.resize(k);
  out.lower.resize(k);
  out.upper.resize(k);
  for (Eigen::Index j = 0; j < k; ++j) {
    std::vector<double> col(out.draws.col(j).data(), out.draws.col(j).data() + out.draws.rows());
    out.se[j] = std::sqrt(stats::variance(col));
    std::sort(col.begin(), col.end());
    out.lower[j] = stats::quantile_sorted(col, 0.025);
    out.upper[j] = stats::quantile_sorted(col, 0.975);
  }
  return out;
}

}  // namespace quasicausal::regress
