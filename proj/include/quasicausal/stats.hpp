#pragma once

#include <span>
#include <vector>

namespace quasicausal::stats {

double normal_pdf(double x);
double normal_cdf(double x);
double normal_log_cdf(double x);

/// phi(x) / Phi(x). Below -8 the Laplace continued fraction for the Mills
/// ratio is used, so the result stays finite where Phi underflows.
double inverse_mills(double x);

/// Inclusive linear-interpolation quantile (R type 7). Input need not be sorted.
double quantile(std::span<const double> values, double p);
double quantile_sorted(std::span<const double> sorted, double p);

double mean(std::span<const double> values);
/// Sample variance with n-1 denominator.
double variance(std::span<const double> values);

/// Regularized incomplete beta I_x(a, b), continued-fraction evaluation.
double incomplete_beta_regularized(double a, double b, double x);
/// Unregularized incomplete beta B(x; a, b).
double incomplete_beta(double a, double b, double x);
double beta_function(double a, double b);

/// Upper tail P(F > f) for F(d1, d2).
double f_sf(double f, double d1, double d2);
/// Two-sided p-value of a t statistic with df degrees of freedom.
double t_two_sided_p(double t, double df);
/// Quantile of Student t (df), by bisection on the CDF.
double t_quantile(double p, double df);
double normal_quantile(double p);

/// Neumaier-compensated sum.
double compensated_sum(std::span<const double> values);

}  // namespace quasicausal::stats
