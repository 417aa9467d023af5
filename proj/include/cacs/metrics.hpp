#pragma once

#include <span>
#include <vector>

namespace cacs {

struct IccResult {
    double icc = 0.0;
    double ci_lo = 0.0;
    double ci_hi = 0.0;
};

// Two-way random effects, absolute agreement, single measure: ICC(2,1) for
// two raters, with the F-distribution confidence interval (alpha = 0.05 by
// default). Identical vectors degenerate to icc = 1 with a point interval.
IccResult icc_2_1(std::span<const double> a, std::span<const double> b,
                  double alpha = 0.05);

// Cohen's kappa with linear agreement weights w_ij = 1 - |i-j|/(k-1).
double weighted_kappa_linear(std::span<const int> a, std::span<const int> b,
                             int categories = 5);

double accuracy(std::span<const int> a, std::span<const int> b);
double mae(std::span<const double> a, std::span<const double> b);

struct AgreementStats {
    double icc = 0.0;
    double ci_lo = 0.0;
    double ci_hi = 0.0;
    double kappa_linear = 0.0;
    double accuracy = 0.0;
    double mae = 0.0;
    int n = 0;
};

// Convenience bundle: score agreement plus categorical agreement of the
// risk strata derived from the scores.
AgreementStats compare_score_vectors(std::span<const double> reference,
                                     std::span<const double> predicted);

// Numeric building blocks, exposed for verification tests.
double log_beta(double a, double b);
double incomplete_beta(double a, double b, double x);          // regularized I_x(a,b)
double incomplete_beta_inv(double a, double b, double p);
double f_cdf(double x, double d1, double d2);
double f_quantile(double p, double d1, double d2);

}  // namespace cacs
