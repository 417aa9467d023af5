#include "cacs/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "cacs/error.hpp"
#include "cacs/refscore.hpp"

namespace cacs {

// --- incomplete beta / F distribution ----------------------------------

double log_beta(double a, double b) {
    return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
}

namespace {

// Continued fraction for the regularized incomplete beta (Lentz algorithm).
double beta_cf(double a, double b, double x) {
    constexpr int kMaxIter = 400;
    constexpr double kEps = 3e-16;
    constexpr double kTiny = 1e-300;

    double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) return h;
    }
    fail(ErrorKind::Compute, "incomplete beta continued fraction did not converge");
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
    if (!(a > 0.0) || !(b > 0.0))
        fail(ErrorKind::Compute, "incomplete beta needs positive shape parameters");
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    double front = std::exp(a * std::log(x) + b * std::log1p(-x) - log_beta(a, b));
    if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_cf(a, b, x) / a;
    return 1.0 - std::exp(b * std::log1p(-x) + a * std::log(x) - log_beta(b, a)) *
                     beta_cf(b, a, 1.0 - x) / b;
}

double incomplete_beta_inv(double a, double b, double p) {
    if (p <= 0.0) return 0.0;
    if (p >= 1.0) return 1.0;
    double lo = 0.0, hi = 1.0;
    double x = 0.5;
    for (int iter = 0; iter < 200; ++iter) {
        x = 0.5 * (lo + hi);
        double v = incomplete_beta(a, b, x);
        if (v < p)
            lo = x;
        else
            hi = x;
        if (hi - lo < 1e-15) break;
    }
    return x;
}

double f_cdf(double x, double d1, double d2) {
    if (x <= 0.0) return 0.0;
    double z = d1 * x / (d1 * x + d2);
    return incomplete_beta(d1 / 2.0, d2 / 2.0, z);
}

double f_quantile(double p, double d1, double d2) {
    if (!(d1 > 0.0) || !(d2 > 0.0))
        fail(ErrorKind::Compute, "F quantile needs positive degrees of freedom");
    if (p <= 0.0) return 0.0;
    if (p >= 1.0) fail(ErrorKind::Compute, "F quantile needs p in (0,1)");
    double z = incomplete_beta_inv(d1 / 2.0, d2 / 2.0, p);
    if (z >= 1.0) fail(ErrorKind::Compute, "F quantile overflow");
    return d2 * z / (d1 * (1.0 - z));
}

// --- ICC(2,1) -----------------------------------------------------------

IccResult icc_2_1(std::span<const double> a, std::span<const double> b, double alpha) {
    if (a.size() != b.size()) fail(ErrorKind::Validation, "icc: length mismatch");
    const size_t n = a.size();
    if (n < 2) fail(ErrorKind::Validation, "icc: need at least 2 subjects");
    for (size_t i = 0; i < n; ++i)
        if (!std::isfinite(a[i]) || !std::isfinite(b[i]))
            fail(ErrorKind::Validation, "icc: non-finite input");

    bool identical = true;
    for (size_t i = 0; i < n && identical; ++i) identical = a[i] == b[i];

    const double k = 2.0;
    const double dn = static_cast<double>(n);

    double grand = 0.0;
    for (size_t i = 0; i < n; ++i) grand += a[i] + b[i];
    grand /= dn * k;

    double col_a = 0.0, col_b = 0.0;
    for (size_t i = 0; i < n; ++i) {
        col_a += a[i];
        col_b += b[i];
    }
    col_a /= dn;
    col_b /= dn;

    double ss_rows = 0.0, ss_cols = 0.0, ss_err = 0.0;
    ss_cols = dn * ((col_a - grand) * (col_a - grand) + (col_b - grand) * (col_b - grand));
    for (size_t i = 0; i < n; ++i) {
        double row_mean = 0.5 * (a[i] + b[i]);
        ss_rows += k * (row_mean - grand) * (row_mean - grand);
        double ra = a[i] - row_mean - col_a + grand;
        double rb = b[i] - row_mean - col_b + grand;
        ss_err += ra * ra + rb * rb;
    }

    const double msr = ss_rows / (dn - 1.0);
    const double msc = ss_cols / (k - 1.0);
    const double mse = ss_err / ((dn - 1.0) * (k - 1.0));

    const double denom = msr + (k - 1.0) * mse + k * (msc - mse) / dn;
    if (!(denom > 1e-300)) {
        if (identical) return IccResult{1.0, 1.0, 1.0};
        fail(ErrorKind::Compute, "icc undefined: zero total variance");
    }
    if (identical) return IccResult{1.0, 1.0, 1.0};
    double icc = (msr - mse) / denom;
    if (icc >= 1.0 - 1e-12) return IccResult{icc, icc, 1.0};

    // F-based interval for the two-way random, absolute agreement, single
    // measure model (McGraw & Wong), alpha/2 per tail.
    const double fj = k * icc / (dn * (1.0 - icc));
    const double vn = (fj * msc + (1.0 + k * icc * (dn - 1.0) / (dn * (1.0 - icc))) * mse);
    const double a_term = fj * msc;
    const double b_term = (1.0 + k * icc * (dn - 1.0) / (dn * (1.0 - icc))) * mse;
    double v = vn * vn /
               (a_term * a_term / (k - 1.0) + b_term * b_term / ((dn - 1.0) * (k - 1.0)));
    v = std::max(v, 1.0);

    const double f_lower = f_quantile(1.0 - alpha / 2.0, dn - 1.0, v);
    const double f_upper = f_quantile(1.0 - alpha / 2.0, v, dn - 1.0);

    double lower = dn * (msr - f_lower * mse) /
                   (f_lower * (k * msc + (k * dn - k - dn) * mse) + dn * msr);
    double upper = dn * (f_upper * msr - mse) /
                   (k * msc + (k * dn - k - dn) * mse + dn * f_upper * msr);

    lower = std::clamp(lower, -1.0, 1.0);
    upper = std::clamp(upper, -1.0, 1.0);
    lower = std::min(lower, icc);
    upper = std::max(upper, icc);
    return IccResult{icc, lower, upper};
}

// --- weighted kappa, accuracy, mae --------------------------------------

double weighted_kappa_linear(std::span<const int> a, std::span<const int> b, int categories) {
    if (a.size() != b.size()) fail(ErrorKind::Validation, "kappa: length mismatch");
    if (a.empty()) fail(ErrorKind::Validation, "kappa: empty input");
    if (categories < 2) fail(ErrorKind::Validation, "kappa: need at least 2 categories");
    const int k = categories;
    std::vector<double> observed(static_cast<size_t>(k) * k, 0.0);
    std::vector<double> row(k, 0.0), col(k, 0.0);
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i] < 0 || a[i] >= k || b[i] < 0 || b[i] >= k)
            fail(ErrorKind::Validation, "kappa: category out of range");
        observed[static_cast<size_t>(a[i]) * k + b[i]] += 1.0;
        row[a[i]] += 1.0;
        col[b[i]] += 1.0;
    }
    const double n = static_cast<double>(a.size());
    double po = 0.0, pe = 0.0;
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < k; ++j) {
            double w = 1.0 - std::abs(i - j) / static_cast<double>(k - 1);
            po += w * observed[static_cast<size_t>(i) * k + j] / n;
            pe += w * row[i] * col[j] / (n * n);
        }
    }
    if (pe >= 1.0 - 1e-12) {
        // Both vectors constant on the same category: perfect by definition.
        return 1.0;
    }
    return (po - pe) / (1.0 - pe);
}

double accuracy(std::span<const int> a, std::span<const int> b) {
    if (a.size() != b.size()) fail(ErrorKind::Validation, "accuracy: length mismatch");
    if (a.empty()) fail(ErrorKind::Validation, "accuracy: empty input");
    size_t hits = 0;
    for (size_t i = 0; i < a.size(); ++i) hits += a[i] == b[i];
    return static_cast<double>(hits) / static_cast<double>(a.size());
}

double mae(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) fail(ErrorKind::Validation, "mae: length mismatch");
    if (a.empty()) fail(ErrorKind::Validation, "mae: empty input");
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return s / static_cast<double>(a.size());
}

AgreementStats compare_score_vectors(std::span<const double> reference,
                                     std::span<const double> predicted) {
    AgreementStats stats;
    stats.n = static_cast<int>(reference.size());
    auto icc = icc_2_1(reference, predicted);
    stats.icc = icc.icc;
    stats.ci_lo = icc.ci_lo;
    stats.ci_hi = icc.ci_hi;
    std::vector<int> cat_a, cat_b;
    cat_a.reserve(reference.size());
    cat_b.reserve(predicted.size());
    for (double v : reference) cat_a.push_back(static_cast<int>(risk_category(v)));
    for (double v : predicted) cat_b.push_back(static_cast<int>(risk_category(v)));
    stats.kappa_linear = weighted_kappa_linear(cat_a, cat_b, 5);
    stats.accuracy = accuracy(cat_a, cat_b);
    stats.mae = mae(reference, predicted);
    return stats;
}

}  // namespace cacs
