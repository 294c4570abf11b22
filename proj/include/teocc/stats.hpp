#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace teocc {

namespace detail {

// Regularized incomplete gamma functions, series + continued fraction forms.
inline double gamma_p_series(double a, double x) {
    double ap = a;
    double sum = 1.0 / a;
    double del = sum;
    for (int n = 0; n < 500; ++n) {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if (std::abs(del) < std::abs(sum) * 1e-15) break;
    }
    return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

inline double gamma_q_contfrac(double a, double x) {
    const double tiny = 1e-300;
    double b = x + 1.0 - a;
    double c = 1.0 / tiny;
    double d = 1.0 / b;
    double h = d;
    for (int i = 1; i < 500; ++i) {
        const double an = -i * (i - a);
        b += 2.0;
        d = an * d + b;
        if (std::abs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < 1e-15) break;
    }
    return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

}  // namespace detail

/// Upper regularized incomplete gamma Q(a, x) = 1 - P(a, x).
inline double gamma_q(double a, double x) {
    if (x < 0.0 || a <= 0.0) throw std::invalid_argument("gamma_q: domain error");
    if (x == 0.0) return 1.0;
    if (x < a + 1.0) return 1.0 - detail::gamma_p_series(a, x);
    return detail::gamma_q_contfrac(a, x);
}

/// Survival function of the chi-squared distribution with `dof` degrees of
/// freedom, i.e. P(X >= stat).
inline double chi_squared_pvalue(double stat, int dof) {
    if (dof <= 0) throw std::invalid_argument("chi_squared_pvalue: dof must be positive");
    return gamma_q(0.5 * dof, 0.5 * stat);
}

/// Pearson chi-squared statistic of observed counts against a uniform
/// expectation. Returns the p-value.
inline double uniformity_pvalue(const std::vector<std::int64_t>& counts) {
    if (counts.size() < 2) throw std::invalid_argument("uniformity_pvalue: need >= 2 bins");
    std::int64_t total = 0;
    for (auto c : counts) total += c;
    if (total == 0) throw std::invalid_argument("uniformity_pvalue: empty sample");
    const double expected = static_cast<double>(total) / static_cast<double>(counts.size());
    double stat = 0.0;
    for (auto c : counts) {
        const double d = static_cast<double>(c) - expected;
        stat += d * d / expected;
    }
    return chi_squared_pvalue(stat, static_cast<int>(counts.size()) - 1);
}

/// Mean and a simple spread (max - min) of a small sample.
struct SampleSummary {
    double mean = 0.0;
    double spread = 0.0;
    double min = 0.0;
    double max = 0.0;
};

inline SampleSummary summarize(const std::vector<double>& xs) {
    if (xs.empty()) throw std::invalid_argument("summarize: empty sample");
    SampleSummary s;
    s.min = xs[0];
    s.max = xs[0];
    for (double v : xs) {
        s.mean += v;
        s.min = std::min(s.min, v);
        s.max = std::max(s.max, v);
    }
    s.mean /= static_cast<double>(xs.size());
    s.spread = s.max - s.min;
    return s;
}

}  // namespace teocc
