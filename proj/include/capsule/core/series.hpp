#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

namespace capsule {

using Opt = std::optional<double>;
using OptSeries = std::vector<Opt>;

inline std::vector<double> present_values(std::span<const Opt> xs) {
    std::vector<double> out;
    out.reserve(xs.size());
    for (const auto& x : xs)
        if (x) out.push_back(*x);
    return out;
}

/// Linear interpolation between order statistics (position p·(n−1)); `sorted` ascending.
inline double quantile_sorted(std::span<const double> sorted, double p) {
    const std::size_t n = sorted.size();
    if (n == 1) return sorted[0];
    double pos = p * static_cast<double>(n - 1);
    auto lo = static_cast<std::size_t>(std::floor(pos));
    if (lo >= n - 1) return sorted[n - 1];
    double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

inline double mean(std::span<const double> xs) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

/// Divide-by-n variance.
inline double population_variance(std::span<const double> xs) {
    double m = mean(xs);
    double s = 0.0;
    for (double x : xs) s += (x - m) * (x - m);
    return s / static_cast<double>(xs.size());
}

/// Divide-by-(n−1) variance.
inline double sample_variance(std::span<const double> xs) {
    double m = mean(xs);
    double s = 0.0;
    for (double x : xs) s += (x - m) * (x - m);
    return s / static_cast<double>(xs.size() - 1);
}

}  // namespace capsule
