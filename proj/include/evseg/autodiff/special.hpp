#pragma once

#include <cmath>
#include <numbers>

// Gamma-family special functions for positive arguments.
//
// All three shift the argument upward with the functional recurrence until it is at
// least 8 and then apply the asymptotic (Stirling-type) expansion. Evidence is
// non-negative, so concentration parameters are always >= 1 and no reflection is needed.

namespace evseg::ad::special {

inline constexpr double kAsymptoticThreshold = 8.0;

inline double log_gamma(double x) {
    if (x == 1.0 || x == 2.0) return 0.0;
    double shift = 0.0;
    while (x < kAsymptoticThreshold) {
        shift += std::log(x);
        x += 1.0;
    }
    const double inv = 1.0 / x;
    const double inv2 = inv * inv;
    // Bernoulli terms B_{2k} / (2k (2k-1) x^{2k-1}).
    const double series =
        inv * (1.0 / 12.0 +
               inv2 * (-1.0 / 360.0 +
                       inv2 * (1.0 / 1260.0 +
                               inv2 * (-1.0 / 1680.0 +
                                       inv2 * (1.0 / 1188.0 + inv2 * (-691.0 / 360360.0 + inv2 / 156.0))))));
    return (x - 0.5) * std::log(x) - x + 0.5 * std::log(2.0 * std::numbers::pi) + series - shift;
}

inline double digamma(double x) {
    double shift = 0.0;
    while (x < kAsymptoticThreshold) {
        shift -= 1.0 / x;
        x += 1.0;
    }
    const double inv = 1.0 / x;
    const double inv2 = inv * inv;
    const double series =
        inv2 * (1.0 / 12.0 -
                inv2 * (1.0 / 120.0 -
                        inv2 * (1.0 / 252.0 -
                                inv2 * (1.0 / 240.0 -
                                        inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    return std::log(x) - 0.5 * inv - series + shift;
}

inline double trigamma(double x) {
    double shift = 0.0;
    while (x < kAsymptoticThreshold) {
        shift += 1.0 / (x * x);
        x += 1.0;
    }
    const double inv = 1.0 / x;
    const double inv2 = inv * inv;
    const double series =
        inv * (1.0 +
               inv * (0.5 +
                      inv * (1.0 / 6.0 +
                             inv2 * (-1.0 / 30.0 +
                                     inv2 * (1.0 / 42.0 +
                                             inv2 * (-1.0 / 30.0 +
                                                     inv2 * (5.0 / 66.0 + inv2 * (-691.0 / 2730.0 + inv2 * 7.0 / 6.0))))))));
    return series + shift;
}

}  // namespace evseg::ad::special
