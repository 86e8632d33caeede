#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>

namespace prefopt {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double sigmoid(double z) {
    if (z >= 0.0) {
        return 1.0 / (1.0 + std::exp(-z));
    }
    const double e = std::exp(z);
    return e / (1.0 + e);
}

/// log(sigmoid(z)) without overflow for either sign.
inline double log_sigmoid(double z) {
    if (z >= 0.0) {
        return -std::log1p(std::exp(-z));
    }
    return z - std::log1p(std::exp(z));
}

inline double softplus(double z) { return -log_sigmoid(-z); }

inline double logsumexp(std::span<const double> xs) {
    double hi = kNegInf;
    for (double x : xs) hi = std::max(hi, x);
    if (hi == kNegInf) return kNegInf;
    double acc = 0.0;
    for (double x : xs) acc += std::exp(x - hi);
    return hi + std::log(acc);
}

inline double logsumexp2(double a, double b) {
    const double hi = std::max(a, b);
    if (hi == kNegInf) return kNegInf;
    return hi + std::log(std::exp(a - hi) + std::exp(b - hi));
}

inline void log_softmax(std::span<const double> logits, std::span<double> out) {
    const double lse = logsumexp(logits);
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
}

}  // namespace prefopt
