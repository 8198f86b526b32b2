#pragma once

#include <cstdint>

namespace pfm {

// psi(x) for x > 0. Shifts x above 10 with psi(x) = psi(x + 1) - 1/x, then
// applies the asymptotic series. Absolute error below 1e-10 on (1e-3, 1e6).
double digamma(double x);

// ln Gamma(x) for x > 0, built the same way from the Stirling series.
// Reentrant, unlike std::lgamma which writes the global signgam.
double log_gamma(double x);

// ln(n!) via log_gamma(n + 1).
double log_factorial(std::int64_t n);

}  // namespace pfm
