#include "pfm/special.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "pfm/types.hpp"

namespace pfm {

namespace {

constexpr double kAsymptoticFrom = 10.0;

void require_positive(double x, const char* name) {
  if (!(x > 0.0) || !std::isfinite(x))
    throw DomainError(std::string(name) + ": argument must be positive and finite, got " +
                      std::to_string(x));
}

}  // namespace

double digamma(double x) {
  require_positive(x, "digamma");
  double shift = 0.0;
  while (x < kAsymptoticFrom) {
    shift += 1.0 / x;
    x += 1.0;
  }
  // Bernoulli terms B_2n / (2n x^2n), n = 1..7.
  const double inv2 = 1.0 / (x * x);
  const double tail =
      inv2 * (1.0 / 12 -
              inv2 * (1.0 / 120 -
                      inv2 * (1.0 / 252 -
                              inv2 * (1.0 / 240 -
                                      inv2 * (1.0 / 132 -
                                              inv2 * (691.0 / 32760 - inv2 * (1.0 / 12)))))));
  return std::log(x) - 0.5 / x - tail - shift;
}

double log_gamma(double x) {
  require_positive(x, "log_gamma");
  double shift = 0.0;
  if (x < kAsymptoticFrom) {
    // ln prod_{j<n} (x + j), accumulated as a product while it stays finite.
    double product = 1.0;
    while (x < kAsymptoticFrom) {
      product *= x;
      x += 1.0;
      if (product < 1e-280) {
        shift += std::log(product);
        product = 1.0;
      }
    }
    shift += std::log(product);
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  // B_2n / (2n (2n - 1) x^(2n-1)), n = 1..7.
  const double series =
      inv * (1.0 / 12 -
             inv2 * (1.0 / 360 -
                     inv2 * (1.0 / 1260 -
                             inv2 * (1.0 / 1680 -
                                     inv2 * (1.0 / 1188 -
                                             inv2 * (691.0 / 360360 - inv2 * (1.0 / 156)))))));
  const double half_log_two_pi = 0.5 * std::log(2.0 * std::numbers::pi);
  return (x - 0.5) * std::log(x) - x + half_log_two_pi + series - shift;
}

double log_factorial(std::int64_t n) {
  if (n < 0) throw DomainError("log_factorial: negative argument " + std::to_string(n));
  if (n < 2) return 0.0;
  return log_gamma(static_cast<double>(n) + 1.0);
}

}  // namespace pfm
