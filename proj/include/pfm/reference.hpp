#pragma once

// Serial, dense-loop versions of the E-step and the ELBO. They visit every
// (i, d) cell, share no code with kernels.hpp, and exist as test oracles and
// as the baseline in the kernel benchmark.

#include <span>

#include "pfm/types.hpp"

namespace pfm::reference {

RowMatrix dense_counts(const CountMatrix& data);

// phi rows for every stored entry, in entries() order.
RowMatrix responsibilities(const CountMatrix& data, const ThetaPosterior& theta,
                           const BetaPosterior& beta);

ThetaPosterior update_theta(const CountMatrix& data, const RowMatrix& phi,
                            const BetaPosterior& beta, double a, double c);

BetaPosterior update_beta(const CountMatrix& data, const RowMatrix& phi,
                          const ThetaPosterior& theta, double b);

// Factorized-moment ELBO; `y` empty means unsupervised.
double elbo(const CountMatrix& data, std::span<const double> y, const VariationalState& state,
            const ModelConfig& config);

}  // namespace pfm::reference
