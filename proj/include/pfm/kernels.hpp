#pragma once

// OpenMP row- and column-parallel kernels behind the E-step and the ELBO.
// Every kernel writes disjoint rows (or columns) and reduces through
// pairwise_sum, so results are bit-identical for any thread count. The
// serial reference versions in reference.hpp are kept for testing.

#include <span>

#include "pfm/types.hpp"

namespace pfm::kernels {

struct GammaMoments {
  RowMatrix mean;      // shape / rate
  RowMatrix mean_log;  // digamma(shape) - ln(rate)
};

GammaMoments moments(const RowMatrix& shape, const RowMatrix& rate);

// Softmax of log_theta[k] + log_beta[k] into out, with max subtraction.
void responsibility(const double* log_theta, const double* log_beta, double* out, Index k);

// Recomputes phi for every stored entry of the listed rows (all rows when
// `rows` is empty). `beta_log_t` is E[ln beta] transposed to D x K.
void refresh_phi(const CountMatrix& data, const RowMatrix& theta_mean_log,
                 const RowMatrix& beta_log_t, RowMatrix& phi, std::span<const Index> rows = {});

// sum_d E[beta_kd] for each k.
Vector beta_mass(const RowMatrix& beta_mean);

// Theta prior rate a c, divided by prior_scale(i, k) when the deep stack
// supplies one.
double theta_prior_rate(double a, double c, const RowMatrix& prior_scale, Index i, Index k);

// shape_ik = a + sum_d x_id phi_idk;  rate_ik = prior rate + sum_d E[beta_kd].
void update_theta(const CountMatrix& data, const RowMatrix& phi, const Vector& mass, double a,
                  double c, const RowMatrix& prior_scale, ThetaPosterior& theta,
                  std::span<const Index> rows = {});

// sum_{i in rows} x_id phi_idk per (k, d), column-parallel in row order.
// `in_batch` of length N selects rows; empty selects every row.
RowMatrix expected_counts_by_column(const CountMatrix& data, const RowMatrix& phi, Index k,
                                    std::span<const char> in_batch = {});

// sum_{i in rows} E[theta_ik] per k; rows must be ascending.
Vector theta_mass(const RowMatrix& theta_mean, std::span<const Index> rows = {});

struct LocalFit {
  int iterations = 0;
  bool converged = false;
};

/// Alternates phi and (shape, rate) for one row with beta held fixed until
/// the largest relative change in shape falls below `tol` or `max_iters` is
/// reached. `prior_rate` and `mass` are length K; `phi` holds one row per
/// entry. The rate is fixed after the first pass, only shape moves.
LocalFit fit_row(std::span<const CountMatrix::Entry> entries, const RowMatrix& beta_log_t,
                 std::span<const double> prior_rate, std::span<const double> mass, double a,
                 std::span<double> shape, std::span<double> rate, std::span<double> phi,
                 int max_iters, double tol);

}  // namespace pfm::kernels
