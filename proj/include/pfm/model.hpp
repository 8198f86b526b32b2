#pragma once

#include <cstdint>
#include <span>

#include "pfm/types.hpp"

namespace pfm {

// E[x] and E[ln x] for x ~ Gamma(shape, rate). Both throw DomainError unless
// shape > 0 and rate > 0.
double gamma_mean(double shape, double rate);
double gamma_mean_log(double shape, double rate);

// Differential entropy of Gamma(shape, rate).
double gamma_entropy(double shape, double rate);

// E_q[ln Gamma(x; prior_shape, prior_rate)] given E_q[x] and E_q[ln x].
double gamma_expected_log_density(double prior_shape, double prior_rate, double mean,
                                  double mean_log);

// Plug-in Poisson rate sum_k E[theta_ik] E[beta_kd].
double poisson_rate(const ThetaPosterior& theta, const BetaPosterior& beta, Index i, Index d);

struct SimulatedData {
  CountMatrix counts;
  ResponseVector y;
  RowMatrix theta;  // N x K ground truth
  RowMatrix beta;   // K x D ground truth
};

/// Draws from the generative model
///
///   theta_ik ~ Gamma(a, a c),  beta_kd ~ Gamma(b, b),
///   x_id ~ Poisson(sum_k theta_ik beta_kd),  y_i ~ Normal(theta_i^T eta, sigma)
///
/// with sigma a variance. Draw order is theta (row-major), beta (row-major),
/// counts (row-major), then responses, all from one mt19937_64 stream, so the
/// output is reproducible for a fixed seed and shape. Zero counts are not stored.
SimulatedData sample_dataset(const ModelConfig& config, Index n_rows, Index n_cols, double c,
                             const Vector& eta, double sigma, std::uint64_t rng_seed);

/// E[theta_i theta_i^T] under q. Factorized mode is the exact second moment of
/// the independent Gamma factors; PaperFaithful uses a and c and is not
/// guaranteed positive definite.
Eigen::MatrixXd theta_second_moment(const ThetaPosterior& theta, Index i,
                                    MomentMode mode = MomentMode::Factorized, double a = 0.0,
                                    double c = 0.0);

// eta^T E[theta_i theta_i^T] eta without forming the K x K matrix.
double theta_quadratic_form(const ThetaPosterior& theta, Index i, const Vector& eta,
                            MomentMode mode, double a, double c);

struct ElboTerms {
  double theta_prior = 0.0;
  double beta_prior = 0.0;
  double poisson = 0.0;  // includes the responsibility entropy and -ln x!
  double response = 0.0;
  double theta_entropy = 0.0;
  double beta_entropy = 0.0;

  double total() const {
    return theta_prior + beta_prior + poisson + response + theta_entropy + beta_entropy;
  }
};

/// Evidence lower bound, split by term. `y` empty means no response term.
/// Per-row contributions are reduced pairwise, so the value does not depend on
/// the OpenMP thread count.
ElboTerms elbo_terms(const CountMatrix& data, std::span<const double> y,
                     const VariationalState& state, const ModelConfig& config,
                     MomentMode mode = MomentMode::Factorized);

double elbo(const CountMatrix& data, std::span<const double> y, const VariationalState& state,
            const ModelConfig& config, MomentMode mode = MomentMode::Factorized);

}  // namespace pfm
