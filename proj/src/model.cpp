#include "pfm/model.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "pfm/kernels.hpp"
#include "pfm/reduce.hpp"
#include "pfm/special.hpp"

namespace pfm {

namespace {

void require_gamma_params(double shape, double rate, const char* what) {
  if (!(shape > 0.0) || !(rate > 0.0))
    throw DomainError(std::string(what) + ": shape and rate must be positive (got " +
                      std::to_string(shape) + ", " + std::to_string(rate) + ")");
}

void check_row(const ThetaPosterior& theta, Index i) {
  if (i < 0 || i >= theta.n_rows())
    throw DomainError("row index " + std::to_string(i) + " out of range [0, " +
                      std::to_string(theta.n_rows()) + ")");
}

}  // namespace

double gamma_mean(double shape, double rate) {
  require_gamma_params(shape, rate, "gamma_mean");
  return shape / rate;
}

double gamma_mean_log(double shape, double rate) {
  require_gamma_params(shape, rate, "gamma_mean_log");
  return digamma(shape) - std::log(rate);
}

double gamma_entropy(double shape, double rate) {
  require_gamma_params(shape, rate, "gamma_entropy");
  return shape - std::log(rate) + log_gamma(shape) + (1.0 - shape) * digamma(shape);
}

double gamma_expected_log_density(double prior_shape, double prior_rate, double mean,
                                  double mean_log) {
  return prior_shape * std::log(prior_rate) - log_gamma(prior_shape) +
         (prior_shape - 1.0) * mean_log - prior_rate * mean;
}

double poisson_rate(const ThetaPosterior& theta, const BetaPosterior& beta, Index i, Index d) {
  check_row(theta, i);
  if (d < 0 || d >= beta.n_cols())
    throw DomainError("column index " + std::to_string(d) + " out of range [0, " +
                      std::to_string(beta.n_cols()) + ")");
  double rate = 0.0;
  for (Index k = 0; k < theta.n_factors(); ++k)
    rate += gamma_mean(theta.shape(i, k), theta.rate(i, k)) *
            gamma_mean(beta.shape(k, d), beta.rate(k, d));
  return rate;
}

SimulatedData sample_dataset(const ModelConfig& config, Index n_rows, Index n_cols, double c,
                             const Vector& eta, double sigma, std::uint64_t rng_seed) {
  config.validate();
  const Index k = config.n_factors;
  if (n_rows <= 0 || n_cols <= 0) throw DomainError("sample_dataset: dimensions must be positive");
  if (!(c > 0.0)) throw DomainError("sample_dataset: c must be positive");
  if (!(sigma >= 0.0)) throw DomainError("sample_dataset: sigma must be nonnegative");
  if (eta.size() != k)
    throw DomainError("sample_dataset: eta has length " + std::to_string(eta.size()) +
                      ", expected " + std::to_string(k));

  std::mt19937_64 rng(rng_seed);
  SimulatedData out;
  std::gamma_distribution<double> theta_dist(config.a, 1.0 / (config.a * c));
  std::gamma_distribution<double> beta_dist(config.b, 1.0 / config.b);
  out.theta.resize(n_rows, k);
  for (Index i = 0; i < n_rows; ++i)
    for (Index j = 0; j < k; ++j) out.theta(i, j) = theta_dist(rng);
  out.beta.resize(k, n_cols);
  for (Index j = 0; j < k; ++j)
    for (Index d = 0; d < n_cols; ++d) out.beta(j, d) = beta_dist(rng);

  std::vector<CountMatrix::Entry> entries;
  for (Index i = 0; i < n_rows; ++i) {
    for (Index d = 0; d < n_cols; ++d) {
      const double rate = out.theta.row(i).dot(out.beta.col(d));
      // Small-shape Gamma draws can underflow to exactly zero.
      if (!(rate > 0.0)) continue;
      const auto x = std::poisson_distribution<std::int64_t>(rate)(rng);
      if (x > 0) entries.push_back({i, d, x});
    }
  }
  out.counts = CountMatrix(n_rows, n_cols, std::move(entries));

  out.y.resize(n_rows);
  std::normal_distribution<double> noise(0.0, std::sqrt(sigma));
  for (Index i = 0; i < n_rows; ++i) {
    const double mean = out.theta.row(i).dot(eta);
    out.y(i) = sigma > 0.0 ? mean + noise(rng) : mean;
  }
  return out;
}

Eigen::MatrixXd theta_second_moment(const ThetaPosterior& theta, Index i, MomentMode mode,
                                    double a, double c) {
  check_row(theta, i);
  const Index k = theta.n_factors();
  const Vector mean = (theta.shape.row(i).array() / theta.rate.row(i).array()).transpose();
  Eigen::MatrixXd m(k, k);
  if (mode == MomentMode::Factorized) {
    m = mean * mean.transpose();
    for (Index j = 0; j < k; ++j)
      m(j, j) += theta.shape(i, j) / (theta.rate(i, j) * theta.rate(i, j));
    return m;
  }
  const double scale = 1.0 / static_cast<double>(k * k);
  for (Index j = 0; j < k; ++j)
    for (Index l = 0; l < k; ++l)
      m(j, l) = scale * (j == l ? 1.0 / (a * c * c) + mean(j) : mean(j) * mean(l));
  return m;
}

double theta_quadratic_form(const ThetaPosterior& theta, Index i, const Vector& eta,
                            MomentMode mode, double a, double c) {
  if (mode == MomentMode::PaperFaithful)
    return eta.dot(theta_second_moment(theta, i, mode, a, c) * eta);
  double linear = 0.0;
  double variance = 0.0;
  for (Index k = 0; k < theta.n_factors(); ++k) {
    const double s = theta.shape(i, k);
    const double r = theta.rate(i, k);
    linear += eta(k) * s / r;
    variance += eta(k) * eta(k) * s / (r * r);
  }
  return linear * linear + variance;
}

ElboTerms elbo_terms(const CountMatrix& data, std::span<const double> y,
                     const VariationalState& state, const ModelConfig& config, MomentMode mode) {
  const Index n = data.n_rows();
  const Index d_cols = data.n_cols();
  const Index k = config.n_factors;
  const auto& theta = state.theta;
  const auto& beta = state.beta;
  const auto& reg = state.regression;
  if (theta.n_rows() != n || theta.n_factors() != k || beta.n_factors() != k ||
      beta.n_cols() != d_cols)
    throw DomainError("elbo: posterior shapes do not match the data and config");
  if (state.phi.phi.rows() != data.nnz() || state.phi.phi.cols() != k)
    throw DomainError("elbo: responsibilities must have one row per stored entry");
  if (!y.empty() && static_cast<Index>(y.size()) != n)
    throw DomainError("elbo: response length " + std::to_string(y.size()) +
                      " does not match " + std::to_string(n) + " rows");

  const auto tm = kernels::moments(theta.shape, theta.rate);
  const auto bm = kernels::moments(beta.shape, beta.rate);
  const double a = config.a;
  const double b = config.b;
  const double c = reg.c;
  const bool supervised = !y.empty();
  const double log_two_pi_sigma = std::log(2.0 * std::numbers::pi * reg.sigma);

  std::vector<double> prior_rows(static_cast<std::size_t>(n));
  std::vector<double> entropy_rows(static_cast<std::size_t>(n));
  std::vector<double> poisson_rows(static_cast<std::size_t>(n));
  std::vector<double> response_rows(static_cast<std::size_t>(n));

#pragma omp parallel for schedule(dynamic, 16)
  for (Index i = 0; i < n; ++i) {
    double prior = 0.0;
    double entropy = 0.0;
    for (Index j = 0; j < k; ++j) {
      const double rate = kernels::theta_prior_rate(a, c, state.prior_scale, i, j);
      prior += gamma_expected_log_density(a, rate, tm.mean(i, j), tm.mean_log(i, j));
      entropy += gamma_entropy(theta.shape(i, j), theta.rate(i, j));
    }
    double pois = 0.0;
    for (Index e = data.row_begin(i); e < data.row_end(i); ++e) {
      const auto& entry = data.entry(e);
      const auto x = static_cast<double>(entry.count);
      double allocated = 0.0;
      for (Index j = 0; j < k; ++j) {
        const double p = state.phi.phi(e, j);
        if (p > 0.0)
          allocated += p * (tm.mean_log(i, j) + bm.mean_log(j, entry.col) - std::log(p));
      }
      pois += x * allocated - log_factorial(entry.count);
    }
    double resp = 0.0;
    if (supervised) {
      const double yi = y[static_cast<std::size_t>(i)];
      double linear = 0.0;
      for (Index j = 0; j < k; ++j) linear += reg.eta(j) * tm.mean(i, j);
      const double quad = theta_quadratic_form(theta, i, reg.eta, mode, a, c);
      resp = -0.5 * log_two_pi_sigma - (yi * yi - 2.0 * yi * linear + quad) / (2.0 * reg.sigma);
    }
    const auto slot = static_cast<std::size_t>(i);
    prior_rows[slot] = prior;
    entropy_rows[slot] = entropy;
    poisson_rows[slot] = pois;
    response_rows[slot] = resp;
  }

  std::vector<double> beta_prior_rows(static_cast<std::size_t>(k));
  std::vector<double> beta_entropy_rows(static_cast<std::size_t>(k));
  std::vector<double> scratch(static_cast<std::size_t>(d_cols));
  for (Index j = 0; j < k; ++j) {
    for (Index d = 0; d < d_cols; ++d)
      scratch[static_cast<std::size_t>(d)] =
          gamma_expected_log_density(b, b, bm.mean(j, d), bm.mean_log(j, d));
    beta_prior_rows[static_cast<std::size_t>(j)] = pairwise_sum(scratch);
    for (Index d = 0; d < d_cols; ++d)
      scratch[static_cast<std::size_t>(d)] = gamma_entropy(beta.shape(j, d), beta.rate(j, d));
    beta_entropy_rows[static_cast<std::size_t>(j)] = pairwise_sum(scratch);
  }

  // Rate mass over every cell, zeros included: (sum_i E[theta_i])^T (sum_d E[beta_.d]).
  const Vector theta_sum = kernels::theta_mass(tm.mean);
  const Vector beta_sum = kernels::beta_mass(bm.mean);
  double mass = 0.0;
  for (Index j = 0; j < k; ++j) mass += theta_sum(j) * beta_sum(j);

  ElboTerms terms;
  terms.theta_prior = pairwise_sum(prior_rows);
  terms.theta_entropy = pairwise_sum(entropy_rows);
  terms.poisson = pairwise_sum(poisson_rows) - mass;
  terms.response = supervised ? pairwise_sum(response_rows) : 0.0;
  terms.beta_prior = pairwise_sum(beta_prior_rows);
  terms.beta_entropy = pairwise_sum(beta_entropy_rows);
  return terms;
}

double elbo(const CountMatrix& data, std::span<const double> y, const VariationalState& state,
            const ModelConfig& config, MomentMode mode) {
  return elbo_terms(data, y, state, config, mode).total();
}

}  // namespace pfm
