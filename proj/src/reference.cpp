#include "pfm/reference.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "pfm/model.hpp"
#include "pfm/special.hpp"

namespace pfm::reference {

RowMatrix dense_counts(const CountMatrix& data) {
  RowMatrix x = RowMatrix::Zero(data.n_rows(), data.n_cols());
  for (const auto& e : data.entries()) x(e.row, e.col) = static_cast<double>(e.count);
  return x;
}

RowMatrix responsibilities(const CountMatrix& data, const ThetaPosterior& theta,
                           const BetaPosterior& beta) {
  const Index k = theta.n_factors();
  RowMatrix phi(data.nnz(), k);
  for (Index e = 0; e < data.nnz(); ++e) {
    const auto& entry = data.entry(e);
    std::vector<double> logits(static_cast<std::size_t>(k));
    double peak = -INFINITY;
    for (Index j = 0; j < k; ++j) {
      logits[j] = gamma_mean_log(theta.shape(entry.row, j), theta.rate(entry.row, j)) +
                  gamma_mean_log(beta.shape(j, entry.col), beta.rate(j, entry.col));
      peak = std::max(peak, logits[j]);
    }
    double total = 0.0;
    for (Index j = 0; j < k; ++j) total += std::exp(logits[j] - peak);
    for (Index j = 0; j < k; ++j) phi(e, j) = std::exp(logits[j] - peak) / total;
  }
  return phi;
}

namespace {

// Dense N x D x K view of x_id phi_idk, zero where x_id = 0.
std::vector<RowMatrix> allocated_counts(const CountMatrix& data, const RowMatrix& phi) {
  std::vector<RowMatrix> z(static_cast<std::size_t>(phi.cols()),
                           RowMatrix::Zero(data.n_rows(), data.n_cols()));
  for (Index e = 0; e < data.nnz(); ++e) {
    const auto& entry = data.entry(e);
    for (Index j = 0; j < phi.cols(); ++j)
      z[static_cast<std::size_t>(j)](entry.row, entry.col) =
          static_cast<double>(entry.count) * phi(e, j);
  }
  return z;
}

}  // namespace

ThetaPosterior update_theta(const CountMatrix& data, const RowMatrix& phi,
                            const BetaPosterior& beta, double a, double c) {
  const Index n = data.n_rows();
  const Index k = beta.n_factors();
  const auto z = allocated_counts(data, phi);
  ThetaPosterior out{RowMatrix(n, k), RowMatrix(n, k)};
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < k; ++j) {
      double shape = a;
      double rate = a * c;
      for (Index d = 0; d < data.n_cols(); ++d) {
        shape += z[static_cast<std::size_t>(j)](i, d);
        rate += gamma_mean(beta.shape(j, d), beta.rate(j, d));
      }
      out.shape(i, j) = shape;
      out.rate(i, j) = rate;
    }
  }
  return out;
}

BetaPosterior update_beta(const CountMatrix& data, const RowMatrix& phi,
                          const ThetaPosterior& theta, double b) {
  const Index k = theta.n_factors();
  const auto z = allocated_counts(data, phi);
  BetaPosterior out{RowMatrix(k, data.n_cols()), RowMatrix(k, data.n_cols())};
  for (Index j = 0; j < k; ++j) {
    for (Index d = 0; d < data.n_cols(); ++d) {
      double shape = b;
      double rate = b;
      for (Index i = 0; i < data.n_rows(); ++i) {
        shape += z[static_cast<std::size_t>(j)](i, d);
        rate += gamma_mean(theta.shape(i, j), theta.rate(i, j));
      }
      out.shape(j, d) = shape;
      out.rate(j, d) = rate;
    }
  }
  return out;
}

double elbo(const CountMatrix& data, std::span<const double> y, const VariationalState& state,
            const ModelConfig& config) {
  const auto& theta = state.theta;
  const auto& beta = state.beta;
  const auto& reg = state.regression;
  const double a = config.a;
  const double b = config.b;
  const Index k = config.n_factors;
  const RowMatrix x = dense_counts(data);

  double total = 0.0;
  for (Index i = 0; i < data.n_rows(); ++i)
    for (Index j = 0; j < k; ++j) {
      const double s = theta.shape(i, j);
      const double r = theta.rate(i, j);
      total += gamma_expected_log_density(a, a * reg.c, gamma_mean(s, r), gamma_mean_log(s, r));
      total += gamma_entropy(s, r);
    }
  for (Index j = 0; j < k; ++j)
    for (Index d = 0; d < data.n_cols(); ++d) {
      const double s = beta.shape(j, d);
      const double r = beta.rate(j, d);
      total += gamma_expected_log_density(b, b, gamma_mean(s, r), gamma_mean_log(s, r));
      total += gamma_entropy(s, r);
    }

  // Every cell pays its rate mass; stored cells add the allocation terms.
  for (Index i = 0; i < data.n_rows(); ++i)
    for (Index d = 0; d < data.n_cols(); ++d) total -= poisson_rate(theta, beta, i, d);
  for (Index e = 0; e < data.nnz(); ++e) {
    const auto& entry = data.entry(e);
    const double count = x(entry.row, entry.col);
    for (Index j = 0; j < k; ++j) {
      const double p = state.phi.phi(e, j);
      if (p == 0.0) continue;
      total += count * p *
               (gamma_mean_log(theta.shape(entry.row, j), theta.rate(entry.row, j)) +
                gamma_mean_log(beta.shape(j, entry.col), beta.rate(j, entry.col)) - std::log(p));
    }
    total -= std::lgamma(count + 1.0);
  }

  if (!y.empty()) {
    for (Index i = 0; i < data.n_rows(); ++i) {
      const Eigen::MatrixXd second = theta_second_moment(theta, i);
      Vector mean(k);
      for (Index j = 0; j < k; ++j) mean(j) = gamma_mean(theta.shape(i, j), theta.rate(i, j));
      const double yi = y[static_cast<std::size_t>(i)];
      const double expected_sq = yi * yi - 2.0 * yi * reg.eta.dot(mean) +
                                 reg.eta.dot(second * reg.eta);
      total += -0.5 * std::log(2.0 * std::numbers::pi * reg.sigma) - expected_sq / (2.0 * reg.sigma);
    }
  }
  return total;
}

}  // namespace pfm::reference
