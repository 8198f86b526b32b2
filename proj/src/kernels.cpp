#include "pfm/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "pfm/reduce.hpp"
#include "pfm/special.hpp"

namespace pfm::kernels {

GammaMoments moments(const RowMatrix& shape, const RowMatrix& rate) {
  GammaMoments out{RowMatrix(shape.rows(), shape.cols()), RowMatrix(shape.rows(), shape.cols())};
  const Index rows = shape.rows();
#pragma omp parallel for schedule(static)
  for (Index r = 0; r < rows; ++r) {
    for (Index k = 0; k < shape.cols(); ++k) {
      out.mean(r, k) = shape(r, k) / rate(r, k);
      out.mean_log(r, k) = digamma(shape(r, k)) - std::log(rate(r, k));
    }
  }
  return out;
}

void responsibility(const double* log_theta, const double* log_beta, double* out, Index k) {
  double peak = -std::numeric_limits<double>::infinity();
  for (Index j = 0; j < k; ++j) {
    out[j] = log_theta[j] + log_beta[j];
    peak = std::max(peak, out[j]);
  }
  double norm = 0.0;
  for (Index j = 0; j < k; ++j) {
    out[j] = std::exp(out[j] - peak);
    norm += out[j];
  }
  for (Index j = 0; j < k; ++j) out[j] /= norm;
}

namespace {

// Runs body(i) for every listed row, or every row when the list is empty.
template <typename Body>
void for_rows(Index n_rows, std::span<const Index> rows, Body&& body) {
  if (rows.empty()) {
#pragma omp parallel for schedule(dynamic, 16)
    for (Index i = 0; i < n_rows; ++i) body(i);
  } else {
    const auto count = static_cast<Index>(rows.size());
#pragma omp parallel for schedule(dynamic, 16)
    for (Index r = 0; r < count; ++r) body(rows[static_cast<std::size_t>(r)]);
  }
}

}  // namespace

void refresh_phi(const CountMatrix& data, const RowMatrix& theta_mean_log,
                 const RowMatrix& beta_log_t, RowMatrix& phi, std::span<const Index> rows) {
  const Index k = theta_mean_log.cols();
  for_rows(data.n_rows(), rows, [&](Index i) {
    for (Index e = data.row_begin(i); e < data.row_end(i); ++e)
      responsibility(theta_mean_log.row(i).data(), beta_log_t.row(data.entry(e).col).data(),
                     phi.row(e).data(), k);
  });
}

Vector beta_mass(const RowMatrix& beta_mean) {
  Vector mass(beta_mean.rows());
  for (Index k = 0; k < beta_mean.rows(); ++k)
    mass(k) = pairwise_sum(std::span<const double>(beta_mean.row(k).data(),
                                                   static_cast<std::size_t>(beta_mean.cols())));
  return mass;
}

double theta_prior_rate(double a, double c, const RowMatrix& prior_scale, Index i, Index k) {
  return prior_scale.size() == 0 ? a * c : a * c / prior_scale(i, k);
}

void update_theta(const CountMatrix& data, const RowMatrix& phi, const Vector& mass, double a,
                  double c, const RowMatrix& prior_scale, ThetaPosterior& theta,
                  std::span<const Index> rows) {
  const Index k = theta.n_factors();
  for_rows(data.n_rows(), rows, [&](Index i) {
    for (Index j = 0; j < k; ++j) {
      theta.shape(i, j) = a;
      theta.rate(i, j) = theta_prior_rate(a, c, prior_scale, i, j) + mass(j);
    }
    for (Index e = data.row_begin(i); e < data.row_end(i); ++e) {
      const auto x = static_cast<double>(data.entry(e).count);
      for (Index j = 0; j < k; ++j) theta.shape(i, j) += x * phi(e, j);
    }
  });
}

RowMatrix expected_counts_by_column(const CountMatrix& data, const RowMatrix& phi, Index k,
                                    std::span<const char> in_batch) {
  RowMatrix sums = RowMatrix::Zero(k, data.n_cols());
  const Index cols = data.n_cols();
#pragma omp parallel for schedule(dynamic, 16)
  for (Index d = 0; d < cols; ++d) {
    for (Index e : data.column(d)) {
      const auto& entry = data.entry(e);
      if (!in_batch.empty() && !in_batch[static_cast<std::size_t>(entry.row)]) continue;
      const auto x = static_cast<double>(entry.count);
      for (Index j = 0; j < k; ++j) sums(j, d) += x * phi(e, j);
    }
  }
  return sums;
}

Vector theta_mass(const RowMatrix& theta_mean, std::span<const Index> rows) {
  const Index k = theta_mean.cols();
  Vector mass(k);
  const std::size_t n = rows.empty() ? static_cast<std::size_t>(theta_mean.rows()) : rows.size();
  std::vector<double> column(n);
  for (Index j = 0; j < k; ++j) {
    for (std::size_t r = 0; r < n; ++r)
      column[r] = theta_mean(rows.empty() ? static_cast<Index>(r) : rows[r], j);
    mass(j) = pairwise_sum(column);
  }
  return mass;
}

LocalFit fit_row(std::span<const CountMatrix::Entry> entries, const RowMatrix& beta_log_t,
                 std::span<const double> prior_rate, std::span<const double> mass, double a,
                 std::span<double> shape, std::span<double> rate, std::span<double> phi,
                 int max_iters, double tol) {
  const auto k = static_cast<Index>(shape.size());
  std::vector<double> log_theta(shape.size());
  std::vector<double> next(shape.size());
  LocalFit result;
  while (result.iterations < max_iters) {
    for (Index j = 0; j < k; ++j) log_theta[j] = digamma(shape[j]) - std::log(rate[j]);
    std::fill(next.begin(), next.end(), a);
    for (std::size_t e = 0; e < entries.size(); ++e) {
      double* phi_row = phi.data() + e * shape.size();
      responsibility(log_theta.data(), beta_log_t.row(entries[e].col).data(), phi_row, k);
      const auto x = static_cast<double>(entries[e].count);
      for (Index j = 0; j < k; ++j) next[j] += x * phi_row[j];
    }
    double change = 0.0;
    for (Index j = 0; j < k; ++j) {
      change = std::max(change, std::abs(next[j] - shape[j]) / shape[j]);
      shape[j] = next[j];
      rate[j] = prior_rate[j] + mass[j];
    }
    ++result.iterations;
    if (change < tol) {
      result.converged = true;
      break;
    }
  }
  return result;
}

}  // namespace pfm::kernels
