#include "pfm/predict.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "pfm/kernels.hpp"
#include "pfm/special.hpp"

namespace pfm {

namespace {

void check_column(Index d, Index n_cols) {
  if (d < 0 || d >= n_cols)
    throw DomainError("query column " + std::to_string(d) + " out of range [0, " +
                      std::to_string(n_cols) + ")");
}

}  // namespace

Query Query::full_row(Index n_cols, std::vector<std::pair<Index, std::int64_t>> nonzeros) {
  Query q;
  q.n_cols_ = n_cols;
  q.full_row_ = true;
  q.observed_.resize(static_cast<std::size_t>(n_cols));
  for (Index d = 0; d < n_cols; ++d) q.observed_[static_cast<std::size_t>(d)] = d;
  std::sort(nonzeros.begin(), nonzeros.end());
  for (std::size_t e = 0; e < nonzeros.size(); ++e) {
    const auto [col, count] = nonzeros[e];
    check_column(col, n_cols);
    if (count < 0) throw DomainError("query counts must be nonnegative");
    if (e > 0 && nonzeros[e - 1].first == col)
      throw DomainError("query column " + std::to_string(col) + " repeated");
    if (count > 0) q.nonzeros_.push_back({0, col, count});
  }
  return q;
}

Query Query::subset(Index n_cols, std::vector<std::pair<Index, std::int64_t>> observed) {
  Query q;
  q.n_cols_ = n_cols;
  std::sort(observed.begin(), observed.end());
  for (std::size_t e = 0; e < observed.size(); ++e) {
    const auto [col, count] = observed[e];
    check_column(col, n_cols);
    if (count < 0) throw DomainError("query counts must be nonnegative");
    if (e > 0 && observed[e - 1].first == col)
      throw DomainError("query column " + std::to_string(col) + " repeated");
    q.observed_.push_back(col);
    if (count > 0) q.nonzeros_.push_back({0, col, count});
  }
  return q;
}

bool Query::is_observed(Index d) const {
  return full_row_ ? (d >= 0 && d < n_cols_)
                   : std::binary_search(observed_.begin(), observed_.end(), d);
}

FoldInResult fold_in(const Query& query, const BetaPosterior& beta, const ModelConfig& config,
                     double c, double tol, int max_iters) {
  const Index k = config.n_factors;
  if (beta.n_factors() != k)
    throw DomainError("fold_in: model has " + std::to_string(beta.n_factors()) +
                      " factors but the config says " + std::to_string(k));
  if (query.n_cols() != beta.n_cols())
    throw DomainError("fold_in: query has " + std::to_string(query.n_cols()) +
                      " columns but the model has " + std::to_string(beta.n_cols()));

  FoldInResult out{Vector::Constant(k, config.a), Vector::Constant(k, config.a * c), 0, true,
                   false};
  if (query.observed().empty()) {
    out.prior_only = true;
    return out;
  }

  const auto bm = kernels::moments(beta.shape, beta.rate);
  const RowMatrix beta_log_t = bm.mean_log.transpose();
  std::vector<double> mass(static_cast<std::size_t>(k), 0.0);
  if (query.is_full_row()) {
    const Vector full = kernels::beta_mass(bm.mean);
    for (Index j = 0; j < k; ++j) mass[static_cast<std::size_t>(j)] = full(j);
  } else {
    for (Index j = 0; j < k; ++j) {
      double s = 0.0;
      for (Index d : query.observed()) s += bm.mean(j, d);
      mass[static_cast<std::size_t>(j)] = s;
    }
  }
  const std::vector<double> prior(static_cast<std::size_t>(k), config.a * c);
  std::vector<double> phi(query.nonzeros().size() * static_cast<std::size_t>(k));
  const auto ku = static_cast<std::size_t>(k);
  const auto fit = kernels::fit_row(query.nonzeros(), beta_log_t, prior, mass, config.a,
                                    {out.shape.data(), ku}, {out.rate.data(), ku}, phi,
                                    max_iters, tol);
  out.iterations = fit.iterations;
  out.converged = fit.converged;
  return out;
}

double predict_response(const Vector& theta_mean, const Vector& eta) {
  if (theta_mean.size() != eta.size())
    throw DomainError("predict_response: theta has " + std::to_string(theta_mean.size()) +
                      " factors but eta has " + std::to_string(eta.size()));
  return theta_mean.dot(eta);
}

std::vector<std::pair<Index, double>> expected_unobserved(const Vector& theta_mean,
                                                          const BetaPosterior& beta,
                                                          std::span<const Index> observed) {
  if (theta_mean.size() != beta.n_factors())
    throw DomainError("expected_unobserved: factor count mismatch");
  std::vector<std::pair<Index, double>> out;
  std::size_t next = 0;
  for (Index d = 0; d < beta.n_cols(); ++d) {
    while (next < observed.size() && observed[next] < d) ++next;
    if (next < observed.size() && observed[next] == d) continue;
    double rate = 0.0;
    for (Index k = 0; k < beta.n_factors(); ++k)
      rate += theta_mean(k) * beta.shape(k, d) / beta.rate(k, d);
    out.emplace_back(d, rate);
  }
  return out;
}

QueryResult run_query(const Query& query, const FittedModel& model) {
  const auto folded = fold_in(query, model.beta, model.config, model.regression.c);
  QueryResult result;
  result.theta_mean = folded.mean();
  result.prior_only = folded.prior_only;
  result.predicted_response = predict_response(result.theta_mean, model.regression.eta);
  result.expected_counts = expected_unobserved(result.theta_mean, model.beta, query.observed());
  return result;
}

Rankings rank_related(const QueryResult& result, const FittedModel& model, std::size_t top_n) {
  const auto by_score = [](const Ranked& l, const Ranked& r) { return l.score > r.score; };
  Rankings out;
  for (const auto& [col, value] : result.expected_counts) out.features.push_back({col, value});
  std::stable_sort(out.features.begin(), out.features.end(), by_score);
  if (out.features.size() > top_n) out.features.resize(top_n);

  const Vector& q = result.theta_mean;
  const double q_norm = q.norm();
  for (Index i = 0; i < model.theta.n_rows(); ++i) {
    const Vector row = model.theta.shape.row(i).cwiseQuotient(model.theta.rate.row(i)).transpose();
    const double denom = q_norm * row.norm();
    out.instances.push_back({i, denom > 0.0 ? q.dot(row) / denom : 0.0});
  }
  std::stable_sort(out.instances.begin(), out.instances.end(), by_score);
  if (out.instances.size() > top_n) out.instances.resize(top_n);
  return out;
}

double poisson_log_pmf(std::int64_t x, double mu) {
  if (x == 0) return -mu;
  return static_cast<double>(x) * std::log(mu) - mu - log_factorial(x);
}

HeldOutScore evaluate_heldout(const CountMatrix& data, std::span<const double> y,
                              const FittedModel& model, const std::vector<bool>& fold_in_cols) {
  const Index d_cols = data.n_cols();
  if (d_cols != model.beta.n_cols())
    throw DomainError("evaluate: data has " + std::to_string(d_cols) +
                      " columns but the model has " + std::to_string(model.beta.n_cols()));
  if (static_cast<Index>(fold_in_cols.size()) != d_cols)
    throw DomainError("evaluate: fold-in mask length does not match the column count");
  if (!y.empty() && static_cast<Index>(y.size()) != data.n_rows())
    throw DomainError("evaluate: response length does not match the row count");
  const bool all_observed = std::all_of(fold_in_cols.begin(), fold_in_cols.end(),
                                        [](bool b) { return b; });

  const auto bm = kernels::moments(model.beta.shape, model.beta.rate);
  double loglik = 0.0;
  double sq_err = 0.0;
  Index scored = 0;
  for (Index i = 0; i < data.n_rows(); ++i) {
    std::vector<std::int64_t> dense(static_cast<std::size_t>(d_cols), 0);
    for (const auto& e : data.row(i)) dense[static_cast<std::size_t>(e.col)] = e.count;
    std::vector<std::pair<Index, std::int64_t>> observed;
    for (Index d = 0; d < d_cols; ++d)
      if (fold_in_cols[static_cast<std::size_t>(d)])
        observed.emplace_back(d, dense[static_cast<std::size_t>(d)]);
    const Query q = all_observed ? Query::full_row(d_cols, std::move(observed))
                                 : Query::subset(d_cols, std::move(observed));
    const Vector mean = fold_in(q, model.beta, model.config, model.regression.c).mean();
    for (Index d = 0; d < d_cols; ++d) {
      if (!all_observed && fold_in_cols[static_cast<std::size_t>(d)]) continue;
      const double mu = mean.dot(bm.mean.col(d));
      loglik += poisson_log_pmf(dense[static_cast<std::size_t>(d)], mu);
      ++scored;
    }
    if (!y.empty()) {
      const double err = y[static_cast<std::size_t>(i)] - predict_response(mean, model.regression.eta);
      sq_err += err * err;
    }
  }
  HeldOutScore out;
  out.scored_cells = scored;
  out.mean_poisson_loglik = scored > 0 ? loglik / static_cast<double>(scored) : 0.0;
  out.rmse = y.empty() || data.n_rows() == 0
                 ? std::numeric_limits<double>::quiet_NaN()
                 : std::sqrt(sq_err / static_cast<double>(data.n_rows()));
  return out;
}

}  // namespace pfm
