#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "pfm/types.hpp"

namespace pfm {

/// A new instance: either a full count row (every column observed) or
/// counts on an observed feature subset s.
class Query {
 public:
  // Nonzero (col, count) pairs; every other column is an observed zero.
  static Query full_row(Index n_cols, std::vector<std::pair<Index, std::int64_t>> nonzeros);
  // Counts (possibly zero) on the listed columns; the rest are unobserved.
  static Query subset(Index n_cols, std::vector<std::pair<Index, std::int64_t>> observed);

  Index n_cols() const { return n_cols_; }
  bool is_full_row() const { return full_row_; }
  // Sorted observed columns.
  const std::vector<Index>& observed() const { return observed_; }
  // Observed nonzeros, sorted by column, as row-0 entries.
  std::span<const CountMatrix::Entry> nonzeros() const { return nonzeros_; }
  bool is_observed(Index d) const;

 private:
  Index n_cols_ = 0;
  bool full_row_ = false;
  std::vector<Index> observed_;
  std::vector<CountMatrix::Entry> nonzeros_;
};

struct FoldInResult {
  Vector shape;
  Vector rate;
  int iterations = 0;
  bool converged = false;
  // Set when nothing was observed and the prior Gamma(a, a c) is returned.
  bool prior_only = false;

  Vector mean() const { return shape.cwiseQuotient(rate); }
};

inline constexpr double kFoldInTol = 1e-8;
inline constexpr int kFoldInMaxIters = 500;

/// Infers q(theta) for a query with beta held at its fitted posterior. The
/// rate sums E[beta_kd] over observed columns only. Deterministic.
FoldInResult fold_in(const Query& query, const BetaPosterior& beta, const ModelConfig& config,
                     double c, double tol = kFoldInTol, int max_iters = kFoldInMaxIters);

// E[theta]^T eta.
double predict_response(const Vector& theta_mean, const Vector& eta);

/// sum_k E[theta_k] E[beta_kd] for each column outside `observed` (sorted),
/// ascending by column.
std::vector<std::pair<Index, double>> expected_unobserved(const Vector& theta_mean,
                                                          const BetaPosterior& beta,
                                                          std::span<const Index> observed);

struct QueryResult {
  Vector theta_mean;
  double predicted_response = 0.0;
  std::vector<std::pair<Index, double>> expected_counts;  // unobserved columns
  bool prior_only = false;
};

QueryResult run_query(const Query& query, const FittedModel& model);

struct Ranked {
  Index index = 0;
  double score = 0.0;
};

struct Rankings {
  std::vector<Ranked> features;   // by expected count, descending
  std::vector<Ranked> instances;  // training rows by cosine similarity of E[theta]
};

// Stable: ties keep ascending index order. Lists are truncated to top_n.
Rankings rank_related(const QueryResult& result, const FittedModel& model, std::size_t top_n);

struct HeldOutScore {
  double mean_poisson_loglik = 0.0;  // per scored cell
  double rmse = 0.0;                 // NaN without responses
  Index scored_cells = 0;
};

/// Folds in each row of `data` from the columns marked in `fold_in_cols` and
/// scores the remaining columns by Poisson log-likelihood under the plug-in
/// rate; when every column is marked, all columns are scored. `y` empty skips
/// the RMSE.
HeldOutScore evaluate_heldout(const CountMatrix& data, std::span<const double> y,
                              const FittedModel& model, const std::vector<bool>& fold_in_cols);

// Poisson log-likelihood of a count under rate mu.
double poisson_log_pmf(std::int64_t x, double mu);

}  // namespace pfm
