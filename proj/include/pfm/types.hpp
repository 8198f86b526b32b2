#pragma once

#include <bit>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace pfm {

using Index = Eigen::Index;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

// Response values y_i, one per row of the count matrix.
using ResponseVector = Eigen::VectorXd;

// Same shape and bit-identical coefficients.
template <typename A, typename B>
bool bitwise_equal(const Eigen::DenseBase<A>& lhs, const Eigen::DenseBase<B>& rhs) {
  if (lhs.rows() != rhs.rows() || lhs.cols() != rhs.cols()) return false;
  for (Index r = 0; r < lhs.rows(); ++r)
    for (Index c = 0; c < lhs.cols(); ++c) {
      const double x = lhs(r, c);
      const double y = rhs(r, c);
      if (std::bit_cast<std::uint64_t>(x) != std::bit_cast<std::uint64_t>(y)) return false;
    }
  return true;
}

/// Raised when an argument lies outside a function's mathematical domain or
/// violates a container invariant.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Raised when a fit produces non-finite or numerically inconsistent values.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised by the readers in io.hpp for malformed or truncated input.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  int n_factors = 5;
  double a = 0.3;  // theta shape
  double b = 0.3;  // beta shape and rate
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// How E[theta_i theta_i^T] is evaluated in the regression M-step.
enum class MomentMode {
  // Mean outer product plus the Gamma posterior variance on the diagonal.
  Factorized,
  // 1/K^2 prefactor with a 1/(a c^2) diagonal offset, kept for comparison.
  PaperFaithful,
};

/// Sparse N x D matrix of positive integer counts. Entries are kept sorted by
/// (row, col); a column index gives row-ordered access per column.
class CountMatrix {
 public:
  struct Entry {
    Index row;
    Index col;
    std::int64_t count;

    friend bool operator==(const Entry&, const Entry&) = default;
  };

  CountMatrix() = default;
  // Validates indices and counts and rejects duplicate (row, col) pairs.
  CountMatrix(Index n_rows, Index n_cols, std::vector<Entry> entries);

  Index n_rows() const { return n_rows_; }
  Index n_cols() const { return n_cols_; }
  Index nnz() const { return static_cast<Index>(entries_.size()); }

  std::span<const Entry> entries() const { return entries_; }
  const Entry& entry(Index e) const { return entries_[static_cast<std::size_t>(e)]; }

  // Offset of the first entry of row i in entries().
  Index row_begin(Index i) const { return row_ptr_[static_cast<std::size_t>(i)]; }
  Index row_end(Index i) const { return row_ptr_[static_cast<std::size_t>(i) + 1]; }
  std::span<const Entry> row(Index i) const;

  // Entry offsets of column d, ascending by row.
  std::span<const Index> column(Index d) const;

  friend bool operator==(const CountMatrix& lhs, const CountMatrix& rhs) {
    return lhs.n_rows_ == rhs.n_rows_ && lhs.n_cols_ == rhs.n_cols_ &&
           lhs.entries_ == rhs.entries_;
  }

 private:
  Index n_rows_ = 0;
  Index n_cols_ = 0;
  std::vector<Entry> entries_;
  std::vector<Index> row_ptr_{0};
  std::vector<Index> col_ptr_{0};
  std::vector<Index> col_entries_;
};

// q(theta_ik) = Gamma(shape_ik, rate_ik), N x K.
struct ThetaPosterior {
  RowMatrix shape;
  RowMatrix rate;

  Index n_rows() const { return shape.rows(); }
  Index n_factors() const { return shape.cols(); }
  friend bool operator==(const ThetaPosterior& lhs, const ThetaPosterior& rhs) {
    return bitwise_equal(lhs.shape, rhs.shape) && bitwise_equal(lhs.rate, rhs.rate);
  }
};

// q(beta_kd) = Gamma(shape_kd, rate_kd), K x D.
struct BetaPosterior {
  RowMatrix shape;
  RowMatrix rate;

  Index n_factors() const { return shape.rows(); }
  Index n_cols() const { return shape.cols(); }
  friend bool operator==(const BetaPosterior& lhs, const BetaPosterior& rhs) {
    return bitwise_equal(lhs.shape, rhs.shape) && bitwise_equal(lhs.rate, rhs.rate);
  }
};

/// Multinomial responsibilities, one length-K simplex row per stored nonzero
/// in CountMatrix::entries() order. The auxiliary counts z_idk are never
/// materialized; their expectation is count * phi(e, k).
struct Responsibilities {
  RowMatrix phi;
};

struct RegressionParams {
  Vector eta;          // response weights, length K
  double sigma = 1.0;  // response variance
  double c = 1.0;      // theta prior scale; prior rate is a * c

  friend bool operator==(const RegressionParams& lhs, const RegressionParams& rhs) {
    return bitwise_equal(lhs.eta, rhs.eta) &&
           std::bit_cast<std::uint64_t>(lhs.sigma) == std::bit_cast<std::uint64_t>(rhs.sigma) &&
           std::bit_cast<std::uint64_t>(lhs.c) == std::bit_cast<std::uint64_t>(rhs.c);
  }
};

/// Everything the coordinate-ascent updates touch.
struct VariationalState {
  ThetaPosterior theta;
  BetaPosterior beta;
  Responsibilities phi;
  RegressionParams regression;
  // Optional N x K multiplier on the theta prior mean, set by the deep stack.
  // Empty means the plain Gamma(a, a c) prior.
  RowMatrix prior_scale;
};

/// The parts of a fit that prediction and checkpoints need.
struct FittedModel {
  ModelConfig config;
  RegressionParams regression;
  ThetaPosterior theta;
  BetaPosterior beta;

  friend bool operator==(const FittedModel&, const FittedModel&) = default;
};

}  // namespace pfm
