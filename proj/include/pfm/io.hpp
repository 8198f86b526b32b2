#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <limits>
#include <string>

#include "pfm/inference.hpp"
#include "pfm/types.hpp"

namespace pfm::io {

// Coordinate text format: first line `N D NNZ`, then NNZ lines `i d count`,
// zero-based, whitespace separated. `#` starts a comment anywhere on a line.
CountMatrix read_counts(std::istream& in);
CountMatrix load_counts(const std::filesystem::path& path);
void write_counts(std::ostream& out, const CountMatrix& counts);
void save_counts(const std::filesystem::path& path, const CountMatrix& counts);

// One real per line. `expected_rows` < 0 accepts any length.
ResponseVector read_responses(std::istream& in, Index expected_rows = -1);
ResponseVector load_responses(const std::filesystem::path& path, Index expected_rows = -1);
void save_responses(const std::filesystem::path& path, const ResponseVector& y);

// Dense text matrix: `rows cols` then one row per line.
RowMatrix read_dense(std::istream& in);
void save_dense(const std::filesystem::path& path, const RowMatrix& m);
RowMatrix load_dense(const std::filesystem::path& path);

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  FittedModel model;
  std::int64_t iterations = 0;
  double final_elbo = std::numeric_limits<double>::quiet_NaN();

  friend bool operator==(const Checkpoint& lhs, const Checkpoint& rhs) {
    return lhs.model == rhs.model && lhs.iterations == rhs.iterations &&
           bitwise_equal(Eigen::Matrix<double, 1, 1>(lhs.final_elbo),
                         Eigen::Matrix<double, 1, 1>(rhs.final_elbo));
  }
};

Checkpoint make_checkpoint(const ModelConfig& config, const FitResult& result);

/// Text header (magic, version, dimensions) followed by a little-endian
/// binary payload holding every double bit-for-bit.
void write_checkpoint(std::ostream& out, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(std::istream& in);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// JSON with the ModelConfig and FitConfig field names:
///   {"n_factors": 5, "a": 0.3, "b": 0.3, "seed": 1, "max_iters": 500,
///    "rel_tol": 1e-6, "mode": "batch", "eval_every": 1,
///    "schedule": {"t0": 64, "kappa": 0.7, "batch_size": 50}}
/// Missing fields keep the values already in `model` and `fit`; unknown
/// fields are rejected.
void apply_config_json(const std::string& text, ModelConfig& model, FitConfig& fit);

}  // namespace pfm::io
