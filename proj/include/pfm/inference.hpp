#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "pfm/deep.hpp"
#include "pfm/types.hpp"

namespace pfm {

/// Step sizes rho_t = (t0 + t)^-kappa over mini-batches of `batch_size` rows.
/// The local step alternates phi and theta on the batch rows until the
/// relative change in shape is below `local_tol` or `local_max_iters` passes.
struct SviSchedule {
  double t0 = 64.0;
  double kappa = 0.7;
  Index batch_size = 1;
  int local_max_iters = 100;
  double local_tol = 1e-6;

  void validate(Index n_rows) const;
};

enum class FitMode { Batch, Svi };

struct FitConfig {
  int max_iters = 1000;  // iterations in batch mode, epochs in SVI mode
  double rel_tol = 1e-6;
  FitMode mode = FitMode::Batch;
  SviSchedule schedule;
  int eval_every = 1;
  MomentMode moment = MomentMode::Factorized;
  deep::DeepStackConfig deep;

  void validate(Index n_rows) const;
};

struct ElboRecord {
  int iter = 0;
  double elapsed_ms = 0.0;
  double elbo = 0.0;
};

using ElboTrace = std::vector<ElboRecord>;

// CSV `iter,elapsed_ms,elbo`. With timing off every elapsed_ms is written as
// 0 so repeated runs produce identical bytes.
void write_trace_csv(std::ostream& out, const ElboTrace& trace, bool timing = true);

struct FitResult {
  VariationalState state;
  ElboTrace trace;
  int iterations = 0;
  bool converged = false;
  Index empty_rows = 0;
  Index empty_cols = 0;
  std::vector<deep::DeepLayer> deep_layers;
};

using ProgressCallback = std::function<void(const ElboRecord&)>;

// --- single coordinate updates -------------------------------------------

/// phi_idk proportional to exp(E[ln theta_ik] + E[ln beta_kd]).
Vector update_phi(Index i, Index d, const ThetaPosterior& theta, const BetaPosterior& beta);

struct ThetaRow {
  Vector shape;
  Vector rate;
};

// shape_ik = a + sum_d x_id phi_idk, rate_ik = a c + sum_{d=1..D} E[beta_kd].
ThetaRow update_theta_row(Index i, const CountMatrix& data, const Responsibilities& phi,
                          const BetaPosterior& beta, const ModelConfig& config, double c);

// shape_kd = b + sum_i x_id phi_idk, rate_kd = b + sum_i E[theta_ik].
BetaPosterior update_beta(const CountMatrix& data, const Responsibilities& phi,
                          const ThetaPosterior& theta, const ModelConfig& config);

// --- M-step ----------------------------------------------------------------

/// c = N K / sum_ik E[theta_ik], the reciprocal of the mean factor weight.
/// `rows` restricts the average to a mini-batch.
double mstep_c(const ThetaPosterior& theta, std::span<const Index> rows = {},
               const RowMatrix& prior_scale = {});

/// Sufficient statistics of the Gaussian response given q(theta).
struct RegressionStats {
  Eigen::MatrixXd second_moment;  // sum_i E[theta_i theta_i^T]
  Vector cross;                   // sum_i E[theta_i] y_i
  double yy = 0.0;                // sum_i y_i^2
  Index n = 0;
};

RegressionStats regression_stats(const ThetaPosterior& theta, std::span<const double> y,
                                 MomentMode mode, double a, double c,
                                 std::span<const Index> rows = {});

/// eta = (sum_i E[theta_i theta_i^T])^-1 sum_i E[theta_i] y_i via Cholesky.
/// Throws NumericalError if the moment matrix is not positive definite.
Vector mstep_eta(const ThetaPosterior& theta, std::span<const double> y,
                 MomentMode mode = MomentMode::Factorized, double a = 0.0, double c = 0.0);
Vector solve_eta(const RegressionStats& stats, MomentMode mode);

inline constexpr double kSigmaFloor = 1e-12;
inline constexpr double kSigmaNegativeSlack = 1e-8;

/// sigma = (y^T y - y^T E[theta] eta) / N, floored at kSigmaFloor. Throws
/// NumericalError if the raw value is below -kSigmaNegativeSlack.
double mstep_sigma(const ThetaPosterior& theta, std::span<const double> y, const Vector& eta);
double solve_sigma(const RegressionStats& stats, const Vector& eta);

// --- drivers ---------------------------------------------------------------

double learning_rate(std::int64_t t, const SviSchedule& schedule);

/// Seeded initial state: shapes jittered above the prior shapes, rates at the
/// prior rates with c = 1, eta = 0, sigma = sample variance of y (1 when
/// unsupervised), and phi computed from that start.
VariationalState initialize_state(const CountMatrix& data, std::span<const double> y,
                                  const ModelConfig& config);

/// One batch iteration: theta from the current phi, beta, phi refresh, then
/// c, eta and sigma. The state's phi must be current on entry.
void batch_iteration(VariationalState& state, const CountMatrix& data, std::span<const double> y,
                     const ModelConfig& config, MomentMode mode = MomentMode::Factorized);

/// One stochastic step on `batch` with step index t: local phi/theta passes on
/// the batch rows, interpolation of beta toward the N/|B|-scaled batch
/// statistics with weight rho_t, then c, eta and sigma from the batch rows.
void svi_step(VariationalState& state, const CountMatrix& data, std::span<const double> y,
              std::span<const Index> batch, std::int64_t t, const SviSchedule& schedule,
              const ModelConfig& config, MomentMode mode = MomentMode::Factorized);

/// Alternates phi and theta for every row with beta held fixed, as the SVI
/// local step does, then refreshes phi for all rows.
void local_pass(VariationalState& state, const CountMatrix& data, const ModelConfig& config,
                int max_iters, double tol);

FitResult fit(const CountMatrix& data, std::span<const double> y, const ModelConfig& config,
              const FitConfig& fit_config, const ProgressCallback& progress = {});

}  // namespace pfm
