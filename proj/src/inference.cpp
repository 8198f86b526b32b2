#include "pfm/inference.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <string>

#include "pfm/kernels.hpp"
#include "pfm/model.hpp"
#include "pfm/reduce.hpp"

namespace pfm {

namespace {

std::string mode_name(MomentMode mode) {
  return mode == MomentMode::Factorized ? "factorized" : "paper-faithful";
}

Eigen::Map<const Vector> as_vector(std::span<const double> y) {
  return {y.data(), static_cast<Index>(y.size())};
}

void check_responses(const CountMatrix& data, std::span<const double> y) {
  if (!y.empty() && static_cast<Index>(y.size()) != data.n_rows())
    throw DomainError("response vector has " + std::to_string(y.size()) + " values but the count "
                      "matrix has " + std::to_string(data.n_rows()) + " rows");
}

// Name of the first parameter block holding a non-finite value, or "".
std::string first_nonfinite_block(const VariationalState& state) {
  const auto bad = [](const auto& m) { return !m.allFinite(); };
  if (bad(state.theta.shape)) return "theta.shape";
  if (bad(state.theta.rate)) return "theta.rate";
  if (bad(state.beta.shape)) return "beta.shape";
  if (bad(state.beta.rate)) return "beta.rate";
  if (bad(state.phi.phi)) return "phi";
  if (bad(state.regression.eta)) return "eta";
  if (!std::isfinite(state.regression.sigma)) return "sigma";
  if (!std::isfinite(state.regression.c)) return "c";
  if (bad(state.prior_scale)) return "deep prior scale";
  return "";
}

void mstep(VariationalState& state, std::span<const double> y, const ModelConfig& config,
           MomentMode mode, std::span<const Index> rows) {
  auto& reg = state.regression;
  reg.c = mstep_c(state.theta, rows, state.prior_scale);
  if (y.empty()) return;
  const auto stats = regression_stats(state.theta, y, mode, config.a, reg.c, rows);
  reg.eta = solve_eta(stats, mode);
  reg.sigma = solve_sigma(stats, reg.eta);
}

}  // namespace

void SviSchedule::validate(Index n_rows) const {
  if (!(t0 > 0.0)) throw DomainError("t0 must be positive, got " + std::to_string(t0));
  if (!(kappa > 0.5 && kappa <= 1.0))
    throw DomainError("kappa must lie in (0.5, 1], got " + std::to_string(kappa));
  if (batch_size < 1 || (n_rows > 0 && batch_size > n_rows))
    throw DomainError("batch_size must lie in [1, " + std::to_string(n_rows) + "], got " +
                      std::to_string(batch_size));
  if (local_max_iters < 1) throw DomainError("local_max_iters must be >= 1");
  if (!(local_tol > 0.0)) throw DomainError("local_tol must be positive");
}

void FitConfig::validate(Index n_rows) const {
  if (max_iters < 0) throw DomainError("max_iters must be >= 0");
  if (!(rel_tol > 0.0)) throw DomainError("rel_tol must be positive");
  if (eval_every < 1) throw DomainError("eval_every must be >= 1");
  if (mode == FitMode::Svi) schedule.validate(n_rows);
  if (deep.n_layers < 0) throw DomainError("deep layer count must be >= 0");
  if (deep.n_layers > 0 && mode == FitMode::Svi)
    throw DomainError("the deep stack is only available with batch fitting");
}

void write_trace_csv(std::ostream& out, const ElboTrace& trace, bool timing) {
  out << "iter,elapsed_ms,elbo\n";
  char line[96];
  for (const auto& r : trace) {
    std::snprintf(line, sizeof line, "%d,%.3f,%.17g\n", r.iter, timing ? r.elapsed_ms : 0.0,
                  r.elbo);
    out << line;
  }
}

Vector update_phi(Index i, Index d, const ThetaPosterior& theta, const BetaPosterior& beta) {
  if (i < 0 || i >= theta.n_rows() || d < 0 || d >= beta.n_cols())
    throw DomainError("update_phi: index out of range");
  const Index k = theta.n_factors();
  Vector log_theta(k);
  Vector log_beta(k);
  for (Index j = 0; j < k; ++j) {
    log_theta(j) = gamma_mean_log(theta.shape(i, j), theta.rate(i, j));
    log_beta(j) = gamma_mean_log(beta.shape(j, d), beta.rate(j, d));
  }
  Vector phi(k);
  kernels::responsibility(log_theta.data(), log_beta.data(), phi.data(), k);
  return phi;
}

ThetaRow update_theta_row(Index i, const CountMatrix& data, const Responsibilities& phi,
                          const BetaPosterior& beta, const ModelConfig& config, double c) {
  if (i < 0 || i >= data.n_rows()) throw DomainError("update_theta_row: row out of range");
  const Index k = config.n_factors;
  const auto bm = kernels::moments(beta.shape, beta.rate);
  const Vector mass = kernels::beta_mass(bm.mean);
  ThetaRow row{Vector::Constant(k, config.a), Vector(k)};
  for (Index j = 0; j < k; ++j) row.rate(j) = config.a * c + mass(j);
  for (Index e = data.row_begin(i); e < data.row_end(i); ++e) {
    const auto x = static_cast<double>(data.entry(e).count);
    for (Index j = 0; j < k; ++j) row.shape(j) += x * phi.phi(e, j);
  }
  return row;
}

BetaPosterior update_beta(const CountMatrix& data, const Responsibilities& phi,
                          const ThetaPosterior& theta, const ModelConfig& config) {
  const Index k = config.n_factors;
  const RowMatrix sums = kernels::expected_counts_by_column(data, phi.phi, k);
  const auto tm = kernels::moments(theta.shape, theta.rate);
  const Vector mass = kernels::theta_mass(tm.mean);
  BetaPosterior out{(sums.array() + config.b).matrix(), RowMatrix(k, data.n_cols())};
  // The rate does not depend on d.
  for (Index j = 0; j < k; ++j) out.rate.row(j).setConstant(config.b + mass(j));
  return out;
}

double mstep_c(const ThetaPosterior& theta, std::span<const Index> rows,
               const RowMatrix& prior_scale) {
  const Index k = theta.n_factors();
  const std::size_t n = rows.empty() ? static_cast<std::size_t>(theta.n_rows()) : rows.size();
  if (n == 0 || k == 0) throw DomainError("mstep_c: needs at least one row and one factor");
  std::vector<double> row_sums(n);
  for (std::size_t r = 0; r < n; ++r) {
    const Index i = rows.empty() ? static_cast<Index>(r) : rows[r];
    double s = 0.0;
    for (Index j = 0; j < k; ++j) {
      const double mean = theta.shape(i, j) / theta.rate(i, j);
      s += prior_scale.size() == 0 ? mean : mean / prior_scale(i, j);
    }
    row_sums[r] = s;
  }
  const double total = pairwise_sum(row_sums);
  if (!(total > 0.0)) throw NumericalError("mstep_c: mean factor weight is not positive");
  return static_cast<double>(n) * static_cast<double>(k) / total;
}

RegressionStats regression_stats(const ThetaPosterior& theta, std::span<const double> y,
                                 MomentMode mode, double a, double c,
                                 std::span<const Index> rows) {
  const Index k = theta.n_factors();
  if (static_cast<Index>(y.size()) != theta.n_rows())
    throw DomainError("regression: response length does not match the number of rows");
  RegressionStats stats{Eigen::MatrixXd::Zero(k, k), Vector::Zero(k), 0.0, 0};
  const std::size_t n = rows.empty() ? static_cast<std::size_t>(theta.n_rows()) : rows.size();
  for (std::size_t r = 0; r < n; ++r) {
    const Index i = rows.empty() ? static_cast<Index>(r) : rows[r];
    const double yi = y[static_cast<std::size_t>(i)];
    stats.second_moment += theta_second_moment(theta, i, mode, a, c);
    for (Index j = 0; j < k; ++j) stats.cross(j) += theta.shape(i, j) / theta.rate(i, j) * yi;
    stats.yy += yi * yi;
  }
  stats.n = static_cast<Index>(n);
  return stats;
}

Vector solve_eta(const RegressionStats& stats, MomentMode mode) {
  Eigen::LLT<Eigen::MatrixXd> llt(stats.second_moment);
  if (llt.info() != Eigen::Success)
    throw NumericalError("mstep_eta: E[theta^T theta] is not positive definite (" +
                         mode_name(mode) + " moment mode)");
  return llt.solve(stats.cross);
}

Vector mstep_eta(const ThetaPosterior& theta, std::span<const double> y, MomentMode mode,
                 double a, double c) {
  return solve_eta(regression_stats(theta, y, mode, a, c), mode);
}

double solve_sigma(const RegressionStats& stats, const Vector& eta) {
  const double raw = (stats.yy - stats.cross.dot(eta)) / static_cast<double>(stats.n);
  if (raw < -kSigmaNegativeSlack)
    throw NumericalError("mstep_sigma: residual variance is negative (" + std::to_string(raw) +
                         "); eta is inconsistent with the moment matrix");
  return std::max(raw, kSigmaFloor);
}

double mstep_sigma(const ThetaPosterior& theta, std::span<const double> y, const Vector& eta) {
  const Index k = theta.n_factors();
  if (static_cast<Index>(y.size()) != theta.n_rows() || eta.size() != k)
    throw DomainError("mstep_sigma: dimension mismatch");
  RegressionStats stats{Eigen::MatrixXd(), Vector::Zero(k), 0.0, theta.n_rows()};
  for (Index i = 0; i < theta.n_rows(); ++i) {
    const double yi = y[static_cast<std::size_t>(i)];
    for (Index j = 0; j < k; ++j) stats.cross(j) += theta.shape(i, j) / theta.rate(i, j) * yi;
    stats.yy += yi * yi;
  }
  return solve_sigma(stats, eta);
}

double learning_rate(std::int64_t t, const SviSchedule& schedule) {
  return std::pow(schedule.t0 + static_cast<double>(t), -schedule.kappa);
}

VariationalState initialize_state(const CountMatrix& data, std::span<const double> y,
                                  const ModelConfig& config) {
  config.validate();
  check_responses(data, y);
  const Index n = data.n_rows();
  const Index d = data.n_cols();
  const Index k = config.n_factors;
  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> theta_jitter(0.0, 0.1 * config.a);
  std::uniform_real_distribution<double> beta_jitter(0.0, 0.1 * config.a);

  VariationalState state;
  state.theta.shape.resize(n, k);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < k; ++j) state.theta.shape(i, j) = config.a + theta_jitter(rng);
  state.theta.rate = RowMatrix::Constant(n, k, config.a);
  state.beta.shape.resize(k, d);
  for (Index j = 0; j < k; ++j)
    for (Index c = 0; c < d; ++c) state.beta.shape(j, c) = config.b + beta_jitter(rng);
  state.beta.rate = RowMatrix::Constant(k, d, config.b);

  state.regression.eta = Vector::Zero(k);
  state.regression.c = 1.0;
  state.regression.sigma = 1.0;
  if (!y.empty()) {
    const auto yv = as_vector(y);
    const double mean = yv.mean();
    const double var = (yv.array() - mean).square().mean();
    state.regression.sigma = std::max(var, kSigmaFloor);
  }

  state.phi.phi.resize(data.nnz(), k);
  const auto tm = kernels::moments(state.theta.shape, state.theta.rate);
  const auto bm = kernels::moments(state.beta.shape, state.beta.rate);
  const RowMatrix beta_log_t = bm.mean_log.transpose();
  kernels::refresh_phi(data, tm.mean_log, beta_log_t, state.phi.phi);
  return state;
}

void batch_iteration(VariationalState& state, const CountMatrix& data, std::span<const double> y,
                     const ModelConfig& config, MomentMode mode) {
  const Index k = config.n_factors;
  auto bm = kernels::moments(state.beta.shape, state.beta.rate);
  kernels::update_theta(data, state.phi.phi, kernels::beta_mass(bm.mean), config.a,
                        state.regression.c, state.prior_scale, state.theta);

  const auto tm = kernels::moments(state.theta.shape, state.theta.rate);
  const RowMatrix sums = kernels::expected_counts_by_column(data, state.phi.phi, k);
  const Vector mass = kernels::theta_mass(tm.mean);
  for (Index j = 0; j < k; ++j) {
    state.beta.shape.row(j) = (sums.row(j).array() + config.b).matrix();
    state.beta.rate.row(j).setConstant(config.b + mass(j));
  }

  bm = kernels::moments(state.beta.shape, state.beta.rate);
  const RowMatrix beta_log_t = bm.mean_log.transpose();
  kernels::refresh_phi(data, tm.mean_log, beta_log_t, state.phi.phi);

  mstep(state, y, config, mode, {});
}

void svi_step(VariationalState& state, const CountMatrix& data, std::span<const double> y,
              std::span<const Index> batch, std::int64_t t, const SviSchedule& schedule,
              const ModelConfig& config, MomentMode mode) {
  const Index n = data.n_rows();
  const Index k = config.n_factors;
  if (batch.empty()) throw DomainError("svi_step: empty batch");
  std::vector<Index> rows(batch.begin(), batch.end());
  std::sort(rows.begin(), rows.end());
  std::vector<char> in_batch(static_cast<std::size_t>(n), 0);
  for (Index i : rows) {
    if (i < 0 || i >= n)
      throw DomainError("svi_step: batch row " + std::to_string(i) + " out of range [0, " +
                        std::to_string(n) + ")");
    if (in_batch[static_cast<std::size_t>(i)])
      throw DomainError("svi_step: batch row " + std::to_string(i) + " repeated");
    in_batch[static_cast<std::size_t>(i)] = 1;
  }

  // Local step.
  auto bm = kernels::moments(state.beta.shape, state.beta.rate);
  const Vector beta_mass = kernels::beta_mass(bm.mean);
  const RowMatrix beta_log_t = bm.mean_log.transpose();
  const auto batch_rows = static_cast<Index>(rows.size());
#pragma omp parallel for schedule(dynamic, 4)
  for (Index r = 0; r < batch_rows; ++r) {
    const Index i = rows[static_cast<std::size_t>(r)];
    std::vector<double> prior(static_cast<std::size_t>(k));
    for (Index j = 0; j < k; ++j)
      prior[static_cast<std::size_t>(j)] =
          kernels::theta_prior_rate(config.a, state.regression.c, state.prior_scale, i, j);
    const auto ku = static_cast<std::size_t>(k);
    kernels::fit_row(data.row(i), beta_log_t, prior,
                     {beta_mass.data(), ku}, config.a, {state.theta.shape.row(i).data(), ku},
                     {state.theta.rate.row(i).data(), ku},
                     {state.phi.phi.row(data.row_begin(i)).data(),
                      static_cast<std::size_t>(data.row_end(i) - data.row_begin(i)) * ku},
                     schedule.local_max_iters, schedule.local_tol);
  }

  // Global step.
  const auto tm = kernels::moments(state.theta.shape, state.theta.rate);
  const RowMatrix sums = kernels::expected_counts_by_column(data, state.phi.phi, k, in_batch);
  const Vector mass = kernels::theta_mass(tm.mean, rows);
  const double scale = static_cast<double>(n) / static_cast<double>(rows.size());
  const double rho = learning_rate(t, schedule);
  for (Index j = 0; j < k; ++j) {
    const double target_rate = config.b + scale * mass(j);
    for (Index d = 0; d < data.n_cols(); ++d) {
      const double target_shape = config.b + scale * sums(j, d);
      state.beta.shape(j, d) = (1.0 - rho) * state.beta.shape(j, d) + rho * target_shape;
      state.beta.rate(j, d) = (1.0 - rho) * state.beta.rate(j, d) + rho * target_rate;
    }
  }

  mstep(state, y, config, mode, rows);
}

void local_pass(VariationalState& state, const CountMatrix& data, const ModelConfig& config,
                int max_iters, double tol) {
  const Index k = config.n_factors;
  const auto ku = static_cast<std::size_t>(k);
  auto bm = kernels::moments(state.beta.shape, state.beta.rate);
  const Vector beta_mass = kernels::beta_mass(bm.mean);
  const RowMatrix beta_log_t = bm.mean_log.transpose();
  const Index n = data.n_rows();
#pragma omp parallel for schedule(dynamic, 4)
  for (Index i = 0; i < n; ++i) {
    std::vector<double> prior(ku);
    for (Index j = 0; j < k; ++j)
      prior[static_cast<std::size_t>(j)] =
          kernels::theta_prior_rate(config.a, state.regression.c, state.prior_scale, i, j);
    kernels::fit_row(data.row(i), beta_log_t, prior, {beta_mass.data(), ku}, config.a,
                     {state.theta.shape.row(i).data(), ku}, {state.theta.rate.row(i).data(), ku},
                     {state.phi.phi.row(data.row_begin(i)).data(),
                      static_cast<std::size_t>(data.row_end(i) - data.row_begin(i)) * ku},
                     max_iters, tol);
  }
  const auto tm = kernels::moments(state.theta.shape, state.theta.rate);
  kernels::refresh_phi(data, tm.mean_log, beta_log_t, state.phi.phi);
}

FitResult fit(const CountMatrix& data, std::span<const double> y, const ModelConfig& config,
              const FitConfig& fit_config, const ProgressCallback& progress) {
  config.validate();
  fit_config.validate(data.n_rows());
  check_responses(data, y);

  FitResult result;
  result.state = initialize_state(data, y, config);
  for (Index i = 0; i < data.n_rows(); ++i)
    if (data.row_begin(i) == data.row_end(i)) ++result.empty_rows;
  for (Index d = 0; d < data.n_cols(); ++d)
    if (data.column(d).empty()) ++result.empty_cols;

  const bool deep_enabled = fit_config.deep.n_layers > 0;
  if (deep_enabled) {
    result.deep_layers =
        deep::init_layers(fit_config.deep, data.n_rows(), config.n_factors, config.seed);
    result.state.prior_scale = deep::theta_prior_scale(result.deep_layers);
  }
  if (fit_config.max_iters == 0) return result;

  auto& state = result.state;
  const auto start = std::chrono::steady_clock::now();
  double previous = std::numeric_limits<double>::quiet_NaN();

  // Evaluates the bound, appends it to the trace and reports whether the
  // relative change since the previous evaluation is below tolerance.
  const auto record = [&](int iter, const VariationalState& evaluated) {
    const double value = elbo(data, y, evaluated, config, fit_config.moment);
    if (!std::isfinite(value)) {
      const std::string block = first_nonfinite_block(evaluated);
      throw NumericalError("non-finite ELBO at iteration " + std::to_string(iter) +
                           (block.empty() ? std::string("; all parameter blocks are finite")
                                          : "; first offending block: " + block));
    }
    const double ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
            .count();
    result.trace.push_back({iter, ms, value});
    if (progress) progress(result.trace.back());
    const bool small =
        std::isfinite(previous) && std::abs(value - previous) < fit_config.rel_tol * std::abs(value);
    previous = value;
    return small;
  };

  if (fit_config.mode == FitMode::Batch) {
    for (int it = 1; it <= fit_config.max_iters; ++it) {
      batch_iteration(state, data, y, config, fit_config.moment);
      if (deep_enabled) {
        const auto summary = deep::summarize(state.theta, config.a, state.regression.c);
        auto step = deep::deep_grad_step(result.deep_layers, summary, fit_config.deep,
                                         fit_config.deep.step_size, fit_config.deep.n_mc_samples,
                                         config.seed + 0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(it));
        if (step.accepted) {
          result.deep_layers = std::move(step.layers);
          state.prior_scale = deep::theta_prior_scale(result.deep_layers);
        }
      }
      result.iterations = it;
      if (it % fit_config.eval_every == 0 || it == fit_config.max_iters) {
        if (record(it, state)) {
          result.converged = true;
          break;
        }
      }
    }
    return result;
  }

  const Index n = data.n_rows();
  const Index batch_size = fit_config.schedule.batch_size;
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::mt19937_64 shuffle_rng(config.seed ^ 0x5DEECE66DULL);
  std::int64_t t = 0;
  for (int epoch = 1; epoch <= fit_config.max_iters; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (Index begin = 0; begin < n; begin += batch_size) {
      const Index end = std::min(n, begin + batch_size);
      svi_step(state, data, y,
               std::span<const Index>(order).subspan(static_cast<std::size_t>(begin),
                                                     static_cast<std::size_t>(end - begin)),
               t++, fit_config.schedule, config, fit_config.moment);
    }
    result.iterations = epoch;
    const bool last = epoch == fit_config.max_iters;
    if (epoch % fit_config.eval_every == 0 || last) {
      // Rows visited early in the epoch hold stale local parameters; evaluate
      // with every row refit against the current beta.
      VariationalState evaluated = state;
      local_pass(evaluated, data, config, fit_config.schedule.local_max_iters,
                 fit_config.schedule.local_tol);
      result.converged = record(epoch, evaluated);
      if (last) state = std::move(evaluated);
    }
  }
  return result;
}

}  // namespace pfm
