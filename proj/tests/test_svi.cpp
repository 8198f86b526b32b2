#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "pfm/inference.hpp"
#include "pfm/model.hpp"
#include "pfm/special.hpp"
#include "test_support.hpp"

namespace {

using namespace pfm;

ModelConfig config_of(int k, double a, double b, std::uint64_t seed = 0) {
  ModelConfig c;
  c.n_factors = k;
  c.a = a;
  c.b = b;
  c.seed = seed;
  return c;
}

std::vector<Index> all_rows(Index n) {
  std::vector<Index> rows(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) rows[static_cast<std::size_t>(i)] = n - 1 - i;  // order must not matter
  return rows;
}

TEST(SviStep, FullBatchUnitStepEqualsBatchIteration) {
  const auto cfg = config_of(4, 0.3, 0.3, 3);
  const auto sim = sample_dataset(cfg, 50, 30, 1.0, Vector::Ones(4), 0.2, 5);
  const std::span<const double> y{sim.y.data(), 50};
  auto batch = initialize_state(sim.counts, y, cfg);
  auto svi = batch;
  SviSchedule sched;
  sched.t0 = 1.0;
  sched.kappa = 1.0;
  sched.batch_size = 50;
  sched.local_max_iters = 1;
  const auto rows = all_rows(50);
  for (int step = 0; step < 3; ++step) {
    // Re-synchronize the local state; one step from the same start is compared.
    svi = batch;
    batch_iteration(batch, sim.counts, y, cfg);
    svi_step(svi, sim.counts, y, rows, 0, sched, cfg);
    ASSERT_EQ(learning_rate(0, sched), 1.0);
    EXPECT_EQ(svi.beta, batch.beta) << "step " << step;
    EXPECT_EQ(svi.theta, batch.theta);
    EXPECT_EQ(svi.regression, batch.regression);
  }
}

TEST(SviStep, VanishingStepLeavesBetaInPlace) {
  const auto cfg = config_of(3, 0.3, 0.3, 3);
  const auto sim = sample_dataset(cfg, 30, 20, 1.0, Vector::Ones(3), 0.2, 5);
  auto s = initialize_state(sim.counts, {}, cfg);
  const auto before = s.beta;
  SviSchedule sched;
  sched.t0 = 1e300;
  sched.kappa = 1.0;
  const std::vector<Index> rows{3, 7};
  svi_step(s, sim.counts, {}, rows, 0, sched, cfg);
  for (Index k = 0; k < 3; ++k)
    for (Index d = 0; d < 20; ++d) {
      EXPECT_NEAR(s.beta.shape(k, d), before.shape(k, d), 1e-12 * before.shape(k, d));
      EXPECT_NEAR(s.beta.rate(k, d), before.rate(k, d), 1e-12 * before.rate(k, d));
    }
}

TEST(SviStep, RejectsBadBatches) {
  const auto data = test::random_counts(5, 4, 0.5, 3, 1);
  const auto cfg = config_of(2, 0.3, 0.3);
  auto s = initialize_state(data, {}, cfg);
  SviSchedule sched;
  EXPECT_THROW(svi_step(s, data, {}, std::vector<Index>{}, 0, sched, cfg), DomainError);
  EXPECT_THROW(svi_step(s, data, {}, std::vector<Index>{0, 5}, 0, sched, cfg), DomainError);
  EXPECT_THROW(svi_step(s, data, {}, std::vector<Index>{-1}, 0, sched, cfg), DomainError);
  EXPECT_THROW(svi_step(s, data, {}, std::vector<Index>{2, 2}, 0, sched, cfg), DomainError);
}

// Plain-loop replay of the stochastic step: local coordinate ascent on the
// batch rows, interpolation of beta toward the rescaled batch statistics,
// and the M-step on the batch rows.
struct Replay {
  Index n, d, k;
  double a, b;
  std::vector<std::vector<double>> x;  // dense counts
  std::vector<double> y;
  std::vector<std::vector<double>> gs, gr, ns, nr;
  double c = 1.0, sigma = 1.0;
  std::vector<double> eta;

  double elog(double s, double r) const { return digamma(s) - std::log(r); }

  void step(const std::vector<Index>& batch, double rho, int max_iters, double tol) {
    std::vector<double> beta_mass(static_cast<std::size_t>(k), 0.0);
    for (Index j = 0; j < k; ++j)
      for (Index col = 0; col < d; ++col) beta_mass[j] += ns[j][col] / nr[j][col];
    std::vector<std::vector<std::vector<double>>> phi(static_cast<std::size_t>(n));
    for (Index i : batch) {
      phi[i].assign(static_cast<std::size_t>(d), std::vector<double>(static_cast<std::size_t>(k), 0.0));
      for (int it = 0; it < max_iters; ++it) {
        std::vector<double> next(static_cast<std::size_t>(k), a);
        for (Index col = 0; col < d; ++col) {
          if (x[i][col] == 0.0) continue;
          double norm = 0.0;
          for (Index j = 0; j < k; ++j) {
            phi[i][col][j] = std::exp(elog(gs[i][j], gr[i][j]) + elog(ns[j][col], nr[j][col]));
            norm += phi[i][col][j];
          }
          for (Index j = 0; j < k; ++j) {
            phi[i][col][j] /= norm;
            next[j] += x[i][col] * phi[i][col][j];
          }
        }
        double change = 0.0;
        for (Index j = 0; j < k; ++j) {
          change = std::max(change, std::abs(next[j] - gs[i][j]) / gs[i][j]);
          gs[i][j] = next[j];
          gr[i][j] = a * c + beta_mass[j];
        }
        if (change < tol) break;
      }
    }
    const double scale = static_cast<double>(n) / static_cast<double>(batch.size());
    for (Index j = 0; j < k; ++j) {
      double mass = 0.0;
      for (Index i : batch) mass += gs[i][j] / gr[i][j];
      for (Index col = 0; col < d; ++col) {
        double sum = 0.0;
        for (Index i : batch) sum += x[i][col] * (x[i][col] > 0 ? phi[i][col][j] : 0.0);
        ns[j][col] = (1 - rho) * ns[j][col] + rho * (b + scale * sum);
        nr[j][col] = (1 - rho) * nr[j][col] + rho * (b + scale * mass);
      }
    }
    double total = 0.0;
    for (Index i : batch)
      for (Index j = 0; j < k; ++j) total += gs[i][j] / gr[i][j];
    c = static_cast<double>(batch.size() * static_cast<std::size_t>(k)) / total;
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(k, k);
    Eigen::VectorXd r = Eigen::VectorXd::Zero(k);
    double yy = 0.0;
    for (Index i : batch) {
      for (Index j = 0; j < k; ++j) {
        const double mj = gs[i][j] / gr[i][j];
        r(j) += mj * y[i];
        for (Index l = 0; l < k; ++l) m(j, l) += mj * gs[i][l] / gr[i][l];
        m(j, j) += gs[i][j] / (gr[i][j] * gr[i][j]);
      }
      yy += y[i] * y[i];
    }
    const Eigen::VectorXd e = m.inverse() * r;
    eta.assign(e.data(), e.data() + k);
    sigma = std::max((yy - r.dot(e)) / static_cast<double>(batch.size()), 1e-12);
  }
};

TEST(SviStep, TwoStepsMatchPlainLoopReplay) {
  const auto cfg = config_of(2, 0.4, 0.5, 9);
  const auto data = test::random_counts(6, 4, 0.6, 4, 17);
  const auto yv = test::random_response(6, 18);
  auto s = initialize_state(data, yv, cfg);

  Replay rp{6, 4, 2, 0.4, 0.5, {}, yv, {}, {}, {}, {}, 1.0, 1.0, {}};
  rp.x.assign(6, std::vector<double>(4, 0.0));
  for (const auto& e : data.entries()) rp.x[e.row][e.col] = static_cast<double>(e.count);
  for (Index i = 0; i < 6; ++i) {
    rp.gs.emplace_back(s.theta.shape.row(i).data(), s.theta.shape.row(i).data() + 2);
    rp.gr.emplace_back(s.theta.rate.row(i).data(), s.theta.rate.row(i).data() + 2);
  }
  for (Index j = 0; j < 2; ++j) {
    rp.ns.emplace_back(s.beta.shape.row(j).data(), s.beta.shape.row(j).data() + 4);
    rp.nr.emplace_back(s.beta.rate.row(j).data(), s.beta.rate.row(j).data() + 4);
  }

  SviSchedule sched;
  sched.t0 = 2.0;
  sched.kappa = 0.8;
  sched.batch_size = 2;
  const std::vector<std::vector<Index>> batches{{4, 1}, {0, 5}};
  for (std::size_t t = 0; t < batches.size(); ++t) {
    svi_step(s, data, yv, batches[t], static_cast<std::int64_t>(t), sched, cfg);
    auto sorted = batches[t];
    std::sort(sorted.begin(), sorted.end());
    rp.step(sorted, std::pow(2.0 + static_cast<double>(t), -0.8), sched.local_max_iters, sched.local_tol);
    for (Index j = 0; j < 2; ++j)
      for (Index col = 0; col < 4; ++col) {
        EXPECT_NEAR(s.beta.shape(j, col), rp.ns[j][col], 1e-12 * rp.ns[j][col]);
        EXPECT_NEAR(s.beta.rate(j, col), rp.nr[j][col], 1e-12 * rp.nr[j][col]);
      }
    for (Index i = 0; i < 6; ++i)
      for (Index j = 0; j < 2; ++j) EXPECT_NEAR(s.theta.shape(i, j), rp.gs[i][j], 1e-12 * rp.gs[i][j]);
    EXPECT_NEAR(s.regression.c, rp.c, 1e-12 * rp.c);
    for (Index j = 0; j < 2; ++j) EXPECT_NEAR(s.regression.eta(j), rp.eta[j], 1e-10);
    EXPECT_NEAR(s.regression.sigma, rp.sigma, 1e-10);
  }
}

TEST(SviFit, DeterministicAndTracksEpochs) {
  const auto cfg = config_of(3, 0.3, 0.3, 2);
  const auto sim = sample_dataset(cfg, 60, 30, 1.0, Vector::Ones(3), 0.2, 4);
  FitConfig fc;
  fc.mode = FitMode::Svi;
  fc.max_iters = 7;
  fc.schedule.batch_size = 6;
  const auto r1 = fit(sim.counts, {sim.y.data(), 60}, cfg, fc);
  const auto r2 = fit(sim.counts, {sim.y.data(), 60}, cfg, fc);
  EXPECT_EQ(r1.iterations, 7);
  EXPECT_EQ(r1.trace.size(), 7u);
  EXPECT_EQ(r1.state.beta, r2.state.beta);
  EXPECT_EQ(r1.state.theta, r2.state.theta);
  for (std::size_t t = 0; t < r1.trace.size(); ++t) EXPECT_EQ(r1.trace[t].elbo, r2.trace[t].elbo);
  EXPECT_EQ(r1.trace.back().elbo, elbo(sim.counts, {sim.y.data(), 60}, r1.state, cfg));
}

TEST(SviFit, DeepStackIsBatchOnly) {
  const auto data = test::random_counts(10, 5, 0.5, 3, 1);
  FitConfig fc;
  fc.mode = FitMode::Svi;
  fc.schedule.batch_size = 2;
  fc.deep.n_layers = 1;
  EXPECT_THROW(fit(data, {}, config_of(2, 0.3, 0.3), fc), DomainError);
}

}  // namespace
