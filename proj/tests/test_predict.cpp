#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pfm/inference.hpp"
#include "pfm/kernels.hpp"
#include "pfm/model.hpp"
#include "pfm/predict.hpp"
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

FittedModel fitted(const ModelConfig& cfg, const VariationalState& s) {
  return {cfg, s.regression, s.theta, s.beta};
}

TEST(FoldIn, SingleCellClosedForm) {
  const auto cfg = config_of(1, 0.3, 0.3);
  BetaPosterior beta{RowMatrix::Constant(1, 1, 2.0), RowMatrix::Constant(1, 1, 2.0)};
  const double c = 1.5;
  const auto r = fold_in(Query::full_row(1, {{0, 5}}), beta, cfg, c);
  EXPECT_TRUE(r.converged);
  EXPECT_FALSE(r.prior_only);
  EXPECT_NEAR(r.mean()(0), (0.3 + 5.0) / (0.3 * c + 1.0), 1e-12);
}

TEST(FoldIn, AllZeroRowIsPriorShrunkByBetaMass) {
  const auto data = test::random_counts(4, 6, 0.5, 3, 2);
  const auto s = test::random_state(data, 3, 3);
  const auto cfg = config_of(3, 0.3, 0.3);
  const double c = 0.7;
  const auto r = fold_in(Query::full_row(6, {}), s.beta, cfg, c);
  for (Index k = 0; k < 3; ++k) {
    double mass = 0.0;
    for (Index d = 0; d < 6; ++d) mass += s.beta.shape(k, d) / s.beta.rate(k, d);
    EXPECT_NEAR(r.mean()(k), 0.3 / (0.3 * c + mass), 1e-14);
  }
}

TEST(FoldIn, EmptySubsetReturnsThePrior) {
  const auto data = test::random_counts(4, 6, 0.5, 3, 2);
  const auto s = test::random_state(data, 2, 3);
  const auto r = fold_in(Query::subset(6, {}), s.beta, config_of(2, 0.4, 0.3), 2.0);
  EXPECT_TRUE(r.prior_only);
  EXPECT_EQ(r.shape(0), 0.4);
  EXPECT_EQ(r.rate(1), 0.8);
}

TEST(FoldIn, SubsetRateUsesObservedColumnsOnly) {
  const auto data = test::random_counts(4, 6, 0.5, 3, 2);
  const auto s = test::random_state(data, 2, 3);
  const auto r = fold_in(Query::subset(6, {{1, 0}, {4, 2}}), s.beta, config_of(2, 0.4, 0.3), 2.0);
  for (Index k = 0; k < 2; ++k)
    EXPECT_NEAR(r.rate(k), 0.8 + s.beta.shape(k, 1) / s.beta.rate(k, 1) + s.beta.shape(k, 4) / s.beta.rate(k, 4),
                1e-14);
}

std::vector<std::pair<Index, std::int64_t>> row_pairs(const CountMatrix& x, Index i) {
  std::vector<std::pair<Index, std::int64_t>> nz;
  for (const auto& e : x.row(i)) nz.emplace_back(e.col, e.count);
  return nz;
}

TEST(FoldIn, TrainingRowsReproduceTrainingTheta) {
  // a >= 1 keeps the theta prior log-concave and the single-row problem has
  // one fixed point, so a cold fold-in finds the training optimum.
  const auto cfg = config_of(3, 1.0, 0.3, 1);
  const auto sim = sample_dataset(cfg, 80, 40, 1.0, Vector::Ones(3), 0.2, 12);
  FitConfig fc;
  fc.max_iters = 3000;
  fc.rel_tol = 1e-13;
  const auto r = fit(sim.counts, {}, cfg, fc);
  const auto model = fitted(cfg, r.state);
  for (Index i = 0; i < 80; ++i) {
    const auto q = fold_in(Query::full_row(40, row_pairs(sim.counts, i)), model.beta, cfg,
                           model.regression.c);
    for (Index k = 0; k < 3; ++k)
      EXPECT_NEAR(q.shape(k), r.state.theta.shape(i, k), 1e-6 * r.state.theta.shape(i, k)) << i;
  }
}

TEST(FoldIn, TrainingRowsAreFixedPointsAtSparsePriors) {
  // With a < 1 a row can have several fixed points and a cold fold-in may
  // settle on another one; the training optimum itself must still be stable.
  const auto cfg = config_of(3, 0.3, 0.3, 1);
  const auto sim = sample_dataset(cfg, 80, 40, 1.0, Vector::Ones(3), 0.2, 12);
  FitConfig fc;
  fc.max_iters = 3000;
  fc.rel_tol = 1e-13;
  const auto r = fit(sim.counts, {}, cfg, fc);
  const auto bm = kernels::moments(r.state.beta.shape, r.state.beta.rate);
  const RowMatrix beta_log_t = bm.mean_log.transpose();
  const Vector mass = kernels::beta_mass(bm.mean);
  const std::vector<double> prior(3, cfg.a * r.state.regression.c);
  const std::vector<double> m(mass.data(), mass.data() + 3);
  for (Index i = 0; i < 80; ++i) {
    std::vector<double> shape(3), rate(3);
    for (Index k = 0; k < 3; ++k) {
      shape[k] = r.state.theta.shape(i, k);
      rate[k] = r.state.theta.rate(i, k);
    }
    std::vector<double> phi(sim.counts.row(i).size() * 3);
    kernels::fit_row(sim.counts.row(i), beta_log_t, prior, m, cfg.a, shape, rate, phi,
                     kFoldInMaxIters, kFoldInTol);
    for (Index k = 0; k < 3; ++k)
      EXPECT_NEAR(shape[k], r.state.theta.shape(i, k), 1e-6 * r.state.theta.shape(i, k)) << i;
  }
}

TEST(FoldIn, Deterministic) {
  const auto data = test::random_counts(4, 8, 0.5, 3, 2);
  const auto s = test::random_state(data, 3, 3);
  const auto q = Query::subset(8, {{0, 3}, {2, 1}, {5, 0}});
  const auto r1 = fold_in(q, s.beta, config_of(3, 0.3, 0.3), 1.0);
  const auto r2 = fold_in(q, s.beta, config_of(3, 0.3, 0.3), 1.0);
  EXPECT_TRUE(bitwise_equal(r1.shape, r2.shape));
  EXPECT_TRUE(bitwise_equal(r1.rate, r2.rate));
}

TEST(Query, Validation) {
  EXPECT_THROW(Query::full_row(3, {{3, 1}}), DomainError);
  EXPECT_THROW(Query::full_row(3, {{1, -1}}), DomainError);
  EXPECT_THROW(Query::subset(3, {{1, 1}, {1, 2}}), DomainError);
  const auto q = Query::subset(5, {{3, 0}, {1, 2}});
  EXPECT_EQ(q.observed(), (std::vector<Index>{1, 3}));
  EXPECT_EQ(q.nonzeros().size(), 1u);
  EXPECT_TRUE(q.is_observed(3));
  EXPECT_FALSE(q.is_observed(2));
}

TEST(PredictResponse, Examples) {
  EXPECT_EQ(predict_response(Vector::Constant(3, 2.0), Vector::Zero(3)), 0.0);
  EXPECT_EQ(predict_response(Vector::Constant(1, 2.0), Vector::Constant(1, 3.0)), 6.0);
  Vector t(4), e(4);
  t << 0.5, 1.5, 2.0, 0.1;
  e << -1.0, 0.3, 2.2, 7.0;
  EXPECT_NEAR(predict_response(t, e), -0.5 + 0.45 + 4.4 + 0.7, 1e-12);
  EXPECT_NEAR(predict_response(2.5 * t, e), 2.5 * predict_response(t, e), 1e-12);
  EXPECT_THROW(predict_response(t, Vector::Zero(3)), DomainError);
}

TEST(ExpectedUnobserved, Examples) {
  const auto data = test::random_counts(2, 5, 0.5, 3, 2);
  const auto s = test::random_state(data, 1, 3);
  const std::vector<Index> all{0, 1, 2, 3, 4};
  EXPECT_TRUE(expected_unobserved(Vector::Ones(1), s.beta, all).empty());
  const std::vector<Index> obs{1, 3};
  const auto out = expected_unobserved(Vector::Constant(1, 2.0), s.beta, obs);
  ASSERT_EQ(out.size(), 3u);
  const std::vector<Index> cols{0, 2, 4};
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_EQ(out[j].first, cols[j]);
    EXPECT_NEAR(out[j].second, 2.0 * s.beta.shape(0, cols[j]) / s.beta.rate(0, cols[j]), 1e-14);
  }
}

TEST(ExpectedUnobserved, InvariantUnderFactorPermutation) {
  const auto data = test::random_counts(2, 6, 0.5, 3, 2);
  const auto s = test::random_state(data, 3, 4);
  Vector t(3);
  t << 0.2, 1.3, 0.7;
  BetaPosterior p = s.beta;
  Vector tp(3);
  const std::vector<Index> perm{1, 2, 0};
  for (Index j = 0; j < 3; ++j) {
    p.shape.row(j) = s.beta.shape.row(perm[j]);
    p.rate.row(j) = s.beta.rate.row(perm[j]);
    tp(j) = t(perm[j]);
  }
  const std::vector<Index> obs{2};
  const auto a = expected_unobserved(t, s.beta, obs);
  const auto b = expected_unobserved(tp, p, obs);
  for (std::size_t j = 0; j < a.size(); ++j) EXPECT_NEAR(a[j].second, b[j].second, 1e-14);
}

std::vector<double> ranks_of(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto l, auto r) { return v[l] < v[r]; });
  std::vector<double> rank(v.size());
  for (std::size_t r = 0; r < idx.size(); ++r) rank[idx[r]] = static_cast<double>(r);
  return rank;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  const auto rx = ranks_of(x), ry = ranks_of(y);
  const double n = static_cast<double>(x.size());
  const double mean = (n - 1.0) / 2.0;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mean) * (ry[i] - mean);
    sxx += (rx[i] - mean) * (rx[i] - mean);
    syy += (ry[i] - mean) * (ry[i] - mean);
  }
  return sxy / std::sqrt(sxx * syy);
}

TEST(ExpectedUnobserved, TracksPlantedRatesOnHeldOutColumns) {
  // Train on 300 rows, then query 20 fresh rows from the same factors with
  // half the columns hidden.
  const auto cfg = config_of(5, 0.3, 0.3, 7);
  const Index d = 50;
  const auto sim = sample_dataset(cfg, 320, d, 1.0, Vector::Ones(5), 0.1, 21);
  std::vector<CountMatrix::Entry> train;
  for (const auto& e : sim.counts.entries())
    if (e.row < 300) train.push_back(e);
  const CountMatrix train_counts(300, d, train);
  FitConfig fc;
  fc.max_iters = 1000;
  const auto r = fit(train_counts, {}, cfg, fc);
  const auto model = fitted(cfg, r.state);

  std::vector<double> got, truth;
  for (Index i = 300; i < 320; ++i) {
    std::vector<std::pair<Index, std::int64_t>> obs;
    std::vector<std::int64_t> dense(static_cast<std::size_t>(d), 0);
    for (const auto& e : sim.counts.row(i)) dense[static_cast<std::size_t>(e.col)] = e.count;
    for (Index col = 0; col < d; col += 2) obs.emplace_back(col, dense[static_cast<std::size_t>(col)]);
    const auto res = run_query(Query::subset(d, obs), model);
    for (const auto& [col, value] : res.expected_counts) {
      got.push_back(value);
      truth.push_back(sim.theta.row(i).dot(sim.beta.col(col)));
    }
  }
  EXPECT_GT(spearman(got, truth), 0.9);
}

TEST(RankRelated, Examples) {
  const auto data = test::random_counts(5, 6, 0.5, 3, 2);
  auto s = test::random_state(data, 2, 3);
  const auto cfg = config_of(2, 0.3, 0.3);
  auto model = fitted(cfg, s);
  const auto res = run_query(Query::subset(6, {{0, 2}}), model);
  const auto none = rank_related(res, model, 0);
  EXPECT_TRUE(none.features.empty());
  EXPECT_TRUE(none.instances.empty());
  const auto many = rank_related(res, model, 100);
  EXPECT_EQ(many.features.size(), 5u);
  EXPECT_EQ(many.instances.size(), 5u);

  for (Index i = 0; i < 5; ++i) {
    model.theta.shape.row(i) = model.theta.shape.row(0);
    model.theta.rate.row(i) = model.theta.rate.row(0);
  }
  const auto tied = rank_related(res, model, 5);
  for (Index i = 0; i < 5; ++i) {
    EXPECT_EQ(tied.instances[static_cast<std::size_t>(i)].index, i);
    EXPECT_NEAR(tied.instances[static_cast<std::size_t>(i)].score,
                tied.instances[0].score, 1e-15);
  }
}

TEST(RankRelated, MatchesBruteForce) {
  const auto data = test::random_counts(30, 12, 0.5, 3, 8);
  const auto s = test::random_state(data, 3, 9);
  const auto cfg = config_of(3, 0.3, 0.3);
  const auto model = fitted(cfg, s);
  const auto res = run_query(Query::subset(12, {{1, 4}, {7, 1}}), model);
  const auto ranks = rank_related(res, model, 4);
  // Every unlisted item scores no higher than the last listed one.
  for (const auto& [col, value] : res.expected_counts) {
    const bool listed = std::any_of(ranks.features.begin(), ranks.features.end(),
                                    [&](const Ranked& r) { return r.index == col; });
    if (!listed) {
      EXPECT_LE(value, ranks.features.back().score);
    }
  }
  for (Index i = 0; i < 30; ++i) {
    const Vector row = s.theta.shape.row(i).cwiseQuotient(s.theta.rate.row(i)).transpose();
    const double cosine = row.dot(res.theta_mean) / (row.norm() * res.theta_mean.norm());
    const bool listed = std::any_of(ranks.instances.begin(), ranks.instances.end(),
                                    [&](const Ranked& r) { return r.index == i; });
    if (listed) {
      const auto it = std::find_if(ranks.instances.begin(), ranks.instances.end(),
                                   [&](const Ranked& r) { return r.index == i; });
      EXPECT_NEAR(it->score, cosine, 1e-12);
    } else {
      EXPECT_LE(cosine, ranks.instances.back().score + 1e-15);
    }
  }
  for (std::size_t j = 1; j < ranks.instances.size(); ++j)
    EXPECT_GE(ranks.instances[j - 1].score, ranks.instances[j].score);
}

TEST(HeldOut, ScoresHiddenColumnsOnly) {
  const auto cfg = config_of(2, 0.3, 0.3, 1);
  const auto sim = sample_dataset(cfg, 20, 10, 1.0, Vector::Ones(2), 0.1, 3);
  FitConfig fc;
  fc.max_iters = 50;
  const auto r = fit(sim.counts, {sim.y.data(), 20}, cfg, fc);
  const auto model = fitted(cfg, r.state);
  std::vector<bool> mask(10, true);
  const auto all = evaluate_heldout(sim.counts, {sim.y.data(), 20}, model, mask);
  EXPECT_EQ(all.scored_cells, 200);
  EXPECT_TRUE(std::isfinite(all.rmse));
  for (int d = 0; d < 4; ++d) mask[static_cast<std::size_t>(d)] = false;
  const auto part = evaluate_heldout(sim.counts, {}, model, mask);
  EXPECT_EQ(part.scored_cells, 80);
  EXPECT_TRUE(std::isnan(part.rmse));
  EXPECT_LT(part.mean_poisson_loglik, 0.0);
}

TEST(PoissonLogPmf, Values) {
  EXPECT_DOUBLE_EQ(poisson_log_pmf(0, 2.5), -2.5);
  EXPECT_NEAR(poisson_log_pmf(3, 2.0), 3 * std::log(2.0) - 2.0 - std::log(6.0), 1e-14);
}

}  // namespace
