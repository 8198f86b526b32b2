// Dense reference loops against the sparse parallel kernels on simulated data.
#include <benchmark/benchmark.h>

#include "pfm/inference.hpp"
#include "pfm/kernels.hpp"
#include "pfm/model.hpp"
#include "pfm/reference.hpp"

namespace {

using namespace pfm;

struct Problem {
  ModelConfig config;
  SimulatedData sim;
  VariationalState state;
};

Problem make_problem(Index n_rows) {
  Problem p;
  p.config.n_factors = 10;
  p.config.seed = 1;
  p.sim = sample_dataset(p.config, n_rows, n_rows / 2, 1.0, Vector::Ones(10), 0.5, 2);
  const std::span<const double> y{p.sim.y.data(), static_cast<std::size_t>(n_rows)};
  p.state = initialize_state(p.sim.counts, y, p.config);
  batch_iteration(p.state, p.sim.counts, y, p.config);
  return p;
}

std::span<const double> response(const Problem& p) {
  return {p.sim.y.data(), static_cast<std::size_t>(p.sim.y.size())};
}

void BM_ReferenceResponsibilities(benchmark::State& st) {
  const auto p = make_problem(st.range(0));
  for (auto _ : st)
    benchmark::DoNotOptimize(reference::responsibilities(p.sim.counts, p.state.theta, p.state.beta));
  st.SetItemsProcessed(st.iterations() * p.sim.counts.nnz());
}

void BM_KernelResponsibilities(benchmark::State& st) {
  auto p = make_problem(st.range(0));
  for (auto _ : st) {
    const auto tm = kernels::moments(p.state.theta.shape, p.state.theta.rate);
    const auto bm = kernels::moments(p.state.beta.shape, p.state.beta.rate);
    kernels::refresh_phi(p.sim.counts, tm.mean_log, bm.mean_log.transpose(), p.state.phi.phi);
    benchmark::ClobberMemory();
  }
  st.SetItemsProcessed(st.iterations() * p.sim.counts.nnz());
}

void BM_ReferenceBeta(benchmark::State& st) {
  const auto p = make_problem(st.range(0));
  for (auto _ : st)
    benchmark::DoNotOptimize(
        reference::update_beta(p.sim.counts, p.state.phi.phi, p.state.theta, p.config.b));
}

void BM_KernelBeta(benchmark::State& st) {
  const auto p = make_problem(st.range(0));
  for (auto _ : st)
    benchmark::DoNotOptimize(update_beta(p.sim.counts, p.state.phi, p.state.theta, p.config));
}

void BM_ReferenceElbo(benchmark::State& st) {
  const auto p = make_problem(st.range(0));
  for (auto _ : st)
    benchmark::DoNotOptimize(reference::elbo(p.sim.counts, response(p), p.state, p.config));
}

void BM_KernelElbo(benchmark::State& st) {
  const auto p = make_problem(st.range(0));
  for (auto _ : st) benchmark::DoNotOptimize(elbo(p.sim.counts, response(p), p.state, p.config));
}

void BM_BatchIteration(benchmark::State& st) {
  auto p = make_problem(st.range(0));
  for (auto _ : st) batch_iteration(p.state, p.sim.counts, response(p), p.config);
  st.SetItemsProcessed(st.iterations() * p.sim.counts.nnz());
}

}  // namespace

BENCHMARK(BM_ReferenceResponsibilities)->Arg(200)->Arg(1000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_KernelResponsibilities)->Arg(200)->Arg(1000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ReferenceBeta)->Arg(200)->Arg(1000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_KernelBeta)->Arg(200)->Arg(1000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ReferenceElbo)->Arg(200)->Arg(1000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_KernelElbo)->Arg(200)->Arg(1000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_BatchIteration)->Arg(200)->Arg(1000)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
