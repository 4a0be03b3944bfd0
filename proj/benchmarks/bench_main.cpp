#include <benchmark/benchmark.h>

#include <vector>

#include <Eigen/Dense>

#include "layerlens/geometry.hpp"
#include "layerlens/map_fit.hpp"
#include "layerlens/neighborhood.hpp"
#include "layerlens/rng.hpp"
#include "layerlens/toy_model.hpp"

namespace {

using namespace layerlens;

Eigen::MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

// Exact kNN over n keys of dimension 32.
void BM_Knn(benchmark::State& state) {
  Rng rng(1);
  const auto n = state.range(0);
  const nbr::NeighborIndex index(gaussian(n, 32, rng));
  const Eigen::VectorXd q = gaussian(32, 1, rng);
  for (auto _ : state) benchmark::DoNotOptimize(index.knn(q, 64));
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_Knn)->Arg(2000)->Arg(8000);

void BM_FitLowRank(benchmark::State& state) {
  Rng rng(2);
  const Eigen::MatrixXd x = gaussian(64, 32, rng);
  const Eigen::MatrixXd y = x * gaussian(32, 32, rng) + 0.1 * gaussian(64, 32, rng);
  const auto r = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(fit::fit_low_rank(x, y, r, std::nullopt));
}
BENCHMARK(BM_FitLowRank)->Arg(4)->Arg(32);

void BM_FitDiagPsd(benchmark::State& state) {
  Rng rng(3);
  const Eigen::MatrixXd x = gaussian(64, 32, rng);
  const Eigen::MatrixXd y = 0.5 * x + 0.1 * gaussian(64, 32, rng);
  for (auto _ : state) benchmark::DoNotOptimize(fit::fit_diag_psd(x, y));
}
BENCHMARK(BM_FitDiagPsd);

void BM_FitOrthogonal(benchmark::State& state) {
  Rng rng(4);
  const Eigen::MatrixXd x = gaussian(64, 32, rng);
  const Eigen::MatrixXd y = gaussian(64, 32, rng);
  for (auto _ : state) benchmark::DoNotOptimize(fit::fit_orthogonal(x, y));
}
BENCHMARK(BM_FitOrthogonal);

void BM_SubspaceProjection(benchmark::State& state) {
  Rng rng(5);
  const Eigen::MatrixXd x = gaussian(64, 32, rng);
  const auto map = fit::fit_low_rank(x, x * gaussian(32, 32, rng), 8, std::nullopt);
  const Eigen::VectorXd v = gaussian(32, 1, rng);
  for (auto _ : state) benchmark::DoNotOptimize(geom::subspace_projection(v, map, 8));
}
BENCHMARK(BM_SubspaceProjection);

void BM_ToyForward(benchmark::State& state) {
  const auto w = toy::init_weights(toy::ToyShape{}, 6);
  std::vector<std::uint32_t> tokens(static_cast<std::size_t>(state.range(0)));
  for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = static_cast<std::uint32_t>(97 + i % 26);
  for (auto _ : state) benchmark::DoNotOptimize(toy::toy_forward(w, tokens));
}
BENCHMARK(BM_ToyForward)->Arg(16)->Arg(64);

}  // namespace

BENCHMARK_MAIN();
