#include <cmath>

#include "layerlens/geometry.hpp"
#include "layerlens/map_fit.hpp"
#include "test_util.hpp"

using namespace layerlens;
using namespace layerlens::testing;

namespace {

fit::TokenwiseMap random_low_rank(Eigen::Index d, std::size_t r, Rng& rng) {
  return fit::fit_low_rank(gaussian(3 * d, d, rng), gaussian(3 * d, d, rng), r, 0.0);
}

}  // namespace

TEST(Geometry, TripleDecomposesTheUpdate) {
  Rng rng(1);
  const auto map = random_low_rank(5, 3, rng);
  const Eigen::VectorXd h_in = gaussian(5, 1, rng), h_out = gaussian(5, 1, rng);
  const auto t = geom::make_triple(h_in, h_out, map);
  EXPECT_LT((t.delta_full - (h_out - h_in)).norm(), 1e-14);
  EXPECT_LT((t.delta_tok - (map.linear * h_in - h_in)).norm(), 1e-14);
  EXPECT_LT((t.residual - (h_out - map.linear * h_in)).norm(), 1e-14);
  EXPECT_LT((t.delta_full - t.delta_tok - t.residual).norm(), 1e-12);
}

TEST(Geometry, AlignmentValuesAndDegenerateCases) {
  const auto a = geom::alignment(Eigen::Vector2d(1, 0), Eigen::Vector2d(-3, 3));
  ASSERT_TRUE(a);
  EXPECT_NEAR(a->abs_cos, std::sqrt(0.5), 1e-15);
  EXPECT_NEAR(a->signed_cos, -std::sqrt(0.5), 1e-15);
  EXPECT_NEAR(a->angle_deg, 45.0, 1e-9);
  EXPECT_FALSE(geom::alignment(Eigen::Vector2d(1, 0), Eigen::Vector2d(0, 0)));
  EXPECT_FALSE(geom::alignment(Eigen::Vector2d(1e-13, 0), Eigen::Vector2d(1, 0)));
  const auto same = geom::alignment(Eigen::Vector2d(2, 1), Eigen::Vector2d(4, 2));
  EXPECT_NEAR(same->abs_cos, 1.0, 1e-15);
  EXPECT_NEAR(same->angle_deg, 0.0, 1e-4);
}

// ||r|| <= eps ||delta_full|| forces |cos(delta_full, delta_tok)| >=
// sqrt(1 - eps^2) since delta_tok = delta_full - r.
TEST(Geometry, SmallResidualBoundsAlignment) {
  Rng rng(2);
  int checked = 0;
  for (int t = 0; t < 5000; ++t) {
    const Eigen::VectorXd h_in = gaussian(6, 1, rng);
    const Eigen::VectorXd full = gaussian(6, 1, rng);
    const double scale = rng.uniform();
    const Eigen::VectorXd r = gaussian(6, 1, rng).normalized() * scale * full.norm();
    fit::TokenwiseMap map;
    map.map_class = fit::MapClass::kLocalLowRank;
    map.rank = 6;
    // A map with T(h_in) = h_in + full - r exactly.
    const Eigen::VectorXd target = h_in + full - r;
    map.linear = target * h_in.transpose() / h_in.squaredNorm();
    const auto tri = geom::make_triple(h_in, h_in + full, map);
    const double eps = tri.residual.norm() / tri.delta_full.norm();
    if (eps >= 1.0) continue;
    const auto a = geom::alignment(tri.delta_full, tri.delta_tok);
    ASSERT_TRUE(a);
    EXPECT_GE(a->abs_cos, std::sqrt(1.0 - eps * eps) - 1e-9);
    ++checked;
  }
  EXPECT_GT(checked, 4000);
}

TEST(Geometry, ProjectionIsMonotoneAndCompleteAtFullDimension) {
  Rng rng(3);
  for (int t = 0; t < 100; ++t) {
    const auto map = random_low_rank(6, 1 + rng.below(6), rng);
    const Eigen::VectorXd v = gaussian(6, 1, rng);
    double prev = 0.0;
    for (std::size_t k = 1; k <= 6; ++k) {
      const double p = *geom::subspace_projection(v, map, k);
      EXPECT_GE(p, prev - 1e-12);
      EXPECT_LE(p, 1.0 + 1e-12);
      prev = p;
    }
    EXPECT_NEAR(prev, 1.0, 1e-12);
  }
}

TEST(Geometry, MappedVectorLiesInColumnSpace) {
  Rng rng(4);
  for (std::size_t r = 1; r <= 5; ++r) {
    const auto map = random_low_rank(6, r, rng);
    const Eigen::VectorXd h = gaussian(6, 1, rng);
    EXPECT_NEAR(*geom::subspace_projection(fit::apply_map(map, h), map, r), 1.0, 1e-6);
  }
}

TEST(Geometry, ProjectionMatchesExplicitBasis) {
  Rng rng(5);
  const auto map = random_low_rank(5, 5, rng);
  const Eigen::VectorXd v = gaussian(5, 1, rng);
  const Eigen::JacobiSVD<Eigen::MatrixXd> ref(map.linear, Eigen::ComputeFullU);
  for (std::size_t k = 1; k <= 5; ++k) {
    const Eigen::MatrixXd uk = ref.matrixU().leftCols(static_cast<Eigen::Index>(k));
    EXPECT_NEAR(*geom::subspace_projection(v, map, k),
                (uk.transpose() * v).squaredNorm() / v.squaredNorm(), 1e-10);
  }
  EXPECT_FALSE(geom::subspace_projection(Eigen::VectorXd::Zero(5), map, 2));
  EXPECT_EQ(kind_of([&] { geom::subspace_projection(v, map, 6); }), ErrorKind::kConfig);
}

TEST(Geometry, HeuristicProjectionNeedsOptIn) {
  Rng rng(6);
  const Eigen::MatrixXd x = gaussian(20, 3, rng);
  fit::MlpConfig cfg;
  cfg.steps = 2;
  auto map = fit::fit_mlp(x, x, cfg);
  const Eigen::Vector3d v(1, 2, 3);
  EXPECT_EQ(kind_of([&] { geom::subspace_projection(v, map, 1); }), ErrorKind::kUnsupported);
  EXPECT_TRUE(geom::subspace_projection(v, map, 1, true));
  map.svd.reset();
  EXPECT_EQ(kind_of([&] { geom::subspace_projection(v, map, 1, true); }), ErrorKind::kUnsupported);
}

TEST(Geometry, BatchIsOrderedAndMatchesSingleRecords) {
  auto ds = synthetic_dataset(0, 4, 24, 7, [](const Eigen::VectorXd& x) {
    return Eigen::VectorXd(1.5 * x);
  });
  std::reverse(ds.pairs.begin(), ds.pairs.end());
  Rng rng(8);
  std::vector<fit::TokenwiseMap> maps;
  for (std::size_t i = 0; i < ds.size(); ++i) maps.push_back(random_low_rank(4, 2, rng));
  const auto batch = geom::geometry_batch(ds, maps, {1, 2});
  ASSERT_EQ(batch.size(), ds.size());
  for (std::size_t i = 1; i < batch.size(); ++i) {
    EXPECT_LT(std::make_pair(batch[i - 1].seq_id, batch[i - 1].pos),
              std::make_pair(batch[i].seq_id, batch[i].pos));
  }
  // The first record in sorted order comes from the last pair.
  const auto& p = ds.pairs.back();
  const Eigen::VectorXd h_in = Eigen::Map<const Eigen::VectorXf>(p.h_in.data(), 4).cast<double>();
  const Eigen::VectorXd h_out = Eigen::Map<const Eigen::VectorXf>(p.h_out.data(), 4).cast<double>();
  const auto single = geom::geometry_record(p.seq_id, p.pos, geom::make_triple(h_in, h_out, maps.back()),
                                            maps.back(), {1, 2});
  EXPECT_EQ(batch.front().full_tok->abs_cos, single.full_tok->abs_cos);
  EXPECT_EQ(batch.front().projections.size(), 2u);
  EXPECT_EQ(batch.front().projections[1].res, single.projections[1].res);
  EXPECT_EQ(kind_of([&] { geom::geometry_batch(ds, std::span(maps).first(3), {1}); }),
            ErrorKind::kConfig);
}
