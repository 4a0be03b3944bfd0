#include <cmath>
#include <fstream>
#include <numeric>

#include "layerlens/linalg.hpp"
#include "layerlens/map_fit.hpp"
#include "layerlens/map_io.hpp"
#include "layerlens/neighborhood.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace layerlens;
using namespace layerlens::testing;

TEST(Linalg, CanonicalSvdReconstructsAndIsSignStable) {
  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    const Eigen::MatrixXd a = gaussian(6, 6, rng);
    const auto s = linalg::canonical_svd(a);
    EXPECT_LT((s.u * s.s.asDiagonal() * s.v.transpose() - a).norm(), 1e-10);
    EXPECT_TRUE(std::is_sorted(s.s.data(), s.s.data() + s.s.size(), std::greater<>()));
    for (Eigen::Index j = 0; j < 6; ++j) {
      Eigen::Index i = 0;
      while (std::abs(s.u(i, j)) <= 1e-12) ++i;
      EXPECT_GT(s.u(i, j), 0.0);
    }
    const auto s2 = linalg::canonical_svd(-a);
    EXPECT_LT((s2.s - s.s).norm(), 1e-12);
  }
}

TEST(Linalg, NearestOrthogonalIsOrthogonalAndFixesRotations) {
  Rng rng(2);
  const Eigen::MatrixXd q = random_orthogonal(5, rng);
  EXPECT_LT((linalg::nearest_orthogonal(q) - q).norm(), 1e-12);
  const Eigen::MatrixXd o = linalg::nearest_orthogonal(gaussian(5, 5, rng));
  EXPECT_LT((o.transpose() * o - Eigen::MatrixXd::Identity(5, 5)).norm(), 1e-12);
}

TEST(DiagPsd, MatchesGridOracle) {
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    const Eigen::MatrixXd x = gaussian(32, 8, rng);
    const Eigen::MatrixXd y = gaussian(32, 8, rng) + x * 0.5;
    const auto map = fit::fit_diag_psd(x, y);
    const Eigen::VectorXd ref = oracle::diag_psd_grid(x, y);
    const double got = oracle::objective(x, y, map.linear);
    const double want = oracle::objective(x, y, ref.asDiagonal());
    EXPECT_LE(got, want + 1e-8);
    EXPECT_NEAR(got, want, 1e-8 * std::max(1.0, want));
    EXPECT_TRUE((map.linear.diagonal().array() >= 0).all());
    EXPECT_LT((map.linear - Eigen::MatrixXd(map.linear.diagonal().asDiagonal())).norm(), 1e-15);
  }
}

TEST(DiagPsd, ClampsNegativeCoefficients) {
  Rng rng(4);
  const Eigen::MatrixXd x = gaussian(50, 3, rng);
  Eigen::MatrixXd y = x;
  y.col(1) *= -2.0;
  const auto map = fit::fit_diag_psd(x, y);
  EXPECT_NEAR(map.linear(0, 0), 1.0, 1e-12);
  EXPECT_EQ(map.linear(1, 1), 0.0);
  EXPECT_NEAR(map.linear(2, 2), 1.0, 1e-12);
}

TEST(Orthogonal, MatchesAngleGridOracle) {
  Rng rng(5);
  for (int d : {2, 3}) {
    for (int t = 0; t < 10; ++t) {
      const Eigen::MatrixXd x = gaussian(32, d, rng);
      const Eigen::MatrixXd y =
          x * random_orthogonal(d, rng).transpose() + 0.3 * gaussian(32, d, rng);
      const auto map = fit::fit_orthogonal(x, y);
      const double got = oracle::objective(x, y, map.linear);
      const double want = oracle::orthogonal_grid(x, y);
      EXPECT_LE(got, want + 1e-6);
      EXPECT_NEAR(got, want, 1e-6);
    }
  }
}

TEST(Orthogonal, RecoversReflections) {
  Rng rng(6);
  Eigen::MatrixXd q = random_orthogonal(4, rng);
  if (q.determinant() > 0) q.col(0) *= -1.0;
  const Eigen::MatrixXd x = gaussian(40, 4, rng);
  const auto map = fit::fit_orthogonal(x, x * q.transpose());
  EXPECT_LT((map.linear - q).norm(), 1e-10);
  EXPECT_NEAR(map.linear.determinant(), -1.0, 1e-10);
}

TEST(LowRank, FullRankWithoutRidgeIsLeastSquares) {
  Rng rng(7);
  const Eigen::MatrixXd x = gaussian(40, 6, rng);
  const Eigen::MatrixXd y = gaussian(40, 6, rng);
  const auto map = fit::fit_low_rank(x, y, 6, 0.0);
  // Independent solution through the normal equations.
  const Eigen::MatrixXd w = ((x.transpose() * x).inverse() * x.transpose() * y).transpose();
  EXPECT_LT((map.linear - w).norm(), 1e-10);
  EXPECT_EQ(map.ridge, 0.0);
}

TEST(LowRank, RidgeMatchesClosedForm) {
  Rng rng(8);
  const Eigen::MatrixXd x = gaussian(30, 5, rng);
  const Eigen::MatrixXd y = gaussian(30, 5, rng);
  const double lambda = 0.7;
  const auto map = fit::fit_low_rank(x, y, 5, lambda);
  const Eigen::MatrixXd gram =
      x.transpose() * x + lambda * Eigen::MatrixXd::Identity(5, 5);
  const Eigen::MatrixXd w = (gram.inverse() * x.transpose() * y).transpose();
  EXPECT_LT((map.linear - w).norm(), 1e-10);
  EXPECT_NEAR(fit::default_ridge(x), 1e-6 * (x.transpose() * x).trace() / 5.0, 1e-15);
  EXPECT_DOUBLE_EQ(fit::fit_low_rank(x, y, 3, std::nullopt).ridge, fit::default_ridge(x));
}

// Eckart-Young: the truncation error equals the tail singular values, so it
// can only shrink with r.
TEST(LowRank, TruncationErrorIsNonincreasingInRank) {
  Rng rng(9);
  for (int t = 0; t < 30; ++t) {
    const Eigen::MatrixXd x = gaussian(24, 6, rng);
    const Eigen::MatrixXd y = gaussian(24, 6, rng);
    const Eigen::MatrixXd w = fit::fit_low_rank(x, y, 6, 0.0).linear;
    const Eigen::JacobiSVD<Eigen::MatrixXd> ref(w);
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t r = 1; r <= 6; ++r) {
      const auto map = fit::fit_low_rank(x, y, r, 0.0);
      const double err = (w - map.linear).norm();
      const double tail = ref.singularValues().tail(6 - r).norm();
      EXPECT_NEAR(err, tail, 1e-9);
      EXPECT_LE(err, prev + 1e-12);
      prev = err;
      Eigen::FullPivLU<Eigen::MatrixXd> lu(map.linear);
      lu.setThreshold(1e-9);
      EXPECT_EQ(lu.rank(), static_cast<Eigen::Index>(r));
    }
  }
}

TEST(LowRank, SvdOfTruncatedMapMatchesLinear) {
  Rng rng(10);
  const auto map = fit::fit_low_rank(gaussian(20, 5, rng), gaussian(20, 5, rng), 2, 0.0);
  ASSERT_TRUE(map.svd);
  EXPECT_LT((map.svd->u * map.svd->s.asDiagonal() * map.svd->v.transpose() - map.linear).norm(),
            1e-10);
  EXPECT_EQ(map.svd->s.tail(3).norm(), 0.0);
}

TEST(LowRank, RejectsBadArguments) {
  Rng rng(11);
  const Eigen::MatrixXd x = gaussian(10, 4, rng);
  EXPECT_EQ(kind_of([&] { fit::fit_low_rank(x, x, 0, 0.0); }), ErrorKind::kConfig);
  EXPECT_EQ(kind_of([&] { fit::fit_low_rank(x, x, 5, 0.0); }), ErrorKind::kConfig);
  EXPECT_EQ(kind_of([&] { fit::fit_low_rank(x, x, 2, -1.0); }), ErrorKind::kConfig);
  EXPECT_EQ(kind_of([&] { fit::fit_low_rank(x, Eigen::MatrixXd(9, 4), 2, 0.0); }),
            ErrorKind::kConfig);
  Eigen::MatrixXd bad = x;
  bad(0, 0) = std::nan("");
  EXPECT_EQ(kind_of([&] { fit::fit_low_rank(bad, x, 2, 0.0); }), ErrorKind::kCompute);
}

TEST(Fit, IdenticalInputsAreFlaggedDegenerate) {
  Eigen::MatrixXd x = Eigen::MatrixXd::Ones(8, 3);
  Rng rng(12);
  const Eigen::MatrixXd y = gaussian(8, 3, rng);
  EXPECT_TRUE(fit::fit_diag_psd(x, y).degenerate);
  EXPECT_TRUE(fit::fit_low_rank(x, y, 2, std::nullopt).degenerate);
  EXPECT_TRUE(fit::fit_orthogonal(x, y).degenerate);
  EXPECT_FALSE(fit::fit_diag_psd(gaussian(8, 3, rng), y).degenerate);
}

TEST(Fit, GlobalDiagMatchesPooledFit) {
  const auto ds = synthetic_dataset(0, 4, 50, 13, [](const Eigen::VectorXd& x) {
    Eigen::VectorXd y = x;
    y(0) *= 3.0;
    return y;
  });
  const auto g = fit::fit_global_diag(ds);
  EXPECT_EQ(g.map_class, fit::MapClass::kGlobalDiagPsd);
  EXPECT_LT((g.linear - fit::fit_diag_psd(ds.inputs(), ds.outputs()).linear).norm(), 1e-15);
  EXPECT_NEAR(g.linear(0, 0), 3.0, 1e-5);
}

TEST(Fit, AnchorFitUsesItsNeighborhood) {
  const auto ds = synthetic_dataset(0, 4, 200, 14, [](const Eigen::VectorXd& x) {
    return Eigen::VectorXd(x.array().tanh());
  });
  const Eigen::MatrixXd x = ds.inputs(), y = ds.outputs();
  const nbr::NeighborIndex index(x);
  fit::FitConfig cfg;
  cfg.rank = 4;
  cfg.k = 20;
  const auto m = fit::fit_anchor(x, y, index, 17, cfg);
  EXPECT_EQ(m.anchor_index, std::optional<std::size_t>(17));
  const auto hood = index.knn_of_key(17, 20);
  Eigen::MatrixXd hx(20, 4), hy(20, 4);
  for (int i = 0; i < 20; ++i) {
    hx.row(i) = x.row(static_cast<Eigen::Index>(hood.member_indices[i]));
    hy.row(i) = y.row(static_cast<Eigen::Index>(hood.member_indices[i]));
  }
  EXPECT_LT((m.linear - fit::fit_low_rank(hx, hy, 4, std::nullopt).linear).norm(), 1e-12);
  const auto q = fit::fit_at_query(x, y, index, x.row(17).transpose(), cfg);
  EXPECT_LT((q.linear - m.linear).norm(), 1e-12);
}

TEST(Fit, ClassNamesRoundTrip) {
  for (auto c : {fit::MapClass::kGlobalDiagPsd, fit::MapClass::kLocalDiagPsd,
                 fit::MapClass::kLocalLowRank, fit::MapClass::kOrthogonal, fit::MapClass::kMlp}) {
    EXPECT_EQ(fit::parse_class(fit::class_name(c)), c);
  }
  EXPECT_EQ(kind_of([] { fit::parse_class("affine"); }), ErrorKind::kConfig);
}

TEST(Mlp, JacobianMatchesFiniteDifferences) {
  Rng rng(15);
  const Eigen::MatrixXd x = gaussian(64, 3, rng);
  const Eigen::MatrixXd y = x.array().sin().matrix();
  fit::MlpConfig cfg;
  cfg.steps = 50;
  const auto map = fit::fit_mlp(x, y, cfg);
  ASSERT_TRUE(map.mlp);
  const Eigen::VectorXd at = x.row(3).transpose();
  const Eigen::MatrixXd jac = map.mlp->jacobian(at);
  for (int j = 0; j < 3; ++j) {
    Eigen::VectorXd e = Eigen::VectorXd::Zero(3);
    e(j) = 1e-6;
    const Eigen::VectorXd fd = (map.mlp->forward(at + e) - map.mlp->forward(at - e)) / 2e-6;
    EXPECT_LT((fd - jac.col(j)).norm(), 1e-6);
  }
}

TEST(Mlp, TrainingReducesErrorAndIsDeterministic) {
  Rng rng(16);
  const Eigen::MatrixXd x = gaussian(128, 3, rng);
  const Eigen::MatrixXd y = x.array().sin().matrix();
  fit::MlpConfig short_cfg, long_cfg;
  short_cfg.steps = 1;
  long_cfg.steps = 800;
  const auto err = [&](const fit::TokenwiseMap& m) {
    double s = 0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      s += (fit::apply_map(m, x.row(i).transpose()) - y.row(i).transpose()).squaredNorm();
    }
    return s;
  };
  const auto a = fit::fit_mlp(x, y, long_cfg);
  EXPECT_LT(err(a), 0.2 * err(fit::fit_mlp(x, y, short_cfg)));
  EXPECT_EQ(*a.mlp, *fit::fit_mlp(x, y, long_cfg).mlp);
  EXPECT_TRUE(a.heuristic_svd);
}

TEST(Interpolation, WeightsAndExactAnchors) {
  Eigen::MatrixXd anchors(3, 2);
  anchors << 1, 0, 0, 1, 1, 1;
  const nbr::NeighborIndex index(anchors);
  const auto exact = fit::interpolation_weights(index, Eigen::Vector2d(2, 0), 3);
  EXPECT_EQ(exact.anchors, std::vector<std::size_t>{0});
  EXPECT_EQ(exact.weights, std::vector<double>{1.0});
  const auto w = fit::interpolation_weights(index, Eigen::Vector2d(1, 0.2), 3);
  ASSERT_EQ(w.anchors.size(), 3u);
  EXPECT_NEAR(std::accumulate(w.weights.begin(), w.weights.end(), 0.0), 1.0, 1e-15);
  const Eigen::Vector2d q = Eigen::Vector2d(1, 0.2).normalized();
  double total = 0;
  std::vector<double> expect(3);
  for (std::size_t i = 0; i < 3; ++i) {
    const Eigen::Vector2d a = anchors.row(static_cast<Eigen::Index>(w.anchors[i])).normalized();
    expect[i] = 1.0 / (1.0 - a.dot(q) + 1e-8);
    total += expect[i];
  }
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(w.weights[i], expect[i] / total, 1e-12);
  EXPECT_EQ(kind_of([&] { fit::interpolation_weights(index, Eigen::Vector2d(1, 0), 0); }),
            ErrorKind::kConfig);
}

TEST(Interpolation, OrthogonalResultStaysOrthogonal) {
  Rng rng(17);
  const Eigen::MatrixXd pos = gaussian(4, 3, rng);
  std::vector<fit::TokenwiseMap> maps;
  for (int i = 0; i < 4; ++i) {
    const Eigen::MatrixXd x = gaussian(20, 3, rng);
    maps.push_back(fit::fit_orthogonal(x, x * random_orthogonal(3, rng).transpose()));
  }
  const nbr::NeighborIndex index(pos);
  const auto m = fit::interpolate_maps(maps, index, gaussian(3, 1, rng), 4);
  EXPECT_TRUE(m.interpolated);
  EXPECT_LT((m.linear.transpose() * m.linear - Eigen::MatrixXd::Identity(3, 3)).norm(), 1e-10);
}

TEST(Interpolation, RejectsMlpMaps) {
  Rng rng(18);
  const Eigen::MatrixXd x = gaussian(16, 2, rng);
  fit::MlpConfig cfg;
  cfg.steps = 2;
  std::vector<fit::TokenwiseMap> maps = {fit::fit_mlp(x, x, cfg), fit::fit_mlp(x, x, cfg)};
  const nbr::NeighborIndex index(gaussian(2, 2, rng));
  EXPECT_EQ(kind_of([&] { fit::interpolate_maps(maps, index, Eigen::Vector2d(1, 1), 2); }),
            ErrorKind::kUnsupported);
}

TEST(MapIo, RoundTripAllClasses) {
  TempDir dir("maps");
  Rng rng(19);
  const Eigen::MatrixXd x = gaussian(30, 4, rng), y = gaussian(30, 4, rng);
  fit::MlpConfig mc;
  mc.steps = 3;
  std::vector<std::pair<fit::MapClass, fit::TokenwiseMap>> cases = {
      {fit::MapClass::kLocalDiagPsd, fit::fit_diag_psd(x, y)},
      {fit::MapClass::kLocalLowRank, fit::fit_low_rank(x, y, 2, 0.1)},
      {fit::MapClass::kOrthogonal, fit::fit_orthogonal(x, y)},
      {fit::MapClass::kMlp, fit::fit_mlp(x, y, mc)}};
  for (auto& [cls, map] : cases) {
    map.anchor_index = 5;
    fit::MapSet set{3, cls, 4, static_cast<std::uint32_t>(map.rank), {map, map}};
    set.maps[1].anchor_index.reset();
    const auto file = dir / fit::map_file_name(3);
    fit::write_map_set(set, file);
    const auto back = fit::read_map_set(file);
    EXPECT_EQ(back.layer_index, 3u);
    EXPECT_EQ(back.map_class, cls);
    ASSERT_EQ(back.maps.size(), 2u);
    EXPECT_EQ(back.maps[0].anchor_index, std::optional<std::size_t>(5));
    EXPECT_FALSE(back.maps[1].anchor_index);
    const Eigen::VectorXd probe = gaussian(4, 1, rng);
    EXPECT_EQ(fit::apply_map(back.maps[0], probe), fit::apply_map(map, probe));
    EXPECT_EQ(back.maps[0].ridge, map.ridge);
  }
}

TEST(MapIo, CorruptFilesFailCleanly) {
  TempDir dir("maps");
  Rng rng(20);
  const Eigen::MatrixXd x = gaussian(30, 4, rng);
  fit::MapSet set{0, fit::MapClass::kLocalLowRank, 4, 2, {fit::fit_low_rank(x, x, 2, 0.1)}};
  const auto file = dir / "maps_0.lmp";
  fit::write_map_set(set, file);
  std::string good;
  {
    std::ifstream in(file, std::ios::binary);
    good.assign(std::istreambuf_iterator<char>(in), {});
  }
  const auto attempt = [&](const std::string& bytes) {
    {
      std::ofstream out(file, std::ios::binary | std::ios::trunc);
      out << bytes;
    }
    try {
      fit::read_map_set(file);
      return true;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::kFormat) << e.what();
      return false;
    }
  };
  for (std::size_t cut = 0; cut < good.size(); cut += 5) EXPECT_FALSE(attempt(good.substr(0, cut)));
  EXPECT_FALSE(attempt(good + "x"));
  for (std::size_t at = 0; at < 40; ++at) {
    std::string bad = good;
    bad[at] = static_cast<char>(bad[at] ^ 0x5a);
    attempt(bad);
  }
}
