#include <cmath>
#include <limits>

#include "layerlens/functional_eval.hpp"
#include "layerlens/map_fit.hpp"
#include "layerlens/toy_model.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace layerlens;
using namespace layerlens::testing;

namespace {

std::vector<double> random_logp(std::size_t n, Rng& rng, double temp = 1.0) {
  std::vector<double> v(n);
  double mx = -1e300;
  for (auto& x : v) mx = std::max(mx, x = temp * rng.normal());
  double z = 0;
  for (double x : v) z += std::exp(x - mx);
  for (auto& x : v) x = x - mx - std::log(z);
  return v;
}

std::vector<double> probs(const std::vector<double>& logp) {
  std::vector<double> p;
  for (double l : logp) p.push_back(std::exp(l));
  return p;
}

struct ToySetup {
  toy::ToyShape shape{.vocab = 256, .layers = 3, .dim = 8, .heads = 2, .max_positions = 12,
                      .ffn_mult = 2};
  toy::ToyModelWeights w = toy::init_weights(shape, 3);
  std::map<std::uint32_t, std::vector<std::uint32_t>> seqs;
  store::LayerDataset dataset;

  explicit ToySetup(std::uint32_t layer) {
    Rng rng(4);
    dataset.layer_index = layer;
    dataset.dim = 8;
    for (std::uint32_t s = 0; s < 3; ++s) {
      std::vector<std::uint32_t> t(12);
      for (auto& x : t) x = static_cast<std::uint32_t>(rng.below(256));
      seqs[s + 10] = t;
      const auto fwd = toy::toy_forward(w, t);
      for (std::uint32_t pos : {1u, 5u, 11u}) {
        store::ReprPair p;
        p.seq_id = s + 10;
        p.pos = pos;
        for (int j = 0; j < 8; ++j) {
          p.h_in.push_back(static_cast<float>(fwd.hidden[layer](pos, j)));
          p.h_out.push_back(static_cast<float>(fwd.hidden[layer + 1](pos, j)));
        }
        dataset.pairs.push_back(p);
      }
    }
  }
};

}  // namespace

TEST(Kl, MatchesOracleAndIsNonnegative) {
  Rng rng(1);
  for (int t = 0; t < 2000; ++t) {
    const std::size_t n = 2 + rng.below(40);
    const auto p = random_logp(n, rng, 0.5 + 3 * rng.uniform());
    const auto q = random_logp(n, rng, 0.5 + 3 * rng.uniform());
    const double kl = eval::kl_divergence(p, q);
    EXPECT_GE(kl, 0.0);
    EXPECT_NEAR(kl, oracle::kl(probs(p), probs(q)), 1e-10);
    EXPECT_EQ(eval::kl_divergence(p, p), 0.0);
  }
}

TEST(Kl, ZeroSupportCases) {
  const double ninf = -std::numeric_limits<double>::infinity();
  const std::vector<double> p = {std::log(0.5), std::log(0.5), ninf};
  const std::vector<double> q = {std::log(0.25), std::log(0.25), std::log(0.5)};
  EXPECT_NEAR(eval::kl_divergence(p, q), std::log(2.0), 1e-15);
  EXPECT_EQ(eval::kl_divergence(q, p), std::numeric_limits<double>::infinity());
  EXPECT_EQ(kind_of([&] { eval::kl_divergence(p, std::vector<double>{0, 0, 0}); }),
            ErrorKind::kConfig);
  EXPECT_EQ(kind_of([&] { eval::kl_divergence(p, std::vector<double>{0, ninf}); }),
            ErrorKind::kConfig);
}

TEST(Intervention, ModeNames) {
  for (auto m : {eval::InterventionMode::kAllPositions, eval::InterventionMode::kSampledPositions,
                 eval::InterventionMode::kSinglePosition}) {
    EXPECT_EQ(eval::parse_mode(eval::mode_name(m)), m);
  }
  EXPECT_EQ(kind_of([] { eval::parse_mode("every"); }), ErrorKind::kConfig);
}

TEST(Intervention, NullInterventionGivesZeroKl) {
  for (std::uint32_t layer : {0u, 1u, 2u}) {
    ToySetup setup(layer);
    eval::ToyBackend backend(setup.w, setup.seqs);
    // Replays the true next-layer state, so nothing changes downstream.
    const eval::Predictor identity = [&](std::uint32_t seq, std::uint32_t pos,
                                         const Eigen::VectorXd&) {
      return Eigen::VectorXd(backend.original_states(seq, layer).after.row(pos).transpose());
    };
    for (auto mode : {eval::InterventionMode::kAllPositions,
                      eval::InterventionMode::kSampledPositions,
                      eval::InterventionMode::kSinglePosition}) {
      const auto r = eval::intervene_layer(backend, setup.dataset, identity, mode, "x", 1);
      ASSERT_EQ(r.records.size(), 9u);
      for (const auto& rec : r.records) {
        EXPECT_LE(rec.kl, 1e-6);
        EXPECT_LE(*rec.rel_err, 1e-12);
        EXPECT_EQ(rec.layer, layer);
      }
      EXPECT_EQ(r.sequence_mean_kl.size(), mode == eval::InterventionMode::kSinglePosition ? 0u : 3u);
    }
  }
}

TEST(Intervention, RecordsAreOrderedAndTagged) {
  ToySetup setup(1);
  std::reverse(setup.dataset.pairs.begin(), setup.dataset.pairs.end());
  eval::ToyBackend backend(setup.w, setup.seqs);
  const auto shrink = [](std::uint32_t, std::uint32_t, const Eigen::VectorXd& h) {
    return Eigen::VectorXd(0.5 * h);
  };
  const auto r = eval::intervene_layer(backend, setup.dataset, shrink,
                                       eval::InterventionMode::kSinglePosition, "local_diag_psd", 8);
  for (std::size_t i = 1; i < r.records.size(); ++i) {
    EXPECT_LT(std::make_pair(r.records[i - 1].seq_id, r.records[i - 1].pos),
              std::make_pair(r.records[i].seq_id, r.records[i].pos));
  }
  EXPECT_EQ(r.records[0].map_class, "local_diag_psd");
  EXPECT_EQ(r.records[0].rank, 8u);
  for (const auto& rec : r.records) EXPECT_GT(rec.kl, 0.0);
}

// Single-position KL must equal a hand-built resume with one row replaced.
TEST(Intervention, SinglePositionMatchesManualResume) {
  ToySetup setup(0);
  eval::ToyBackend backend(setup.w, setup.seqs);
  const auto pred = [](std::uint32_t, std::uint32_t, const Eigen::VectorXd& h) {
    return Eigen::VectorXd(h * 1.1);
  };
  const auto r = eval::intervene_layer(backend, setup.dataset, pred,
                                       eval::InterventionMode::kSinglePosition, "x", 1);
  const auto& rec = r.records[1];
  const auto& toks = setup.seqs.at(rec.seq_id);
  const auto fwd = toy::toy_forward(setup.w, toks);
  Eigen::MatrixXd states = fwd.hidden[1];
  states.row(rec.pos) = 1.1 * fwd.hidden[0].row(rec.pos);
  const Eigen::MatrixXd q = toy::toy_resume(setup.w, toks, 1, states);
  const Eigen::RowVectorXd pr = fwd.log_probs.row(rec.pos), qr = q.row(rec.pos);
  EXPECT_NEAR(rec.kl,
              oracle::kl(probs({pr.data(), pr.data() + pr.size()}),
                         probs({qr.data(), qr.data() + qr.size()})),
              1e-10);
}

TEST(Intervention, MapPredictorAppliesProvidedMap) {
  fit::TokenwiseMap m;
  m.map_class = fit::MapClass::kLocalDiagPsd;
  m.rank = 2;
  m.linear = Eigen::Vector2d(2, 3).asDiagonal();
  const auto p = eval::map_predictor([&](std::uint32_t, std::uint32_t, const Eigen::VectorXd&) {
    return m;
  });
  EXPECT_EQ(p(0, 0, Eigen::Vector2d(1, 1)), Eigen::Vector2d(2, 3));
}

TEST(Intervention, UnknownSequenceIsProtocolError) {
  ToySetup setup(0);
  eval::ToyBackend backend(setup.w, {});
  EXPECT_EQ(kind_of([&] { backend.original_states(10, 0); }), ErrorKind::kProtocol);
  EXPECT_EQ(kind_of([&] {
              eval::ToyBackend full(setup.w, setup.seqs);
              full.original_states(10, 3);
            }),
            ErrorKind::kConfig);
}
