#include "layerlens/toy_train.hpp"

#include <cmath>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "layerlens/corpus.hpp"
#include "layerlens/error.hpp"
#include "layerlens/rng.hpp"
#include "toy_kernels.hpp"

namespace layerlens::toy {

double sequence_loss(const ToyModelWeights& w,
                     std::span<const std::uint32_t> tokens,
                     ToyModelWeights* grad, double weight) {
  if (tokens.size() < 2) {
    throw Error(ErrorKind::kConfig, "loss needs at least two tokens");
  }
  const std::size_t layers = w.shape.layers;
  std::vector<detail::BlockCache> caches(grad ? layers : 0);

  Eigen::MatrixXd x = detail::embed(w, tokens);
  for (std::size_t l = 0; l < layers; ++l) {
    x = detail::block_forward(w.blocks[l], w.shape.heads, x,
                              grad ? &caches[l] : nullptr);
  }
  detail::LayerNormCache final_cache;
  const Eigen::MatrixXd y =
      detail::layer_norm(x, w.final_gain, w.final_bias, &final_cache);
  const Eigen::MatrixXd logits =
      (y * w.unembed).rowwise() + w.unembed_bias.transpose();
  const Eigen::MatrixXd logp = detail::log_softmax(logits);

  const auto predicted = static_cast<Eigen::Index>(tokens.size() - 1);
  double loss = 0.0;
  for (Eigen::Index t = 0; t < predicted; ++t) {
    loss -= logp(t, tokens[static_cast<std::size_t>(t) + 1]);
  }
  loss /= static_cast<double>(predicted);
  if (!grad) return loss;

  // d loss / d logits = (softmax - onehot) / predicted on predicting rows.
  Eigen::MatrixXd d_logits = Eigen::MatrixXd::Zero(logits.rows(), logits.cols());
  const double scale = weight / static_cast<double>(predicted);
  for (Eigen::Index t = 0; t < predicted; ++t) {
    d_logits.row(t) = logp.row(t).array().exp() * scale;
    d_logits(t, tokens[static_cast<std::size_t>(t) + 1]) -= scale;
  }
  grad->unembed += y.transpose() * d_logits;
  grad->unembed_bias += d_logits.colwise().sum().transpose();
  Eigen::MatrixXd dx = detail::layer_norm_backward(
      d_logits * w.unembed.transpose(), w.final_gain, final_cache,
      grad->final_gain, grad->final_bias);
  for (std::size_t l = layers; l-- > 0;) {
    dx = detail::block_backward(w.blocks[l], w.shape.heads, caches[l], dx,
                                grad->blocks[l]);
  }
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto row = static_cast<Eigen::Index>(t);
    grad->token_embedding.row(tokens[t]) += dx.row(row);
    grad->position_embedding.row(row) += dx.row(row);
  }
  return loss;
}

double evaluate_loss(const ToyModelWeights& w,
                     std::span<const std::uint32_t> corpus, std::size_t seq_len,
                     std::size_t windows, std::uint64_t seed) {
  const auto starts = corpus::window_starts(0, corpus.size(), seq_len, windows, seed);
  double total = 0.0;
  for (std::size_t s : starts) total += sequence_loss(w, corpus.subspan(s, seq_len));
  return total / static_cast<double>(starts.size());
}

TrainReport train(ToyModelWeights& w, std::span<const std::uint32_t> corpus,
                  const TrainConfig& cfg) {
  if (cfg.seq_len > w.shape.max_positions || cfg.seq_len < 2) {
    throw Error(ErrorKind::kConfig,
                fmt::format("training window {} invalid for max_positions {}",
                            cfg.seq_len, w.shape.max_positions));
  }
  if (corpus.size() < cfg.seq_len) {
    throw Error(ErrorKind::kConfig, "corpus shorter than one training window");
  }
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  ToyModelWeights m = zeros_like(w), v = zeros_like(w);
  Rng rng(cfg.seed);
  const std::uint64_t eval_seed = cfg.seed ^ 0x9e3779b97f4a7c15ULL;
  TrainReport report;

  const auto evaluate = [&] {
    const double loss =
        evaluate_loss(w, corpus, cfg.seq_len, cfg.eval_windows, eval_seed);
    report.eval_curve.push_back(loss);
    report.final_eval_loss = loss;
    return loss;
  };

  if (evaluate() < cfg.target_loss) {
    report.reached_target = true;
    return report;
  }
  for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
    ToyModelWeights grad = zeros_like(w);
    const double weight = 1.0 / static_cast<double>(cfg.batch);
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const std::size_t start = rng.below(corpus.size() - cfg.seq_len + 1);
      sequence_loss(w, corpus.subspan(start, cfg.seq_len), &grad, weight);
    }
    if (cfg.grad_clip > 0.0) {
      double sq = 0.0;
      visit_params([&](const auto& g) { sq += g.squaredNorm(); }, grad);
      const double norm = std::sqrt(sq);
      if (!std::isfinite(norm)) {
        throw Error(ErrorKind::kCompute,
                    fmt::format("non-finite gradient at step {}", step));
      }
      if (norm > cfg.grad_clip) {
        visit_params([&](auto& g) { g *= cfg.grad_clip / norm; }, grad);
      }
    }
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
    visit_params(
        [&](auto& p, auto& g, auto& mm, auto& vv) {
          mm = kBeta1 * mm + (1.0 - kBeta1) * g;
          vv = kBeta2 * vv + (1.0 - kBeta2) * g.cwiseProduct(g);
          p.array() -= cfg.learning_rate * (mm.array() / c1) /
                       ((vv.array() / c2).sqrt() + kEps);
        },
        w, grad, m, v);
    report.steps = step;
    if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
      const double loss = evaluate();
      spdlog::info("toy train step {}: eval loss {:.4f}", step, loss);
      if (loss < cfg.target_loss) {
        report.reached_target = true;
        break;
      }
    }
  }
  w.validate();
  return report;
}

}  // namespace layerlens::toy
