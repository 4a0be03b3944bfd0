#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "layerlens/toy_model.hpp"

namespace layerlens::toy {

struct TrainConfig {
  std::size_t max_steps = 4000;
  std::size_t batch = 16;
  std::size_t seq_len = 64;
  double learning_rate = 3e-3;
  double grad_clip = 1.0;  // global L2 norm; <= 0 disables
  std::uint64_t seed = 0;
  // Training stops at the first evaluation with loss below this.
  double target_loss = std::log(256.0) / 2.0;
  std::size_t eval_every = 50;
  std::size_t eval_windows = 64;
};

struct TrainReport {
  std::size_t steps = 0;
  double final_eval_loss = 0.0;
  bool reached_target = false;
  std::vector<double> eval_curve;  // one entry per evaluation
};

// Mean next-token cross-entropy (nats) of one sequence. When grad is given,
// the gradient of that mean is accumulated into it, scaled by `weight`.
double sequence_loss(const ToyModelWeights& w,
                     std::span<const std::uint32_t> tokens,
                     ToyModelWeights* grad = nullptr, double weight = 1.0);

// Mean loss over deterministic windows of the corpus.
double evaluate_loss(const ToyModelWeights& w,
                     std::span<const std::uint32_t> corpus, std::size_t seq_len,
                     std::size_t windows, std::uint64_t seed);

// Adam on random corpus windows; fully deterministic given the config.
TrainReport train(ToyModelWeights& w, std::span<const std::uint32_t> corpus,
                  const TrainConfig& cfg);

}  // namespace layerlens::toy
