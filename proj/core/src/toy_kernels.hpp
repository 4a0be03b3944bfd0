#pragma once

// Building blocks of the toy transformer shared by inference and training.
// All activations are T x d row matrices.

#include <span>
#include <vector>

#include <Eigen/Dense>

#include "layerlens/toy_model.hpp"

namespace layerlens::toy::detail {

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormCache {
  Eigen::MatrixXd normalized;  // x-hat
  Eigen::VectorXd inv_std;     // per row
};

Eigen::MatrixXd layer_norm(const Eigen::MatrixXd& x, const Eigen::VectorXd& gain,
                           const Eigen::VectorXd& bias, LayerNormCache* cache);

// Returns dx; accumulates into d_gain / d_bias.
Eigen::MatrixXd layer_norm_backward(const Eigen::MatrixXd& dy,
                                    const Eigen::VectorXd& gain,
                                    const LayerNormCache& cache,
                                    Eigen::VectorXd& d_gain,
                                    Eigen::VectorXd& d_bias);

struct BlockCache {
  Eigen::MatrixXd input;
  LayerNormCache ln1;
  Eigen::MatrixXd a;        // ln1 output
  Eigen::MatrixXd q, k, v;  // T x d
  std::vector<Eigen::MatrixXd> probs;  // per head, T x T
  Eigen::MatrixXd attn_concat;         // T x d, before wo
  Eigen::MatrixXd mid;                 // input + attention
  LayerNormCache ln2;
  Eigen::MatrixXd b;       // ln2 output
  Eigen::MatrixXd up_pre;  // b * w_up + b_up
  Eigen::MatrixXd up_act;  // gelu(up_pre)
};

Eigen::MatrixXd block_forward(const BlockWeights& bw, std::size_t heads,
                              const Eigen::MatrixXd& x, BlockCache* cache);

// Returns dx; accumulates parameter gradients into grad.
Eigen::MatrixXd block_backward(const BlockWeights& bw, std::size_t heads,
                               const BlockCache& cache, const Eigen::MatrixXd& dy,
                               BlockWeights& grad);

Eigen::MatrixXd embed(const ToyModelWeights& w,
                      std::span<const std::uint32_t> tokens);

// Row-wise log-softmax.
Eigen::MatrixXd log_softmax(const Eigen::MatrixXd& logits);

}  // namespace layerlens::toy::detail
