#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

namespace layerlens::toy {

struct ToyShape {
  std::size_t vocab = 256;  // byte-level
  std::size_t layers = 4;
  std::size_t dim = 32;
  std::size_t heads = 2;
  std::size_t max_positions = 64;
  std::size_t ffn_mult = 4;

  bool operator==(const ToyShape&) const = default;
};

// Pre-LayerNorm decoder block. Matrices act on row vectors (x * W).
struct BlockWeights {
  Eigen::VectorXd ln1_gain, ln1_bias;
  Eigen::MatrixXd wq, wk, wv, wo;  // d x d
  Eigen::VectorXd ln2_gain, ln2_bias;
  Eigen::MatrixXd w_up;    // d x (ffn_mult * d)
  Eigen::VectorXd b_up;
  Eigen::MatrixXd w_down;  // (ffn_mult * d) x d
  Eigen::VectorXd b_down;

  bool operator==(const BlockWeights&) const = default;
};

struct ToyModelWeights {
  ToyShape shape;
  Eigen::MatrixXd token_embedding;     // V x d
  Eigen::MatrixXd position_embedding;  // max_positions x d
  std::vector<BlockWeights> blocks;
  Eigen::VectorXd final_gain, final_bias;
  Eigen::MatrixXd unembed;  // d x V
  Eigen::VectorXd unembed_bias;

  // Throws Error(kFormat) on inconsistent shapes or non-finite values.
  void validate() const;

  bool operator==(const ToyModelWeights&) const = default;
};

// Applies f to each parameter tensor of every argument in lockstep, e.g.
// visit_params(f, weights, grads) calls f(weights.x, grads.x) per tensor.
template <typename F, typename... W>
void visit_params(F&& f, W&... w) {
  f(w.token_embedding...);
  f(w.position_embedding...);
  const std::size_t n = std::get<0>(std::tie(w...)).blocks.size();
  for (std::size_t b = 0; b < n; ++b) {
    f(w.blocks[b].ln1_gain...);
    f(w.blocks[b].ln1_bias...);
    f(w.blocks[b].wq...);
    f(w.blocks[b].wk...);
    f(w.blocks[b].wv...);
    f(w.blocks[b].wo...);
    f(w.blocks[b].ln2_gain...);
    f(w.blocks[b].ln2_bias...);
    f(w.blocks[b].w_up...);
    f(w.blocks[b].b_up...);
    f(w.blocks[b].w_down...);
    f(w.blocks[b].b_down...);
  }
  f(w.final_gain...);
  f(w.final_bias...);
  f(w.unembed...);
  f(w.unembed_bias...);
}

// Deterministic random initialization.
ToyModelWeights init_weights(const ToyShape& shape, std::uint64_t seed);

// Same shape, every tensor zero.
ToyModelWeights zeros_like(const ToyModelWeights& w);

// Checkpoint: "LTM1" | u32 version | shape as u32 x 6 | all tensors as f64
// (little-endian, row-major) in visit_params order.
void save_checkpoint(const ToyModelWeights& w, const std::filesystem::path& file);
ToyModelWeights load_checkpoint(const std::filesystem::path& file);

struct ForwardResult {
  // hidden[0] is the embedding output, hidden[l] the output of block l.
  std::vector<Eigen::MatrixXd> hidden;  // layers + 1 entries, each T x d
  Eigen::MatrixXd log_probs;            // T x V, row t predicts token t + 1
};

ForwardResult toy_forward(const ToyModelWeights& w,
                          std::span<const std::uint32_t> tokens);

// Runs blocks layer+1 .. layers on `states` (the hidden state after block
// `layer`) and returns the final log-probabilities. layer must be in
// [1, layers]; layer == layers applies only the final norm and unembedding.
Eigen::MatrixXd toy_resume(const ToyModelWeights& w,
                           std::span<const std::uint32_t> tokens,
                           std::size_t layer, const Eigen::MatrixXd& states);

// Final norm + unembedding + log-softmax on T x d states.
Eigen::MatrixXd toy_head(const ToyModelWeights& w, const Eigen::MatrixXd& states);

}  // namespace layerlens::toy
