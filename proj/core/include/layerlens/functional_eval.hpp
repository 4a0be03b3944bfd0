#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "layerlens/analysis.hpp"
#include "layerlens/map_fit.hpp"
#include "layerlens/repr_store.hpp"
#include "layerlens/toy_model.hpp"

namespace layerlens::eval {

// KL(p || q) in nats over the full support. Both inputs must be normalized
// within 1e-4. Returns +inf when q has -inf log-probability where p > 0.
double kl_divergence(std::span<const double> p_log, std::span<const double> q_log);

struct ModelInfo {
  std::string model_name;
  std::uint32_t num_layers = 0;
  std::uint32_t hidden_dim = 0;
  std::uint32_t seq_len = 0;
};

// Resume-from-layer request: `states` replaces the hidden state after block
// `layer` for the whole sequence.
struct ResumeRequest {
  std::uint32_t seq_id = 0;
  std::uint32_t layer = 0;
  Eigen::MatrixXd states;  // seq_len x d
  std::vector<std::uint32_t> positions;
};

struct ResumeResponse {
  std::vector<double> kl;
  // Log-probability of the realized next token; NaN at the last position.
  std::vector<double> baseline_logprob;
  std::vector<double> perturbed_logprob;
};

struct SequenceStates {
  Eigen::MatrixXd before;  // hidden state at the transition's input layer
  Eigen::MatrixXd after;   // hidden state one layer later
};

// Something that can replay a sequence from an intermediate layer.
class ResumeBackend {
 public:
  virtual ~ResumeBackend() = default;
  virtual ModelInfo info() = 0;
  // States around transition `layer` -> `layer + 1` at every position.
  virtual SequenceStates original_states(std::uint32_t seq_id,
                                         std::uint32_t layer) = 0;
  virtual ResumeResponse resume(const ResumeRequest& request) = 0;
};

// In-process backend over the bundled toy transformer. Baseline forwards
// are cached per sequence; safe to call from several threads.
class ToyBackend : public ResumeBackend {
 public:
  ToyBackend(toy::ToyModelWeights weights,
             std::map<std::uint32_t, std::vector<std::uint32_t>> sequences,
             std::string model_name = "toy");

  ModelInfo info() override;
  SequenceStates original_states(std::uint32_t seq_id, std::uint32_t layer) override;
  ResumeResponse resume(const ResumeRequest& request) override;

  const toy::ToyModelWeights& weights() const { return weights_; }

 private:
  std::shared_ptr<const toy::ForwardResult> baseline(std::uint32_t seq_id);
  const std::vector<std::uint32_t>& tokens(std::uint32_t seq_id) const;

  toy::ToyModelWeights weights_;
  std::map<std::uint32_t, std::vector<std::uint32_t>> sequences_;
  std::string model_name_;
  std::mutex cache_mutex_;
  std::map<std::uint32_t, std::shared_ptr<const toy::ForwardResult>> cache_;
};

// Replacement value for h_{l+1} at one token, given h_l there.
using Predictor = std::function<Eigen::VectorXd(
    std::uint32_t seq_id, std::uint32_t pos, const Eigen::VectorXd& h_in)>;

enum class InterventionMode {
  kAllPositions,      // every position of the sequence through its own map
  kSampledPositions,  // only the dataset's positions, all at once
  kSinglePosition,    // one dataset position per resume call
};

std::string_view mode_name(InterventionMode mode);
InterventionMode parse_mode(std::string_view name);

struct InterventionResult {
  std::vector<analysis::EvalRecord> records;  // ordered by (seq_id, pos)
  // Mean KL over every position of each sequence (all-positions and
  // sampled-positions modes only), keyed by seq_id.
  std::map<std::uint32_t, double> sequence_mean_kl;
};

// Intervenes on every sequence of `dataset` (its pairs give the evaluated
// positions) and records per-token RelErr and KL. `map_class` and `rank`
// only tag the records.
InterventionResult intervene_layer(ResumeBackend& backend,
                                   const store::LayerDataset& dataset,
                                   const Predictor& predict,
                                   InterventionMode mode,
                                   std::string_view map_class, std::size_t rank);

// Predictor that applies a map obtained per token from `provider`.
Predictor map_predictor(
    std::function<fit::TokenwiseMap(std::uint32_t, std::uint32_t,
                                    const Eigen::VectorXd&)> provider);

}  // namespace layerlens::eval
