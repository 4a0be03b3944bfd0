#include "layerlens/functional_eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "layerlens/error.hpp"
#include "layerlens/parallel.hpp"

namespace layerlens::eval {
namespace {

void check_normalized(std::span<const double> logp, const char* which) {
  double total = 0.0;
  for (double v : logp) {
    if (std::isnan(v) || v == std::numeric_limits<double>::infinity()) {
      throw Error(ErrorKind::kConfig,
                  fmt::format("kl_divergence: invalid log-probability in {}", which));
    }
    total += std::exp(v);
  }
  if (std::abs(total - 1.0) > 1e-4) {
    throw Error(ErrorKind::kConfig,
                fmt::format("kl_divergence: {} is not normalized (sum {})", which,
                            total));
  }
}

}  // namespace

double kl_divergence(std::span<const double> p_log, std::span<const double> q_log) {
  if (p_log.size() != q_log.size() || p_log.empty()) {
    throw Error(ErrorKind::kConfig, "kl_divergence: support size mismatch");
  }
  check_normalized(p_log, "p");
  check_normalized(q_log, "q");
  double kl = 0.0;
  for (std::size_t i = 0; i < p_log.size(); ++i) {
    if (std::isinf(p_log[i])) continue;  // p_i = 0 contributes nothing
    if (std::isinf(q_log[i])) return std::numeric_limits<double>::infinity();
    kl += std::exp(p_log[i]) * (p_log[i] - q_log[i]);
  }
  if (kl < 0.0 && kl >= -1e-9) kl = 0.0;
  return kl;
}

ToyBackend::ToyBackend(toy::ToyModelWeights weights,
                       std::map<std::uint32_t, std::vector<std::uint32_t>> sequences,
                       std::string model_name)
    : weights_(std::move(weights)),
      sequences_(std::move(sequences)),
      model_name_(std::move(model_name)) {
  weights_.validate();
}

ModelInfo ToyBackend::info() {
  return {model_name_, static_cast<std::uint32_t>(weights_.shape.layers),
          static_cast<std::uint32_t>(weights_.shape.dim),
          static_cast<std::uint32_t>(weights_.shape.max_positions)};
}

const std::vector<std::uint32_t>& ToyBackend::tokens(std::uint32_t seq_id) const {
  auto it = sequences_.find(seq_id);
  if (it == sequences_.end()) {
    throw Error(ErrorKind::kProtocol, fmt::format("unknown sequence {}", seq_id));
  }
  return it->second;
}

std::shared_ptr<const toy::ForwardResult> ToyBackend::baseline(std::uint32_t seq_id) {
  {
    std::lock_guard lock(cache_mutex_);
    if (auto it = cache_.find(seq_id); it != cache_.end()) return it->second;
  }
  auto result = std::make_shared<const toy::ForwardResult>(
      toy::toy_forward(weights_, tokens(seq_id)));
  std::lock_guard lock(cache_mutex_);
  return cache_.emplace(seq_id, std::move(result)).first->second;
}

SequenceStates ToyBackend::original_states(std::uint32_t seq_id,
                                           std::uint32_t layer) {
  if (layer >= weights_.shape.layers) {
    throw Error(ErrorKind::kConfig,
                fmt::format("transition {} outside model with {} layers", layer,
                            weights_.shape.layers));
  }
  const auto fwd = baseline(seq_id);
  return {fwd->hidden[layer], fwd->hidden[layer + 1]};
}

ResumeResponse ToyBackend::resume(const ResumeRequest& request) {
  const auto& toks = tokens(request.seq_id);
  const auto fwd = baseline(request.seq_id);
  const Eigen::MatrixXd perturbed =
      toy::toy_resume(weights_, toks, request.layer, request.states);
  ResumeResponse out;
  const auto v = perturbed.cols();
  for (std::uint32_t pos : request.positions) {
    if (pos >= toks.size()) {
      throw Error(ErrorKind::kProtocol,
                  fmt::format("position {} outside sequence of length {}", pos,
                              toks.size()));
    }
    const auto row = static_cast<Eigen::Index>(pos);
    const Eigen::RowVectorXd p = fwd->log_probs.row(row);
    const Eigen::RowVectorXd q = perturbed.row(row);
    out.kl.push_back(kl_divergence({p.data(), static_cast<std::size_t>(v)},
                                   {q.data(), static_cast<std::size_t>(v)}));
    if (pos + 1 < toks.size()) {
      out.baseline_logprob.push_back(p(toks[pos + 1]));
      out.perturbed_logprob.push_back(q(toks[pos + 1]));
    } else {
      out.baseline_logprob.push_back(std::numeric_limits<double>::quiet_NaN());
      out.perturbed_logprob.push_back(std::numeric_limits<double>::quiet_NaN());
    }
  }
  return out;
}

std::string_view mode_name(InterventionMode mode) {
  switch (mode) {
    case InterventionMode::kAllPositions: return "all";
    case InterventionMode::kSampledPositions: return "sampled";
    case InterventionMode::kSinglePosition: return "single";
  }
  return "unknown";
}

InterventionMode parse_mode(std::string_view name) {
  for (auto m : {InterventionMode::kAllPositions, InterventionMode::kSampledPositions,
                 InterventionMode::kSinglePosition}) {
    if (mode_name(m) == name) return m;
  }
  throw Error(ErrorKind::kConfig,
              fmt::format("unknown intervention mode '{}' (all, sampled, single)",
                          name));
}

Predictor map_predictor(
    std::function<fit::TokenwiseMap(std::uint32_t, std::uint32_t,
                                    const Eigen::VectorXd&)> provider) {
  return [provider = std::move(provider)](std::uint32_t seq, std::uint32_t pos,
                                          const Eigen::VectorXd& h_in) {
    return fit::apply_map(provider(seq, pos, h_in), h_in);
  };
}

InterventionResult intervene_layer(ResumeBackend& backend,
                                   const store::LayerDataset& dataset,
                                   const Predictor& predict,
                                   InterventionMode mode,
                                   std::string_view map_class, std::size_t rank) {
  std::map<std::uint32_t, std::vector<std::uint32_t>> positions_by_seq;
  for (const auto& p : dataset.pairs) positions_by_seq[p.seq_id].push_back(p.pos);
  std::vector<std::pair<std::uint32_t, std::vector<std::uint32_t>>> work(
      positions_by_seq.begin(), positions_by_seq.end());
  for (auto& [seq, positions] : work) std::sort(positions.begin(), positions.end());

  struct SeqOutput {
    std::vector<analysis::EvalRecord> records;
    std::optional<double> mean_kl;
  };
  std::vector<SeqOutput> outputs(work.size());
  const std::uint32_t layer = dataset.layer_index;

  parallel_for(work.size(), [&](std::size_t w) {
    const auto& [seq, positions] = work[w];
    const SequenceStates st = backend.original_states(seq, layer);
    const auto length = static_cast<std::uint32_t>(st.after.rows());

    std::map<std::uint32_t, Eigen::VectorXd> predicted;
    for (std::uint32_t pos : positions) {
      if (pos >= length) {
        throw Error(ErrorKind::kConfig,
                    fmt::format("position {} beyond sequence {} length {}", pos,
                                seq, length));
      }
      predicted[pos] = predict(seq, pos, st.before.row(pos).transpose());
    }

    ResumeRequest req;
    req.seq_id = seq;
    req.layer = layer + 1;
    std::vector<double> kl_at(length, 0.0);
    SeqOutput& out = outputs[w];

    if (mode == InterventionMode::kSinglePosition) {
      for (std::uint32_t pos : positions) {
        req.states = st.after;
        req.states.row(pos) = predicted[pos].transpose();
        req.positions = {pos};
        const ResumeResponse resp = backend.resume(req);
        if (resp.kl.size() != 1) {
          throw Error(ErrorKind::kProtocol, "resume returned wrong KL count");
        }
        kl_at[pos] = resp.kl.front();
      }
    } else {
      req.states = st.after;
      if (mode == InterventionMode::kAllPositions) {
        for (std::uint32_t pos = 0; pos < length; ++pos) {
          auto it = predicted.find(pos);
          req.states.row(pos) =
              (it != predicted.end()
                   ? it->second
                   : predict(seq, pos, st.before.row(pos).transpose()))
                  .transpose();
        }
      } else {
        for (const auto& [pos, value] : predicted) req.states.row(pos) = value.transpose();
      }
      req.positions.resize(length);
      for (std::uint32_t pos = 0; pos < length; ++pos) req.positions[pos] = pos;
      const ResumeResponse resp = backend.resume(req);
      if (resp.kl.size() != length) {
        throw Error(ErrorKind::kProtocol, "resume returned wrong KL count");
      }
      double total = 0.0;
      std::size_t finite = 0;
      for (std::uint32_t pos = 0; pos < length; ++pos) {
        kl_at[pos] = resp.kl[pos];
        if (std::isfinite(resp.kl[pos])) {
          total += resp.kl[pos];
          ++finite;
        }
      }
      if (finite > 0) out.mean_kl = total / static_cast<double>(finite);
    }

    for (std::uint32_t pos : positions) {
      analysis::EvalRecord rec;
      rec.seq_id = seq;
      rec.pos = pos;
      rec.layer = layer;
      rec.rel_err = analysis::rel_err(predicted[pos], st.after.row(pos).transpose());
      rec.kl = kl_at[pos];
      rec.map_class = std::string(map_class);
      rec.rank = rank;
      out.records.push_back(std::move(rec));
    }
  });

  InterventionResult result;
  for (std::size_t w = 0; w < work.size(); ++w) {
    for (auto& r : outputs[w].records) result.records.push_back(std::move(r));
    if (outputs[w].mean_kl) result.sequence_mean_kl[work[w].first] = *outputs[w].mean_kl;
  }
  return result;
}

}  // namespace layerlens::eval
