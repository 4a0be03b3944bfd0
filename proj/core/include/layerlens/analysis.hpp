#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "layerlens/geometry.hpp"

namespace layerlens::analysis {

// ||pred - target|| / ||target||; nullopt when ||target|| <= 1e-12.
std::optional<double> rel_err(const Eigen::Ref<const Eigen::VectorXd>& pred,
                              const Eigen::Ref<const Eigen::VectorXd>& target);

// Average ranks (1-based, ties share the mean rank). +inf sorts last.
std::vector<double> average_ranks(std::span<const double> values);

// Spearman rank correlation: Pearson correlation of average ranks. nullopt
// for fewer than 3 points, length mismatch, or a constant side.
std::optional<double> spearman(std::span<const double> x,
                               std::span<const double> y);

struct EvalRecord {
  std::uint32_t seq_id = 0;
  std::uint32_t pos = 0;
  std::uint32_t layer = 0;
  std::optional<double> rel_err;  // nullopt: degenerate target
  double kl = 0.0;                // nats; +inf marks a support violation
  std::string map_class;
  std::size_t rank = 0;
};

enum class Regime { kLow, kMid, kHigh };
inline constexpr std::array<Regime, 3> kRegimes = {Regime::kLow, Regime::kMid,
                                                   Regime::kHigh};
std::string_view regime_name(Regime r);

struct RegimeRow {
  std::size_t count = 0;  // 0 marks an empty bin
  std::optional<double> mean_rel_err;
  std::optional<double> mean_kl;  // over finite KL only
  std::optional<double> rho;
  std::size_t infinite_kl = 0;
};

// Regime bins for one map class; thresholds are the RelErr values at
// sorted positions ceil(n/3)-1 and ceil(2n/3)-1, bins are
// (-inf, t1], (t1, t2], (t2, inf).
struct RegimeTable {
  std::string map_class;
  double low_threshold = 0.0;
  double high_threshold = 0.0;
  std::array<RegimeRow, 3> rows;  // indexed by Regime
  RegimeRow overall;              // pooled over all tokens
  std::size_t degenerate = 0;     // records without a RelErr
};

// Throws Error(kConfig) with fewer than 3 non-degenerate records.
RegimeTable bin_regimes(std::span<const EvalRecord> records);

Regime regime_of(const RegimeTable& table, double rel_err);

struct ProjectionMeans {
  std::size_t k = 0;
  std::optional<double> full, tok, res;
};

struct LayerSummary {
  std::uint32_t layer = 0;
  std::size_t count = 0;
  std::optional<double> spearman_rho;
  std::optional<double> mean_rel_err;
  std::optional<double> median_rel_err;
  std::optional<double> mean_kl;
  std::size_t infinite_kl = 0;
  std::size_t degenerate_rel_err = 0;
  // Residual magnitude ||h_out - T(h_in)||.
  std::optional<double> mean_residual_norm;
  std::optional<double> median_residual_norm;
  // Relative residual ||r|| / ||delta_full||.
  std::optional<double> mean_residual_ratio;
  std::optional<double> mean_align_full_tok;
  std::optional<double> mean_align_res_tok;
  std::optional<double> mean_signed_full_tok;
  std::optional<double> mean_signed_res_tok;
  std::optional<double> mean_angle_full_tok;
  std::optional<double> mean_angle_res_tok;
  std::size_t degenerate_full_tok = 0;
  std::size_t degenerate_res_tok = 0;
  std::vector<ProjectionMeans> projections;
  std::size_t geometry_count = 0;
};

LayerSummary summarize_layer(std::span<const EvalRecord> records,
                             std::span<const geom::GeometryRecord> geometry,
                             std::uint32_t layer);

struct ModelSummary {
  double mean_rho = 0.0;
  std::size_t layers_used = 0;
  std::size_t layers_excluded = 0;
};

// Unweighted mean of defined per-layer rho. Throws Error(kCompute) when no
// layer has a defined rho.
ModelSummary model_summary(std::span<const LayerSummary> layers);

std::optional<double> median(std::vector<double> values);

}  // namespace layerlens::analysis
