#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "layerlens/map_fit.hpp"
#include "layerlens/repr_store.hpp"

namespace layerlens::geom {

// Vectors shorter than this make alignment and projection undefined.
inline constexpr double kDegenerateNorm = 1e-12;

inline const std::vector<std::size_t> kDefaultProjectionRanks = {1, 4, 8};

struct UpdateTriple {
  Eigen::VectorXd delta_full;  // h_out - h_in
  Eigen::VectorXd delta_tok;   // T(h_in) - h_in
  Eigen::VectorXd residual;    // h_out - T(h_in)
  Eigen::VectorXd t_out;       // T(h_in)
};

UpdateTriple make_triple(const Eigen::Ref<const Eigen::VectorXd>& h_in,
                         const Eigen::Ref<const Eigen::VectorXd>& h_out,
                         const fit::TokenwiseMap& map);

struct Alignment {
  double abs_cos = 0.0;     // [0, 1]
  double signed_cos = 0.0;  // [-1, 1]
  double angle_deg = 0.0;   // arccos(abs_cos) in degrees, [0, 90]
};

// nullopt when either vector is degenerate.
std::optional<Alignment> alignment(const Eigen::Ref<const Eigen::VectorXd>& v,
                                   const Eigen::Ref<const Eigen::VectorXd>& u);

// ||U_k^T v||^2 / ||v||^2 for the first k columns of `u`.
std::optional<double> projection_fraction(
    const Eigen::Ref<const Eigen::VectorXd>& v, const Eigen::MatrixXd& u,
    std::size_t k);

// Projection onto the map's top-k left singular vectors. Throws
// Error(kUnsupported) if the map has no SVD, or if its SVD is a heuristic
// (MLP) one and allow_heuristic is false.
std::optional<double> subspace_projection(
    const Eigen::Ref<const Eigen::VectorXd>& v, const fit::TokenwiseMap& map,
    std::size_t k, bool allow_heuristic = false);

struct ProjectionEntry {
  std::size_t k = 0;
  std::optional<double> full, tok, res;
};

struct GeometryRecord {
  std::uint32_t seq_id = 0;
  std::uint32_t pos = 0;
  std::optional<Alignment> full_tok;
  std::optional<Alignment> res_tok;
  std::vector<ProjectionEntry> projections;
  double norm_full = 0.0;
  double norm_tok = 0.0;
  double norm_res = 0.0;
};

GeometryRecord geometry_record(std::uint32_t seq_id, std::uint32_t pos,
                               const UpdateTriple& triple,
                               const fit::TokenwiseMap& map,
                               const std::vector<std::size_t>& ks,
                               bool allow_heuristic = false);

// maps[i] is the map assigned to dataset.pairs[i]. Output is ordered by
// (seq_id, pos).
std::vector<GeometryRecord> geometry_batch(
    const store::LayerDataset& dataset, std::span<const fit::TokenwiseMap> maps,
    const std::vector<std::size_t>& ks, bool allow_heuristic = false);

}  // namespace layerlens::geom
