#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include <Eigen/Dense>

#include "layerlens/linalg.hpp"
#include "layerlens/neighborhood.hpp"
#include "layerlens/repr_store.hpp"

namespace layerlens::fit {

enum class MapClass {
  kGlobalDiagPsd,
  kLocalDiagPsd,
  kLocalLowRank,
  kOrthogonal,
  kMlp,
};

std::string_view class_name(MapClass c);
MapClass parse_class(std::string_view name);
bool is_linear(MapClass c);

enum class Activation { kTanh };

// One-hidden-layer network acting on standardized coordinates:
//   y = out_mean + out_scale .* (w2 * act(w1 * z + b1) + b2),
//   z = (x - in_mean) ./ in_scale.
struct MlpParams {
  Activation activation = Activation::kTanh;
  Eigen::VectorXd in_mean, in_scale, out_mean, out_scale;
  Eigen::MatrixXd w1;  // hidden x d
  Eigen::VectorXd b1;
  Eigen::MatrixXd w2;  // d x hidden
  Eigen::VectorXd b2;

  Eigen::VectorXd forward(const Eigen::Ref<const Eigen::VectorXd>& x) const;
  // d x d Jacobian of forward at x.
  Eigen::MatrixXd jacobian(const Eigen::Ref<const Eigen::VectorXd>& x) const;

  bool operator==(const MlpParams&) const = default;
};

// A fitted tokenwise transformation. Linear classes store their d x d
// matrix in `linear`; the MLP class stores `mlp` instead.
struct TokenwiseMap {
  MapClass map_class = MapClass::kLocalLowRank;
  // Target rank for low-rank maps; the dimension otherwise.
  std::size_t rank = 0;
  Eigen::MatrixXd linear;
  std::optional<MlpParams> mlp;
  // Canonical SVD of the linear map. For MLP maps this is the SVD of the
  // network Jacobian at the anchor (or at the input mean) and
  // `heuristic_svd` is set.
  std::optional<linalg::Svd> svd;
  bool heuristic_svd = false;
  std::optional<std::size_t> anchor_index;
  // All fit inputs were identical.
  bool degenerate = false;
  // Produced by interpolate_maps rather than a direct fit.
  bool interpolated = false;
  // Ridge strength used by the least-squares solve (low-rank only).
  double ridge = 0.0;

  std::size_t dim() const;
};

inline constexpr double kDefaultRidgeScale = 1e-6;

struct MlpConfig {
  std::size_t hidden = 0;  // 0 selects the input dimension
  std::size_t steps = 500;
  double step_size = 1e-2;
  std::uint64_t seed = 0;
  Activation activation = Activation::kTanh;
};

struct FitConfig {
  MapClass map_class = MapClass::kLocalLowRank;
  std::size_t rank = 8;
  std::size_t k = 64;
  // Absolute ridge; unset means ridge_scale * trace(X^T X) / d on the
  // fitted samples.
  std::optional<double> ridge;
  double ridge_scale = kDefaultRidgeScale;
  MlpConfig mlp;
};

// scale * trace(X^T X) / d.
double default_ridge(const Eigen::MatrixXd& x, double scale = kDefaultRidgeScale);

// All functions take samples as rows: x and y are n x d and the fitted map
// acts on column vectors, y_j ~ T(x_j).
TokenwiseMap fit_diag_psd(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y);

// Ridge least squares followed by SVD truncation of the solution to rank r
// (no refit). With r == d the solution itself is returned.
TokenwiseMap fit_low_rank(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                          std::size_t r, std::optional<double> ridge);

// Orthogonal Procrustes over the full orthogonal group.
TokenwiseMap fit_orthogonal(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y);

TokenwiseMap fit_global_diag(const store::LayerDataset& dataset);

// Full-batch Adam on the squared reconstruction error. Throws
// Error(kCompute) if the loss becomes non-finite.
TokenwiseMap fit_mlp(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                     const MlpConfig& cfg);

// Class dispatch on already-gathered samples.
TokenwiseMap fit_samples(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                         const FitConfig& cfg);

Eigen::VectorXd apply_map(const TokenwiseMap& map,
                          const Eigen::Ref<const Eigen::VectorXd>& x);

// Fits on the k-neighborhood of training key `anchor` (the anchor included).
// `inputs`/`outputs` are the n x d matrices the index was built from.
TokenwiseMap fit_anchor(const Eigen::MatrixXd& inputs,
                        const Eigen::MatrixXd& outputs,
                        const nbr::NeighborIndex& index, std::size_t anchor,
                        const FitConfig& cfg);

TokenwiseMap fit_anchor(const store::LayerDataset& dataset,
                        const nbr::NeighborIndex& index, std::size_t anchor,
                        const FitConfig& cfg);

// Fits on the k training neighbors of an arbitrary query vector.
TokenwiseMap fit_at_query(const Eigen::MatrixXd& inputs,
                          const Eigen::MatrixXd& outputs,
                          const nbr::NeighborIndex& index,
                          const Eigen::Ref<const Eigen::VectorXd>& query,
                          const FitConfig& cfg);

struct InterpolationWeights {
  std::vector<std::size_t> anchors;
  std::vector<double> weights;  // nonnegative, sum to one
};

// Picks the p anchors nearest to `query` by cosine distance and weights them
// by 1 / (distance + 1e-8). A single anchor at distance < 1e-12 gets all
// the weight.
InterpolationWeights interpolation_weights(
    const nbr::NeighborIndex& anchor_positions,
    const Eigen::Ref<const Eigen::VectorXd>& query, std::size_t p);

// maps[i] belongs to row i of anchor_positions.
TokenwiseMap interpolate_maps(std::span<const TokenwiseMap> maps,
                              const nbr::NeighborIndex& anchor_positions,
                              const Eigen::Ref<const Eigen::VectorXd>& query,
                              std::size_t p);

}  // namespace layerlens::fit
