#include "layerlens/map_fit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "layerlens/error.hpp"
#include "layerlens/rng.hpp"

namespace layerlens::fit {
namespace {

void check_samples(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  if (x.rows() == 0 || x.cols() == 0) {
    throw Error(ErrorKind::kConfig, "fit requires at least one sample");
  }
  if (x.rows() != y.rows() || x.cols() != y.cols()) {
    throw Error(ErrorKind::kConfig,
                fmt::format("input/target shape mismatch ({}x{} vs {}x{})",
                            x.rows(), x.cols(), y.rows(), y.cols()));
  }
  if (!x.allFinite() || !y.allFinite()) {
    throw Error(ErrorKind::kCompute, "non-finite fit samples");
  }
}

bool all_rows_identical(const Eigen::MatrixXd& x) {
  if (x.rows() < 2) return true;
  const double scale = std::max(1.0, x.cwiseAbs().maxCoeff());
  return ((x.rowwise() - x.row(0)).cwiseAbs().maxCoeff()) <= 1e-12 * scale;
}

// Canonical SVD of a diagonal matrix without a decomposition: singular
// values are |d_i| in nonincreasing order, ties by ascending index, which is
// what canonical_svd yields for coordinate vectors.
linalg::Svd diagonal_svd(const Eigen::VectorXd& diag) {
  const Eigen::Index n = diag.size();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    return std::abs(diag(a)) > std::abs(diag(b));
  });
  linalg::Svd svd{Eigen::MatrixXd::Zero(n, n), Eigen::VectorXd::Zero(n),
                  Eigen::MatrixXd::Zero(n, n)};
  for (Eigen::Index k = 0; k < n; ++k) {
    const Eigen::Index i = order[static_cast<std::size_t>(k)];
    svd.s(k) = std::abs(diag(i));
    svd.u(i, k) = 1.0;
    svd.v(i, k) = diag(i) < 0 ? -1.0 : 1.0;
  }
  return svd;
}

double activate(double v) { return std::tanh(v); }

MlpParams standardized_init(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                            const MlpConfig& cfg) {
  const Eigen::Index d = x.cols();
  const Eigen::Index h = cfg.hidden == 0 ? d : static_cast<Eigen::Index>(cfg.hidden);
  const auto n = static_cast<double>(x.rows());
  MlpParams p;
  p.activation = cfg.activation;
  const auto moments = [&](const Eigen::MatrixXd& m, Eigen::VectorXd& mean,
                           Eigen::VectorXd& scale) {
    mean = m.colwise().mean().transpose();
    scale = ((m.rowwise() - mean.transpose()).array().square().colwise().sum() / n)
                .sqrt()
                .transpose();
    for (Eigen::Index j = 0; j < scale.size(); ++j) {
      if (!(scale(j) > 1e-12)) scale(j) = 1.0;
    }
  };
  moments(x, p.in_mean, p.in_scale);
  moments(y, p.out_mean, p.out_scale);

  Rng rng(cfg.seed);
  const double init_scale = 1.0 / std::sqrt(static_cast<double>(d));
  p.w1.resize(h, d);
  for (Eigen::Index i = 0; i < h; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) p.w1(i, j) = rng.normal() * init_scale;
  }
  p.b1 = Eigen::VectorXd::Zero(h);
  p.w2 = Eigen::MatrixXd::Zero(d, h);
  p.b2 = Eigen::VectorXd::Zero(d);
  return p;
}

struct Adam {
  double lr, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::size_t t = 0;

  template <typename M>
  void step(M& param, const M& grad, M& m, M& v) const {
    m = beta1 * m + (1.0 - beta1) * grad;
    v = beta2 * v + (1.0 - beta2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
};

}  // namespace

std::string_view class_name(MapClass c) {
  switch (c) {
    case MapClass::kGlobalDiagPsd: return "global_diag_psd";
    case MapClass::kLocalDiagPsd: return "local_diag_psd";
    case MapClass::kLocalLowRank: return "local_low_rank";
    case MapClass::kOrthogonal: return "orthogonal";
    case MapClass::kMlp: return "mlp";
  }
  return "unknown";
}

MapClass parse_class(std::string_view name) {
  for (auto c : {MapClass::kGlobalDiagPsd, MapClass::kLocalDiagPsd,
                 MapClass::kLocalLowRank, MapClass::kOrthogonal, MapClass::kMlp}) {
    if (class_name(c) == name) return c;
  }
  throw Error(ErrorKind::kConfig, fmt::format(
      "unknown map class '{}' (expected global_diag_psd, local_diag_psd, "
      "local_low_rank, orthogonal or mlp)", name));
}

bool is_linear(MapClass c) { return c != MapClass::kMlp; }

std::size_t TokenwiseMap::dim() const {
  if (mlp) return static_cast<std::size_t>(mlp->in_mean.size());
  return static_cast<std::size_t>(linear.cols());
}

Eigen::VectorXd MlpParams::forward(
    const Eigen::Ref<const Eigen::VectorXd>& x) const {
  const Eigen::VectorXd z = (x - in_mean).cwiseQuotient(in_scale);
  const Eigen::VectorXd a = (w1 * z + b1).unaryExpr(&activate);
  return out_mean + out_scale.cwiseProduct(w2 * a + b2);
}

Eigen::MatrixXd MlpParams::jacobian(
    const Eigen::Ref<const Eigen::VectorXd>& x) const {
  const Eigen::VectorXd z = (x - in_mean).cwiseQuotient(in_scale);
  const Eigen::VectorXd a = (w1 * z + b1).unaryExpr(&activate);
  const Eigen::VectorXd slope = (1.0 - a.array().square()).matrix();
  return out_scale.asDiagonal() * w2 * slope.asDiagonal() * w1 *
         in_scale.cwiseInverse().asDiagonal();
}

double default_ridge(const Eigen::MatrixXd& x, double scale) {
  return scale * x.squaredNorm() / static_cast<double>(x.cols());
}

TokenwiseMap fit_diag_psd(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  check_samples(x, y);
  const Eigen::Index d = x.cols();
  Eigen::VectorXd diag(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    const double sxx = x.col(i).squaredNorm();
    const double sxy = x.col(i).dot(y.col(i));
    diag(i) = sxx > 0.0 ? std::max(0.0, sxy / sxx) : 0.0;
  }
  TokenwiseMap map;
  map.map_class = MapClass::kLocalDiagPsd;
  map.rank = static_cast<std::size_t>(d);
  map.linear = diag.asDiagonal();
  map.svd = diagonal_svd(diag);
  map.degenerate = all_rows_identical(x);
  return map;
}

TokenwiseMap fit_low_rank(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                          std::size_t r, std::optional<double> ridge) {
  check_samples(x, y);
  const Eigen::Index d = x.cols();
  if (r < 1 || r > static_cast<std::size_t>(d)) {
    throw Error(ErrorKind::kConfig,
                fmt::format("rank {} outside [1, {}]", r, d));
  }
  const double lambda = ridge.value_or(default_ridge(x));
  if (lambda < 0.0 || !std::isfinite(lambda)) {
    throw Error(ErrorKind::kConfig, "ridge must be finite and >= 0");
  }
  // Solve for W^T: (X^T X + lambda I) W^T = X^T Y.
  Eigen::MatrixXd wt;
  if (lambda > 0.0) {
    Eigen::MatrixXd gram = x.transpose() * x;
    gram.diagonal().array() += lambda;
    wt = gram.ldlt().solve(x.transpose() * y);
  } else {
    wt = x.completeOrthogonalDecomposition().solve(y);
  }
  const Eigen::MatrixXd w = wt.transpose();

  TokenwiseMap map;
  map.map_class = MapClass::kLocalLowRank;
  map.rank = r;
  map.ridge = lambda;
  map.degenerate = all_rows_identical(x);
  linalg::Svd svd = linalg::canonical_svd(w);
  if (r == static_cast<std::size_t>(d)) {
    map.linear = w;
  } else {
    const auto rr = static_cast<Eigen::Index>(r);
    map.linear = linalg::truncate(svd, rr);
    svd.s.tail(d - rr).setZero();
  }
  map.svd = std::move(svd);
  return map;
}

TokenwiseMap fit_orthogonal(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  check_samples(x, y);
  // Cross-covariance sum_j y_j x_j^T.
  const Eigen::MatrixXd cross = y.transpose() * x;
  const linalg::Svd svd = linalg::canonical_svd(cross);
  TokenwiseMap map;
  map.map_class = MapClass::kOrthogonal;
  map.rank = static_cast<std::size_t>(x.cols());
  map.linear = svd.u * svd.v.transpose();
  map.svd = linalg::canonical_svd(map.linear);
  map.degenerate = all_rows_identical(x);
  return map;
}

TokenwiseMap fit_global_diag(const store::LayerDataset& dataset) {
  if (dataset.pairs.empty()) {
    throw Error(ErrorKind::kConfig, "global fit requires a nonempty dataset");
  }
  TokenwiseMap map = fit_diag_psd(dataset.inputs(), dataset.outputs());
  map.map_class = MapClass::kGlobalDiagPsd;
  return map;
}

TokenwiseMap fit_mlp(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                     const MlpConfig& cfg) {
  check_samples(x, y);
  MlpParams p = standardized_init(x, y, cfg);
  const auto n = static_cast<double>(x.rows());

  // Work in standardized coordinates; the loss is still the original-space
  // squared error, so residuals are weighted by out_scale^2.
  const Eigen::MatrixXd z =
      ((x.rowwise() - p.in_mean.transpose()).array().rowwise() /
       p.in_scale.transpose().array())
          .matrix()
          .transpose();  // d x n
  const Eigen::MatrixXd t =
      ((y.rowwise() - p.out_mean.transpose()).array().rowwise() /
       p.out_scale.transpose().array())
          .matrix()
          .transpose();  // d x n
  const Eigen::VectorXd weight = p.out_scale.array().square();

  Eigen::MatrixXd m_w1 = Eigen::MatrixXd::Zero(p.w1.rows(), p.w1.cols());
  Eigen::MatrixXd v_w1 = m_w1;
  Eigen::MatrixXd m_w2 = Eigen::MatrixXd::Zero(p.w2.rows(), p.w2.cols());
  Eigen::MatrixXd v_w2 = m_w2;
  Eigen::VectorXd m_b1 = Eigen::VectorXd::Zero(p.b1.size()), v_b1 = m_b1;
  Eigen::VectorXd m_b2 = Eigen::VectorXd::Zero(p.b2.size()), v_b2 = m_b2;
  Adam adam{cfg.step_size};

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const Eigen::MatrixXd a =
        ((p.w1 * z).colwise() + p.b1).unaryExpr(&activate);
    const Eigen::MatrixXd out = (p.w2 * a).colwise() + p.b2;
    const Eigen::MatrixXd err = out - t;
    const double loss =
        (weight.asDiagonal() * err.cwiseProduct(err)).sum() / n;
    if (!std::isfinite(loss)) {
      throw Error(ErrorKind::kCompute,
                  fmt::format("mlp fit diverged at step {}", step));
    }
    const Eigen::MatrixXd g_out = (2.0 / n) * (weight.asDiagonal() * err);
    const Eigen::MatrixXd g_w2 = g_out * a.transpose();
    const Eigen::VectorXd g_b2 = g_out.rowwise().sum();
    const Eigen::MatrixXd g_pre =
        (p.w2.transpose() * g_out).cwiseProduct((1.0 - a.array().square()).matrix());
    const Eigen::MatrixXd g_w1 = g_pre * z.transpose();
    const Eigen::VectorXd g_b1 = g_pre.rowwise().sum();

    adam.t = step + 1;
    adam.step(p.w1, g_w1, m_w1, v_w1);
    adam.step(p.b1, g_b1, m_b1, v_b1);
    adam.step(p.w2, g_w2, m_w2, v_w2);
    adam.step(p.b2, g_b2, m_b2, v_b2);
  }
  if (!p.w1.allFinite() || !p.w2.allFinite() || !p.b1.allFinite() ||
      !p.b2.allFinite()) {
    throw Error(ErrorKind::kCompute,
                fmt::format("mlp fit diverged at step {}", cfg.steps));
  }

  TokenwiseMap map;
  map.map_class = MapClass::kMlp;
  map.rank = static_cast<std::size_t>(x.cols());
  map.svd = linalg::canonical_svd(p.jacobian(p.in_mean));
  map.heuristic_svd = true;
  map.mlp = std::move(p);
  map.degenerate = all_rows_identical(x);
  return map;
}

TokenwiseMap fit_samples(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                         const FitConfig& cfg) {
  switch (cfg.map_class) {
    case MapClass::kGlobalDiagPsd:
    case MapClass::kLocalDiagPsd: {
      TokenwiseMap map = fit_diag_psd(x, y);
      map.map_class = cfg.map_class;
      return map;
    }
    case MapClass::kLocalLowRank:
      return fit_low_rank(x, y, cfg.rank,
                          cfg.ridge.value_or(default_ridge(x, cfg.ridge_scale)));
    case MapClass::kOrthogonal:
      return fit_orthogonal(x, y);
    case MapClass::kMlp:
      return fit_mlp(x, y, cfg.mlp);
  }
  throw Error(ErrorKind::kUnsupported, "unhandled map class");
}

Eigen::VectorXd apply_map(const TokenwiseMap& map,
                          const Eigen::Ref<const Eigen::VectorXd>& x) {
  if (static_cast<std::size_t>(x.size()) != map.dim()) {
    throw Error(ErrorKind::kConfig,
                fmt::format("dimension mismatch: map {} vs vector {}", map.dim(),
                            x.size()));
  }
  if (map.mlp) return map.mlp->forward(x);
  return map.linear * x;
}

namespace {

TokenwiseMap fit_neighborhood(const Eigen::MatrixXd& inputs,
                              const Eigen::MatrixXd& outputs,
                              const nbr::Neighborhood& hood,
                              const Eigen::Ref<const Eigen::VectorXd>& at,
                              const FitConfig& cfg) {
  const auto k = static_cast<Eigen::Index>(hood.member_indices.size());
  Eigen::MatrixXd x(k, inputs.cols());
  Eigen::MatrixXd y(k, outputs.cols());
  for (Eigen::Index r = 0; r < k; ++r) {
    const auto src = static_cast<Eigen::Index>(hood.member_indices[static_cast<std::size_t>(r)]);
    x.row(r) = inputs.row(src);
    y.row(r) = outputs.row(src);
  }
  TokenwiseMap map = fit_samples(x, y, cfg);
  if (map.mlp) map.svd = linalg::canonical_svd(map.mlp->jacobian(at));
  return map;
}

}  // namespace

TokenwiseMap fit_anchor(const Eigen::MatrixXd& inputs,
                        const Eigen::MatrixXd& outputs,
                        const nbr::NeighborIndex& index, std::size_t anchor,
                        const FitConfig& cfg) {
  const nbr::Neighborhood hood = index.knn_of_key(anchor, cfg.k);
  TokenwiseMap map = fit_neighborhood(
      inputs, outputs, hood,
      inputs.row(static_cast<Eigen::Index>(anchor)).transpose(), cfg);
  map.anchor_index = anchor;
  return map;
}

TokenwiseMap fit_anchor(const store::LayerDataset& dataset,
                        const nbr::NeighborIndex& index, std::size_t anchor,
                        const FitConfig& cfg) {
  return fit_anchor(dataset.inputs(), dataset.outputs(), index, anchor, cfg);
}

TokenwiseMap fit_at_query(const Eigen::MatrixXd& inputs,
                          const Eigen::MatrixXd& outputs,
                          const nbr::NeighborIndex& index,
                          const Eigen::Ref<const Eigen::VectorXd>& query,
                          const FitConfig& cfg) {
  return fit_neighborhood(inputs, outputs, index.knn(query, cfg.k), query, cfg);
}

InterpolationWeights interpolation_weights(
    const nbr::NeighborIndex& anchor_positions,
    const Eigen::Ref<const Eigen::VectorXd>& query, std::size_t p) {
  if (p == 0) throw Error(ErrorKind::kConfig, "interpolation needs p >= 1");
  p = std::min(p, anchor_positions.usable_size());
  const nbr::Neighborhood hood = anchor_positions.knn(query, p);
  InterpolationWeights out;
  const double nearest = std::max(0.0, 1.0 - hood.similarities.front());
  if (nearest < 1e-12) {
    out.anchors = {hood.member_indices.front()};
    out.weights = {1.0};
    return out;
  }
  double total = 0.0;
  for (std::size_t i = 0; i < hood.member_indices.size(); ++i) {
    const double dist = std::max(0.0, 1.0 - hood.similarities[i]);
    const double w = 1.0 / (dist + 1e-8);
    out.anchors.push_back(hood.member_indices[i]);
    out.weights.push_back(w);
    total += w;
  }
  for (double& w : out.weights) w /= total;
  return out;
}

TokenwiseMap interpolate_maps(std::span<const TokenwiseMap> maps,
                              const nbr::NeighborIndex& anchor_positions,
                              const Eigen::Ref<const Eigen::VectorXd>& query,
                              std::size_t p) {
  if (maps.size() != anchor_positions.size()) {
    throw Error(ErrorKind::kConfig, "one map per anchor position required");
  }
  for (const auto& m : maps) {
    if (!is_linear(m.map_class)) {
      throw Error(ErrorKind::kUnsupported,
                  fmt::format("cannot interpolate maps of class {}",
                              class_name(m.map_class)));
    }
  }
  const InterpolationWeights iw = interpolation_weights(anchor_positions, query, p);
  if (iw.anchors.size() == 1) return maps[iw.anchors.front()];

  const TokenwiseMap& first = maps[iw.anchors.front()];
  TokenwiseMap out;
  out.map_class = first.map_class;
  out.rank = first.rank;
  out.ridge = first.ridge;
  out.interpolated = true;
  out.linear = Eigen::MatrixXd::Zero(first.linear.rows(), first.linear.cols());
  for (std::size_t i = 0; i < iw.anchors.size(); ++i) {
    const TokenwiseMap& m = maps[iw.anchors[i]];
    if (m.map_class != first.map_class) {
      throw Error(ErrorKind::kUnsupported, "cannot interpolate mixed map classes");
    }
    out.linear += iw.weights[i] * m.linear;
    out.degenerate = out.degenerate || m.degenerate;
  }
  switch (out.map_class) {
    case MapClass::kGlobalDiagPsd:
    case MapClass::kLocalDiagPsd:
      out.svd = diagonal_svd(out.linear.diagonal());
      break;
    case MapClass::kOrthogonal:
      // A convex combination of rotations is not orthogonal; project back.
      out.linear = linalg::nearest_orthogonal(out.linear);
      out.svd = linalg::canonical_svd(out.linear);
      break;
    default:
      out.svd = linalg::canonical_svd(out.linear);
  }
  return out;
}

}  // namespace layerlens::fit
