#include "layerlens/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <numbers>

#include <fmt/format.h>

#include "layerlens/error.hpp"
#include "layerlens/parallel.hpp"

namespace layerlens::geom {

UpdateTriple make_triple(const Eigen::Ref<const Eigen::VectorXd>& h_in,
                         const Eigen::Ref<const Eigen::VectorXd>& h_out,
                         const fit::TokenwiseMap& map) {
  if (h_in.size() != h_out.size()) {
    throw Error(ErrorKind::kConfig,
                fmt::format("dimension mismatch: h_in {} vs h_out {}",
                            h_in.size(), h_out.size()));
  }
  UpdateTriple t;
  t.t_out = fit::apply_map(map, h_in);
  t.delta_full = h_out - h_in;
  t.delta_tok = t.t_out - h_in;
  t.residual = h_out - t.t_out;
  return t;
}

std::optional<Alignment> alignment(const Eigen::Ref<const Eigen::VectorXd>& v,
                                   const Eigen::Ref<const Eigen::VectorXd>& u) {
  const double nv = v.norm();
  const double nu = u.norm();
  if (!(nv >= kDegenerateNorm) || !(nu >= kDegenerateNorm)) return std::nullopt;
  Alignment a;
  a.signed_cos = std::clamp(v.dot(u) / (nv * nu), -1.0, 1.0);
  a.abs_cos = std::abs(a.signed_cos);
  a.angle_deg = std::acos(a.abs_cos) * 180.0 / std::numbers::pi;
  return a;
}

std::optional<double> projection_fraction(
    const Eigen::Ref<const Eigen::VectorXd>& v, const Eigen::MatrixXd& u,
    std::size_t k) {
  if (k > static_cast<std::size_t>(u.cols()) || u.rows() != v.size()) {
    throw Error(ErrorKind::kConfig,
                fmt::format("projection rank {} invalid for a {}x{} basis", k,
                            u.rows(), u.cols()));
  }
  const double energy = v.squaredNorm();
  if (!(std::sqrt(energy) >= kDegenerateNorm)) return std::nullopt;
  const double captured =
      (u.leftCols(static_cast<Eigen::Index>(k)).transpose() * v).squaredNorm();
  return std::clamp(captured / energy, 0.0, 1.0);
}

std::optional<double> subspace_projection(
    const Eigen::Ref<const Eigen::VectorXd>& v, const fit::TokenwiseMap& map,
    std::size_t k, bool allow_heuristic) {
  if (!map.svd) {
    throw Error(ErrorKind::kUnsupported, "map carries no singular vectors");
  }
  if (map.heuristic_svd && !allow_heuristic) {
    throw Error(ErrorKind::kUnsupported,
                "subspace projection for mlp maps is heuristic and disabled");
  }
  return projection_fraction(v, map.svd->u, k);
}

GeometryRecord geometry_record(std::uint32_t seq_id, std::uint32_t pos,
                               const UpdateTriple& triple,
                               const fit::TokenwiseMap& map,
                               const std::vector<std::size_t>& ks,
                               bool allow_heuristic) {
  GeometryRecord rec;
  rec.seq_id = seq_id;
  rec.pos = pos;
  rec.full_tok = alignment(triple.delta_full, triple.delta_tok);
  rec.res_tok = alignment(triple.residual, triple.delta_tok);
  rec.norm_full = triple.delta_full.norm();
  rec.norm_tok = triple.delta_tok.norm();
  rec.norm_res = triple.residual.norm();
  for (std::size_t k : ks) {
    ProjectionEntry e;
    e.k = k;
    e.full = subspace_projection(triple.delta_full, map, k, allow_heuristic);
    e.tok = subspace_projection(triple.delta_tok, map, k, allow_heuristic);
    e.res = subspace_projection(triple.residual, map, k, allow_heuristic);
    rec.projections.push_back(e);
  }
  return rec;
}

std::vector<GeometryRecord> geometry_batch(
    const store::LayerDataset& dataset, std::span<const fit::TokenwiseMap> maps,
    const std::vector<std::size_t>& ks, bool allow_heuristic) {
  if (maps.size() != dataset.pairs.size()) {
    throw Error(ErrorKind::kConfig,
                fmt::format("{} maps for {} tokens", maps.size(),
                            dataset.pairs.size()));
  }
  std::vector<std::size_t> order(dataset.pairs.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& pa = dataset.pairs[a];
    const auto& pb = dataset.pairs[b];
    return std::tie(pa.seq_id, pa.pos) < std::tie(pb.seq_id, pb.pos);
  });
  std::vector<GeometryRecord> out(order.size());
  parallel_for(order.size(), [&](std::size_t slot) {
    const std::size_t i = order[slot];
    const auto& p = dataset.pairs[i];
    const Eigen::VectorXd h_in =
        Eigen::Map<const Eigen::VectorXf>(p.h_in.data(), dataset.dim).cast<double>();
    const Eigen::VectorXd h_out =
        Eigen::Map<const Eigen::VectorXf>(p.h_out.data(), dataset.dim).cast<double>();
    out[slot] = geometry_record(p.seq_id, p.pos, make_triple(h_in, h_out, maps[i]),
                                maps[i], ks, allow_heuristic);
  });
  return out;
}

}  // namespace layerlens::geom
