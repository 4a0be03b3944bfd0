#include "layerlens/map_io.hpp"

#include <limits>

#include <fmt/format.h>

#include "byte_io.hpp"
#include "layerlens/error.hpp"

namespace layerlens::fit {
namespace {

constexpr char kMagic[4] = {'L', 'M', 'P', '1'};
constexpr std::uint64_t kNoAnchor = std::numeric_limits<std::uint64_t>::max();

enum Flags : std::uint8_t {
  kDegenerate = 1,
  kInterpolated = 2,
  kHasSvd = 4,
  kHeuristicSvd = 8,
};

std::uint32_t class_tag(MapClass c) { return static_cast<std::uint32_t>(c); }

MapClass class_from_tag(std::uint32_t tag) {
  if (tag > static_cast<std::uint32_t>(MapClass::kMlp)) {
    throw Error(ErrorKind::kFormat, fmt::format("unknown map class tag {}", tag));
  }
  return static_cast<MapClass>(tag);
}

void put_matrix(std::string& buf, const Eigen::MatrixXd& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) detail::put_f64(buf, m(i, j));
  }
}

void put_vector(std::string& buf, const Eigen::VectorXd& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) detail::put_f64(buf, v(i));
}

Eigen::MatrixXd get_matrix(detail::Reader& r, Eigen::Index rows,
                           Eigen::Index cols) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = r.get_f64();
  }
  return m;
}

Eigen::VectorXd get_vector(detail::Reader& r, Eigen::Index n) {
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = r.get_f64();
  return v;
}

}  // namespace

std::string map_file_name(std::uint32_t layer_index) {
  return fmt::format("maps_{}.lmp", layer_index);
}

void write_map_set(const MapSet& set, const std::filesystem::path& file) {
  std::string buf;
  buf.append(kMagic, 4);
  detail::put_le<std::uint32_t>(buf, kMapFileVersion);
  detail::put_le<std::uint32_t>(buf, class_tag(set.map_class));
  detail::put_le<std::uint32_t>(buf, set.layer_index);
  detail::put_le<std::uint32_t>(buf, set.dim);
  detail::put_le<std::uint32_t>(buf, set.rank);
  detail::put_le<std::uint64_t>(buf, set.maps.size());
  for (const auto& m : set.maps) {
    if (m.map_class != set.map_class || m.dim() != set.dim) {
      throw Error(ErrorKind::kFormat, "map set contains a map of another class or dimension");
    }
    detail::put_le<std::uint64_t>(buf, m.anchor_index ? *m.anchor_index : kNoAnchor);
    std::uint8_t flags = 0;
    if (m.degenerate) flags |= kDegenerate;
    if (m.interpolated) flags |= kInterpolated;
    if (m.svd) flags |= kHasSvd;
    if (m.heuristic_svd) flags |= kHeuristicSvd;
    detail::put_le<std::uint8_t>(buf, flags);
    detail::put_f64(buf, m.ridge);
    if (m.mlp) {
      const MlpParams& p = *m.mlp;
      detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(p.w1.rows()));
      detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(p.activation));
      put_vector(buf, p.in_mean);
      put_vector(buf, p.in_scale);
      put_vector(buf, p.out_mean);
      put_vector(buf, p.out_scale);
      put_matrix(buf, p.w1);
      put_vector(buf, p.b1);
      put_matrix(buf, p.w2);
      put_vector(buf, p.b2);
    } else {
      put_matrix(buf, m.linear);
    }
    if (m.svd) {
      put_matrix(buf, m.svd->u);
      put_vector(buf, m.svd->s);
      put_matrix(buf, m.svd->v);
    }
  }
  detail::write_file_bytes(file.string(), buf);
}

MapSet read_map_set(const std::filesystem::path& file) {
  const std::string bytes = detail::read_file_bytes(file.string());
  detail::Reader r(bytes, file.filename().string());
  if (r.get_bytes(4) != std::string(kMagic, 4)) {
    throw Error(ErrorKind::kFormat, file.filename().string() + ": bad magic");
  }
  const auto version = r.get_le<std::uint32_t>();
  if (version != kMapFileVersion) {
    throw Error(ErrorKind::kFormat,
                fmt::format("{}: version mismatch ({})", file.filename().string(),
                            version));
  }
  MapSet set;
  set.map_class = class_from_tag(r.get_le<std::uint32_t>());
  set.layer_index = r.get_le<std::uint32_t>();
  set.dim = r.get_le<std::uint32_t>();
  set.rank = r.get_le<std::uint32_t>();
  const auto count = r.get_le<std::uint64_t>();
  const auto d = static_cast<Eigen::Index>(set.dim);
  if (d == 0) throw Error(ErrorKind::kFormat, "map set with zero dimension");
  // Smallest possible block: anchor + flags + ridge + parameters.
  const auto du = static_cast<std::size_t>(d);
  const std::size_t min_block =
      17 + (set.map_class == MapClass::kMlp ? 8 + 8 * (7 * du + 1) : 8 * du * du);
  if (count > r.remaining() / min_block) {
    throw Error(ErrorKind::kFormat, "map count exceeds file size");
  }
  set.maps.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    TokenwiseMap m;
    m.map_class = set.map_class;
    m.rank = set.rank;
    const auto anchor = r.get_le<std::uint64_t>();
    if (anchor != kNoAnchor) m.anchor_index = anchor;
    const auto flags = r.get_le<std::uint8_t>();
    m.degenerate = flags & kDegenerate;
    m.interpolated = flags & kInterpolated;
    m.heuristic_svd = flags & kHeuristicSvd;
    m.ridge = r.get_f64();
    if (set.map_class == MapClass::kMlp) {
      MlpParams p;
      const auto hidden = static_cast<Eigen::Index>(r.get_le<std::uint32_t>());
      const auto act = r.get_le<std::uint32_t>();
      if (act != static_cast<std::uint32_t>(Activation::kTanh)) {
        throw Error(ErrorKind::kFormat, fmt::format("unknown activation {}", act));
      }
      if (hidden == 0 || static_cast<std::size_t>(hidden) >
                             r.remaining() / (8 * static_cast<std::size_t>(2 * d + 1))) {
        throw Error(ErrorKind::kFormat, "implausible mlp hidden width");
      }
      p.in_mean = get_vector(r, d);
      p.in_scale = get_vector(r, d);
      p.out_mean = get_vector(r, d);
      p.out_scale = get_vector(r, d);
      p.w1 = get_matrix(r, hidden, d);
      p.b1 = get_vector(r, hidden);
      p.w2 = get_matrix(r, d, hidden);
      p.b2 = get_vector(r, d);
      m.mlp = std::move(p);
    } else {
      m.linear = get_matrix(r, d, d);
    }
    if (flags & kHasSvd) {
      linalg::Svd svd;
      svd.u = get_matrix(r, d, d);
      svd.s = get_vector(r, d);
      svd.v = get_matrix(r, d, d);
      m.svd = std::move(svd);
    }
    set.maps.push_back(std::move(m));
  }
  if (r.remaining() != 0) {
    throw Error(ErrorKind::kFormat, "trailing bytes after map set");
  }
  return set;
}

}  // namespace layerlens::fit
