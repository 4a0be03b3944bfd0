#include "layerlens/neighborhood.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "layerlens/error.hpp"
#include "layerlens/rng.hpp"

namespace layerlens::nbr {

NeighborIndex::NeighborIndex(Eigen::MatrixXd keys) : keys_(std::move(keys)) {
  if (keys_.rows() == 0 || keys_.cols() == 0) {
    throw Error(ErrorKind::kConfig, "cannot build a neighbor index from no vectors");
  }
  norms_ = keys_.rowwise().norm();
  unit_ = keys_;
  zero_.assign(size(), false);
  for (Eigen::Index i = 0; i < keys_.rows(); ++i) {
    if (!(norms_(i) > kZeroNorm)) {
      zero_[static_cast<std::size_t>(i)] = true;
      unit_.row(i).setZero();
    } else {
      unit_.row(i) /= norms_(i);
      ++usable_;
    }
  }
  if (usable_ < size()) {
    spdlog::warn("neighbor index: {} zero-norm key(s) excluded from queries",
                 size() - usable_);
  }
}

Eigen::VectorXd NeighborIndex::similarities(
    const Eigen::Ref<const Eigen::VectorXd>& query) const {
  if (static_cast<std::size_t>(query.size()) != dim()) {
    throw Error(ErrorKind::kConfig,
                fmt::format("query dimension {} != index dimension {}",
                            query.size(), dim()));
  }
  const double qn = query.norm();
  if (!(qn > kZeroNorm)) {
    throw Error(ErrorKind::kConfig, "zero query vector");
  }
  Eigen::VectorXd sims = unit_ * (query / qn);
  for (std::size_t i = 0; i < size(); ++i) {
    if (zero_[i]) sims(static_cast<Eigen::Index>(i)) =
        -std::numeric_limits<double>::infinity();
  }
  return sims;
}

namespace {

// Top-k of `sims` over non-zero keys, ordered by similarity then index. When
// `forced` is set that key is guaranteed a place (replacing the k-th entry).
Neighborhood top_k(const Eigen::VectorXd& sims, const std::vector<bool>& zero,
                   std::size_t k, std::optional<std::size_t> forced) {
  const auto before = [&](std::size_t a, std::size_t b) {
    const double sa = sims(static_cast<Eigen::Index>(a));
    const double sb = sims(static_cast<Eigen::Index>(b));
    return sa > sb || (sa == sb && a < b);
  };
  std::vector<std::size_t> order;
  order.reserve(zero.size());
  for (std::size_t i = 0; i < zero.size(); ++i) {
    if (!zero[i]) order.push_back(i);
  }
  const auto kk = static_cast<std::ptrdiff_t>(k);
  std::partial_sort(order.begin(), order.begin() + kk, order.end(), before);
  order.resize(k);
  if (forced && std::find(order.begin(), order.end(), *forced) == order.end()) {
    order.back() = *forced;
    std::sort(order.begin(), order.end(), before);
  }
  Neighborhood out;
  out.member_indices = std::move(order);
  out.similarities.reserve(k);
  for (std::size_t i : out.member_indices) {
    out.similarities.push_back(sims(static_cast<Eigen::Index>(i)));
  }
  return out;
}

}  // namespace

Neighborhood NeighborIndex::knn(const Eigen::Ref<const Eigen::VectorXd>& query,
                                std::size_t k) const {
  if (k == 0 || k > usable_) {
    throw Error(ErrorKind::kConfig,
                fmt::format("k = {} out of range (usable index size {})", k,
                            usable_));
  }
  return top_k(similarities(query), zero_, k, std::nullopt);
}

Neighborhood NeighborIndex::knn_of_key(std::size_t i, std::size_t k) const {
  if (i >= size()) {
    throw Error(ErrorKind::kConfig, fmt::format("key {} out of range", i));
  }
  if (k == 0 || k > usable_) {
    throw Error(ErrorKind::kConfig,
                fmt::format("k = {} out of range (usable index size {})", k,
                            usable_));
  }
  // A duplicate key with a lower index can tie the anchor and push it out of
  // a full neighborhood; the anchor stays a member regardless.
  Neighborhood out = top_k(
      similarities(keys_.row(static_cast<Eigen::Index>(i)).transpose()), zero_,
      k, i);
  out.anchor_index = i;
  return out;
}

std::vector<std::size_t> select_anchors(const store::LayerDataset& dataset,
                                        std::size_t m, std::uint64_t seed) {
  if (m > dataset.size()) {
    throw Error(ErrorKind::kConfig,
                fmt::format("anchor count {} exceeds dataset size {}", m,
                            dataset.size()));
  }
  Rng rng(seed);
  auto out = sample_without_replacement(dataset.size(), m, rng);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace layerlens::nbr
