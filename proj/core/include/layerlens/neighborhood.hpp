#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "layerlens/repr_store.hpp"

namespace layerlens::nbr {

// Keys with a norm at or below this are treated as zero vectors.
inline constexpr double kZeroNorm = 1e-12;

struct Neighborhood {
  std::size_t anchor_index = 0;
  std::vector<std::size_t> member_indices;  // nonincreasing similarity
  std::vector<double> similarities;
};

// Exact cosine-similarity index over a fixed set of key vectors.
class NeighborIndex {
 public:
  // One key per row. Throws on empty input.
  explicit NeighborIndex(Eigen::MatrixXd keys);

  std::size_t size() const { return static_cast<std::size_t>(keys_.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(keys_.cols()); }
  // Number of keys that take part in queries (non-zero norm).
  std::size_t usable_size() const { return usable_; }
  std::size_t zero_key_count() const { return size() - usable_; }

  const Eigen::MatrixXd& keys() const { return keys_; }
  const Eigen::VectorXd& norms() const { return norms_; }
  bool is_zero(std::size_t i) const { return zero_[i]; }

  // The k usable keys most similar to `query`; ties go to the lower index.
  // anchor_index of the result is left at 0; see knn_of_key.
  Neighborhood knn(const Eigen::Ref<const Eigen::VectorXd>& query,
                   std::size_t k) const;

  // Neighborhood of key i itself; i is always a member since its similarity
  // with itself is maximal.
  Neighborhood knn_of_key(std::size_t i, std::size_t k) const;

  // Cosine similarity of `query` against every key (zero keys get -inf).
  Eigen::VectorXd similarities(
      const Eigen::Ref<const Eigen::VectorXd>& query) const;

 private:
  Eigen::MatrixXd keys_;
  Eigen::MatrixXd unit_;  // keys scaled to unit norm, zero rows for zero keys
  Eigen::VectorXd norms_;
  std::vector<bool> zero_;
  std::size_t usable_ = 0;
};

inline NeighborIndex build_index(Eigen::MatrixXd vectors) {
  return NeighborIndex(std::move(vectors));
}

// m distinct dataset indices, uniform without replacement, sorted ascending.
std::vector<std::size_t> select_anchors(const store::LayerDataset& dataset,
                                        std::size_t m, std::uint64_t seed);

}  // namespace layerlens::nbr
