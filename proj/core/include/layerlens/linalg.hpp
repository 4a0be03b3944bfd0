#pragma once

#include <Eigen/Dense>

namespace layerlens::linalg {

// a = u * s.asDiagonal() * v.transpose(), full factors.
struct Svd {
  Eigen::MatrixXd u;
  Eigen::VectorXd s;  // nonincreasing
  Eigen::MatrixXd v;
};

// SVD with a deterministic canonical form: each left singular vector is
// flipped (together with its right partner) so that its first entry of
// magnitude above 1e-12 is positive, and runs of equal singular values are
// ordered by their left vectors, lexicographically descending.
Svd canonical_svd(const Eigen::MatrixXd& a);

// Best rank-r approximation from an existing decomposition.
Eigen::MatrixXd truncate(const Svd& svd, Eigen::Index r);

// Orthogonal factor of the polar decomposition (nearest orthogonal matrix).
Eigen::MatrixXd nearest_orthogonal(const Eigen::MatrixXd& a);

}  // namespace layerlens::linalg
