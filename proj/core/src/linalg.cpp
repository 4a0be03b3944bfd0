#include "layerlens/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace layerlens::linalg {
namespace {

constexpr double kSignTol = 1e-12;

bool lex_greater(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    if (std::abs(a(i) - b(i)) > kSignTol) return a(i) > b(i);
  }
  return false;
}

}  // namespace

Svd canonical_svd(const Eigen::MatrixXd& a) {
  Eigen::BDCSVD<Eigen::MatrixXd> solver(a,
                                        Eigen::ComputeFullU | Eigen::ComputeFullV);
  Svd out{solver.matrixU(), solver.singularValues(), solver.matrixV()};

  const Eigen::Index n = out.s.size();
  for (Eigen::Index i = 0; i < n; ++i) {
    auto col = out.u.col(i);
    for (Eigen::Index j = 0; j < col.size(); ++j) {
      if (std::abs(col(j)) > kSignTol) {
        if (col(j) < 0) {
          out.u.col(i) *= -1.0;
          out.v.col(i) *= -1.0;
        }
        break;
      }
    }
  }

  const double scale = n > 0 ? std::max(out.s(0), 1.0) : 1.0;
  Eigen::Index start = 0;
  while (start < n) {
    Eigen::Index end = start + 1;
    while (end < n && std::abs(out.s(end) - out.s(start)) <= 1e-12 * scale) {
      ++end;
    }
    if (end - start > 1) {
      std::vector<Eigen::Index> idx(static_cast<std::size_t>(end - start));
      std::iota(idx.begin(), idx.end(), start);
      std::stable_sort(idx.begin(), idx.end(), [&](Eigen::Index x, Eigen::Index y) {
        return lex_greater(out.u.col(x), out.u.col(y));
      });
      const Eigen::MatrixXd u_block = out.u.middleCols(start, end - start);
      const Eigen::MatrixXd v_block = out.v.middleCols(start, end - start);
      for (std::size_t k = 0; k < idx.size(); ++k) {
        out.u.col(start + static_cast<Eigen::Index>(k)) = u_block.col(idx[k] - start);
        out.v.col(start + static_cast<Eigen::Index>(k)) = v_block.col(idx[k] - start);
      }
    }
    start = end;
  }
  return out;
}

Eigen::MatrixXd truncate(const Svd& svd, Eigen::Index r) {
  r = std::min<Eigen::Index>(r, svd.s.size());
  return svd.u.leftCols(r) * svd.s.head(r).asDiagonal() *
         svd.v.leftCols(r).transpose();
}

Eigen::MatrixXd nearest_orthogonal(const Eigen::MatrixXd& a) {
  const Svd svd = canonical_svd(a);
  return svd.u * svd.v.transpose();
}

}  // namespace layerlens::linalg
