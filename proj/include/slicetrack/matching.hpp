#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "slicetrack/common.hpp"
#include "slicetrack/geometry.hpp"

namespace slicetrack::matching {

// Rectangular cost matrix, rows = predictions, cols = ground truth.
struct CostMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;  // row-major

  CostMatrix() = default;
  CostMatrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0) {}

  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
};

using Assignment = std::vector<std::pair<int, int>>;  // (row, col), sorted by row

inline double assignment_cost(const CostMatrix& c, const Assignment& a) {
  double total = 0.0;
  for (const auto& [r, col] : a) total += c.at(r, col);
  return total;
}

struct MatchWeights {
  double lambda_cls = 1.0;
  double lambda_box = 2.0;
  double w_l1 = 5.0;
  double w_giou = 2.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
};

// DETR-lineage matching cost between one scored prediction and one GT box:
// a focal-style classification term plus the same weighted L1 + GIoU
// combination used by the box loss. Lower is better.
inline double pair_cost(double score, const geom::Box2D& pred, const geom::Box2D& gt,
                        const MatchWeights& w = {}) {
  const double p = std::clamp(score, 1e-7, 1.0 - 1e-7);
  const double pos = w.focal_alpha * std::pow(1.0 - p, w.focal_gamma) * (-std::log(p));
  const double neg = (1.0 - w.focal_alpha) * std::pow(p, w.focal_gamma) * (-std::log(1.0 - p));
  const double cls_cost = pos - neg;
  const double l1 = std::abs(pred.cx - gt.cx) + std::abs(pred.cy - gt.cy) +
                    std::abs(pred.w - gt.w) + std::abs(pred.h - gt.h);
  const double box_cost = w.w_l1 * l1 + w.w_giou * (1.0 - geom::giou2d(pred, gt));
  return w.lambda_cls * cls_cost + w.lambda_box * box_cost;
}

namespace detail {

// Kuhn-Munkres with row/column potentials, O(n^3), requires rows <= cols.
inline std::vector<int> km_solve(const CostMatrix& c) {
  const int n = c.rows;
  const int m = c.cols;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = 0;
      double delta = inf;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = c.at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= m; ++j)
    if (p[j] != 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

}  // namespace detail

// Minimum-cost one-to-one assignment of cardinality min(rows, cols).
inline Assignment hungarian(const CostMatrix& c) {
  if (c.rows == 0 || c.cols == 0) return {};
  for (double x : c.data)
    if (!std::isfinite(x)) throw NumericError("hungarian: non-finite cost entry");
  Assignment out;
  if (c.rows <= c.cols) {
    const auto sol = detail::km_solve(c);
    for (int r = 0; r < c.rows; ++r)
      if (sol[r] >= 0) out.emplace_back(r, sol[r]);
  } else {
    CostMatrix t(c.cols, c.rows);
    for (int r = 0; r < c.rows; ++r)
      for (int col = 0; col < c.cols; ++col) t.at(col, r) = c.at(r, col);
    const auto sol = detail::km_solve(t);
    for (int col = 0; col < c.cols; ++col)
      if (sol[col] >= 0) out.emplace_back(sol[col], col);
  }
  std::sort(out.begin(), out.end());
  return out;
}

// Exhaustive minimum over all one-to-one assignments; the test oracle for
// hungarian(). Rows are considered in order; for each row the candidate
// columns are tried in ascending order, with "leave unmatched" last, so tied
// optima resolve to the lexicographically first assignment list.
inline Assignment brute_force_assign(const CostMatrix& c) {
  const int k = std::min(c.rows, c.cols);
  require(k <= 8, "brute_force_assign: min(rows, cols) must be <= 8");
  if (k == 0) return {};

  Assignment best;
  double best_cost = std::numeric_limits<double>::infinity();
  Assignment cur;
  std::vector<char> col_used(c.cols, 0);

  auto rec = [&](auto&& self, int row, int matched) -> void {
    if (matched == k) {
      const double cost = assignment_cost(c, cur);
      if (cost < best_cost) {
        best_cost = cost;
        best = cur;
      }
      return;
    }
    if (row == c.rows) return;
    const int rows_left = c.rows - row;
    const int need = k - matched;
    if (rows_left < need) return;
    for (int col = 0; col < c.cols; ++col) {
      if (col_used[col]) continue;
      col_used[col] = 1;
      cur.emplace_back(row, col);
      self(self, row + 1, matched + 1);
      cur.pop_back();
      col_used[col] = 0;
    }
    if (rows_left > need) self(self, row + 1, matched);
  };
  rec(rec, 0, 0);
  return best;
}

}  // namespace slicetrack::matching
