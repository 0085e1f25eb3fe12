#pragma once

// Dense linear assignment. Jonker-Volgenant shortest augmenting paths with
// dual potentials (O(m^3)), followed by a pass that picks the lexicographically smallest
// permutation among all optimal ones, so ties resolve deterministically.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "cfot/error.hpp"

namespace cfot {

/// perm[i] = column assigned to row i.
using Permutation = std::vector<int>;

inline double assignment_cost(const Eigen::Ref<const Eigen::MatrixXd>& cost, const Permutation& perm) {
  double s = 0.0;
  for (std::size_t i = 0; i < perm.size(); ++i) s += cost(static_cast<Eigen::Index>(i), perm[i]);
  return s;
}

inline bool is_permutation(const Permutation& perm) {
  std::vector<char> seen(perm.size(), 0);
  for (int j : perm) {
    if (j < 0 || static_cast<std::size_t>(j) >= perm.size() || seen[static_cast<std::size_t>(j)]) return false;
    seen[static_cast<std::size_t>(j)] = 1;
  }
  return true;
}

namespace detail {

struct DualSolution {
  Permutation perm;
  std::vector<double> row_potential;
  std::vector<double> col_potential;
};

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Jonker-Volgenant column reduction with reduction transfer, then shortest
// augmenting paths for the remaining free rows. JV's augmenting row reduction
// is left out: on squared-Euclidean batch costs it cost 3x the whole solve.
class JonkerVolgenant {
 public:
  explicit JonkerVolgenant(const Eigen::Ref<const Eigen::MatrixXd>& cost)
      : n_(static_cast<int>(cost.rows())), c_(cost), x_(n_, -1), y_(n_, -1), v_(n_, 0.0) {}

  DualSolution solve() {
    for (int f : column_reduction()) augment(f);
    DualSolution out;
    out.perm = x_;
    out.col_potential = v_;
    out.row_potential.resize(static_cast<std::size_t>(n_));
    for (int i = 0; i < n_; ++i) out.row_potential[i] = c(i, x_[i]) - v_[x_[i]];
    return out;
  }

 private:
  double c(int i, int j) const { return c_.data()[static_cast<std::ptrdiff_t>(i) * n_ + j]; }
  const double* row(int i) const { return c_.data() + static_cast<std::ptrdiff_t>(i) * n_; }

  std::vector<int> column_reduction() {
    const double inf = std::numeric_limits<double>::infinity();
    std::fill(v_.begin(), v_.end(), inf);
    for (int i = 0; i < n_; ++i) {
      const double* r = row(i);
      for (int j = 0; j < n_; ++j) {
        if (r[j] < v_[j]) {
          v_[j] = r[j];
          y_[j] = i;
        }
      }
    }
    std::vector<char> unique(n_, 1);
    for (int j = n_ - 1; j >= 0; --j) {
      const int i = y_[j];
      if (x_[i] < 0) {
        x_[i] = j;
      } else {
        unique[i] = 0;
        y_[j] = -1;
      }
    }
    std::vector<int> free_rows;
    for (int i = 0; i < n_; ++i) {
      if (x_[i] < 0) {
        free_rows.push_back(i);
      } else if (unique[i]) {
        const int j = x_[i];
        double m = inf;
        const double* r = row(i);
        for (int k = 0; k < n_; ++k)
          if (k != j) m = std::min(m, r[k] - v_[k]);
        v_[j] -= m;
      }
    }
    return free_rows;
  }

  // Dijkstra over reduced costs from a free row. Arrays stay dense and settled
  // columns carry an infinite penalty, so relaxation and the minimum vectorize.
  void augment(int start) {
    const double inf = std::numeric_limits<double>::infinity();
    dist_.assign(static_cast<std::size_t>(n_), inf);
    pen_.assign(static_cast<std::size_t>(n_), 0.0);
    pred_.assign(static_cast<std::size_t>(n_), static_cast<double>(start));
    settled_.resize(static_cast<std::size_t>(n_));
    scanned_.clear();
    double* dist = dist_.data();
    double* pen = pen_.data();
    double* pred = pred_.data();
    const double* v = v_.data();
    int i = start;
    double base = 0.0;  // distance to row i minus its reduced-cost offset
    int sink = -1;
    double lowest = 0.0;
    while (sink < 0) {
      const double* r = row(i);
      const double ri = static_cast<double>(i);
      for (int j = 0; j < n_; ++j) {
        const double red = base + r[j] - v[j] + pen[j];
        const bool better = red < dist[j];
        dist[j] = better ? red : dist[j];
        pred[j] = better ? ri : pred[j];
      }
      lowest = Eigen::Map<const Eigen::ArrayXd>(dist, n_).minCoeff();
      if (!(lowest < inf)) throw NumericalError("solve_assignment: no augmenting path");
      int j = 0;
      while (dist[j] != lowest) ++j;
      if (y_[j] < 0) {
        sink = j;
        break;
      }
      pen[j] = inf;
      settled_[j] = lowest;
      dist[j] = inf;
      scanned_.push_back(j);
      i = y_[j];
      base = lowest - (c(i, j) - v[j]);
    }
    for (int j : scanned_) v_[j] += settled_[j] - lowest;
    int j = sink;
    int row_i = -1;
    while (row_i != start) {
      row_i = static_cast<int>(pred[j]);
      y_[j] = row_i;
      std::swap(j, x_[row_i]);
    }
  }

  int n_;
  RowMajor c_;
  std::vector<int> x_, y_;
  std::vector<double> v_;
  std::vector<double> dist_, pen_, pred_, settled_;
  std::vector<int> scanned_;
};

/// Rotates `match` so that row `i` takes column `j`, keeping rows < i fixed and
/// using only tight edges. Returns false when no such alternating cycle exists.
class TightRotator {
 public:
  TightRotator(const std::vector<std::vector<int>>& tight, Permutation& match)
      : tight_(tight), match_(match), row_of_(match.size()), visited_(match.size()) {
    for (std::size_t r = 0; r < match.size(); ++r) row_of_[static_cast<std::size_t>(match[r])] = static_cast<int>(r);
  }

  bool force(int i, int j) {
    const int target = match_[static_cast<std::size_t>(i)];
    const int r = row_of_[static_cast<std::size_t>(j)];
    if (r < i) return false;
    std::fill(visited_.begin(), visited_.end(), 0);
    visited_[static_cast<std::size_t>(j)] = 1;
    path_.clear();
    if (!search(r, i, target)) return false;
    // path_ holds (row, new column) pairs from r to the row that takes `target`.
    for (auto [row, col] : path_) {
      match_[static_cast<std::size_t>(row)] = col;
      row_of_[static_cast<std::size_t>(col)] = row;
    }
    match_[static_cast<std::size_t>(i)] = j;
    row_of_[static_cast<std::size_t>(j)] = i;
    return true;
  }

 private:
  bool search(int row, int locked_upto, int target) {
    for (int c : tight_[static_cast<std::size_t>(row)]) {
      if (visited_[static_cast<std::size_t>(c)]) continue;
      visited_[static_cast<std::size_t>(c)] = 1;
      if (c == target) {
        path_.emplace_back(row, c);
        return true;
      }
      const int next = row_of_[static_cast<std::size_t>(c)];
      if (next <= locked_upto) continue;
      path_.emplace_back(row, c);
      if (search(next, locked_upto, target)) return true;
      path_.pop_back();
    }
    return false;
  }

  const std::vector<std::vector<int>>& tight_;
  Permutation& match_;
  std::vector<int> row_of_;
  std::vector<char> visited_;
  std::vector<std::pair<int, int>> path_;
};

}  // namespace detail

/// Minimum-cost permutation of a square cost matrix; ties go to the
/// lexicographically smallest optimal permutation.
inline Permutation solve_assignment(const Eigen::Ref<const Eigen::MatrixXd>& cost) {
  if (cost.rows() != cost.cols()) throw ContractViolation("solve_assignment: cost matrix must be square");
  if (cost.rows() < 1) throw ContractViolation("solve_assignment: empty cost matrix");
  if (!cost.allFinite()) throw NumericalError("solve_assignment: non-finite cost entry");
  const int n = static_cast<int>(cost.rows());
  if (n == 1) return {0};

  detail::DualSolution dual = detail::JonkerVolgenant(cost).solve();
  Permutation match = dual.perm;

  // Edges with zero reduced cost carry every optimal matching.
  const double scale = cost.cwiseAbs().maxCoeff() + 1.0;
  const double tol = 1e-11 * scale * n;
  std::vector<std::vector<int>> tight(static_cast<std::size_t>(n));
  bool unique = true;
  for (int i = 0; i < n; ++i) {
    auto& row = tight[static_cast<std::size_t>(i)];
    for (int j = 0; j < n; ++j) {
      const double reduced = cost(i, j) - dual.row_potential[static_cast<std::size_t>(i)] -
                             dual.col_potential[static_cast<std::size_t>(j)];
      if (reduced <= tol) row.push_back(j);
    }
    if (row.size() > 1) unique = false;
  }
  if (unique) return match;

  Permutation lex = match;
  detail::TightRotator rot(tight, lex);
  for (int i = 0; i < n; ++i) {
    for (int j : tight[static_cast<std::size_t>(i)]) {
      if (j == lex[static_cast<std::size_t>(i)]) break;
      if (rot.force(i, j)) break;
    }
  }
  // Near-ties inside the tolerance are only accepted when they are exact.
  if (assignment_cost(cost, lex) <= assignment_cost(cost, match)) return lex;
  return match;
}

}  // namespace cfot
