#pragma once

#include <cstddef>
#include <vector>

#include "featurescope/tsne.hpp"

namespace fscope {

struct LapSolution {
  std::vector<std::size_t> rowToCol;
  std::vector<std::size_t> colToRow;
  std::vector<double> u;  // row duals
  std::vector<double> v;  // column duals
  double cost = 0.0;      // sum of c(i, rowToCol[i]) in row order
};

/// Dense square linear assignment by the Jonker-Volgenant method: column
/// reduction, reduction transfer, augmenting row reduction, then shortest
/// augmenting paths. Returns the duals with u_i = c(i, col(i)) - v_col(i).
LapSolution solveLap(const Matrix& cost);

struct LapAudit {
  bool permutation = false;
  double minReducedCost = 0.0;     // min over i,j of c_ij - u_i - v_j
  double complementarySlack = 0.0; // max |c_i,col(i) - u_i - v_col(i)|
  bool ok(double tolerance = 1e-9) const {
    return permutation && minReducedCost >= -tolerance && complementarySlack <= tolerance;
  }
};

LapAudit auditLap(const Matrix& cost, const LapSolution& solution);

}  // namespace fscope
