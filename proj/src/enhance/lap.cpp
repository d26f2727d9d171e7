#include "featurescope/lap.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace fscope {

LapSolution solveLap(const Matrix& cost) {
  const long n = static_cast<long>(cost.rows());
  if (cost.cols() != cost.rows()) throw ShapeError("assignment cost matrix must be square");
  for (long i = 0; i < n; ++i)
    for (long j = 0; j < n; ++j)
      if (!std::isfinite(cost(i, j))) throw Error("assignment costs must be finite");
  LapSolution out;
  if (n == 0) return out;
  constexpr double kInf = std::numeric_limits<double>::infinity();
  auto c = [&](long i, long j) { return cost(i, j); };

  std::vector<long> rowsol(n, -1), colsol(n, -1), freeRows(n), collist(n), pred(n);
  std::vector<int> matches(n, 0);
  std::vector<double> v(n), d(n);

  // Column reduction, scanning columns in reverse.
  for (long j = n - 1; j >= 0; --j) {
    double lowest = c(0, j);
    long imin = 0;
    for (long i = 1; i < n; ++i) {
      if (c(i, j) < lowest) {
        lowest = c(i, j);
        imin = i;
      }
    }
    v[j] = lowest;
    if (++matches[imin] == 1) {
      rowsol[imin] = j;
      colsol[j] = imin;
    } else if (v[j] < v[rowsol[imin]]) {
      const long j1 = rowsol[imin];
      rowsol[imin] = j;
      colsol[j] = imin;
      colsol[j1] = -1;
    } else {
      colsol[j] = -1;
    }
  }

  // Reduction transfer.
  long numFree = 0;
  for (long i = 0; i < n; ++i) {
    if (matches[i] == 0) {
      freeRows[numFree++] = i;
    } else if (matches[i] == 1) {
      const long j1 = rowsol[i];
      double lowest = kInf;
      for (long j = 0; j < n; ++j) {
        if (j != j1) lowest = std::min(lowest, c(i, j) - v[j]);
      }
      if (std::isfinite(lowest)) v[j1] -= lowest;
    }
  }

  // Augmenting row reduction, two passes. Each reassignment keeps every
  // assigned row on a minimum reduced-cost column; a step cap guards against
  // near-ties cycling in floating point.
  for (int pass = 0; pass < 2 && numFree > 0; ++pass) {
    long k = 0;
    const long previous = numFree;
    numFree = 0;
    long steps = 0;
    const long cap = 50 * n + 1000;
    while (k < previous) {
      if (++steps > cap) {
        while (k < previous) freeRows[numFree++] = freeRows[k++];
        break;
      }
      const long i = freeRows[k++];
      double umin = c(i, 0) - v[0], usubmin = kInf;
      long j1 = 0, j2 = -1;
      for (long j = 1; j < n; ++j) {
        const double h = c(i, j) - v[j];
        if (h < usubmin) {
          if (h >= umin) {
            usubmin = h;
            j2 = j;
          } else {
            usubmin = umin;
            umin = h;
            j2 = j1;
            j1 = j;
          }
        }
      }
      long i0 = colsol[j1];
      const bool strict = umin < usubmin;
      if (strict) {
        v[j1] -= usubmin - umin;
      } else if (i0 >= 0 && j2 >= 0) {
        j1 = j2;
        i0 = colsol[j2];
      }
      if (i0 >= 0 && rowsol[i0] == j1) rowsol[i0] = -1;
      rowsol[i] = j1;
      colsol[j1] = i;
      if (i0 >= 0) {
        if (strict) {
          freeRows[--k] = i0;
        } else {
          freeRows[numFree++] = i0;
        }
      }
    }
  }

  // Shortest augmenting path for each remaining free row.
  for (long f = 0; f < numFree; ++f) {
    const long freeRow = freeRows[f];
    for (long j = 0; j < n; ++j) {
      d[j] = c(freeRow, j) - v[j];
      pred[j] = freeRow;
      collist[j] = j;
    }
    long low = 0, up = 0, last = 0, endOfPath = -1;
    double lowest = 0.0;
    bool found = false;
    do {
      if (up == low) {
        last = low - 1;
        lowest = d[collist[up++]];
        for (long k = up; k < n; ++k) {
          const long j = collist[k];
          const double h = d[j];
          if (h <= lowest) {
            if (h < lowest) {
              up = low;
              lowest = h;
            }
            collist[k] = collist[up];
            collist[up++] = j;
          }
        }
        for (long k = low; k < up; ++k) {
          if (colsol[collist[k]] < 0) {
            endOfPath = collist[k];
            found = true;
            break;
          }
        }
      }
      if (!found) {
        const long j1 = collist[low++];
        const long i = colsol[j1];
        const double h = c(i, j1) - v[j1] - lowest;
        for (long k = up; k < n; ++k) {
          const long j = collist[k];
          const double v2 = c(i, j) - v[j] - h;
          if (v2 < d[j]) {
            pred[j] = i;
            if (v2 == lowest) {
              if (colsol[j] < 0) {
                endOfPath = j;
                found = true;
                break;
              }
              collist[k] = collist[up];
              collist[up++] = j;
            }
            d[j] = v2;
          }
        }
      }
    } while (!found);

    for (long k = 0; k <= last; ++k) {
      const long j1 = collist[k];
      v[j1] += d[j1] - lowest;
    }
    long i;
    do {
      i = pred[endOfPath];
      colsol[endOfPath] = i;
      const long j1 = endOfPath;
      endOfPath = rowsol[i];
      rowsol[i] = j1;
    } while (i != freeRow);
  }

  out.rowToCol.resize(n);
  out.colToRow.resize(n);
  out.u.resize(n);
  out.v = v;
  for (long i = 0; i < n; ++i) {
    out.rowToCol[i] = static_cast<std::size_t>(rowsol[i]);
    out.colToRow[rowsol[i]] = static_cast<std::size_t>(i);
    out.u[i] = c(i, rowsol[i]) - v[rowsol[i]];
    out.cost += c(i, rowsol[i]);
  }
  return out;
}

LapAudit auditLap(const Matrix& cost, const LapSolution& s) {
  LapAudit audit;
  const std::size_t n = static_cast<std::size_t>(cost.rows());
  std::vector<int> seen(n, 0);
  audit.permutation = s.rowToCol.size() == n;
  for (std::size_t i = 0; audit.permutation && i < n; ++i) {
    if (s.rowToCol[i] >= n || seen[s.rowToCol[i]]++) audit.permutation = false;
  }
  if (!audit.permutation) return audit;
  audit.minReducedCost = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double r = cost(i, j) - s.u[i] - s.v[j];
      audit.minReducedCost = std::min(audit.minReducedCost, r);
      if (j == s.rowToCol[i]) audit.complementarySlack = std::max(audit.complementarySlack, std::abs(r));
    }
  }
  return audit;
}

}  // namespace fscope
