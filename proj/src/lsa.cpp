#include "permalign/lsa.hpp"

#include <limits>

namespace permalign {

std::pair<std::vector<int>, double> solve_lsa(const ConstMatrixRef& gram) {
  if (gram.rows() != gram.cols()) {
    throw ShapeError("lsa: matrix must be square");
  }
  if (!gram.allFinite()) {
    throw ShapeError("lsa: matrix must be finite");
  }
  const int n = static_cast<int>(gram.rows());
  constexpr double inf = std::numeric_limits<double>::infinity();

  // Shortest augmenting path over cost = -gram, with 1-based sentinels.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> col_to_row(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);

  for (int i = 1; i <= n; ++i) {
    col_to_row[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = col_to_row[j0];
      int j1 = 0;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = -gram(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[col_to_row[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (col_to_row[j0] != 0);
    do {
      const int j1 = way[j0];
      col_to_row[j0] = col_to_row[j1];
      j0 = j1;
    } while (j0);
  }

  std::vector<int> pi(n, -1);
  for (int j = 1; j <= n; ++j) {
    if (col_to_row[j]) pi[col_to_row[j] - 1] = j - 1;
  }
  double objective = 0.0;
  for (int i = 0; i < n; ++i) objective += gram(i, pi[i]);
  return {std::move(pi), objective};
}

}  // namespace permalign
