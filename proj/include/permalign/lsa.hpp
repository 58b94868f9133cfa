#pragma once

#include <utility>
#include <vector>

#include "permalign/types.hpp"

namespace permalign {

// Exact linear sum assignment: returns pi maximizing sum_i G(i, pi(i))
// together with that objective. Jonker-Volgenant shortest augmenting path
// on the negated matrix; rows are augmented in index order and ties in the
// path search resolve to the lowest column index, so the output is
// deterministic for a fixed input. Throws ShapeError on non-square or
// non-finite input.
std::pair<std::vector<int>, double> solve_lsa(const ConstMatrixRef& gram);

}  // namespace permalign
