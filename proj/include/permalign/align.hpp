#pragma once

#include <optional>
#include <vector>

#include "permalign/data.hpp"
#include "permalign/lsa.hpp"
#include "permalign/model.hpp"
#include "permalign/perm.hpp"
#include "permalign/sparsity_types.hpp"

namespace permalign {

struct MatchReport {
  Permutation permutation;
  double total_similarity = 0.0;
  int sweeps = 0;
  std::vector<double> similarity_per_sweep;
};

// Stacks every axis a group permutes into one d x q feature matrix: each
// row collects the group's slice of every targeted tensor (weight rows,
// neighbor-weight columns, bias and norm entries). Masked weight entries
// contribute zeros.
Matrix group_params(const NetworkParams& params, const PermutationSpec& spec,
                    int group, const Mask* mask = nullptr,
                    bool include_norm_affine = true);

// Linear-kernel Gram matrix G = rowsA * rowsB^T.
Matrix gram(const ConstMatrixRef& rows_a, const ConstMatrixRef& rows_b);

struct WeightMatchOptions {
  std::uint64_t seed = 0;
  int max_sweeps = 100;
  // Whether norm scale/shift vectors contribute feature columns (they are
  // permuted either way).
  bool include_norm_affine = true;
  const Mask* mask_a = nullptr;
  const Mask* mask_b = nullptr;
};

// Greedy sweep weight matching: per sweep, visit groups in a seeded random
// order, rebuild the group's feature matrices from the current permuted b,
// solve the assignment, apply it. Stops when the total similarity
// <a, P[b]> fails to strictly improve, or after max_sweeps. The reported
// per-sweep similarity counts every parameter tensor once, which makes the
// sequence non-decreasing under exact per-group solves.
MatchReport weight_match(const NetworkParams& a, const NetworkParams& b,
                         const PermutationSpec& spec,
                         const WeightMatchOptions& options = {});

// Post-activation Gram matrices per hidden layer, G = actA * actB^T over
// (units x examples), accumulated in fixed-size chunks with 64-bit sums.
std::vector<Matrix> activation_grams(const NetworkParams& a,
                                     const NetworkParams& b,
                                     const PermutationSpec& spec,
                                     const Dataset& data);

// Per-group assignment on post-activation Gram matrices accumulated over
// the full training split; a single pass in depth order (each group's
// activations depend only on its own permutation). Example order does not
// affect the result beyond 64-bit accumulation noise.
MatchReport activation_match(const NetworkParams& a, const NetworkParams& b,
                             const PermutationSpec& spec, const Dataset& data);

enum class PartialMode { bottom_up, top_down, put_in, leave_out };

PartialMode partial_mode_from_name(const std::string& name);
std::string partial_mode_name(PartialMode mode);

// Splices two permutations by group:
//   bottom_up: groups < k from p_t, rest from p_end
//   top_down:  groups >= k from p_t, rest from p_end
//   put_in:    only group k from p_t
//   leave_out: all from p_t except group k from p_end
Permutation partial_perm(const Permutation& p_t, const Permutation& p_end,
                         PartialMode mode, int k);

struct FixedPointReport {
  std::vector<int> per_group;
  long total = 0;
  double fraction = 0.0;
};

// Indices on which the two permutations agree, per group and overall.
FixedPointReport fixed_points(const Permutation& p, const Permutation& q);

}  // namespace permalign
