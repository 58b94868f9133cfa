#pragma once

#include <string>
#include <vector>

#include "permalign/model.hpp"
#include "permalign/types.hpp"

namespace permalign {

// One (tensor, axis) pair acted on by an index group. Axis 0 permutes rows
// of a matrix (or the entries of a vector), axis 1 permutes columns.
struct AxisRef {
  std::string param;
  int axis = 0;

  bool operator==(const AxisRef&) const = default;
};

struct PermGroup {
  int size = 0;
  std::vector<AxisRef> targets;

  bool operator==(const PermGroup&) const = default;
};

// Which axes of which parameters each permutable index group acts on.
struct PermutationSpec {
  std::vector<PermGroup> groups;

  int num_groups() const { return static_cast<int>(groups.size()); }
  long total_indices() const;

  // Checks that no (param, axis) pair appears in two groups.
  void validate() const;

  // Canonical text form hashed into permutation files:
  // one line per group, "group=<i> size=<d> targets=<name>@<axis>,...".
  std::string canonical_string() const;
  std::uint64_t hash() const { return fnv1a64(canonical_string()); }

  bool operator==(const PermutationSpec&) const = default;
};

// Concrete permutation vectors, one per group. Entry convention:
// permuted.row(i) = original.row(pi[i]) for axis-0 targets, and the same
// gather on columns for axis-1 targets.
struct Permutation {
  std::vector<std::vector<int>> groups;

  static Permutation identity(const PermutationSpec& spec);

  int num_groups() const { return static_cast<int>(groups.size()); }

  // Throws InvalidPermutationError unless every group vector is a bijection
  // conforming to the spec's group sizes.
  void validate(const PermutationSpec& spec) const;

  bool is_identity() const;

  bool operator==(const Permutation&) const = default;
};

// One group per hidden layer i (1-based), of size d_i, targeting
// {W_i rows, b_i, g_i, s_i, W_{i+1} cols}. Input and output axes are
// never permuted.
PermutationSpec build_mlp_spec(const ArchitectureSpec& arch);

// Returns new params with every group's permutation applied:
// W'_i = P_i W_i P_{i-1}^T, b'_i = P_i b_i, and norm affine vectors
// permuted with their layer. Function-preserving.
NetworkParams apply_permutation(const NetworkParams& params,
                                const PermutationSpec& spec,
                                const Permutation& perm);

// In-place application of a single group's permutation (used by the
// matching sweep, which interleaves solves and applications).
void apply_group_permutation(NetworkParams& params, const PermutationSpec& spec,
                             int group, const std::vector<int>& pi);

// apply(x, compose(p, q)) == apply(apply(x, q), p).
Permutation compose(const Permutation& p, const Permutation& q);
Permutation invert(const Permutation& p);

// Single-group composition with the same convention as `compose`.
std::vector<int> compose_group(const std::vector<int>& p,
                               const std::vector<int>& q);

// Permutation file format ("PMPERM v1"), one line per group.
void save_permutation(const std::string& path, const Permutation& perm,
                      const PermutationSpec& spec);
std::string permutation_to_text(const Permutation& perm,
                                const PermutationSpec& spec);
// Validates the header and, when `expected_spec` is given, the spec hash.
Permutation load_permutation(const std::string& path,
                             const PermutationSpec* expected_spec = nullptr);
Permutation permutation_from_text(const std::string& text,
                                  const PermutationSpec* expected_spec = nullptr);

}  // namespace permalign
