#pragma once

#include <string>
#include <vector>

#include "permalign/connectivity.hpp"
#include "permalign/perm.hpp"
#include "permalign/sparsity_types.hpp"
#include "permalign/train.hpp"

namespace permalign {

// Zeroes the smallest floor(fraction * #unpruned) currently-unpruned
// weights, ranked by |value| globally across all weight tensors. Already
// pruned weights are never revived. Equal magnitudes break ties by
// (layer, row-major flat index).
Mask magnitude_prune(const NetworkParams& params, const Mask& current,
                     double fraction);

// Single global prune to the density IMP would reach after `level` rounds
// of 20% pruning (matching counts within one weight per level).
Mask one_shot_prune(const NetworkParams& params, int level);

// Prunes floor(fraction * total) random weights (seeded), for the
// prune-then-align control arm.
Mask random_prune(const NetworkParams& params, double fraction,
                  std::uint64_t seed);

// Applies exactly the weight-index relabeling of apply_permutation, so
// permute_mask(mask)(permuted W) == mask(W) entrywise.
Mask permute_mask(const Mask& mask, const PermutationSpec& spec,
                  const Permutation& perm);

// Mask file ("PMSK"): the checkpoint container with uint8 tensors named
// "m_W1".. and metadata {level, density, parent_run_id}.
struct MaskMeta {
  int level = 0;
  double density = 1.0;
  std::string parent_run_id;
};

void save_mask(const std::string& path, const Mask& mask, const MaskMeta& meta);
Mask load_mask(const std::string& path, MaskMeta* meta = nullptr);

struct ImpLevel {
  Mask mask;
  NetworkParams params;  // trained params at this level
  EvalResult train_eval;
  EvalResult test_eval;
};

struct ImpRun {
  std::vector<ImpLevel> levels;  // index 0 is the dense run
  NetworkParams rewind_params;   // dense weights at the rewind epoch
  std::optional<NetworkParams> rewind_momentum;
  int rewind_epoch = 0;
  TrainConfig config;
};

// Iterative magnitude pruning with weight rewinding: train dense, then
// repeatedly prune 20% of surviving weights, rewind survivors to the
// rewind epoch, and retrain with the mask enforced after every step.
// When lr_rewind is set, retraining instead starts from the trained
// weights with the schedule restarted from epoch zero.
ImpRun imp(const TrainConfig& config, const Dataset& train, const Dataset& test,
           int levels, int rewind_epoch, bool lr_rewind = false);

struct TransportResult {
  int level = 0;
  double density = 1.0;
  double dense_accuracy = 0.0;       // trained dense B ("matching accuracy")
  double transported_accuracy = 0.0; // P[B] rewound, m_A applied, retrained
  double naive_accuracy = 0.0;       // mask applied without permutation
  double one_shot_accuracy = 0.0;    // B one-shot pruned to equal sparsity
};

// Transports network A's IMP mask onto network B through the dense-dense
// permutation, with the naive (unpermuted) and one-shot baselines
// retrained identically. `retrain_seed` sets the retraining minibatch
// order for all three arms.
TransportResult transport_mask(const Mask& mask_a, int level,
                               const Permutation& p_dense,
                               const PermutationSpec& spec,
                               const NetworkParams& b_trained,
                               const Checkpoint& b_rewind,
                               const TrainConfig& config, const Dataset& train,
                               const Dataset& test, std::uint64_t retrain_seed,
                               bool lr_rewind = false);

}  // namespace permalign
