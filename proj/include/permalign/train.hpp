#pragma once

#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "permalign/checkpoint.hpp"
#include "permalign/data.hpp"
#include "permalign/model.hpp"
#include "permalign/sparsity_types.hpp"

namespace permalign {

enum class LrSchedule { cosine, constant };

enum class Regime { standard, no_warmup_low_lr, warmup_no_wd };

std::string regime_name(Regime r);
Regime regime_from_name(const std::string& name);

// Full deterministic training recipe. Identical configs yield bitwise
// identical trajectories within one build.
struct TrainConfig {
  ArchitectureSpec arch;
  int epochs = 20;
  int batch_size = 128;
  double peak_lr = 0.1;
  int warmup_epochs = 1;
  LrSchedule schedule = LrSchedule::cosine;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t init_seed = 1;
  std::uint64_t data_order_seed = 1;
  std::set<int> checkpoint_epochs;  // final epoch is always checkpointed
  Regime regime = Regime::standard;
  bool save_momentum = true;

  void validate() const;

  // Stable key=value rendering hashed into checkpoint fingerprints.
  std::string canonical_string() const;
  std::string fingerprint() const;
};

// Applies a regime's preset hyperparameters (Appendix-style presets):
//   standard:         warmup 1, peak 0.1, weight decay 1e-4
//   no_warmup_low_lr: warmup 0, peak 1e-3, weight decay 1e-4
//   warmup_no_wd:     warmup 1, peak 0.1,  weight decay 0
void apply_regime(TrainConfig& config, Regime regime);

// He-initialized weights (Normal(0, 2/fan_in)), zero biases, unit norm
// scale, zero norm shift. Deterministic per (arch, seed).
NetworkParams init_params(const ArchitectureSpec& arch, std::uint64_t seed);

// Exact gradient of mean softmax cross-entropy over the batch.
NetworkParams grad(const NetworkParams& params, const ConstMatrixRef& inputs,
                   const std::vector<int>& labels);

// Mean cross-entropy of the batch plus the gradient (single backward pass).
double loss_and_grad(const NetworkParams& params, const ConstMatrixRef& inputs,
                     const std::vector<int>& labels, NetworkParams& gradient);

// Per-iteration learning rate: linear warmup to peak over warmup_epochs,
// then cosine annealing to zero (or constant) across the remaining steps.
double learning_rate_at(const TrainConfig& config, long step,
                        long steps_per_epoch);

struct DivergedError : std::runtime_error {
  DivergedError(const std::string& what, Checkpoint last_good)
      : std::runtime_error(what), last_good_checkpoint(std::move(last_good)) {}
  Checkpoint last_good_checkpoint;
};

using EpochCallback = std::function<void(const Checkpoint&)>;

// SGD with momentum and L2 weight decay added to the gradient. The mask,
// when present, zeroes pruned weight gradients and re-projects weights
// after every step. Returns checkpoints at the configured epochs (epoch 0
// is the initialization) plus the final epoch.
std::vector<Checkpoint> train(const TrainConfig& config, const Dataset& data,
                              const Mask* mask = nullptr,
                              const EpochCallback& on_checkpoint = nullptr);

// Resumes training from an arbitrary state at `start_epoch` through
// config.epochs, keeping the learning-rate schedule position. Used by
// child spawning, IMP retraining and mask transport.
std::vector<Checkpoint> train_from(const TrainConfig& config, const Dataset& data,
                                   const NetworkParams& start_params,
                                   const NetworkParams* start_momentum,
                                   int start_epoch, const Mask* mask = nullptr,
                                   const EpochCallback& on_checkpoint = nullptr);

// Resumes from a parent checkpoint with a fresh data-order seed per child;
// everything else is inherited. Returns each child's final checkpoint.
std::vector<Checkpoint> spawn_children(const TrainConfig& parent_config,
                                       const Checkpoint& parent_at_epoch,
                                       const Dataset& data,
                                       const std::vector<std::uint64_t>& seeds);

}  // namespace permalign
