#include "permalign/sparsity.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>

#include "permalign/checkpoint.hpp"
#include "permalign/rng.hpp"

namespace permalign {

Mask Mask::ones_like(const NetworkParams& params) {
  Mask m;
  for (const auto& w : params.weights) {
    m.weights.push_back(MaskArray::Ones(w.rows(), w.cols()));
  }
  return m;
}

long Mask::total() const {
  long n = 0;
  for (const auto& w : weights) n += w.size();
  return n;
}

long Mask::nonzeros() const {
  long n = 0;
  for (const auto& w : weights) n += w.cast<long>().sum();
  return n;
}

void Mask::validate_shapes(const NetworkParams& params) const {
  if (weights.size() != params.weights.size()) {
    throw ShapeError("mask: layer count mismatch");
  }
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i].rows() != params.weights[i].rows() ||
        weights[i].cols() != params.weights[i].cols()) {
      throw ShapeError("mask: shape mismatch at layer " + std::to_string(i + 1));
    }
  }
}

bool Mask::operator==(const Mask& other) const {
  if (weights.size() != other.weights.size()) return false;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i].rows() != other.weights[i].rows() ||
        weights[i].cols() != other.weights[i].cols()) {
      return false;
    }
    if (!(weights[i] == other.weights[i]).all()) return false;
  }
  return true;
}

NetworkParams apply_mask(const NetworkParams& params, const Mask& mask) {
  mask.validate_shapes(params);
  NetworkParams out = params;
  for (std::size_t i = 0; i < out.weights.size(); ++i) {
    out.weights[i] =
        (out.weights[i].array() * mask.weights[i].cast<Scalar>()).matrix();
  }
  return out;
}

namespace {

struct WeightRef {
  double magnitude;
  int layer;
  long flat;  // row-major flat index
};

// Survivors of `current`, ordered by (|w|, layer, flat index).
std::vector<WeightRef> ranked_survivors(const NetworkParams& params,
                                        const Mask& current) {
  std::vector<WeightRef> refs;
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    const Matrix& w = params.weights[l];
    const MaskArray& m = current.weights[l];
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) {
        if (m(r, c)) {
          refs.push_back({std::abs(w(r, c)), static_cast<int>(l),
                          static_cast<long>(r) * w.cols() + c});
        }
      }
    }
  }
  std::sort(refs.begin(), refs.end(), [](const WeightRef& a, const WeightRef& b) {
    if (a.magnitude != b.magnitude) return a.magnitude < b.magnitude;
    if (a.layer != b.layer) return a.layer < b.layer;
    return a.flat < b.flat;
  });
  return refs;
}

Mask prune_smallest(const NetworkParams& params, const Mask& current, long count) {
  const auto refs = ranked_survivors(params, current);
  count = std::min<long>(count, static_cast<long>(refs.size()));
  Mask out = current;
  for (long i = 0; i < count; ++i) {
    const auto& ref = refs[static_cast<std::size_t>(i)];
    const Eigen::Index cols = out.weights[ref.layer].cols();
    out.weights[ref.layer](ref.flat / cols, ref.flat % cols) = 0;
  }
  return out;
}

// Survivor count after `level` rounds of floor(0.2 * unpruned) pruning.
long imp_survivors(long total, int level) {
  long n = total;
  for (int i = 0; i < level; ++i) n -= n / 5;
  return n;
}

}  // namespace

Mask magnitude_prune(const NetworkParams& params, const Mask& current,
                     double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw ValidationError("magnitude_prune: fraction must be in (0, 1)");
  }
  current.validate_shapes(params);
  const long unpruned = current.nonzeros();
  const long count = static_cast<long>(std::floor(fraction * unpruned));
  return prune_smallest(params, current, count);
}

Mask one_shot_prune(const NetworkParams& params, int level) {
  if (level < 1) throw ValidationError("one_shot_prune: level must be >= 1");
  const Mask ones = Mask::ones_like(params);
  const long total = ones.total();
  const long keep = imp_survivors(total, level);
  return prune_smallest(params, ones, total - keep);
}

Mask random_prune(const NetworkParams& params, double fraction,
                  std::uint64_t seed) {
  if (fraction < 0.0 || fraction >= 1.0) {
    throw ValidationError("random_prune: fraction must be in [0, 1)");
  }
  Mask mask = Mask::ones_like(params);
  if (fraction == 0.0) return mask;
  const long total = mask.total();
  const long count = static_cast<long>(std::floor(fraction * total));
  const std::vector<int> order = shuffled_indices(
      static_cast<int>(total), mix_seed(seed, 0x72616e64));  // "rand"
  std::vector<std::pair<long, long>> layout;  // (start offset, layer)
  long offset = 0;
  for (std::size_t l = 0; l < mask.weights.size(); ++l) {
    layout.emplace_back(offset, static_cast<long>(l));
    offset += mask.weights[l].size();
  }
  for (long i = 0; i < count; ++i) {
    long flat = order[static_cast<std::size_t>(i)];
    std::size_t l = 0;
    while (l + 1 < layout.size() && flat >= layout[l + 1].first) ++l;
    flat -= layout[l].first;
    const Eigen::Index cols = mask.weights[l].cols();
    mask.weights[l](flat / cols, flat % cols) = 0;
  }
  return mask;
}

Mask permute_mask(const Mask& mask, const PermutationSpec& spec,
                  const Permutation& perm) {
  perm.validate(spec);
  Mask out = mask;
  for (int g = 0; g < spec.num_groups(); ++g) {
    const auto& pi = perm.groups[g];
    for (const auto& target : spec.groups[g].targets) {
      const ParamKey key = parse_param_name(target.param);
      if (key.kind != ParamKind::weight) continue;
      MaskArray& m = out.weights[key.layer];
      MaskArray next(m.rows(), m.cols());
      if (target.axis == 0) {
        for (int i = 0; i < static_cast<int>(pi.size()); ++i) {
          next.row(i) = m.row(pi[i]);
        }
      } else {
        for (int i = 0; i < static_cast<int>(pi.size()); ++i) {
          next.col(i) = m.col(pi[i]);
        }
      }
      m = next;
    }
  }
  return out;
}

void save_mask(const std::string& path, const Mask& mask, const MaskMeta& meta) {
  container::File file;
  nlohmann::json j{{"level", meta.level},
                   {"density", meta.density},
                   {"parent_run_id", meta.parent_run_id}};
  file.meta_json = j.dump();
  for (std::size_t l = 0; l < mask.weights.size(); ++l) {
    container::Tensor t;
    t.name = "m_W" + std::to_string(l + 1);
    const MaskArray& m = mask.weights[l];
    t.dims = {static_cast<std::uint32_t>(m.rows()),
              static_cast<std::uint32_t>(m.cols())};
    t.u8.reserve(m.size());
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) t.u8.push_back(m(r, c));
    }
    file.tensors.push_back(std::move(t));
  }
  container::save(path, "PMSK", file, /*u8_payload=*/true);
}

Mask load_mask(const std::string& path, MaskMeta* meta) {
  const auto file = container::load(path, "PMSK", /*u8_payload=*/true);
  if (meta) {
    const auto j = nlohmann::json::parse(file.meta_json);
    meta->level = j.at("level").get<int>();
    meta->density = j.at("density").get<double>();
    meta->parent_run_id = j.at("parent_run_id").get<std::string>();
  }
  Mask mask;
  for (std::size_t l = 0; l < file.tensors.size(); ++l) {
    const std::string want = "m_W" + std::to_string(l + 1);
    const container::Tensor* t = nullptr;
    for (const auto& cand : file.tensors) {
      if (cand.name == want) {
        t = &cand;
        break;
      }
    }
    if (!t) throw IoError("mask: missing tensor " + want);
    if (t->dims.size() != 2) throw IoError("mask: tensor rank != 2");
    MaskArray m(t->dims[0], t->dims[1]);
    std::size_t at = 0;
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        const std::uint8_t v = t->u8[at++];
        if (v > 1) throw IoError("mask: entries must be 0/1");
        m(r, c) = v;
      }
    }
    mask.weights.push_back(std::move(m));
  }
  return mask;
}

ImpRun imp(const TrainConfig& base_config, const Dataset& train,
           const Dataset& test, int levels, int rewind_epoch, bool lr_rewind) {
  if (levels < 0) throw ValidationError("imp: levels must be >= 0");
  if (rewind_epoch >= base_config.epochs) {
    throw ValidationError("imp: rewind epoch must precede total epochs");
  }
  TrainConfig config = base_config;
  config.checkpoint_epochs.insert(rewind_epoch);

  ImpRun run;
  run.config = config;
  run.rewind_epoch = rewind_epoch;

  const auto dense_ckpts = permalign::train(config, train);
  bool have_rewind = false;
  for (const auto& c : dense_ckpts) {
    if (c.epoch == rewind_epoch) {
      run.rewind_params = c.params;
      run.rewind_momentum = c.momentum;
      have_rewind = true;
    }
  }
  if (!have_rewind) throw ValidationError("imp: rewind checkpoint missing");

  const NetworkParams& dense_final = dense_ckpts.back().params;
  run.levels.push_back(ImpLevel{Mask::ones_like(dense_final), dense_final,
                                evaluate(dense_final, train),
                                evaluate(dense_final, test)});

  for (int level = 1; level <= levels; ++level) {
    const ImpLevel& prev = run.levels.back();
    Mask mask = magnitude_prune(prev.params, prev.mask, 0.2);
    std::vector<Checkpoint> ckpts;
    if (lr_rewind) {
      // Learning-rate rewinding: keep the trained weights, restart the
      // schedule from scratch.
      ckpts = train_from(config, train, apply_mask(prev.params, mask), nullptr,
                         0, &mask);
    } else {
      const NetworkParams* momentum =
          run.rewind_momentum ? &*run.rewind_momentum : nullptr;
      ckpts = train_from(config, train, apply_mask(run.rewind_params, mask),
                         momentum, rewind_epoch, &mask);
    }
    const NetworkParams& trained = ckpts.back().params;
    run.levels.push_back(ImpLevel{std::move(mask), trained,
                                  evaluate(trained, train),
                                  evaluate(trained, test)});
  }
  return run;
}

TransportResult transport_mask(const Mask& mask_a, int level,
                               const Permutation& p_dense,
                               const PermutationSpec& spec,
                               const NetworkParams& b_trained,
                               const Checkpoint& b_rewind,
                               const TrainConfig& base_config,
                               const Dataset& train, const Dataset& test,
                               std::uint64_t retrain_seed, bool lr_rewind) {
  TrainConfig config = base_config;
  config.data_order_seed = retrain_seed;

  TransportResult result;
  result.level = level;
  result.density = mask_a.density();
  result.dense_accuracy = 1.0 - evaluate(b_trained, test).error_rate;

  auto retrain = [&](const NetworkParams& start, const NetworkParams* momentum,
                     const Mask& mask) {
    std::vector<Checkpoint> ckpts;
    if (lr_rewind) {
      ckpts = train_from(config, train, apply_mask(start, mask), nullptr, 0, &mask);
    } else {
      ckpts = train_from(config, train, apply_mask(start, mask), momentum,
                         b_rewind.epoch, &mask);
    }
    return 1.0 - evaluate(ckpts.back().params, test).error_rate;
  };

  const NetworkParams* momentum =
      b_rewind.momentum ? &*b_rewind.momentum : nullptr;

  // Transported: permute B into A's frame, then apply A's mask. The
  // momentum buffers move with the weights.
  {
    const NetworkParams start =
        lr_rewind ? apply_permutation(b_trained, spec, p_dense)
                  : apply_permutation(b_rewind.params, spec, p_dense);
    std::optional<NetworkParams> perm_momentum;
    if (momentum) perm_momentum = apply_permutation(*momentum, spec, p_dense);
    result.transported_accuracy =
        retrain(start, perm_momentum ? &*perm_momentum : nullptr, mask_a);
  }
  // Naive: A's mask applied without permutation.
  {
    const NetworkParams& start = lr_rewind ? b_trained : b_rewind.params;
    result.naive_accuracy = retrain(start, momentum, mask_a);
  }
  // One-shot: prune B's own trained weights to the equivalent sparsity.
  {
    const Mask os =
        level == 0 ? Mask::ones_like(b_trained) : one_shot_prune(b_trained, level);
    if (std::abs(os.nonzeros() - mask_a.nonzeros()) > level) {
      throw ValidationError("transport: sparsity mismatch with one-shot baseline");
    }
    const NetworkParams& start = lr_rewind ? b_trained : b_rewind.params;
    result.one_shot_accuracy = retrain(start, momentum, os);
  }
  return result;
}

}  // namespace permalign
