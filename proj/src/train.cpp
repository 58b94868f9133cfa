#include "permalign/train.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "permalign/rng.hpp"

namespace permalign {

std::string regime_name(Regime r) {
  switch (r) {
    case Regime::standard: return "standard";
    case Regime::no_warmup_low_lr: return "no_warmup_low_lr";
    case Regime::warmup_no_wd: return "warmup_no_wd";
  }
  return "standard";
}

Regime regime_from_name(const std::string& name) {
  if (name == "standard") return Regime::standard;
  if (name == "no_warmup_low_lr") return Regime::no_warmup_low_lr;
  if (name == "warmup_no_wd") return Regime::warmup_no_wd;
  throw ValidationError("unknown regime: " + name);
}

void apply_regime(TrainConfig& config, Regime regime) {
  config.regime = regime;
  config.momentum = 0.9;
  config.schedule = LrSchedule::cosine;
  switch (regime) {
    case Regime::standard:
      config.warmup_epochs = 1;
      config.peak_lr = 0.1;
      config.weight_decay = 1e-4;
      break;
    case Regime::no_warmup_low_lr:
      config.warmup_epochs = 0;
      config.peak_lr = 1e-3;
      config.weight_decay = 1e-4;
      break;
    case Regime::warmup_no_wd:
      config.warmup_epochs = 1;
      config.peak_lr = 0.1;
      config.weight_decay = 0.0;
      break;
  }
}

void TrainConfig::validate() const {
  arch.validate();
  if (epochs < 0) throw ValidationError("config: epochs must be >= 0");
  if (batch_size < 1) throw ValidationError("config: batch_size must be >= 1");
  if (peak_lr <= 0) throw ValidationError("config: peak_lr must be > 0");
  if (warmup_epochs < 0 || warmup_epochs > epochs) {
    throw ValidationError("config: warmup_epochs must be in [0, epochs]");
  }
  for (int e : checkpoint_epochs) {
    if (e < 0 || e > epochs) {
      throw ValidationError("config: checkpoint epoch out of range");
    }
  }
}

std::string TrainConfig::canonical_string() const {
  std::ostringstream os;
  os << "input_dim=" << arch.input_dim << '\n';
  os << "hidden_dims=";
  for (std::size_t i = 0; i < arch.hidden_dims.size(); ++i) {
    if (i) os << ',';
    os << arch.hidden_dims[i];
  }
  os << '\n';
  os << "output_dim=" << arch.output_dim << '\n';
  os << "use_layer_norm=" << (arch.use_layer_norm ? "true" : "false") << '\n';
  os << "activation=relu\n";
  os << "epochs=" << epochs << '\n';
  os << "batch_size=" << batch_size << '\n';
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", peak_lr);
  os << "peak_lr=" << buf << '\n';
  os << "warmup_epochs=" << warmup_epochs << '\n';
  os << "schedule=" << (schedule == LrSchedule::cosine ? "cosine" : "constant")
     << '\n';
  std::snprintf(buf, sizeof(buf), "%.17g", momentum);
  os << "momentum=" << buf << '\n';
  std::snprintf(buf, sizeof(buf), "%.17g", weight_decay);
  os << "weight_decay=" << buf << '\n';
  os << "init_seed=" << init_seed << '\n';
  os << "data_order_seed=" << data_order_seed << '\n';
  os << "regime=" << regime_name(regime) << '\n';
  return os.str();
}

std::string TrainConfig::fingerprint() const {
  return to_hex(fnv1a64(canonical_string()));
}

NetworkParams init_params(const ArchitectureSpec& arch, std::uint64_t seed) {
  NetworkParams p = NetworkParams::zeros(arch);
  for (auto& g : p.norm_scale) g.setOnes();
  const auto d = arch.dims();
  for (int i = 0; i < arch.num_layers(); ++i) {
    const double stddev = std::sqrt(2.0 / d[i]);
    SplitMix64 g(mix_seed(seed, 0x57000000ull + static_cast<std::uint64_t>(i)));
    Matrix& w = p.weights[i];
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) {
        w(r, c) = stddev * g.normal();
      }
    }
  }
  return p;
}

namespace {

struct ForwardTrace {
  // Per hidden layer: pre-norm input, normalized output (pre-relu), and the
  // layer-norm row statistics needed by the backward pass.
  std::vector<Matrix> linear_out;   // W x + b
  std::vector<Matrix> normalized;   // x_hat (pre-affine) when norm enabled
  std::vector<Matrix> activations;  // post-relu output per hidden layer
  std::vector<Vector> inv_stddev;   // per row, when norm enabled
  Matrix logits;
};

ForwardTrace forward_trace(const NetworkParams& params,
                           const ConstMatrixRef& inputs) {
  const int k = params.arch.num_layers();
  ForwardTrace t;
  Matrix h = inputs;
  for (int i = 0; i + 1 < k; ++i) {
    Matrix pre = (h * params.weights[i].transpose()).rowwise() +
                 params.biases[i].transpose();
    t.linear_out.push_back(pre);
    Matrix post;
    if (params.arch.use_layer_norm) {
      const auto dcols = static_cast<double>(pre.cols());
      Matrix xhat(pre.rows(), pre.cols());
      Vector inv(pre.rows());
      for (Eigen::Index r = 0; r < pre.rows(); ++r) {
        const double mean = pre.row(r).sum() / dcols;
        const double var = (pre.row(r).array() - mean).square().sum() / dcols;
        inv[r] = 1.0 / std::sqrt(var + kLayerNormEps);
        xhat.row(r) = ((pre.row(r).array() - mean) * inv[r]).matrix();
      }
      t.normalized.push_back(xhat);
      t.inv_stddev.push_back(inv);
      post = ((xhat.array().rowwise() *
               params.norm_scale[i].transpose().array())
                  .rowwise() +
              params.norm_shift[i].transpose().array())
                 .matrix();
    } else {
      post = pre;
    }
    h = post.cwiseMax(0.0);
    t.activations.push_back(h);
  }
  t.logits = (h * params.weights[k - 1].transpose()).rowwise() +
             params.biases[k - 1].transpose();
  return t;
}

// Softmax probabilities and mean cross-entropy, computed stably per row.
double softmax_ce(const Matrix& logits, const std::vector<int>& labels,
                  Matrix& probs) {
  const Eigen::Index n = logits.rows();
  probs.resize(logits.rows(), logits.cols());
  double total = 0.0;
  for (Eigen::Index r = 0; r < n; ++r) {
    const double zmax = logits.row(r).maxCoeff();
    const auto shifted = (logits.row(r).array() - zmax).exp();
    const double denom = shifted.sum();
    probs.row(r) = (shifted / denom).matrix();
    total += std::log(denom) + zmax - logits(r, labels[r]);
  }
  return total / static_cast<double>(n);
}

}  // namespace

double loss_and_grad(const NetworkParams& params, const ConstMatrixRef& inputs,
                     const std::vector<int>& labels, NetworkParams& gradient) {
  if (inputs.cols() != params.arch.input_dim) {
    throw ShapeError("grad: input width mismatch");
  }
  if (static_cast<Eigen::Index>(labels.size()) != inputs.rows()) {
    throw ShapeError("grad: label count mismatch");
  }
  const int k = params.arch.num_layers();
  const Eigen::Index n = inputs.rows();
  const ForwardTrace t = forward_trace(params, inputs);

  Matrix probs;
  const double loss = softmax_ce(t.logits, labels, probs);

  gradient = NetworkParams::zeros(params.arch);

  // d(mean CE)/d(logits) = (softmax - onehot) / n
  Matrix delta = probs;
  for (Eigen::Index r = 0; r < n; ++r) delta(r, labels[r]) -= 1.0;
  delta /= static_cast<double>(n);

  for (int i = k - 1; i >= 0; --i) {
    const Matrix& layer_in = i == 0 ? Matrix(inputs) : t.activations[i - 1];
    gradient.weights[i].noalias() = delta.transpose() * layer_in;
    gradient.biases[i] = delta.colwise().sum().transpose();
    if (i == 0) break;
    Matrix dh = delta * params.weights[i];  // grad wrt hidden activation i-1

    const int hid = i - 1;
    // relu backward: activations are max(post, 0), so positive output marks
    // the pass-through set.
    dh = (t.activations[hid].array() > 0.0).select(dh, 0.0);

    if (params.arch.use_layer_norm) {
      const Matrix& xhat = t.normalized[hid];
      gradient.norm_scale[hid] =
          (dh.array() * xhat.array()).colwise().sum().transpose();
      gradient.norm_shift[hid] = dh.colwise().sum().transpose();
      const auto dcols = static_cast<double>(dh.cols());
      Matrix g = (dh.array().rowwise() *
                  params.norm_scale[hid].transpose().array())
                     .matrix();
      Matrix dpre(g.rows(), g.cols());
      for (Eigen::Index r = 0; r < g.rows(); ++r) {
        const double mg = g.row(r).sum() / dcols;
        const double mgx = (g.row(r).array() * xhat.row(r).array()).sum() / dcols;
        dpre.row(r) = (t.inv_stddev[hid][r] *
                       (g.row(r).array() - mg - xhat.row(r).array() * mgx))
                          .matrix();
      }
      delta = dpre;
    } else {
      delta = dh;
    }
  }
  return loss;
}

NetworkParams grad(const NetworkParams& params, const ConstMatrixRef& inputs,
                   const std::vector<int>& labels) {
  NetworkParams g;
  loss_and_grad(params, inputs, labels, g);
  return g;
}

double learning_rate_at(const TrainConfig& config, long step,
                        long steps_per_epoch) {
  const long warmup_steps = config.warmup_epochs * steps_per_epoch;
  const long total_steps = config.epochs * steps_per_epoch;
  if (step < warmup_steps) {
    return config.peak_lr * static_cast<double>(step + 1) /
           static_cast<double>(warmup_steps);
  }
  if (config.schedule == LrSchedule::constant) return config.peak_lr;
  if (total_steps <= warmup_steps) return config.peak_lr;
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(total_steps - warmup_steps);
  return 0.5 * config.peak_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

namespace {

void project_mask(NetworkParams& params, const Mask& mask) {
  for (std::size_t i = 0; i < params.weights.size(); ++i) {
    params.weights[i] =
        (params.weights[i].array() * mask.weights[i].cast<Scalar>()).matrix();
  }
}

void axpy_params(NetworkParams& out, double scale, const NetworkParams& x) {
  for (std::size_t i = 0; i < out.weights.size(); ++i) {
    out.weights[i] += scale * x.weights[i];
    out.biases[i] += scale * x.biases[i];
  }
  for (std::size_t i = 0; i < out.norm_scale.size(); ++i) {
    out.norm_scale[i] += scale * x.norm_scale[i];
    out.norm_shift[i] += scale * x.norm_shift[i];
  }
}

Checkpoint make_checkpoint(const TrainConfig& config, const NetworkParams& params,
                           const NetworkParams& momentum, int epoch) {
  Checkpoint c;
  c.params = params;
  c.epoch = epoch;
  c.seed = config.init_seed;
  c.regime = regime_name(config.regime);
  c.config_fingerprint = config.fingerprint();
  if (config.save_momentum) c.momentum = momentum;
  return c;
}

}  // namespace

std::vector<Checkpoint> train_from(const TrainConfig& config, const Dataset& data,
                                   const NetworkParams& start_params,
                                   const NetworkParams* start_momentum,
                                   int start_epoch, const Mask* mask,
                                   const EpochCallback& on_checkpoint) {
  config.validate();
  data.validate();
  if (data.dim() != config.arch.input_dim) {
    throw ShapeError("train: dataset width != arch input_dim");
  }
  if (start_epoch < 0 || start_epoch > config.epochs) {
    throw ValidationError("train: start epoch out of range");
  }

  NetworkParams params = start_params;
  NetworkParams velocity =
      start_momentum ? *start_momentum : NetworkParams::zeros(config.arch);
  if (mask) {
    mask->validate_shapes(params);
    project_mask(params, *mask);
  }

  const int n = data.size();
  const long steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;

  std::vector<Checkpoint> out;
  auto emit = [&](int epoch) {
    if (config.checkpoint_epochs.count(epoch) || epoch == config.epochs) {
      out.push_back(make_checkpoint(config, params, velocity, epoch));
      if (on_checkpoint) on_checkpoint(out.back());
    }
  };

  emit(start_epoch);
  Checkpoint last_good = make_checkpoint(config, params, velocity, start_epoch);

  NetworkParams gradient;
  for (int epoch = start_epoch; epoch < config.epochs; ++epoch) {
    const auto slices = batches(n, config.batch_size, config.data_order_seed, epoch);
    long step = static_cast<long>(epoch) * steps_per_epoch;
    for (const auto& slice : slices) {
      Matrix bx(slice.size(), data.dim());
      std::vector<int> by(slice.size());
      for (std::size_t r = 0; r < slice.size(); ++r) {
        bx.row(static_cast<Eigen::Index>(r)) = data.features.row(slice[r]);
        by[r] = data.labels[slice[r]];
      }
      loss_and_grad(params, bx, by, gradient);
      if (mask) {
        for (std::size_t i = 0; i < gradient.weights.size(); ++i) {
          gradient.weights[i] = (gradient.weights[i].array() *
                                 mask->weights[i].cast<Scalar>())
                                    .matrix();
        }
      }
      if (config.weight_decay != 0.0) {
        axpy_params(gradient, config.weight_decay, params);
      }
      const double lr = learning_rate_at(config, step, steps_per_epoch);
      // v = momentum * v + g; theta -= lr * v
      for (std::size_t i = 0; i < params.weights.size(); ++i) {
        velocity.weights[i] = config.momentum * velocity.weights[i] + gradient.weights[i];
        velocity.biases[i] = config.momentum * velocity.biases[i] + gradient.biases[i];
        params.weights[i] -= lr * velocity.weights[i];
        params.biases[i] -= lr * velocity.biases[i];
      }
      for (std::size_t i = 0; i < params.norm_scale.size(); ++i) {
        velocity.norm_scale[i] =
            config.momentum * velocity.norm_scale[i] + gradient.norm_scale[i];
        velocity.norm_shift[i] =
            config.momentum * velocity.norm_shift[i] + gradient.norm_shift[i];
        params.norm_scale[i] -= lr * velocity.norm_scale[i];
        params.norm_shift[i] -= lr * velocity.norm_shift[i];
      }
      if (mask) project_mask(params, *mask);
      ++step;
    }
    if (!params.all_finite()) {
      throw DivergedError("train: non-finite parameters after epoch " +
                              std::to_string(epoch + 1),
                          last_good);
    }
    last_good = make_checkpoint(config, params, velocity, epoch + 1);
    emit(epoch + 1);
  }
  return out;
}

std::vector<Checkpoint> train(const TrainConfig& config, const Dataset& data,
                              const Mask* mask,
                              const EpochCallback& on_checkpoint) {
  const NetworkParams start = init_params(config.arch, config.init_seed);
  return train_from(config, data, start, nullptr, 0, mask, on_checkpoint);
}

std::vector<Checkpoint> spawn_children(const TrainConfig& parent_config,
                                       const Checkpoint& parent_at_epoch,
                                       const Dataset& data,
                                       const std::vector<std::uint64_t>& seeds) {
  std::vector<Checkpoint> children;
  for (std::uint64_t seed : seeds) {
    TrainConfig child_config = parent_config;
    child_config.data_order_seed = seed;
    const NetworkParams* momentum =
        parent_at_epoch.momentum ? &*parent_at_epoch.momentum : nullptr;
    auto ckpts = train_from(child_config, data, parent_at_epoch.params, momentum,
                            parent_at_epoch.epoch);
    children.push_back(std::move(ckpts.back()));
  }
  return children;
}

}  // namespace permalign
