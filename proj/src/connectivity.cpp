#include "permalign/connectivity.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <thread>

#include "permalign/rng.hpp"

namespace permalign {

EvalResult evaluate(const NetworkParams& params, const Dataset& data) {
  if (data.size() < 1) throw ValidationError("evaluate: empty split");
  EvalResult result;
  result.n_examples = data.size();
  constexpr int kChunk = 2048;
  double loss_sum = 0.0;
  long errors = 0;
  for (int at = 0; at < data.size(); at += kChunk) {
    const int len = std::min(kChunk, data.size() - at);
    const Matrix logits = forward(params, data.features.middleRows(at, len));
    for (int r = 0; r < len; ++r) {
      const int label = data.labels[at + r];
      const double zmax = logits.row(r).maxCoeff();
      const double denom = (logits.row(r).array() - zmax).exp().sum();
      loss_sum += std::log(denom) + zmax - logits(r, label);
      Eigen::Index argmax = 0;
      logits.row(r).maxCoeff(&argmax);
      if (static_cast<int>(argmax) != label) ++errors;
    }
  }
  result.mean_cross_entropy = loss_sum / data.size();
  result.error_rate = static_cast<double>(errors) / data.size();
  return result;
}

namespace {

int effective_threads(int requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

// Runs fn(i) for i in [0, n) over a small thread pool; every index writes
// only to its own slot.
template <typename Fn>
void parallel_for(int n, int threads, Fn&& fn) {
  threads = std::min(effective_threads(threads), n);
  if (threads <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (int i = t; i < n; i += threads) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

void finish_split(SplitCurve& curve, const std::vector<double>& alphas) {
  const int n = static_cast<int>(alphas.size());
  curve.loss_a = curve.loss[n - 1];
  curve.loss_b = curve.loss[0];
  curve.error_a = curve.error[n - 1];
  curve.error_b = curve.error[0];
  // (v - vB) - alpha*(vA - vB) rather than v - (alpha*vA + (1-alpha)*vB):
  // endpoints then contribute exactly zero and barrier(a, a) is exactly 0.
  const double dl = curve.loss_a - curve.loss_b;
  const double de = curve.error_a - curve.error_b;
  double bl = -std::numeric_limits<double>::infinity();
  double be = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    const double a = alphas[i];
    bl = std::max(bl, (curve.loss[i] - curve.loss_b) - a * dl);
    be = std::max(be, (curve.error[i] - curve.error_b) - a * de);
  }
  curve.barrier_loss = bl;
  curve.barrier_error = be;
}

}  // namespace

BarrierCurve barrier_curve(const NetworkParams& a, const NetworkParams& b,
                           const Dataset& train, const Dataset* test,
                           int n_alpha, int threads) {
  if (a.arch != b.arch) throw ShapeError("barrier_curve: arch mismatch");
  if (n_alpha < 2) throw ValidationError("barrier_curve: n_alpha must be >= 2");
  BarrierCurve curve;
  curve.alphas.resize(n_alpha);
  for (int i = 0; i < n_alpha; ++i) {
    curve.alphas[i] = static_cast<double>(i) / (n_alpha - 1);
  }
  curve.train.loss.resize(n_alpha);
  curve.train.error.resize(n_alpha);
  if (test) {
    curve.test.emplace();
    curve.test->loss.resize(n_alpha);
    curve.test->error.resize(n_alpha);
  }
  parallel_for(n_alpha, threads, [&](int i) {
    const NetworkParams point = interpolate(a, b, curve.alphas[i]);
    const EvalResult tr = evaluate(point, train);
    curve.train.loss[i] = tr.mean_cross_entropy;
    curve.train.error[i] = tr.error_rate;
    if (test) {
      const EvalResult te = evaluate(point, *test);
      curve.test->loss[i] = te.mean_cross_entropy;
      curve.test->error[i] = te.error_rate;
    }
  });
  finish_split(curve.train, curve.alphas);
  if (test) finish_split(*curve.test, curve.alphas);
  return curve;
}

bool is_linearly_connected(const NetworkParams& a, const NetworkParams& b,
                           const Dataset& train, const Dataset& test,
                           double threshold, int n_alpha) {
  if (threshold < 0) throw ValidationError("threshold must be >= 0");
  const BarrierCurve curve = barrier_curve(a, b, train, &test, n_alpha);
  return curve.test->barrier_error <= threshold;
}

double bootstrap_error_std(const NetworkParams& params, const Dataset& data,
                           int n_boot, std::uint64_t seed) {
  // Per-example correctness computed once; resampling only permutes the sum.
  std::vector<char> wrong(data.size());
  constexpr int kChunk = 2048;
  for (int at = 0; at < data.size(); at += kChunk) {
    const int len = std::min(kChunk, data.size() - at);
    const Matrix logits = forward(params, data.features.middleRows(at, len));
    for (int r = 0; r < len; ++r) {
      Eigen::Index argmax = 0;
      logits.row(r).maxCoeff(&argmax);
      wrong[at + r] = static_cast<int>(argmax) != data.labels[at + r];
    }
  }
  const int n = data.size();
  double sum = 0.0, sum_sq = 0.0;
  for (int rep = 0; rep < n_boot; ++rep) {
    SplitMix64 g(mix_seed(seed, static_cast<std::uint64_t>(rep)));
    long errs = 0;
    for (int i = 0; i < n; ++i) {
      errs += wrong[static_cast<int>(g.below(static_cast<std::uint64_t>(n)))];
    }
    const double rate = static_cast<double>(errs) / n;
    sum += rate;
    sum_sq += rate * rate;
  }
  const double mean = sum / n_boot;
  const double var = std::max(0.0, sum_sq / n_boot - mean * mean);
  return std::sqrt(var);
}

namespace {

MatchReport run_matcher(const NetworkParams& to, const NetworkParams& from,
                        const PermutationSpec& spec, Matcher matcher,
                        const Dataset& train, std::uint64_t seed) {
  if (matcher == Matcher::weight) {
    WeightMatchOptions opt;
    opt.seed = seed;
    return weight_match(to, from, spec, opt);
  }
  return activation_match(to, from, spec, train);
}

}  // namespace

TripletResult triplet_test(const NetworkParams& a, const NetworkParams& b,
                           const NetworkParams& c, Matcher matcher,
                           const Dataset& train, const Dataset& test,
                           int n_alpha, std::uint64_t match_seed) {
  if (a.arch != b.arch || a.arch != c.arch) {
    throw ShapeError("triplet_test: arch mismatch");
  }
  const PermutationSpec spec = build_mlp_spec(a.arch);

  const Permutation p_ab = run_matcher(a, b, spec, matcher, train, match_seed).permutation;
  const Permutation p_ac = run_matcher(c, a, spec, matcher, train, match_seed).permutation;
  const Permutation p_bc = run_matcher(c, b, spec, matcher, train, match_seed).permutation;

  TripletResult result;
  result.direct = barrier_curve(a, apply_permutation(b, spec, p_ab), train, &test, n_alpha);
  result.indirect = barrier_curve(apply_permutation(a, spec, p_ac),
                                  apply_permutation(b, spec, p_bc), train, &test,
                                  n_alpha);
  // The permutation B -> A induced through C, compared with the direct one.
  const Permutation induced = compose(invert(p_ac), p_bc);
  result.fp_fraction = fixed_points(induced, p_ab).fraction;
  return result;
}

InstabilityResult instability(const TrainConfig& config,
                              const Checkpoint& parent_a_at_epoch,
                              const std::pair<std::uint64_t, std::uint64_t>& child_seeds,
                              const Dataset& train, const Dataset& test,
                              const Checkpoint* parent_b_at_epoch,
                              const Permutation* p_end,
                              const PermutationSpec* spec, int n_alpha) {
  if (parent_a_at_epoch.epoch > config.epochs) {
    throw ValidationError("instability: spawn epoch beyond config epochs");
  }
  const auto children_a = spawn_children(config, parent_a_at_epoch, train,
                                         {child_seeds.first, child_seeds.second});
  InstabilityResult result;
  result.child_barrier = barrier_curve(children_a[0].params, children_a[1].params,
                                       train, &test, n_alpha);
  if (parent_b_at_epoch && p_end && spec) {
    const auto child_b =
        spawn_children(config, *parent_b_at_epoch, train, {child_seeds.first});
    result.cross_barrier = barrier_curve(
        children_a[0].params, apply_permutation(child_b[0].params, *spec, *p_end),
        train, &test, n_alpha);
  }
  return result;
}

LandscapeProjection landscape_projection(
    const NetworkParams& p0, const NetworkParams& p1, const NetworkParams& p2,
    int nx, int ny, double margin, const Dataset& data,
    const std::vector<const NetworkParams*>& trajectory, int threads) {
  if (p0.arch != p1.arch || p0.arch != p2.arch) {
    throw ShapeError("landscape: arch mismatch");
  }
  if (nx < 2 || ny < 2) throw ValidationError("landscape: grid must be >= 2x2");
  const Vector base = flatten(p0);
  const Vector u = flatten(p1) - base;
  const double u_norm = u.norm();
  if (u_norm <= 1e-12) throw DegeneratePlaneError("landscape: p1 == p0");
  const Vector e1 = u / u_norm;
  Vector w = flatten(p2) - base;
  const double w_proj = e1.dot(w);
  Vector w_perp = w - w_proj * e1;
  const double w_norm = w_perp.norm();
  if (w_norm <= 1e-10 * std::max(1.0, w.norm())) {
    throw DegeneratePlaneError("landscape: anchors are collinear");
  }
  const Vector e2 = w_perp / w_norm;

  LandscapeProjection out;
  out.p1_x = u_norm;
  out.p2_x = w_proj;
  out.p2_y = w_norm;

  const double min_x = std::min({0.0, u_norm, w_proj});
  const double max_x = std::max({0.0, u_norm, w_proj});
  const double min_y = std::min(0.0, w_norm);
  const double max_y = std::max(0.0, w_norm);
  const double pad_x = margin * (max_x - min_x);
  const double pad_y = margin * (max_y - min_y);
  out.grid_x.resize(nx);
  out.grid_y.resize(ny);
  for (int i = 0; i < nx; ++i) {
    out.grid_x[i] = min_x - pad_x + (max_x - min_x + 2 * pad_x) * i / (nx - 1);
  }
  for (int j = 0; j < ny; ++j) {
    out.grid_y[j] = min_y - pad_y + (max_y - min_y + 2 * pad_y) * j / (ny - 1);
  }

  out.losses.resize(ny, nx);
  parallel_for(ny, threads, [&](int j) {
    for (int i = 0; i < nx; ++i) {
      const Vector theta = base + out.grid_x[i] * e1 + out.grid_y[j] * e2;
      const NetworkParams point = unflatten(p0.arch, theta);
      out.losses(j, i) = evaluate(point, data).mean_cross_entropy;
    }
  });

  out.trajectory.reserve(trajectory.size());
  for (const NetworkParams* t : trajectory) {
    const Vector d = flatten(*t) - base;
    out.trajectory.emplace_back(e1.dot(d), e2.dot(d));
  }
  return out;
}

}  // namespace permalign
