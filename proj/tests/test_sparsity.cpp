#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "permalign/rng.hpp"
#include "permalign/sparsity.hpp"

using namespace permalign;

namespace {

ArchitectureSpec arch(int in, std::vector<int> hidden, int out,
                      bool norm = false) {
  ArchitectureSpec a;
  a.input_dim = in;
  a.hidden_dims = std::move(hidden);
  a.output_dim = out;
  a.use_layer_norm = norm;
  return a;
}

NetworkParams gaussian_params(const ArchitectureSpec& a, std::uint64_t seed) {
  NetworkParams p = NetworkParams::zeros(a);
  SplitMix64 g(seed);
  for (auto& w : p.weights) {
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = g.normal();
    }
  }
  for (auto& b : p.biases) {
    for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = 0.1 * g.normal();
  }
  for (auto& s : p.norm_scale) s.setOnes();
  return p;
}

long expected_survivors(long total, int levels) {
  long n = total;
  for (int i = 0; i < levels; ++i) n -= n / 5;
  return n;
}

}  // namespace

TEST_CASE("magnitude_prune: keeps the two largest of four weights") {
  const auto a = arch(2, {1}, 2);
  NetworkParams p = NetworkParams::zeros(a);
  p.weights[0] << 0.1, -0.5;  // W1 is 1x2
  p.weights[1] << 0.3, 0.05;  // W2 is 2x1
  const Mask m = magnitude_prune(p, Mask::ones_like(p), 0.5);
  CHECK(m.weights[0](0, 0) == 0);  // 0.1 pruned
  CHECK(m.weights[0](0, 1) == 1);  // -0.5 kept
  CHECK(m.weights[1](0, 0) == 1);  // 0.3 kept
  CHECK(m.weights[1](1, 0) == 0);  // 0.05 pruned
  CHECK(m.nonzeros() == 2);
}

TEST_CASE("magnitude_prune: fraction bounds and never-revive nesting") {
  const auto a = arch(8, {16, 12}, 5);
  const NetworkParams p = gaussian_params(a, 3);
  CHECK_THROWS_AS(magnitude_prune(p, Mask::ones_like(p), 0.0), ValidationError);
  CHECK_THROWS_AS(magnitude_prune(p, Mask::ones_like(p), 1.0), ValidationError);

  Mask m = Mask::ones_like(p);
  const long total = m.total();
  for (int level = 1; level <= 3; ++level) {
    const Mask next = magnitude_prune(p, m, 0.2);
    // zeros(previous) subset of zeros(next)
    for (std::size_t l = 0; l < m.weights.size(); ++l) {
      CHECK(((m.weights[l] == 0) && (next.weights[l] == 1)).count() == 0);
    }
    m = next;
    CHECK(m.nonzeros() == expected_survivors(total, level));
    CHECK(std::abs(m.nonzeros() - std::pow(0.8, level) * total) <= level);
  }
}

TEST_CASE("one_shot_prune: level 1 equals a single 20% IMP step") {
  const auto a = arch(8, {16}, 5);
  const NetworkParams p = gaussian_params(a, 5);
  const Mask imp_step = magnitude_prune(p, Mask::ones_like(p), 0.2);
  const Mask one_shot = one_shot_prune(p, 1);
  CHECK(imp_step == one_shot);
}

TEST_CASE("one_shot_prune: level 12 reaches density 0.8^12") {
  const auto a = arch(32, {64, 64}, 10);
  const NetworkParams p = gaussian_params(a, 7);
  const Mask m = one_shot_prune(p, 12);
  const double density = m.density();
  CHECK(density == doctest::Approx(std::pow(0.8, 12)).epsilon(0.01));
  CHECK(std::abs(m.nonzeros() - std::pow(0.8, 12) * m.total()) <= 12);

  // One-shot and iterated pruning agree on the survivor count exactly.
  Mask iterated = Mask::ones_like(p);
  for (int i = 0; i < 12; ++i) iterated = magnitude_prune(p, iterated, 0.2);
  CHECK(iterated.nonzeros() == m.nonzeros());
}

TEST_CASE("apply_mask: all-ones is the identity; shapes are enforced") {
  const auto a = arch(6, {9}, 4, true);
  const NetworkParams p = gaussian_params(a, 9);
  CHECK(flatten(apply_mask(p, Mask::ones_like(p))) == flatten(p));
  Mask wrong;
  wrong.weights.push_back(MaskArray::Ones(2, 2));
  CHECK_THROWS_AS(apply_mask(p, wrong), ShapeError);
}

TEST_CASE("permute_mask: identity permutation and commutation with params") {
  const auto a = arch(6, {9, 8}, 4, true);
  const auto spec = build_mlp_spec(a);
  const NetworkParams p = gaussian_params(a, 11);
  const Mask mask = magnitude_prune(p, Mask::ones_like(p), 0.5);

  CHECK(permute_mask(mask, spec, Permutation::identity(spec)) == mask);

  Permutation pi;
  for (int g = 0; g < spec.num_groups(); ++g) {
    pi.groups.push_back(shuffled_indices(spec.groups[g].size, mix_seed(13, g)));
  }
  // mask-of-permuted equals permuted-mask.
  const NetworkParams permuted_params = apply_permutation(p, spec, pi);
  const Mask permuted_mask = permute_mask(mask, spec, pi);
  const NetworkParams lhs = apply_mask(permuted_params, permuted_mask);
  const NetworkParams rhs = apply_permutation(apply_mask(p, mask), spec, pi);
  CHECK(flatten(lhs) == flatten(rhs));
}

TEST_CASE("mask file round trip with metadata") {
  const auto dir = std::filesystem::temp_directory_path() / "permalign_sparsity";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "mask.pmsk").string();
  const auto a = arch(6, {9}, 4);
  const NetworkParams p = gaussian_params(a, 15);
  const Mask mask = magnitude_prune(p, Mask::ones_like(p), 0.3);
  MaskMeta meta;
  meta.level = 2;
  meta.density = mask.density();
  meta.parent_run_id = "run-17";
  save_mask(path, mask, meta);

  MaskMeta back_meta;
  const Mask back = load_mask(path, &back_meta);
  CHECK(back == mask);
  CHECK(back_meta.level == 2);
  CHECK(back_meta.density == doctest::Approx(meta.density));
  CHECK(back_meta.parent_run_id == "run-17");
}

TEST_CASE("random_prune: density and determinism") {
  const auto a = arch(10, {20, 20}, 6);
  const NetworkParams p = gaussian_params(a, 17);
  const Mask m1 = random_prune(p, 0.5, 23);
  const Mask m2 = random_prune(p, 0.5, 23);
  CHECK(m1 == m2);
  CHECK(m1.nonzeros() == m1.total() - m1.total() / 2);
  const Mask m3 = random_prune(p, 0.5, 24);
  CHECK(!(m1 == m3));
  CHECK(random_prune(p, 0.0, 1) == Mask::ones_like(p));
}

TEST_CASE("imp: levels=0 is a dense run; densities and nesting hold") {
  TrainConfig c;
  c.arch = arch(6, {16, 12}, 4, true);
  c.epochs = 3;
  c.batch_size = 32;
  c.peak_lr = 0.05;
  c.warmup_epochs = 1;
  c.init_seed = 19;
  c.data_order_seed = 20;
  const Dataset train = synth_blobs(192, 6, 4, 10.0, 25);
  const Dataset test = synth_blobs(96, 6, 4, 10.0, 25, 1);

  const ImpRun dense_only = imp(c, train, test, 0, 1);
  CHECK(dense_only.levels.size() == 1);
  CHECK(dense_only.levels[0].mask.nonzeros() == dense_only.levels[0].mask.total());

  const ImpRun run = imp(c, train, test, 3, 1);
  REQUIRE(run.levels.size() == 4);
  const long total = run.levels[0].mask.total();
  for (int level = 0; level <= 3; ++level) {
    const ImpLevel& lv = run.levels[level];
    CHECK(lv.mask.nonzeros() == expected_survivors(total, level));
    // Params satisfy the mask exactly.
    for (std::size_t l = 0; l < lv.params.weights.size(); ++l) {
      const Matrix outside =
          (lv.params.weights[l].array() * (1 - lv.mask.weights[l].cast<Scalar>()))
              .matrix();
      CHECK(outside.cwiseAbs().maxCoeff() == 0.0);
    }
    if (level > 0) {
      // Nesting: previous level's zeros stay zero.
      for (std::size_t l = 0; l < lv.mask.weights.size(); ++l) {
        CHECK(((run.levels[level - 1].mask.weights[l] == 0) &&
               (lv.mask.weights[l] == 1))
                  .count() == 0);
      }
    }
  }
  CHECK(run.rewind_epoch == 1);

  CHECK_THROWS_AS(imp(c, train, test, 1, 3), ValidationError);
}

TEST_CASE("imp: learning-rate rewinding variant trains from trained weights") {
  TrainConfig c;
  c.arch = arch(6, {12}, 4);
  c.epochs = 2;
  c.batch_size = 32;
  c.peak_lr = 0.05;
  c.warmup_epochs = 0;
  const Dataset train = synth_blobs(128, 6, 4, 10.0, 27);
  const Dataset test = synth_blobs(64, 6, 4, 10.0, 27, 1);
  const ImpRun run = imp(c, train, test, 1, 1, /*lr_rewind=*/true);
  REQUIRE(run.levels.size() == 2);
  for (std::size_t l = 0; l < run.levels[1].params.weights.size(); ++l) {
    const Matrix outside = (run.levels[1].params.weights[l].array() *
                            (1 - run.levels[1].mask.weights[l].cast<Scalar>()))
                               .matrix();
    CHECK(outside.cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("transport_mask: all-ones mask equals a plain retrain of B") {
  TrainConfig c;
  c.arch = arch(6, {12}, 4);
  c.epochs = 3;
  c.batch_size = 32;
  c.peak_lr = 0.05;
  c.warmup_epochs = 1;
  c.init_seed = 33;
  c.data_order_seed = 34;
  c.checkpoint_epochs = {1};
  const Dataset train_set = synth_blobs(192, 6, 4, 10.0, 29);
  const Dataset test_set = synth_blobs(96, 6, 4, 10.0, 29, 1);

  const auto ckpts = train(c, train_set);
  const Checkpoint* rewind = nullptr;
  for (const auto& ck : ckpts) {
    if (ck.epoch == 1) rewind = &ck;
  }
  REQUIRE(rewind != nullptr);
  const NetworkParams& trained = ckpts.back().params;

  const auto spec = build_mlp_spec(c.arch);
  const Mask ones = Mask::ones_like(trained);
  const TransportResult r =
      transport_mask(ones, 0, Permutation::identity(spec), spec, trained,
                     *rewind, c, train_set, test_set, /*retrain_seed=*/77);

  // With no pruning and an identity permutation, all arms coincide with a
  // plain masked retrain from the rewind point.
  TrainConfig plain = c;
  plain.data_order_seed = 77;
  const auto replay = train_from(plain, train_set, rewind->params,
                                 rewind->momentum ? &*rewind->momentum : nullptr,
                                 rewind->epoch);
  const double expect = 1.0 - evaluate(replay.back().params, test_set).error_rate;
  CHECK(r.transported_accuracy == doctest::Approx(expect));
  CHECK(r.naive_accuracy == doctest::Approx(expect));
  CHECK(r.density == 1.0);
}
