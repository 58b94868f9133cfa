#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "permalign/checkpoint.hpp"
#include "permalign/model.hpp"
#include "permalign/perm.hpp"
#include "permalign/rng.hpp"

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

NetworkParams random_params(const ArchitectureSpec& a, std::uint64_t seed) {
  NetworkParams p = NetworkParams::zeros(a);
  SplitMix64 g(seed);
  for (auto& w : p.weights) {
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = g.normal();
    }
  }
  for (auto& b : p.biases) {
    for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = g.normal();
  }
  for (auto& s : p.norm_scale) {
    for (Eigen::Index i = 0; i < s.size(); ++i) s[i] = 1.0 + 0.1 * g.normal();
  }
  for (auto& s : p.norm_shift) {
    for (Eigen::Index i = 0; i < s.size(); ++i) s[i] = 0.1 * g.normal();
  }
  return p;
}

Matrix random_inputs(int n, int d, std::uint64_t seed) {
  Matrix x(n, d);
  SplitMix64 g(seed);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) x(r, c) = g.normal();
  }
  return x;
}

Permutation random_perm(const PermutationSpec& spec, std::uint64_t seed) {
  Permutation p;
  for (int g = 0; g < spec.num_groups(); ++g) {
    p.groups.push_back(shuffled_indices(spec.groups[g].size, mix_seed(seed, g)));
  }
  return p;
}

// Independent loop-level reimplementation of the layer recurrence; no
// Eigen products, one scalar at a time.
std::vector<double> forward_oracle(const NetworkParams& p,
                                   const std::vector<double>& x0) {
  const int k = p.arch.num_layers();
  std::vector<double> x = x0;
  for (int i = 0; i < k; ++i) {
    const Matrix& w = p.weights[i];
    std::vector<double> y(static_cast<std::size_t>(w.rows()), 0.0);
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      double acc = 0.0;
      for (Eigen::Index c = 0; c < w.cols(); ++c) acc += w(r, c) * x[c];
      y[r] = acc + p.biases[i][r];
    }
    if (i == k - 1) return y;
    if (p.arch.use_layer_norm) {
      double mean = 0.0;
      for (double v : y) mean += v;
      mean /= static_cast<double>(y.size());
      double var = 0.0;
      for (double v : y) var += (v - mean) * (v - mean);
      var /= static_cast<double>(y.size());
      const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
      for (std::size_t j = 0; j < y.size(); ++j) {
        y[j] = p.norm_scale[i][static_cast<Eigen::Index>(j)] * (y[j] - mean) * inv +
               p.norm_shift[i][static_cast<Eigen::Index>(j)];
      }
    }
    for (auto& v : y) v = std::max(v, 0.0);
    x = y;
  }
  return x;
}

}  // namespace

TEST_CASE("build_mlp_spec: single hidden layer") {
  const auto spec = build_mlp_spec(arch(2, {3}, 2, true));
  REQUIRE(spec.num_groups() == 1);
  CHECK(spec.groups[0].size == 3);
  const std::vector<AxisRef> expected = {
      {"W1", 0}, {"b1", 0}, {"g1", 0}, {"s1", 0}, {"W2", 1}};
  CHECK(spec.groups[0].targets == expected);
}

TEST_CASE("build_mlp_spec: two hidden layers of width 512") {
  const auto spec = build_mlp_spec(arch(784, {512, 512}, 10));
  REQUIRE(spec.num_groups() == 2);
  CHECK(spec.groups[0].size == 512);
  CHECK(spec.groups[1].size == 512);
}

TEST_CASE("build_mlp_spec: shared tensors across neighboring groups") {
  const auto spec = build_mlp_spec(arch(4, {5, 6, 7}, 3));
  REQUIRE(spec.num_groups() == 3);
  CHECK(spec.groups[0].size == 5);
  CHECK(spec.groups[1].size == 6);
  CHECK(spec.groups[2].size == 7);
  // W2 is permuted along axis 1 by group 0 and axis 0 by group 1.
  CHECK(spec.groups[0].targets.back() == AxisRef{"W2", 1});
  CHECK(spec.groups[1].targets.front() == AxisRef{"W2", 0});
  CHECK_NOTHROW(spec.validate());
}

TEST_CASE("spec validation rejects duplicated targets") {
  PermutationSpec spec;
  spec.groups.push_back({2, {{"W1", 0}}});
  spec.groups.push_back({2, {{"W1", 0}}});
  CHECK_THROWS_AS(spec.validate(), SpecError);
}

TEST_CASE("forward: zero params give zero logits") {
  const auto a = arch(3, {4}, 2, true);
  const NetworkParams p = NetworkParams::zeros(a);
  const Matrix x = random_inputs(5, 3, 7);
  CHECK(forward(p, x).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("forward: relu pass-through on a 1-unit net") {
  NetworkParams p = NetworkParams::zeros(arch(1, {1}, 1));
  p.weights[0](0, 0) = 1.0;
  p.weights[1](0, 0) = 1.0;
  Matrix x(2, 1);
  x << 2.0, -2.0;
  const Matrix y = forward(p, x);
  CHECK(y(0, 0) == doctest::Approx(2.0));
  CHECK(y(1, 0) == doctest::Approx(0.0));
}

TEST_CASE("forward matches the loop oracle") {
  for (bool norm : {false, true}) {
    const auto a = arch(6, {9, 5}, 4, norm);
    const NetworkParams p = random_params(a, norm ? 11 : 12);
    const Matrix x = random_inputs(8, 6, 21);
    const Matrix y = forward(p, x);
    for (int r = 0; r < 8; ++r) {
      std::vector<double> row(6);
      for (int c = 0; c < 6; ++c) row[c] = x(r, c);
      const auto expect = forward_oracle(p, row);
      for (int c = 0; c < 4; ++c) {
        CHECK(y(r, c) == doctest::Approx(expect[c]).epsilon(1e-6));
      }
    }
  }
}

TEST_CASE("forward rejects wrong input width") {
  const NetworkParams p = NetworkParams::zeros(arch(3, {4}, 2));
  CHECK_THROWS_AS(forward(p, random_inputs(2, 5, 1)), ShapeError);
}

TEST_CASE("apply_permutation: identity returns params bitwise") {
  const auto a = arch(4, {6, 5}, 3, true);
  const NetworkParams p = random_params(a, 3);
  const auto spec = build_mlp_spec(a);
  const NetworkParams q = apply_permutation(p, spec, Permutation::identity(spec));
  CHECK(flatten(p) == flatten(q));
}

TEST_CASE("apply_permutation: explicit swap on width-2 hidden layer") {
  const auto a = arch(3, {2}, 2);
  NetworkParams p = random_params(a, 5);
  const auto spec = build_mlp_spec(a);
  Permutation swap;
  swap.groups = {{1, 0}};
  const NetworkParams q = apply_permutation(p, spec, swap);
  CHECK(q.weights[0].row(0) == p.weights[0].row(1));
  CHECK(q.weights[0].row(1) == p.weights[0].row(0));
  CHECK(q.biases[0][0] == p.biases[0][1]);
  CHECK(q.biases[0][1] == p.biases[0][0]);
  CHECK(q.weights[1].col(0) == p.weights[1].col(1));
  CHECK(q.weights[1].col(1) == p.weights[1].col(0));
}

TEST_CASE("apply_permutation preserves the function") {
  for (bool norm : {false, true}) {
    const auto a = arch(5, {8, 7, 6}, 3, norm);
    const NetworkParams p = random_params(a, norm ? 31 : 32);
    const auto spec = build_mlp_spec(a);
    const Permutation pi = random_perm(spec, 99);
    const NetworkParams q = apply_permutation(p, spec, pi);
    const Matrix x = random_inputs(100, 5, 77);
    const double dev = (forward(p, x) - forward(q, x)).cwiseAbs().maxCoeff();
    CHECK(dev < 1e-5);
  }
}

TEST_CASE("apply_permutation rejects non-bijections") {
  const auto a = arch(3, {3}, 2);
  const NetworkParams p = random_params(a, 1);
  const auto spec = build_mlp_spec(a);
  Permutation bad;
  bad.groups = {{0, 0, 2}};
  CHECK_THROWS_AS(apply_permutation(p, spec, bad), InvalidPermutationError);
  Permutation wrong_size;
  wrong_size.groups = {{1, 0}};
  CHECK_THROWS_AS(apply_permutation(p, spec, wrong_size),
                  InvalidPermutationError);
}

TEST_CASE("compose and invert are consistent with application") {
  const auto a = arch(4, {6, 5}, 3, true);
  const NetworkParams params = random_params(a, 17);
  const auto spec = build_mlp_spec(a);
  const Permutation p = random_perm(spec, 1);
  const Permutation q = random_perm(spec, 2);
  const NetworkParams sequential =
      apply_permutation(apply_permutation(params, spec, q), spec, p);
  const NetworkParams composed = apply_permutation(params, spec, compose(p, q));
  CHECK(flatten(sequential) == flatten(composed));
  CHECK(compose(p, invert(p)).is_identity());
  CHECK(compose(invert(p), p).is_identity());
}

TEST_CASE("compose: identity is neutral and inversion flips the example") {
  PermutationSpec spec;
  spec.groups.push_back({3, {}});
  Permutation p;
  p.groups = {{2, 0, 1}};
  Permutation inv = invert(p);
  CHECK(inv.groups[0] == std::vector<int>{1, 2, 0});
  CHECK(compose(Permutation::identity(spec), p) == p);
  CHECK(compose(p, Permutation::identity(spec)) == p);
}

TEST_CASE("compose is associative on random triples") {
  const auto spec = build_mlp_spec(arch(3, {7, 9}, 2));
  for (int trial = 0; trial < 50; ++trial) {
    const Permutation p = random_perm(spec, 100 + trial);
    const Permutation q = random_perm(spec, 200 + trial);
    const Permutation r = random_perm(spec, 300 + trial);
    CHECK(compose(compose(p, q), r) == compose(p, compose(q, r)));
  }
}

TEST_CASE("interpolate endpoints, midpoint, idempotence") {
  const auto a = arch(3, {4}, 2, true);
  const NetworkParams pa = random_params(a, 41);
  const NetworkParams pb = random_params(a, 42);
  CHECK(flatten(interpolate(pa, pb, 1.0)) == flatten(pa));
  CHECK(flatten(interpolate(pa, pb, 0.0)) == flatten(pb));

  NetworkParams zeros = NetworkParams::zeros(a);
  NetworkParams twos = NetworkParams::zeros(a);
  for (auto& w : twos.weights) w.setConstant(2.0);
  for (auto& b : twos.biases) b.setConstant(2.0);
  for (auto& g : twos.norm_scale) g.setConstant(2.0);
  for (auto& s : twos.norm_shift) s.setConstant(2.0);
  const Vector mid = flatten(interpolate(zeros, twos, 0.5));
  CHECK(mid.minCoeff() == 1.0);
  CHECK(mid.maxCoeff() == 1.0);

  for (double alpha : {0.0, 0.25, 0.8, 1.0}) {
    CHECK(flatten(interpolate(pa, pa, alpha)).isApprox(flatten(pa), 1e-15));
  }
}

TEST_CASE("interpolate is affine in alpha") {
  const auto a = arch(4, {5}, 3);
  const NetworkParams pa = random_params(a, 51);
  const NetworkParams pb = random_params(a, 52);
  for (double alpha : {0.1, 0.3, 0.7}) {
    const Vector lhs = flatten(interpolate(pa, pb, alpha)) +
                       flatten(interpolate(pa, pb, 1.0 - alpha));
    const Vector rhs = flatten(pa) + flatten(pb);
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("interpolate rejects arch mismatch") {
  const NetworkParams pa = random_params(arch(3, {4}, 2), 1);
  const NetworkParams pb = random_params(arch(3, {5}, 2), 2);
  CHECK_THROWS_AS(interpolate(pa, pb, 0.5), ShapeError);
}

TEST_CASE("flatten/unflatten round trip") {
  const auto a = arch(5, {4, 3}, 2, true);
  const NetworkParams p = random_params(a, 61);
  const Vector v = flatten(p);
  CHECK(flatten(unflatten(a, v)) == v);
}

TEST_CASE("checkpoint round trip preserves f32 values and metadata") {
  const auto dir = std::filesystem::temp_directory_path() / "permalign_core_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "ckpt.pmlc").string();

  const auto a = arch(4, {6, 5}, 3, true);
  Checkpoint ckpt;
  ckpt.params = random_params(a, 71);
  ckpt.epoch = 7;
  ckpt.seed = 123;
  ckpt.regime = "warmup_no_wd";
  ckpt.config_fingerprint = "deadbeefdeadbeef";
  ckpt.momentum = random_params(a, 72);
  save_checkpoint(path, ckpt);

  const Checkpoint back = load_checkpoint(path);
  CHECK(back.epoch == 7);
  CHECK(back.seed == 123);
  CHECK(back.regime == "warmup_no_wd");
  CHECK(back.config_fingerprint == "deadbeefdeadbeef");
  REQUIRE(back.params.arch == a);
  REQUIRE(back.momentum.has_value());

  // Values survive exactly at f32 resolution; a second round trip is
  // bit-identical.
  const Vector v0 = flatten(ckpt.params);
  const Vector v1 = flatten(back.params);
  for (Eigen::Index i = 0; i < v0.size(); ++i) {
    CHECK(static_cast<float>(v0[i]) == static_cast<float>(v1[i]));
  }
  const std::string path2 = (dir / "ckpt2.pmlc").string();
  save_checkpoint(path2, back);
  const Checkpoint again = load_checkpoint(path2);
  CHECK(flatten(again.params) == flatten(back.params));
}

TEST_CASE("checkpoint reader rejects unknown magic and version") {
  const auto dir = std::filesystem::temp_directory_path() / "permalign_core_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "bad.pmlc").string();
  {
    std::ofstream f(path, std::ios::binary);
    f << "XXXXgarbage";
  }
  CHECK_THROWS_AS(load_checkpoint(path), IoError);
  {
    std::ofstream f(path, std::ios::binary);
    f << "PMLC";
    const unsigned char version2[4] = {2, 0, 0, 0};
    f.write(reinterpret_cast<const char*>(version2), 4);
  }
  CHECK_THROWS_AS(load_checkpoint(path), IoError);
}

TEST_CASE("permutation file round trip and spec hash check") {
  const auto dir = std::filesystem::temp_directory_path() / "permalign_core_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "perm.pmperm").string();

  const auto spec = build_mlp_spec(arch(5, {6, 4}, 3, true));
  const Permutation pi = random_perm(spec, 88);
  save_permutation(path, pi, spec);
  CHECK(load_permutation(path, &spec) == pi);

  // A different spec must be rejected by the hash.
  const auto other = build_mlp_spec(arch(5, {6, 5}, 3, true));
  CHECK_THROWS_AS(load_permutation(path, &other), SpecError);
}

TEST_CASE("barrier invariance stub: permutation leaves interpolation equivariant") {
  // interpolate commutes with joint permutation bitwise; the barrier-level
  // check lives in the connectivity tests.
  const auto a = arch(4, {5}, 3, true);
  const NetworkParams pa = random_params(a, 91);
  const NetworkParams pb = random_params(a, 92);
  const auto spec = build_mlp_spec(a);
  const Permutation pi = random_perm(spec, 93);
  const NetworkParams lhs =
      interpolate(apply_permutation(pa, spec, pi), apply_permutation(pb, spec, pi), 0.3);
  const NetworkParams rhs = apply_permutation(interpolate(pa, pb, 0.3), spec, pi);
  CHECK(flatten(lhs) == flatten(rhs));
}
