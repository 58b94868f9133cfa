#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "permalign/align.hpp"
#include "permalign/rng.hpp"
#include "permalign/train.hpp"

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
    for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = g.normal();
  }
  for (auto& s : p.norm_scale) {
    for (Eigen::Index i = 0; i < s.size(); ++i) s[i] = 1.0 + 0.2 * g.normal();
  }
  for (auto& s : p.norm_shift) {
    for (Eigen::Index i = 0; i < s.size(); ++i) s[i] = 0.2 * g.normal();
  }
  return p;
}

Permutation random_perm(const PermutationSpec& spec, std::uint64_t seed) {
  Permutation p;
  for (int g = 0; g < spec.num_groups(); ++g) {
    p.groups.push_back(shuffled_indices(spec.groups[g].size, mix_seed(seed, g)));
  }
  return p;
}

// Exhaustive assignment maximum over all n! permutations.
double brute_force_lsa(const Matrix& g) {
  const int n = static_cast<int>(g.rows());
  std::vector<int> pi(n);
  std::iota(pi.begin(), pi.end(), 0);
  double best = -std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += g(i, pi[i]);
    best = std::max(best, s);
  } while (std::next_permutation(pi.begin(), pi.end()));
  return best;
}

Matrix random_matrix(int r, int c, std::uint64_t seed) {
  Matrix m(r, c);
  SplitMix64 g(seed);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = g.normal();
  }
  return m;
}

}  // namespace

TEST_CASE("group_params: column count and mask behavior") {
  const auto a = arch(3, {2}, 2, true);
  NetworkParams p = gaussian_params(a, 1);
  const auto spec = build_mlp_spec(a);
  const Matrix rows = group_params(p, spec, 0);
  CHECK(rows.rows() == 2);
  CHECK(rows.cols() == 3 + 1 + 1 + 1 + 2);  // W1 row, b, g, s, W2 col

  Mask ones = Mask::ones_like(p);
  CHECK(group_params(p, spec, 0, &ones) == rows);

  Mask zero_w1 = ones;
  zero_w1.weights[0].setZero();
  const Matrix masked = group_params(p, spec, 0, &zero_w1);
  CHECK(masked.leftCols(3).cwiseAbs().maxCoeff() == 0.0);
  CHECK(masked.rightCols(5) == rows.rightCols(5));
}

TEST_CASE("group_params: norm-affine toggle drops two columns") {
  const auto a = arch(3, {2}, 2, true);
  const NetworkParams p = gaussian_params(a, 2);
  const auto spec = build_mlp_spec(a);
  CHECK(group_params(p, spec, 0, nullptr, false).cols() == 3 + 1 + 2);
}

TEST_CASE("gram: identity, zeros, and the scalar loop oracle") {
  CHECK(gram(Matrix::Identity(3, 3), Matrix::Identity(3, 3)) ==
        Matrix::Identity(3, 3));
  CHECK(gram(Matrix::Zero(2, 4), random_matrix(2, 4, 3)) == Matrix::Zero(2, 2));

  const Matrix a = random_matrix(3, 4, 5);
  const Matrix b = random_matrix(3, 4, 6);
  const Matrix g = gram(a, b);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double dot = 0.0;
      for (int k = 0; k < 4; ++k) dot += a(i, k) * b(j, k);
      CHECK(g(i, j) == doctest::Approx(dot).epsilon(1e-9));
    }
  }
  CHECK_THROWS_AS(gram(Matrix::Zero(2, 3), Matrix::Zero(3, 2)), ShapeError);
}

TEST_CASE("solve_lsa: frozen small cases") {
  {
    const auto [pi, obj] = solve_lsa(Matrix::Identity(3, 3));
    CHECK(pi == std::vector<int>{0, 1, 2});
    CHECK(obj == 3.0);
  }
  {
    Matrix g(2, 2);
    g << 2, 1, 1, 2;
    const auto [pi, obj] = solve_lsa(g);
    CHECK(pi == std::vector<int>{0, 1});
    CHECK(obj == 4.0);
  }
  CHECK_THROWS_AS(solve_lsa(Matrix::Zero(2, 3)), ShapeError);
  Matrix bad = Matrix::Zero(2, 2);
  bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(solve_lsa(bad), ShapeError);
}

TEST_CASE("solve_lsa: exact against factorial brute force, n in 2..6") {
  int trial = 0;
  for (int rep = 0; rep < 200; ++rep) {
    const int n = 2 + rep % 5;
    const Matrix g = random_matrix(n, n, 1000 + trial++);
    const auto [pi, obj] = solve_lsa(g);
    CHECK(obj == brute_force_lsa(g));
    std::vector<char> seen(n, 0);
    for (int v : pi) seen[v] = 1;
    CHECK(std::count(seen.begin(), seen.end(), 1) == n);
  }
}

TEST_CASE("solve_lsa: deterministic output on repeated input") {
  const Matrix g = random_matrix(5, 5, 77);
  const auto r1 = solve_lsa(g);
  const auto r2 = solve_lsa(g);
  CHECK(r1.first == r2.first);
  CHECK(r1.second == r2.second);
}

TEST_CASE("weight_match: self-match returns identity in at most two sweeps") {
  const auto a = arch(6, {10, 9}, 4, true);
  const NetworkParams p = gaussian_params(a, 21);
  const auto spec = build_mlp_spec(a);
  const MatchReport r = weight_match(p, p, spec);
  CHECK(r.permutation.is_identity());
  CHECK(r.sweeps <= 2);
}

TEST_CASE("weight_match: recovers a constructed permutation") {
  for (int width : {8, 16}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto a = arch(16, {width, width}, 10, true);
      const NetworkParams base = gaussian_params(a, 100 + seed);
      const auto spec = build_mlp_spec(a);
      const Permutation pi0 = random_perm(spec, 200 + seed);
      const NetworkParams b = apply_permutation(base, spec, pi0);

      WeightMatchOptions opt;
      opt.seed = seed;
      const MatchReport r = weight_match(base, b, spec, opt);
      // match aligns b back to base, so the result inverts pi0
      CHECK(fixed_points(r.permutation, invert(pi0)).fraction == 1.0);
      const NetworkParams aligned = apply_permutation(b, spec, r.permutation);
      CHECK(linf_distance(aligned, base) < 1e-6);
    }
  }
}

TEST_CASE("weight_match: per-sweep similarity is non-decreasing") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto a = arch(5, {12, 12, 12}, 3, true);
    const NetworkParams pa = gaussian_params(a, 300 + seed);
    const NetworkParams pb = gaussian_params(a, 400 + seed);
    const auto spec = build_mlp_spec(a);
    WeightMatchOptions opt;
    opt.seed = seed;
    const MatchReport r = weight_match(pa, pb, spec, opt);
    REQUIRE(r.sweeps >= 1);
    CHECK(r.sweeps <= opt.max_sweeps);
    for (int s = 1; s < r.sweeps; ++s) {
      CHECK(r.similarity_per_sweep[s] >= r.similarity_per_sweep[s - 1]);
    }
    CHECK(r.total_similarity == r.similarity_per_sweep.back());
  }
}

TEST_CASE("weight_match: equivariant under joint permutation") {
  const auto a = arch(6, {9, 8}, 4);
  const auto spec = build_mlp_spec(a);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const NetworkParams pa = gaussian_params(a, 500 + seed);
    const NetworkParams pb = gaussian_params(a, 600 + seed);
    const Permutation p = random_perm(spec, 700 + seed);
    WeightMatchOptions opt;
    opt.seed = 3;

    const MatchReport r0 = weight_match(pa, pb, spec, opt);
    const NetworkParams aligned0 = apply_permutation(pb, spec, r0.permutation);

    const NetworkParams qa = apply_permutation(pa, spec, p);
    const NetworkParams qb = apply_permutation(pb, spec, p);
    const MatchReport r1 = weight_match(qa, qb, spec, opt);
    const NetworkParams aligned1 = apply_permutation(qb, spec, r1.permutation);

    CHECK(linf_distance(aligned1, apply_permutation(aligned0, spec, p)) < 1e-9);
  }
}

TEST_CASE("weight_match: masked matching treats pruned weights as zeros") {
  const auto a = arch(5, {8}, 3);
  const auto spec = build_mlp_spec(a);
  const NetworkParams pa = gaussian_params(a, 801);
  NetworkParams pb = pa;
  // Corrupt entries that the mask will hide; matching should still see b == a.
  Mask mask = Mask::ones_like(pb);
  mask.weights[0].row(2).setZero();
  pb.weights[0].row(2).setConstant(1e3);
  WeightMatchOptions opt;
  opt.mask_a = &mask;
  opt.mask_b = &mask;
  const MatchReport r = weight_match(pa, pb, spec, opt);
  CHECK(r.permutation.is_identity());
}

TEST_CASE("activation_match: identity on self and recovery of a construct") {
  const auto a = arch(6, {10, 9}, 4, true);
  const auto spec = build_mlp_spec(a);
  const NetworkParams base = gaussian_params(a, 901);
  const Dataset data = synth_blobs(256, 6, 3, 6.0, 11);

  CHECK(activation_match(base, base, spec, data).permutation.is_identity());

  const Permutation pi0 = random_perm(spec, 902);
  const NetworkParams b = apply_permutation(base, spec, pi0);
  const MatchReport r = activation_match(base, b, spec, data);
  CHECK(fixed_points(r.permutation, invert(pi0)).fraction == 1.0);
  CHECK(r.sweeps == 1);
}

TEST_CASE("activation_match: example order only perturbs grams at 1e-6") {
  const auto a = arch(5, {8, 7}, 3, true);
  const auto spec = build_mlp_spec(a);
  const NetworkParams pa = gaussian_params(a, 911);
  const NetworkParams pb = gaussian_params(a, 912);
  Dataset data = synth_blobs(300, 5, 3, 6.0, 13);

  const auto grams = activation_grams(pa, pb, spec, data);

  Dataset shuffled = data;
  const auto order = shuffled_indices(data.size(), 99);
  for (int i = 0; i < data.size(); ++i) {
    shuffled.features.row(i) = data.features.row(order[i]);
    shuffled.labels[i] = data.labels[order[i]];
  }
  const auto grams2 = activation_grams(pa, pb, spec, shuffled);
  for (std::size_t g = 0; g < grams.size(); ++g) {
    const double scale = grams[g].cwiseAbs().maxCoeff();
    CHECK((grams[g] - grams2[g]).cwiseAbs().maxCoeff() / scale < 1e-6);
  }
  CHECK(activation_match(pa, pb, spec, data).permutation ==
        activation_match(pa, pb, spec, shuffled).permutation);
}

TEST_CASE("activation_match rejects an empty dataset") {
  const auto a = arch(4, {6}, 2);
  const auto spec = build_mlp_spec(a);
  const NetworkParams p = gaussian_params(a, 921);
  Dataset empty;
  empty.features.resize(0, 4);
  empty.n_classes = 2;
  CHECK_THROWS_AS(activation_match(p, p, spec, empty), ValidationError);
}

TEST_CASE("partial_perm: boundary and partition behavior") {
  const auto spec = build_mlp_spec(arch(4, {5, 6, 7}, 3));
  const Permutation pt = random_perm(spec, 31);
  const Permutation pe = random_perm(spec, 32);

  CHECK(partial_perm(pt, pe, PartialMode::bottom_up, 0) == pe);
  CHECK(partial_perm(pt, pe, PartialMode::bottom_up, 3) == pt);
  CHECK(partial_perm(pt, pe, PartialMode::top_down, 0) == pt);
  CHECK(partial_perm(pt, pe, PartialMode::top_down, 3) == pe);

  for (int k = 0; k < 3; ++k) {
    const Permutation put = partial_perm(pt, pe, PartialMode::put_in, k);
    const Permutation leave = partial_perm(pt, pe, PartialMode::leave_out, k);
    for (int g = 0; g < 3; ++g) {
      CHECK(put.groups[g] == (g == k ? pt.groups[g] : pe.groups[g]));
      CHECK(leave.groups[g] == (g == k ? pe.groups[g] : pt.groups[g]));
    }
    // The two modes partition the groups: overlaying them restores both inputs.
    Permutation rebuilt_t = pe, rebuilt_e = pt;
    rebuilt_t.groups[k] = put.groups[k];
    for (int g = 0; g < 3; ++g) {
      if (g != k) rebuilt_t.groups[g] = leave.groups[g];
    }
    rebuilt_e.groups[k] = leave.groups[k];
    for (int g = 0; g < 3; ++g) {
      if (g != k) rebuilt_e.groups[g] = put.groups[g];
    }
    CHECK(rebuilt_t == pt);
    CHECK(rebuilt_e == pe);
  }

  CHECK_THROWS_AS(partial_perm(pt, pe, PartialMode::bottom_up, 4),
                  ValidationError);
  CHECK_THROWS_AS(partial_perm(pt, pe, PartialMode::put_in, 3), ValidationError);
  CHECK_THROWS_AS(partial_perm(pt, pe, PartialMode::put_in, -1), ValidationError);
}

TEST_CASE("fixed_points: frozen examples and self-agreement") {
  Permutation p, q;
  p.groups = {{0, 1, 2}};
  q.groups = {{1, 0, 2}};
  const FixedPointReport r = fixed_points(p, q);
  CHECK(r.per_group == std::vector<int>{1});
  CHECK(r.fraction == doctest::Approx(1.0 / 3));

  const auto spec = build_mlp_spec(arch(3, {5, 9}, 2));
  const Permutation pi = random_perm(spec, 41);
  const FixedPointReport self = fixed_points(pi, pi);
  CHECK(self.per_group == std::vector<int>{5, 9});
  CHECK(self.fraction == 1.0);
}

TEST_CASE("fixed_points: random permutations agree on about 1/n indices") {
  const int n = 12;
  PermutationSpec spec;
  spec.groups.push_back({n, {}});
  double total = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    Permutation p, q;
    p.groups = {shuffled_indices(n, mix_seed(51, trial))};
    q.groups = {shuffled_indices(n, mix_seed(52, trial))};
    total += fixed_points(p, q).fraction;
  }
  // Expected count is exactly 1 per trial (uniform random matchings), so the
  // mean fraction concentrates near 1/n.
  CHECK(total / 1000 == doctest::Approx(1.0 / n).epsilon(0.25));
}
