#include "permalign/align.hpp"

#include <algorithm>
#include <limits>

#include "permalign/rng.hpp"

namespace permalign {

namespace {

bool is_norm_affine(const std::string& param) {
  const ParamKey key = parse_param_name(param);
  return key.kind == ParamKind::norm_scale || key.kind == ParamKind::norm_shift;
}

// Column width a target contributes to the group's feature matrix.
Eigen::Index target_width(const NetworkParams& params, const AxisRef& target) {
  const ParamKey key = parse_param_name(target.param);
  if (key.kind == ParamKind::weight) {
    const Matrix& w = params.weights[key.layer];
    return target.axis == 0 ? w.cols() : w.rows();
  }
  return 1;
}

}  // namespace

Matrix group_params(const NetworkParams& params, const PermutationSpec& spec,
                    int group, const Mask* mask, bool include_norm_affine) {
  if (group < 0 || group >= spec.num_groups()) {
    throw SpecError("group_params: group index out of range");
  }
  const PermGroup& g = spec.groups[group];
  Eigen::Index q = 0;
  for (const auto& t : g.targets) {
    if (!include_norm_affine && is_norm_affine(t.param)) continue;
    q += target_width(params, t);
  }
  Matrix rows(g.size, q);
  Eigen::Index at = 0;
  for (const auto& t : g.targets) {
    if (!include_norm_affine && is_norm_affine(t.param)) continue;
    const ParamKey key = parse_param_name(t.param);
    switch (key.kind) {
      case ParamKind::weight: {
        Matrix w = params.weights[key.layer];
        if (mask) {
          w = (w.array() * mask->weights[key.layer].cast<Scalar>()).matrix();
        }
        if (t.axis == 0) {
          rows.middleCols(at, w.cols()) = w;
          at += w.cols();
        } else {
          rows.middleCols(at, w.rows()) = w.transpose();
          at += w.rows();
        }
        break;
      }
      case ParamKind::bias:
        rows.col(at++) = params.biases[key.layer];
        break;
      case ParamKind::norm_scale:
        rows.col(at++) = params.norm_scale[key.layer];
        break;
      case ParamKind::norm_shift:
        rows.col(at++) = params.norm_shift[key.layer];
        break;
    }
  }
  return rows;
}

Matrix gram(const ConstMatrixRef& rows_a, const ConstMatrixRef& rows_b) {
  if (rows_a.rows() != rows_b.rows() || rows_a.cols() != rows_b.cols()) {
    throw ShapeError("gram: shape mismatch");
  }
  return rows_a * rows_b.transpose();
}

namespace {

// Inner product <a, b> over every parameter tensor, counted once. This is
// the (negated, shifted) L2 matching objective and the quantity each
// per-group assignment solve does coordinate ascent on.
double params_dot(const NetworkParams& a, const NetworkParams& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.weights.size(); ++i) {
    s += (a.weights[i].array() * b.weights[i].array()).sum();
    s += (a.biases[i].array() * b.biases[i].array()).sum();
  }
  for (std::size_t i = 0; i < a.norm_scale.size(); ++i) {
    s += (a.norm_scale[i].array() * b.norm_scale[i].array()).sum();
    s += (a.norm_shift[i].array() * b.norm_shift[i].array()).sum();
  }
  return s;
}

}  // namespace

MatchReport weight_match(const NetworkParams& a, const NetworkParams& b,
                         const PermutationSpec& spec,
                         const WeightMatchOptions& options) {
  if (a.arch != b.arch) throw ShapeError("weight_match: arch mismatch");
  if (options.max_sweeps < 1) {
    throw ValidationError("weight_match: max_sweeps must be >= 1");
  }
  if (options.mask_a) options.mask_a->validate_shapes(a);
  if (options.mask_b) options.mask_b->validate_shapes(b);

  // Masked entries participate as exact zeros throughout the sweeps.
  NetworkParams a_work = options.mask_a ? apply_mask(a, *options.mask_a) : a;
  NetworkParams b_work = options.mask_b ? apply_mask(b, *options.mask_b) : b;

  const int n_groups = spec.num_groups();
  MatchReport report;
  report.permutation = Permutation::identity(spec);

  std::vector<Matrix> a_rows(n_groups);
  for (int g = 0; g < n_groups; ++g) {
    a_rows[g] = group_params(a_work, spec, g, nullptr, options.include_norm_affine);
  }

  double last_sim = -std::numeric_limits<double>::infinity();
  for (int sweep = 0; sweep < options.max_sweeps; ++sweep) {
    const std::vector<int> order = shuffled_indices(
        n_groups, mix_seed(options.seed, static_cast<std::uint64_t>(sweep)));
    for (int g : order) {
      const Matrix b_rows =
          group_params(b_work, spec, g, nullptr, options.include_norm_affine);
      const Matrix similarity = gram(a_rows[g], b_rows);
      auto [pi, objective] = solve_lsa(similarity);
      (void)objective;
      apply_group_permutation(b_work, spec, g, pi);
      report.permutation.groups[g] = compose_group(pi, report.permutation.groups[g]);
    }
    const double sim = params_dot(a_work, b_work);
    report.similarity_per_sweep.push_back(sim);
    ++report.sweeps;
    if (!(sim > last_sim)) break;
    last_sim = sim;
  }
  report.total_similarity = report.similarity_per_sweep.back();
  return report;
}

std::vector<Matrix> activation_grams(const NetworkParams& a,
                                     const NetworkParams& b,
                                     const PermutationSpec& spec,
                                     const Dataset& data) {
  if (a.arch != b.arch) throw ShapeError("activation_match: arch mismatch");
  if (data.size() < 1) throw ValidationError("activation_match: empty dataset");
  if (data.dim() != a.arch.input_dim) {
    throw ShapeError("activation_match: dataset width mismatch");
  }
  const int n_groups = spec.num_groups();
  const int hidden = static_cast<int>(a.arch.hidden_dims.size());
  if (n_groups != hidden) {
    throw SpecError("activation_match: spec does not look like an MLP spec");
  }

  // Accumulate per-group Gram matrices over fixed-size chunks; the chunked
  // sums are in fixed order so accumulation is deterministic.
  std::vector<Matrix> grams(n_groups);
  for (int g = 0; g < n_groups; ++g) {
    grams[g] = Matrix::Zero(a.arch.hidden_dims[g], a.arch.hidden_dims[g]);
  }
  constexpr int kChunk = 1024;
  const int k = a.arch.num_layers();
  for (int at = 0; at < data.size(); at += kChunk) {
    const int len = std::min(kChunk, data.size() - at);
    Matrix ha = data.features.middleRows(at, len);
    Matrix hb = ha;
    for (int i = 0; i + 1 < k; ++i) {
      ha = hidden_layer_forward(a, i, ha);
      hb = hidden_layer_forward(b, i, hb);
      grams[i].noalias() += ha.transpose() * hb;
    }
  }
  return grams;
}

MatchReport activation_match(const NetworkParams& a, const NetworkParams& b,
                             const PermutationSpec& spec, const Dataset& data) {
  const std::vector<Matrix> grams = activation_grams(a, b, spec, data);
  const int n_groups = spec.num_groups();
  MatchReport report;
  report.permutation = Permutation::identity(spec);
  double total = 0.0;
  for (int g = 0; g < n_groups; ++g) {
    auto [pi, objective] = solve_lsa(grams[g]);
    report.permutation.groups[g] = pi;
    total += objective;
  }
  report.sweeps = 1;
  report.similarity_per_sweep = {total};
  report.total_similarity = total;
  return report;
}

PartialMode partial_mode_from_name(const std::string& name) {
  if (name == "bottom_up") return PartialMode::bottom_up;
  if (name == "top_down") return PartialMode::top_down;
  if (name == "put_in") return PartialMode::put_in;
  if (name == "leave_out") return PartialMode::leave_out;
  throw ValidationError("unknown partial mode: " + name);
}

std::string partial_mode_name(PartialMode mode) {
  switch (mode) {
    case PartialMode::bottom_up: return "bottom_up";
    case PartialMode::top_down: return "top_down";
    case PartialMode::put_in: return "put_in";
    case PartialMode::leave_out: return "leave_out";
  }
  return "bottom_up";
}

Permutation partial_perm(const Permutation& p_t, const Permutation& p_end,
                         PartialMode mode, int k) {
  if (p_t.num_groups() != p_end.num_groups()) {
    throw SpecError("partial_perm: group count mismatch");
  }
  const int n = p_t.num_groups();
  const bool whole_range = mode == PartialMode::bottom_up || mode == PartialMode::top_down;
  if (k < 0 || (whole_range ? k > n : k >= n)) {
    throw ValidationError("partial_perm: k out of range");
  }
  Permutation out = p_end;
  for (int g = 0; g < n; ++g) {
    bool from_t = false;
    switch (mode) {
      case PartialMode::bottom_up: from_t = g < k; break;
      case PartialMode::top_down: from_t = g >= k; break;
      case PartialMode::put_in: from_t = g == k; break;
      case PartialMode::leave_out: from_t = g != k; break;
    }
    if (from_t) out.groups[g] = p_t.groups[g];
  }
  return out;
}

FixedPointReport fixed_points(const Permutation& p, const Permutation& q) {
  if (p.num_groups() != q.num_groups()) {
    throw SpecError("fixed_points: group count mismatch");
  }
  FixedPointReport report;
  long total_size = 0;
  for (int g = 0; g < p.num_groups(); ++g) {
    if (p.groups[g].size() != q.groups[g].size()) {
      throw SpecError("fixed_points: group size mismatch");
    }
    int count = 0;
    for (std::size_t i = 0; i < p.groups[g].size(); ++i) {
      if (p.groups[g][i] == q.groups[g][i]) ++count;
    }
    report.per_group.push_back(count);
    report.total += count;
    total_size += static_cast<long>(p.groups[g].size());
  }
  report.fraction = total_size > 0
                        ? static_cast<double>(report.total) / total_size
                        : 1.0;
  return report;
}

}  // namespace permalign
