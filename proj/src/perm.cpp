#include "permalign/perm.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace permalign {

long PermutationSpec::total_indices() const {
  long n = 0;
  for (const auto& g : groups) n += g.size;
  return n;
}

void PermutationSpec::validate() const {
  std::set<std::pair<std::string, int>> seen;
  for (const auto& g : groups) {
    if (g.size < 1) throw SpecError("spec: group size must be >= 1");
    for (const auto& t : g.targets) {
      if (t.axis != 0 && t.axis != 1) throw SpecError("spec: axis must be 0 or 1");
      if (!seen.insert({t.param, t.axis}).second) {
        throw SpecError("spec: (param, axis) targeted twice: " + t.param + "@" +
                        std::to_string(t.axis));
      }
    }
  }
}

std::string PermutationSpec::canonical_string() const {
  std::ostringstream os;
  for (int i = 0; i < num_groups(); ++i) {
    os << "group=" << i << " size=" << groups[i].size << " targets=";
    for (std::size_t j = 0; j < groups[i].targets.size(); ++j) {
      if (j) os << ',';
      os << groups[i].targets[j].param << '@' << groups[i].targets[j].axis;
    }
    os << '\n';
  }
  return os.str();
}

Permutation Permutation::identity(const PermutationSpec& spec) {
  Permutation p;
  p.groups.reserve(spec.groups.size());
  for (const auto& g : spec.groups) {
    std::vector<int> pi(g.size);
    for (int i = 0; i < g.size; ++i) pi[i] = i;
    p.groups.push_back(std::move(pi));
  }
  return p;
}

void Permutation::validate(const PermutationSpec& spec) const {
  if (num_groups() != spec.num_groups()) {
    throw SpecError("permutation: group count mismatch with spec");
  }
  for (int g = 0; g < num_groups(); ++g) {
    const auto& pi = groups[g];
    const int d = spec.groups[g].size;
    if (static_cast<int>(pi.size()) != d) {
      throw InvalidPermutationError("permutation: group " + std::to_string(g) +
                                    " size mismatch");
    }
    std::vector<char> seen(d, 0);
    for (int v : pi) {
      if (v < 0 || v >= d || seen[v]) {
        throw InvalidPermutationError("permutation: group " +
                                      std::to_string(g) + " is not a bijection");
      }
      seen[v] = 1;
    }
  }
}

bool Permutation::is_identity() const {
  for (const auto& pi : groups) {
    for (int i = 0; i < static_cast<int>(pi.size()); ++i) {
      if (pi[i] != i) return false;
    }
  }
  return true;
}

PermutationSpec build_mlp_spec(const ArchitectureSpec& arch) {
  arch.validate();
  PermutationSpec spec;
  const int hidden = static_cast<int>(arch.hidden_dims.size());
  for (int i = 0; i < hidden; ++i) {
    PermGroup g;
    g.size = arch.hidden_dims[i];
    g.targets.push_back({param_name(ParamKind::weight, i), 0});
    g.targets.push_back({param_name(ParamKind::bias, i), 0});
    if (arch.use_layer_norm) {
      g.targets.push_back({param_name(ParamKind::norm_scale, i), 0});
      g.targets.push_back({param_name(ParamKind::norm_shift, i), 0});
    }
    g.targets.push_back({param_name(ParamKind::weight, i + 1), 1});
    spec.groups.push_back(std::move(g));
  }
  spec.validate();
  return spec;
}

namespace {

Matrix gather_rows(const Matrix& m, const std::vector<int>& pi) {
  Matrix out(m.rows(), m.cols());
  for (int i = 0; i < static_cast<int>(pi.size()); ++i) out.row(i) = m.row(pi[i]);
  return out;
}

Matrix gather_cols(const Matrix& m, const std::vector<int>& pi) {
  Matrix out(m.rows(), m.cols());
  for (int i = 0; i < static_cast<int>(pi.size()); ++i) out.col(i) = m.col(pi[i]);
  return out;
}

Vector gather(const Vector& v, const std::vector<int>& pi) {
  Vector out(v.size());
  for (int i = 0; i < static_cast<int>(pi.size()); ++i) out[i] = v[pi[i]];
  return out;
}

}  // namespace

void apply_group_permutation(NetworkParams& params, const PermutationSpec& spec,
                             int group, const std::vector<int>& pi) {
  if (group < 0 || group >= spec.num_groups()) {
    throw SpecError("apply: group index out of range");
  }
  for (const auto& target : spec.groups[group].targets) {
    const ParamKey key = parse_param_name(target.param);
    switch (key.kind) {
      case ParamKind::weight: {
        if (key.layer < 0 ||
            key.layer >= static_cast<int>(params.weights.size())) {
          throw SpecError("apply: unknown tensor " + target.param);
        }
        Matrix& w = params.weights[key.layer];
        const Eigen::Index extent = target.axis == 0 ? w.rows() : w.cols();
        if (extent != static_cast<Eigen::Index>(pi.size())) {
          throw SpecError("apply: group size mismatch on " + target.param);
        }
        w = target.axis == 0 ? gather_rows(w, pi) : gather_cols(w, pi);
        break;
      }
      case ParamKind::bias:
      case ParamKind::norm_scale:
      case ParamKind::norm_shift: {
        auto& vecs = key.kind == ParamKind::bias ? params.biases
                     : key.kind == ParamKind::norm_scale ? params.norm_scale
                                                         : params.norm_shift;
        if (target.axis != 0) throw SpecError("apply: vector axis must be 0");
        if (key.layer < 0 || key.layer >= static_cast<int>(vecs.size())) {
          throw SpecError("apply: unknown tensor " + target.param);
        }
        if (vecs[key.layer].size() != static_cast<Eigen::Index>(pi.size())) {
          throw SpecError("apply: group size mismatch on " + target.param);
        }
        vecs[key.layer] = gather(vecs[key.layer], pi);
        break;
      }
    }
  }
}

NetworkParams apply_permutation(const NetworkParams& params,
                                const PermutationSpec& spec,
                                const Permutation& perm) {
  perm.validate(spec);
  NetworkParams out = params;
  for (int g = 0; g < spec.num_groups(); ++g) {
    apply_group_permutation(out, spec, g, perm.groups[g]);
  }
  return out;
}

std::vector<int> compose_group(const std::vector<int>& p,
                               const std::vector<int>& q) {
  if (p.size() != q.size()) throw SpecError("compose: group size mismatch");
  std::vector<int> out(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) out[i] = q[p[i]];
  return out;
}

Permutation compose(const Permutation& p, const Permutation& q) {
  if (p.num_groups() != q.num_groups()) {
    throw SpecError("compose: group count mismatch");
  }
  Permutation out;
  out.groups.resize(p.num_groups());
  for (int g = 0; g < p.num_groups(); ++g) {
    out.groups[g] = compose_group(p.groups[g], q.groups[g]);
  }
  return out;
}

Permutation invert(const Permutation& p) {
  Permutation out;
  out.groups.resize(p.num_groups());
  for (int g = 0; g < p.num_groups(); ++g) {
    const auto& pg = p.groups[g];
    auto& og = out.groups[g];
    og.resize(pg.size());
    for (std::size_t i = 0; i < pg.size(); ++i) {
      og[pg[i]] = static_cast<int>(i);
    }
  }
  return out;
}

std::string permutation_to_text(const Permutation& perm,
                                const PermutationSpec& spec) {
  perm.validate(spec);
  std::ostringstream os;
  os << "PMPERM v1 spec_hash=" << to_hex(spec.hash()) << '\n';
  for (int g = 0; g < perm.num_groups(); ++g) {
    os << "group=" << g << " size=" << perm.groups[g].size() << " perm=";
    for (std::size_t i = 0; i < perm.groups[g].size(); ++i) {
      if (i) os << ',';
      os << perm.groups[g][i];
    }
    os << '\n';
  }
  return os.str();
}

void save_permutation(const std::string& path, const Permutation& perm,
                      const PermutationSpec& spec) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << permutation_to_text(perm, spec);
  if (!f) throw IoError("write failed: " + path);
}

Permutation permutation_from_text(const std::string& text,
                                  const PermutationSpec* expected_spec) {
  std::istringstream in(text);
  std::string header;
  if (!std::getline(in, header) || header.rfind("PMPERM v1 spec_hash=", 0) != 0) {
    throw IoError("permutation file: bad header");
  }
  const std::string hash_hex = header.substr(std::string("PMPERM v1 spec_hash=").size());
  Permutation perm;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    int g = -1, d = -1;
    int consumed = 0;
    if (std::sscanf(line.c_str(), "group=%d size=%d perm=%n", &g, &d, &consumed) != 2 ||
        consumed == 0) {
      throw IoError("permutation file: bad group line: " + line);
    }
    if (g != perm.num_groups()) {
      throw IoError("permutation file: groups out of order");
    }
    std::vector<int> pi;
    pi.reserve(d);
    std::stringstream vals(line.substr(consumed));
    std::string tok;
    while (std::getline(vals, tok, ',')) pi.push_back(std::stoi(tok));
    if (static_cast<int>(pi.size()) != d) {
      throw IoError("permutation file: size!=entry count");
    }
    perm.groups.push_back(std::move(pi));
  }
  if (expected_spec) {
    if (hash_hex != to_hex(expected_spec->hash())) {
      throw SpecError("permutation file: spec hash mismatch");
    }
    perm.validate(*expected_spec);
  }
  return perm;
}

Permutation load_permutation(const std::string& path,
                             const PermutationSpec* expected_spec) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  std::ostringstream buf;
  buf << f.rdbuf();
  return permutation_from_text(buf.str(), expected_spec);
}

}  // namespace permalign
