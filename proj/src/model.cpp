#include "permalign/model.hpp"

#include <cmath>
#include <cstdio>

namespace permalign {

std::string to_hex(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(value));
  return std::string(buf);
}

std::vector<int> ArchitectureSpec::dims() const {
  std::vector<int> d;
  d.reserve(hidden_dims.size() + 2);
  d.push_back(input_dim);
  d.insert(d.end(), hidden_dims.begin(), hidden_dims.end());
  d.push_back(output_dim);
  return d;
}

void ArchitectureSpec::validate() const {
  if (hidden_dims.empty()) throw SpecError("arch: hidden_dims must be non-empty");
  for (int d : dims()) {
    if (d < 1) throw SpecError("arch: all dimensions must be >= 1");
  }
}

NetworkParams NetworkParams::zeros(const ArchitectureSpec& arch) {
  arch.validate();
  NetworkParams p;
  p.arch = arch;
  const auto d = arch.dims();
  const int k = arch.num_layers();
  for (int i = 0; i < k; ++i) {
    p.weights.push_back(Matrix::Zero(d[i + 1], d[i]));
    p.biases.push_back(Vector::Zero(d[i + 1]));
  }
  if (arch.use_layer_norm) {
    for (int i = 0; i + 1 < k; ++i) {
      p.norm_scale.push_back(Vector::Zero(d[i + 1]));
      p.norm_shift.push_back(Vector::Zero(d[i + 1]));
    }
  }
  return p;
}

void NetworkParams::validate() const {
  arch.validate();
  const auto d = arch.dims();
  const int k = arch.num_layers();
  if (static_cast<int>(weights.size()) != k ||
      static_cast<int>(biases.size()) != k) {
    throw ShapeError("params: wrong layer count");
  }
  for (int i = 0; i < k; ++i) {
    if (weights[i].rows() != d[i + 1] || weights[i].cols() != d[i]) {
      throw ShapeError("params: weight shape mismatch at layer " +
                       std::to_string(i + 1));
    }
    if (biases[i].size() != d[i + 1]) {
      throw ShapeError("params: bias shape mismatch at layer " +
                       std::to_string(i + 1));
    }
  }
  const int hidden = k - 1;
  const int expect_norm = arch.use_layer_norm ? hidden : 0;
  if (static_cast<int>(norm_scale.size()) != expect_norm ||
      static_cast<int>(norm_shift.size()) != expect_norm) {
    throw ShapeError("params: norm parameter count mismatch");
  }
  for (int i = 0; i < expect_norm; ++i) {
    if (norm_scale[i].size() != d[i + 1] || norm_shift[i].size() != d[i + 1]) {
      throw ShapeError("params: norm shape mismatch at layer " +
                       std::to_string(i + 1));
    }
  }
  if (!all_finite()) throw ShapeError("params: non-finite entries");
}

bool NetworkParams::all_finite() const {
  for (const auto& w : weights) {
    if (!w.allFinite()) return false;
  }
  for (const auto& b : biases) {
    if (!b.allFinite()) return false;
  }
  for (const auto& g : norm_scale) {
    if (!g.allFinite()) return false;
  }
  for (const auto& s : norm_shift) {
    if (!s.allFinite()) return false;
  }
  return true;
}

std::vector<std::string> NetworkParams::tensor_names() const {
  std::vector<std::string> names;
  const int k = arch.num_layers();
  for (int i = 0; i < k; ++i) {
    names.push_back(param_name(ParamKind::weight, i));
    names.push_back(param_name(ParamKind::bias, i));
    if (arch.use_layer_norm && i + 1 < k) {
      names.push_back(param_name(ParamKind::norm_scale, i));
      names.push_back(param_name(ParamKind::norm_shift, i));
    }
  }
  return names;
}

long NetworkParams::total_size() const {
  long n = 0;
  for (const auto& w : weights) n += w.size();
  for (const auto& b : biases) n += b.size();
  for (const auto& g : norm_scale) n += g.size();
  for (const auto& s : norm_shift) n += s.size();
  return n;
}

ParamKey parse_param_name(const std::string& name) {
  if (name.size() < 2) throw SpecError("bad parameter name: " + name);
  ParamKind kind;
  switch (name[0]) {
    case 'W': kind = ParamKind::weight; break;
    case 'b': kind = ParamKind::bias; break;
    case 'g': kind = ParamKind::norm_scale; break;
    case 's': kind = ParamKind::norm_shift; break;
    default: throw SpecError("bad parameter name: " + name);
  }
  int layer = 0;
  for (std::size_t i = 1; i < name.size(); ++i) {
    if (name[i] < '0' || name[i] > '9') {
      throw SpecError("bad parameter name: " + name);
    }
    layer = layer * 10 + (name[i] - '0');
  }
  if (layer < 1) throw SpecError("bad parameter name: " + name);
  return ParamKey{kind, layer - 1};
}

std::string param_name(ParamKind kind, int layer) {
  const char* prefix = nullptr;
  switch (kind) {
    case ParamKind::weight: prefix = "W"; break;
    case ParamKind::bias: prefix = "b"; break;
    case ParamKind::norm_scale: prefix = "g"; break;
    case ParamKind::norm_shift: prefix = "s"; break;
  }
  return std::string(prefix) + std::to_string(layer + 1);
}

namespace {

// Row-wise layer norm with affine parameters, applied in place.
void layer_norm_rows(Matrix& h, const Vector& scale, const Vector& shift) {
  const auto d = static_cast<double>(h.cols());
  for (Eigen::Index r = 0; r < h.rows(); ++r) {
    auto row = h.row(r);
    const double mean = row.sum() / d;
    const double var = (row.array() - mean).square().sum() / d;
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    row = (((row.array() - mean) * inv) * scale.transpose().array() +
           shift.transpose().array())
              .matrix();
  }
}

}  // namespace

Matrix hidden_layer_forward(const NetworkParams& params, int layer,
                            const ConstMatrixRef& h) {
  Matrix pre = (h * params.weights[layer].transpose()).rowwise() +
               params.biases[layer].transpose();
  if (params.arch.use_layer_norm) {
    layer_norm_rows(pre, params.norm_scale[layer], params.norm_shift[layer]);
  }
  return pre.cwiseMax(0.0);
}

Matrix forward(const NetworkParams& params, const ConstMatrixRef& inputs) {
  if (inputs.cols() != params.arch.input_dim) {
    throw ShapeError("forward: input width " + std::to_string(inputs.cols()) +
                     " != arch input_dim " +
                     std::to_string(params.arch.input_dim));
  }
  const int k = params.arch.num_layers();
  Matrix h = inputs;
  for (int i = 0; i + 1 < k; ++i) {
    h = hidden_layer_forward(params, i, h);
  }
  return (h * params.weights[k - 1].transpose()).rowwise() +
         params.biases[k - 1].transpose();
}

NetworkParams interpolate(const NetworkParams& a, const NetworkParams& b,
                          double alpha) {
  if (a.arch != b.arch) throw ShapeError("interpolate: arch mismatch");
  if (alpha == 1.0) return a;
  if (alpha == 0.0) return b;
  // b + alpha*(a - b): algebraically alpha*a + (1-alpha)*b, arranged so
  // interpolate(a, a, alpha) == a bitwise (identical tensors cancel).
  NetworkParams out = b;
  for (std::size_t i = 0; i < out.weights.size(); ++i) {
    out.weights[i] += alpha * (a.weights[i] - b.weights[i]);
    out.biases[i] += alpha * (a.biases[i] - b.biases[i]);
  }
  for (std::size_t i = 0; i < out.norm_scale.size(); ++i) {
    out.norm_scale[i] += alpha * (a.norm_scale[i] - b.norm_scale[i]);
    out.norm_shift[i] += alpha * (a.norm_shift[i] - b.norm_shift[i]);
  }
  return out;
}

Vector flatten(const NetworkParams& params) {
  Vector v(params.total_size());
  Eigen::Index at = 0;
  const int k = params.arch.num_layers();
  for (int i = 0; i < k; ++i) {
    const Matrix& w = params.weights[i];
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      v.segment(at, w.cols()) = w.row(r).transpose();
      at += w.cols();
    }
    v.segment(at, params.biases[i].size()) = params.biases[i];
    at += params.biases[i].size();
    if (params.arch.use_layer_norm && i + 1 < k) {
      v.segment(at, params.norm_scale[i].size()) = params.norm_scale[i];
      at += params.norm_scale[i].size();
      v.segment(at, params.norm_shift[i].size()) = params.norm_shift[i];
      at += params.norm_shift[i].size();
    }
  }
  return v;
}

NetworkParams unflatten(const ArchitectureSpec& arch, const ConstVectorRef& v) {
  NetworkParams p = NetworkParams::zeros(arch);
  if (v.size() != p.total_size()) throw ShapeError("unflatten: size mismatch");
  Eigen::Index at = 0;
  const int k = arch.num_layers();
  for (int i = 0; i < k; ++i) {
    Matrix& w = p.weights[i];
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      w.row(r) = v.segment(at, w.cols()).transpose();
      at += w.cols();
    }
    p.biases[i] = v.segment(at, p.biases[i].size());
    at += p.biases[i].size();
    if (arch.use_layer_norm && i + 1 < k) {
      p.norm_scale[i] = v.segment(at, p.norm_scale[i].size());
      at += p.norm_scale[i].size();
      p.norm_shift[i] = v.segment(at, p.norm_shift[i].size());
      at += p.norm_shift[i].size();
    }
  }
  return p;
}

double l2_distance(const NetworkParams& a, const NetworkParams& b) {
  return (flatten(a) - flatten(b)).norm();
}

double linf_distance(const NetworkParams& a, const NetworkParams& b) {
  return (flatten(a) - flatten(b)).cwiseAbs().maxCoeff();
}

}  // namespace permalign
