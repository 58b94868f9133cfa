#pragma once

#include <string>
#include <vector>

#include "permalign/types.hpp"

namespace permalign {

enum class Activation { relu };

struct ArchitectureSpec {
  int input_dim = 0;
  std::vector<int> hidden_dims;
  int output_dim = 0;
  bool use_layer_norm = false;
  Activation activation = Activation::relu;

  // Number of affine layers (hidden + output).
  int num_layers() const { return static_cast<int>(hidden_dims.size()) + 1; }

  // [input_dim, hidden..., output_dim]
  std::vector<int> dims() const;

  // Throws SpecError unless hidden_dims is non-empty and all dims >= 1.
  void validate() const;

  bool operator==(const ArchitectureSpec&) const = default;
};

// Ordered per-layer parameter bundle for an MLP. Layer i in [0, K) has
// weight (dims[i+1] x dims[i]) and bias (dims[i+1]); hidden layers carry
// layer-norm scale/shift when the arch enables normalization. Values are
// immutable by convention: operations return fresh bundles.
struct NetworkParams {
  ArchitectureSpec arch;
  std::vector<Matrix> weights;
  std::vector<Vector> biases;
  std::vector<Vector> norm_scale;  // per hidden layer, empty without norm
  std::vector<Vector> norm_shift;

  // Zero-filled bundle with the arch's shapes.
  static NetworkParams zeros(const ArchitectureSpec& arch);

  // Throws ShapeError on any shape inconsistency or non-finite entry.
  void validate() const;

  bool all_finite() const;

  // Canonical tensor naming: "W1".."WK", "b1".."bK", "g1".."g(K-1)",
  // "s1".."s(K-1)" (1-based layer numbers, g = norm scale, s = norm shift).
  std::vector<std::string> tensor_names() const;

  // Total scalar count over all tensors.
  long total_size() const;
};

enum class ParamKind { weight, bias, norm_scale, norm_shift };

struct ParamKey {
  ParamKind kind;
  int layer;  // 0-based
};

// Parses a canonical tensor name; throws SpecError on anything else.
ParamKey parse_param_name(const std::string& name);
std::string param_name(ParamKind kind, int layer);

// Batch forward pass. `inputs` is n x input_dim (one example per row);
// returns n x output_dim logits. Hidden layers compute
// relu(layer_norm(W x + b)) with the norm applied to the pre-activation;
// the final layer is affine.
Matrix forward(const NetworkParams& params, const ConstMatrixRef& inputs);

// One hidden layer's output relu(layer_norm(W h + b)) given the previous
// layer's activations (layer in [0, K-1)). Used to stream activations.
Matrix hidden_layer_forward(const NetworkParams& params, int layer,
                            const ConstMatrixRef& h);

constexpr double kLayerNormEps = 1e-5;

// alpha * a + (1 - alpha) * b elementwise, alpha weighting network `a`.
NetworkParams interpolate(const NetworkParams& a, const NetworkParams& b,
                          double alpha);

// Flattens every tensor into one vector in tensor-name order per layer
// (W row-major, then b, then g, s), and back. Used by the landscape
// projection and the L2 distance helpers.
Vector flatten(const NetworkParams& params);
NetworkParams unflatten(const ArchitectureSpec& arch, const ConstVectorRef& v);

double l2_distance(const NetworkParams& a, const NetworkParams& b);
double linf_distance(const NetworkParams& a, const NetworkParams& b);

}  // namespace permalign
