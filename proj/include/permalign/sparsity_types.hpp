#pragma once

#include <vector>

#include "permalign/model.hpp"
#include "permalign/types.hpp"

namespace permalign {

// Binary pruning mask over the weight tensors only; biases and norm
// parameters are never pruned.
struct Mask {
  std::vector<MaskArray> weights;

  static Mask ones_like(const NetworkParams& params);

  long total() const;
  long nonzeros() const;
  double density() const { return static_cast<double>(nonzeros()) / total(); }

  // Throws ShapeError unless the mask matches the params' weight shapes.
  void validate_shapes(const NetworkParams& params) const;

  bool operator==(const Mask& other) const;
};

// Elementwise product on weights; other parameters pass through.
NetworkParams apply_mask(const NetworkParams& params, const Mask& mask);

}  // namespace permalign
