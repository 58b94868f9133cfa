#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "permalign/types.hpp"

namespace permalign {

struct Dataset {
  Matrix features;  // n x d, one example per row
  std::vector<int> labels;
  int n_classes = 0;
  std::string split;  // "train" / "test" / free-form tag

  int size() const { return static_cast<int>(features.rows()); }
  int dim() const { return static_cast<int>(features.cols()); }

  void validate() const;

  // First min(k, n) examples, preserving order.
  Dataset head(int k) const;
};

// Scalar normalization statistics, computed on the training split and
// reused on every other split.
struct NormStats {
  double mean = 0.0;
  double stddev = 1.0;
};

NormStats compute_norm_stats(const Dataset& train);
Dataset standardize(const Dataset& d, const NormStats& stats);

// Parses a big-endian IDX image/label file pair (magics 0x00000803 /
// 0x00000801). Pixels are scaled to [0,1] and flattened row-major; apply
// `standardize` afterwards with train-split statistics.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

// Test helper / fixture writer for the IDX format.
void write_idx(const std::string& images_path, const std::string& labels_path,
               const std::vector<std::uint8_t>& pixels,
               const std::vector<std::uint8_t>& labels, int rows, int cols);

// Gaussian class clusters (unit noise) around seeded random centers with
// pairwise center distance >= separation. Labels are assigned round-robin
// so class priors are uniform within one example. `noise_stream` selects an
// independent noise draw over the same centers (0 = train, 1 = test).
Dataset synth_blobs(int n, int d, int classes, double separation,
                    std::uint64_t seed, int noise_stream = 0);

struct DatasetPair {
  Dataset train;
  Dataset test;
};

// Resolves a data URI. Supported forms:
//   synth://blobs?n=..&d=..&classes=..&sep=..&seed=..[&n_test=..]
//   a directory containing the four standard IDX files
//     (train-images-idx3-ubyte, train-labels-idx1-ubyte,
//      t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte)
// Relative directories resolve against $PERMALIGN_DATA_DIR when set.
// IDX features are standardized with train-split statistics.
DatasetPair load_data_uri(const std::string& uri);

// Seeded minibatch index slices for one epoch: a counter-based shuffle of
// [0, n) derived from (seed, epoch), cut into batch_size slices (the last
// may be short). The slices partition the index set exactly.
std::vector<std::vector<int>> batches(int n, int batch_size, std::uint64_t seed,
                                      int epoch);

}  // namespace permalign
