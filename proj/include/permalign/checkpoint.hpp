#pragma once

#include <optional>
#include <string>
#include <vector>

#include "permalign/model.hpp"

namespace permalign {

// Little-endian tensor container shared by checkpoints ("PMLC", float32
// payloads) and masks ("PMSK", uint8 payloads): magic, u32 version, u32
// length-prefixed JSON metadata, u32 tensor count, then per tensor a
// length-prefixed name, u32 rank, u32 dims and the row-major payload.
namespace container {

constexpr std::uint32_t kFormatVersion = 1;

struct Tensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> f32;        // used when the container stores float32
  std::vector<std::uint8_t> u8;  // used when the container stores uint8

  std::size_t element_count() const;
};

struct File {
  std::string meta_json;
  std::vector<Tensor> tensors;
};

void save(const std::string& path, const char magic[4], const File& file,
          bool u8_payload);
File load(const std::string& path, const char magic[4], bool u8_payload);

}  // namespace container

// Serialized network state at an epoch. The optional momentum bundle makes
// training resumption exact.
struct Checkpoint {
  NetworkParams params;
  int epoch = 0;
  std::uint64_t seed = 0;
  std::string regime = "standard";
  std::string config_fingerprint;
  std::optional<NetworkParams> momentum;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Conversion between a parameter bundle and named f32 tensors, shared by
// the checkpoint writer and tests. `prefix` distinguishes momentum tensors.
std::vector<container::Tensor> params_to_tensors(const NetworkParams& params,
                                                 const std::string& prefix = "");
NetworkParams params_from_tensors(const ArchitectureSpec& arch,
                                  const std::vector<container::Tensor>& tensors,
                                  const std::string& prefix = "");

}  // namespace permalign
