// Named-tensor checkpoints: "INTW", u32 version, u32-length JSON header,
// u32 tensor count, then per tensor the name, rank, u64 dims and f32 payload.
#pragma once

#include "intrack/circuit.hpp"
#include "intrack/tensor.hpp"

#include <string>
#include <vector>

namespace intrack {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor<float> tensor;
};

struct Checkpoint {
  std::string header;  // JSON: {"architecture": ..., "meta": {...}}
  std::vector<NamedTensor> tensors;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

/// `meta_json` is an arbitrary JSON object stored next to the architecture.
Checkpoint to_checkpoint(const Model<float>& model, const std::string& meta_json = "{}");
Model<float> model_from_checkpoint(const Checkpoint& ckpt);
Architecture checkpoint_architecture(const Checkpoint& ckpt);
std::string checkpoint_meta(const Checkpoint& ckpt);

}  // namespace intrack
