#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>

#include <torch/torch.h>

#include "manet/config.hpp"
#include "manet/model.hpp"

namespace manet {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Everything needed to continue training: model, optimizer moments, config
/// and progress counters. Episode randomness is derived from (config.seed,
/// step), so `step` is the complete sampler state.
struct TrainingState {
  TrainConfig config;
  Manet model{nullptr};
  std::unique_ptr<torch::optim::Adam> optimizer;
  int epoch = 0;
  std::uint64_t step = 0;
};

/// Fresh state: seeded model and an Adam optimizer over the trainable parameters.
TrainingState make_training_state(const TrainConfig& config);

/// Binary layout (little endian):
///   "MANETCKP" | u32 version | str config_json | u32 epoch | u64 step |
///   u32 n, n × (str name, tensor)                      model tensors
///   u32 m, m × (str name, i64 step, tensor, tensor)   Adam moments
///   u64 FNV-1a of all preceding bytes
/// str = u32 length + bytes; tensor = u8 dtype (0 f32, 1 f64, 2 i64) |
/// u32 ndim | i64 dims[ndim] | u64 nbytes | raw data.
/// Backbone tensors are omitted for pretrained backbones (reloaded from the
/// weights file named in the config).
void save_checkpoint(const TrainingState& state, const std::filesystem::path& path);

/// Rebuilds the model from the stored config, then restores every tensor.
/// Truncation, corruption and version mismatch raise FormatError.
TrainingState load_checkpoint(const std::filesystem::path& path);

/// Serialized bytes of a state (what save_checkpoint writes).
std::vector<char> serialize_checkpoint(const TrainingState& state);
TrainingState deserialize_checkpoint(const std::vector<char>& bytes);

}  // namespace manet
