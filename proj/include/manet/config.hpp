#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "manet/augment.hpp"
#include "manet/backbone.hpp"
#include "manet/losses.hpp"
#include "manet/metrics.hpp"
#include "manet/model.hpp"

namespace manet {

struct TrainConfig {
  std::string dataset;  // manifest path
  int fold = 0;
  int num_folds = 4;
  int shots = 1;
  ModelConfig model;
  double lambda = 1.0;
  double lr = 1e-4;
  int batch = 4;
  int epochs = 1;
  int episodes_per_epoch = 200;
  std::uint64_t seed = 1;
  BackboneConfig backbone;
  AugmentConfig augment;
  int side = 473;
  PixelLossMode pixel_loss = PixelLossMode::kBinaryCrossEntropy;
  IouMode iou_mode = IouMode::kPooled;
  int eval_episodes = 1000;
  int eval_runs = 5;
  int workers = 0;

  /// Throws ConfigError on the first violated invariant.
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);

/// Overlays the keys present in `doc` onto `base`; unknown keys raise ConfigError.
TrainConfig train_config_from_json(const nlohmann::json& doc, TrainConfig base = {});

TrainConfig load_train_config(const std::string& path, TrainConfig base = {});

}  // namespace manet
