#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <vector>

#include <nlohmann/json.hpp>

#include "manet/checkpoint.hpp"
#include "manet/config.hpp"
#include "manet/episodes.hpp"
#include "manet/metrics.hpp"

namespace manet {

struct TrainLogRecord {
  std::uint64_t step = 0;
  int epoch = 0;
  double loss_pixel = 0.0;
  double loss_grid = 0.0;
  double loss_total = 0.0;
  double lr = 0.0;
  std::uint64_t episode_seed = 0;
};

nlohmann::json to_json(const TrainLogRecord& record);

struct TrainOptions {
  /// When set, `checkpoint.bin` is rewritten after every epoch and
  /// `train_log.jsonl` receives one line per step.
  std::optional<std::filesystem::path> out_dir;
  /// Continue from a saved state instead of a fresh model.
  std::optional<std::filesystem::path> resume_from;
  /// Stop after this many epochs in this call (for interrupted-run tests).
  std::optional<int> max_epochs;
  std::function<void(const TrainLogRecord&)> on_step;
};

struct TrainResult {
  TrainingState state;
  std::vector<TrainLogRecord> log;
};

/// Samples a batch of training episodes from `classes`: episode b of the
/// batch uses Rng(derive_seed(batch_seed, b)), is resized to config.side and
/// augmented per config.augment.
std::vector<Episode> prepare_batch(const EpisodeSampler& sampler, const std::set<ClassId>& classes,
                                   const TrainConfig& config, std::uint64_t batch_seed, int batch_size);

/// Episodic training on the fold's training classes with Adam at config.lr.
/// The batch at global step t is seeded by derive_seed(config.seed, t).
/// Non-finite losses raise TrainingError carrying the seed and loss parts;
/// a frozen backbone that receives gradient raises TrainingError too.
TrainResult train(const TrainConfig& config, const TrainOptions& options = {});

struct EvalConfig {
  int fold = 0;
  int shots = 1;
  int episodes = 1000;
  int runs = 5;
  std::uint64_t seed = 0;           // run r uses seed + r unless `seeds` is given
  std::vector<std::uint64_t> seeds;
  IouMode iou_mode = IouMode::kPooled;
  int batch = 8;
  std::string dataset;  // overrides the checkpoint's dataset when non-empty
  /// Replace every support by copies of the first one (K-shot sanity checks).
  bool duplicate_first_support = false;
};

/// Maps resized episodes to binary masks at each episode's original size.
using Predictor = std::function<std::vector<torch::Tensor>(const std::vector<Episode>&)>;

/// Samples test-class episodes for each run and accumulates the predictor's
/// masks against the original-resolution ground truth.
MetricsReport evaluate_predictor(const EpisodeSampler& sampler, const FoldSpec& fold, const EvalConfig& eval,
                                 int side, const Predictor& predictor);

/// Eval-mode model predictor: aggregated score resized to the original size, thresholded at 0.5.
Predictor model_predictor(Manet& model);

/// Constant predictors used as baselines.
Predictor constant_predictor(bool foreground);

/// Evaluates a trained state. Warns on stderr when eval.fold differs from the
/// training fold.
MetricsReport evaluate(TrainingState& state, const EvalConfig& eval);
MetricsReport evaluate(const std::filesystem::path& checkpoint, const EvalConfig& eval);

}  // namespace manet
