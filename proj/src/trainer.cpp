#include "manet/trainer.hpp"

#include <cmath>
#include <fstream>
#include <future>
#include <iostream>
#include <sstream>

#include "manet/augment.hpp"
#include "manet/errors.hpp"
#include "manet/losses.hpp"

namespace manet {
namespace fs = std::filesystem;

nlohmann::json to_json(const TrainLogRecord& r) {
  return {{"step", r.step},         {"epoch", r.epoch}, {"loss_pixel", r.loss_pixel},
          {"loss_grid", r.loss_grid}, {"loss_total", r.loss_total}, {"lr", r.lr},
          {"episode_seed", r.episode_seed}};
}

std::vector<Episode> prepare_batch(const EpisodeSampler& sampler, const std::set<ClassId>& classes,
                                   const TrainConfig& config, std::uint64_t batch_seed, int batch_size) {
  std::vector<Episode> episodes;
  episodes.reserve(batch_size);
  for (int b = 0; b < batch_size; ++b) {
    Rng rng(derive_seed(batch_seed, static_cast<std::uint64_t>(b)));
    Episode e = resize_episode(sampler.sample(classes, config.shots, rng), config.side);
    if (config.augment.any()) e = augment_episode(e, rng, config.augment);
    episodes.push_back(std::move(e));
  }
  return episodes;
}

namespace {

void check_frozen_backbone(ManetImpl& model) {
  if (model.backbone().trainable()) return;
  for (const auto& p : model.backbone().parameters()) {
    if (p.grad().defined() && p.grad().abs().max().item<double>() != 0.0) {
      throw TrainingError("frozen backbone received a non-zero gradient");
    }
  }
}

}  // namespace

TrainResult train(const TrainConfig& config, const TrainOptions& options) {
  config.validate();
  if (config.workers == 0) torch::set_num_threads(1);

  TrainResult result;
  if (options.resume_from) {
    result.state = load_checkpoint(*options.resume_from);
  } else {
    result.state = make_training_state(config);
  }
  TrainingState& state = result.state;
  const TrainConfig& cfg = state.config;

  EpisodeSampler sampler(load_manifest(cfg.dataset));
  const FoldSpec fold = build_folds(sampler.manifest(), cfg.fold, cfg.num_folds);
  const int steps_per_epoch = (cfg.episodes_per_epoch + cfg.batch - 1) / cfg.batch;

  std::ofstream log_file;
  if (options.out_dir) {
    fs::create_directories(*options.out_dir);
    const auto mode = options.resume_from ? std::ios::app : std::ios::trunc;
    log_file.open(*options.out_dir / "train_log.jsonl", std::ios::out | mode);
    if (!log_file) throw IoError("cannot write training log in " + options.out_dir->string());
  }

  auto batch_size_at = [&](int step_in_epoch) {
    return std::min(cfg.batch, cfg.episodes_per_epoch - step_in_epoch * cfg.batch);
  };
  auto load_batch = [&](std::uint64_t global_step, int step_in_epoch) {
    return prepare_batch(sampler, fold.train_classes, cfg, derive_seed(cfg.seed, global_step),
                         batch_size_at(step_in_epoch));
  };

  const int last_epoch = options.max_epochs ? std::min(cfg.epochs, state.epoch + *options.max_epochs) : cfg.epochs;
  for (int epoch = state.epoch; epoch < last_epoch; ++epoch) {
    state.model->train();
    std::future<std::vector<Episode>> pending;
    if (cfg.workers > 0) pending = std::async(std::launch::async, load_batch, state.step, 0);
    for (int s = 0; s < steps_per_epoch; ++s) {
      const std::uint64_t batch_seed = derive_seed(cfg.seed, state.step);
      std::vector<Episode> episodes = cfg.workers > 0 ? pending.get() : load_batch(state.step, s);
      if (cfg.workers > 0 && s + 1 < steps_per_epoch) {
        pending = std::async(std::launch::async, load_batch, state.step + 1, s + 1);
      }
      EpisodeBatch batch = collate(episodes);
      ForwardOutput out = state.model->forward(batch);
      auto gt = batch.query_masks.to(out.prediction.score_map.scalar_type());
      auto pixel = pixel_loss(out.prediction.score_map, gt, cfg.pixel_loss);
      auto grid = grid_loss(out.cells, grid_target(gt, cfg.model.grid, cfg.model.eps));
      LossReport loss = total_loss(pixel, grid, cfg.lambda);
      if (!std::isfinite(loss.pixel) || !std::isfinite(loss.grid) || !std::isfinite(loss.total)) {
        std::ostringstream msg;
        msg << "non-finite loss at step " << state.step << " (episode_seed " << batch_seed
            << "): pixel=" << loss.pixel << " grid=" << loss.grid << " total=" << loss.total;
        throw TrainingError(msg.str());
      }
      state.optimizer->zero_grad();
      loss.objective.backward();
      check_frozen_backbone(*state.model);
      state.optimizer->step();

      TrainLogRecord record{state.step, epoch, loss.pixel, loss.grid, loss.total, cfg.lr, batch_seed};
      result.log.push_back(record);
      if (log_file.is_open()) log_file << to_json(record).dump() << '\n';
      if (options.on_step) options.on_step(record);
      ++state.step;
    }
    state.epoch = epoch + 1;
    if (options.out_dir) {
      log_file.flush();
      save_checkpoint(state, *options.out_dir / "checkpoint.bin");
    }
  }
  return result;
}

MetricsReport evaluate_predictor(const EpisodeSampler& sampler, const FoldSpec& fold, const EvalConfig& eval,
                                 int side, const Predictor& predictor) {
  if (eval.episodes < 1 || eval.runs < 1 || eval.batch < 1) {
    throw ConfigError("evaluation needs positive episodes, runs and batch");
  }
  std::vector<std::uint64_t> seeds = eval.seeds;
  for (int r = static_cast<int>(seeds.size()); r < eval.runs; ++r) seeds.push_back(eval.seed + r);
  seeds.resize(eval.runs);

  std::vector<MetricsAccumulator> runs(eval.runs);
  for (int r = 0; r < eval.runs; ++r) {
    for (int start = 0; start < eval.episodes; start += eval.batch) {
      const int count = std::min(eval.batch, eval.episodes - start);
      std::vector<Episode> episodes;
      for (int i = 0; i < count; ++i) {
        Rng rng(derive_seed(seeds[r], static_cast<std::uint64_t>(start + i)));
        Episode e = sampler.sample(fold.test_classes, eval.duplicate_first_support ? 1 : eval.shots, rng);
        if (eval.duplicate_first_support) e.support.resize(eval.shots, e.support.front());
        episodes.push_back(resize_episode(e, side));
      }
      const auto masks = predictor(episodes);
      if (masks.size() != episodes.size()) throw ContractError("predictor returned the wrong number of masks");
      for (std::size_t i = 0; i < episodes.size(); ++i) {
        runs[r].update(masks[i], episodes[i].original_query_mask, episodes[i].class_id);
      }
    }
  }
  return report(runs, seeds, eval.iou_mode);
}

Predictor model_predictor(Manet& model) {
  return [model](const std::vector<Episode>& episodes) mutable {
    torch::NoGradGuard no_grad;
    model->eval();
    ForwardOutput out = model->forward(collate(episodes));
    std::vector<torch::Tensor> masks;
    for (std::size_t i = 0; i < episodes.size(); ++i) {
      const auto b = static_cast<int64_t>(i);
      CellLogits cells{out.cells.logits.slice(0, b, b + 1), out.cells.grid};
      MaskStack stack{out.masks.logits.slice(0, b, b + 1), out.masks.grid};
      Prediction p = aggregate(cells, stack, {episodes[i].original_height, episodes[i].original_width},
                               model->config().aggregation, model->config().eps);
      masks.push_back(p.binary_mask.squeeze(0).to(torch::kFloat32));
    }
    return masks;
  };
}

Predictor constant_predictor(bool foreground) {
  return [foreground](const std::vector<Episode>& episodes) {
    std::vector<torch::Tensor> masks;
    for (const auto& e : episodes) {
      masks.push_back(torch::full({e.original_height, e.original_width}, foreground ? 1.0f : 0.0f));
    }
    return masks;
  };
}

MetricsReport evaluate(TrainingState& state, const EvalConfig& eval) {
  const TrainConfig& cfg = state.config;
  if (eval.fold != cfg.fold) {
    std::cerr << "warning: evaluating fold " << eval.fold << " with a model trained on fold " << cfg.fold << "\n";
  }
  if (cfg.workers == 0) torch::set_num_threads(1);
  EpisodeSampler sampler(load_manifest(eval.dataset.empty() ? cfg.dataset : eval.dataset));
  const FoldSpec fold = build_folds(sampler.manifest(), eval.fold, cfg.num_folds);
  return evaluate_predictor(sampler, fold, eval, cfg.side, model_predictor(state.model));
}

MetricsReport evaluate(const fs::path& checkpoint, const EvalConfig& eval) {
  TrainingState state = load_checkpoint(checkpoint);
  return evaluate(state, eval);
}

}  // namespace manet
