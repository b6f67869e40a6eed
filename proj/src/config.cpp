#include "manet/config.hpp"

#include <fstream>
#include <set>

#include "manet/errors.hpp"

namespace manet {
using nlohmann::json;

void TrainConfig::validate() const {
  if (lr <= 0) throw ConfigError("lr must be > 0");
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (shots < 1) throw ConfigError("shots must be >= 1");
  if (episodes_per_epoch < 1) throw ConfigError("episodes_per_epoch must be >= 1");
  if (model.grid < 1 || model.grid > 64) throw ConfigError("grid must be in [1, 64]");
  if (side < 64) throw ConfigError("side must be >= 64");
  if (lambda < 0) throw ConfigError("lambda must be >= 0");
  if (num_folds < 1 || fold < 0 || fold >= num_folds) throw ConfigError("fold outside [0, num_folds)");
  if (eval_episodes < 1 || eval_runs < 1) throw ConfigError("eval_episodes and eval_runs must be >= 1");
  if (workers < 0) throw ConfigError("workers must be >= 0");
  if (backbone.kind != BackboneKind::kTiny && backbone.weights_path.empty()) {
    throw ConfigError("pretrained backbones need backbone.weights");
  }
}

json to_json(const TrainConfig& c) {
  return {
      {"dataset", c.dataset},
      {"fold", c.fold},
      {"num_folds", c.num_folds},
      {"shots", c.shots},
      {"grid", c.model.grid},
      {"channels", c.model.channels},
      {"coord_channels", c.model.coord_channels},
      {"aggregation", c.model.aggregation == AggregationMode::kSigmoidThenSum ? "sigmoid-sum" : "sum-sigmoid"},
      {"shot_fusion", c.model.fusion == ShotFusion::kNormalizeThenAverage ? "normalize-average" : "average-normalize"},
      {"model_seed", c.model.seed},
      {"lambda", c.lambda},
      {"lr", c.lr},
      {"batch", c.batch},
      {"epochs", c.epochs},
      {"episodes_per_epoch", c.episodes_per_epoch},
      {"seed", c.seed},
      {"backbone",
       {{"kind", to_string(c.backbone.kind)},
        {"frozen", c.backbone.frozen},
        {"seed", c.backbone.seed},
        {"weights", c.backbone.weights_path},
        {"mean", c.backbone.mean},
        {"std", c.backbone.stddev}}},
      {"augment",
       {{"hflip", c.augment.hflip},
        {"scale", c.augment.scale},
        {"rotate", c.augment.rotate},
        {"shift", c.augment.shift},
        {"scale_min", c.augment.scale_min},
        {"scale_max", c.augment.scale_max},
        {"max_rotation_deg", c.augment.max_rotation_deg},
        {"max_shift", c.augment.max_shift}}},
      {"side", c.side},
      {"pixel_loss", c.pixel_loss == PixelLossMode::kBinaryCrossEntropy ? "bce" : "positive"},
      {"iou_mode", to_string(c.iou_mode)},
      {"eval_episodes", c.eval_episodes},
      {"eval_runs", c.eval_runs},
      {"workers", c.workers},
  };
}

namespace {

template <typename T>
void read_if(const json& doc, const char* key, T& target) {
  if (doc.contains(key)) target = doc.at(key).get<T>();
}

void reject_unknown(const json& doc, const std::set<std::string>& known, const std::string& scope) {
  for (const auto& [key, value] : doc.items()) {
    if (!known.contains(key)) throw ConfigError("unknown " + scope + " key '" + key + "'");
  }
}

}  // namespace

TrainConfig train_config_from_json(const json& doc, TrainConfig c) {
  if (!doc.is_object()) throw ConfigError("train config must be a JSON object");
  reject_unknown(doc,
                 {"dataset", "fold", "num_folds", "shots", "grid", "channels", "coord_channels", "aggregation",
                  "shot_fusion", "model_seed", "lambda", "lr", "batch", "epochs", "episodes_per_epoch", "seed",
                  "backbone", "augment", "side", "pixel_loss", "iou_mode", "eval_episodes", "eval_runs", "workers"},
                 "config");
  try {
    read_if(doc, "dataset", c.dataset);
    read_if(doc, "fold", c.fold);
    read_if(doc, "num_folds", c.num_folds);
    read_if(doc, "shots", c.shots);
    read_if(doc, "grid", c.model.grid);
    read_if(doc, "channels", c.model.channels);
    read_if(doc, "coord_channels", c.model.coord_channels);
    read_if(doc, "model_seed", c.model.seed);
    if (doc.contains("aggregation")) {
      const auto v = doc.at("aggregation").get<std::string>();
      if (v == "sigmoid-sum") {
        c.model.aggregation = AggregationMode::kSigmoidThenSum;
      } else if (v == "sum-sigmoid") {
        c.model.aggregation = AggregationMode::kSumThenSigmoid;
      } else {
        throw ConfigError("aggregation must be sigmoid-sum or sum-sigmoid");
      }
    }
    if (doc.contains("shot_fusion")) {
      const auto v = doc.at("shot_fusion").get<std::string>();
      if (v == "normalize-average") {
        c.model.fusion = ShotFusion::kNormalizeThenAverage;
      } else if (v == "average-normalize") {
        c.model.fusion = ShotFusion::kAverageThenNormalize;
      } else {
        throw ConfigError("shot_fusion must be normalize-average or average-normalize");
      }
    }
    read_if(doc, "lambda", c.lambda);
    read_if(doc, "lr", c.lr);
    read_if(doc, "batch", c.batch);
    read_if(doc, "epochs", c.epochs);
    read_if(doc, "episodes_per_epoch", c.episodes_per_epoch);
    read_if(doc, "seed", c.seed);
    if (doc.contains("backbone")) {
      const json& b = doc.at("backbone");
      reject_unknown(b, {"kind", "frozen", "seed", "weights", "mean", "std"}, "backbone");
      if (b.contains("kind")) {
        const auto kind = backbone_kind_from_string(b.at("kind").get<std::string>());
        if (kind != BackboneKind::kTiny && c.backbone.kind == BackboneKind::kTiny) {
          c.backbone = BackboneConfig::pretrained(kind, c.backbone.weights_path);
        }
        c.backbone.kind = kind;
      }
      read_if(b, "frozen", c.backbone.frozen);
      read_if(b, "seed", c.backbone.seed);
      read_if(b, "weights", c.backbone.weights_path);
      read_if(b, "mean", c.backbone.mean);
      read_if(b, "std", c.backbone.stddev);
    }
    if (doc.contains("augment")) {
      const json& a = doc.at("augment");
      reject_unknown(a, {"hflip", "scale", "rotate", "shift", "scale_min", "scale_max", "max_rotation_deg", "max_shift"},
                     "augment");
      read_if(a, "hflip", c.augment.hflip);
      read_if(a, "scale", c.augment.scale);
      read_if(a, "rotate", c.augment.rotate);
      read_if(a, "shift", c.augment.shift);
      read_if(a, "scale_min", c.augment.scale_min);
      read_if(a, "scale_max", c.augment.scale_max);
      read_if(a, "max_rotation_deg", c.augment.max_rotation_deg);
      read_if(a, "max_shift", c.augment.max_shift);
    }
    read_if(doc, "side", c.side);
    if (doc.contains("pixel_loss")) {
      const auto v = doc.at("pixel_loss").get<std::string>();
      if (v == "bce") {
        c.pixel_loss = PixelLossMode::kBinaryCrossEntropy;
      } else if (v == "positive") {
        c.pixel_loss = PixelLossMode::kPositiveOnly;
      } else {
        throw ConfigError("pixel_loss must be bce or positive");
      }
    }
    if (doc.contains("iou_mode")) c.iou_mode = iou_mode_from_string(doc.at("iou_mode").get<std::string>());
    read_if(doc, "eval_episodes", c.eval_episodes);
    read_if(doc, "eval_runs", c.eval_runs);
    read_if(doc, "workers", c.workers);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  return c;
}

TrainConfig load_train_config(const std::string& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  return train_config_from_json(doc, std::move(base));
}

}  // namespace manet
