#include "cli.hpp"

#include <fstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "manet/checkpoint.hpp"
#include "manet/config.hpp"
#include "manet/datasets.hpp"
#include "manet/episodes.hpp"
#include "manet/errors.hpp"
#include "manet/image_io.hpp"
#include "manet/trainer.hpp"
#include "manet/viz.hpp"

namespace manet::cli {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_json(const fs::path& path, const json& doc) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << doc.dump(2) << '\n';
  if (!f) throw IoError("failed writing " + path.string());
}

// Adds `value` under `key` when the option was given on the command line.
template <typename T>
void overlay(json& doc, const CLI::Option* opt, const std::string& key, const T& value) {
  if (opt->count() > 0) doc[key] = value;
}

struct SynthArgs {
  std::string out;
  SynthSpec spec;
};

void add_synth(CLI::App& app, SynthArgs& a) {
  auto* sub = app.add_subcommand("synth", "Render a synthetic shape segmentation dataset");
  sub->add_option("--out", a.out, "Output directory (images/, masks/, manifest.json)")->required();
  sub->add_option("--classes", a.spec.num_shape_classes, "Number of shape classes")->capture_default_str();
  sub->add_option("--per-class", a.spec.images_per_class, "Images per class")->capture_default_str();
  sub->add_option("--size", a.spec.image_size, "Image side in pixels")->capture_default_str();
  sub->add_option("--seed", a.spec.seed, "Random seed")->capture_default_str();
  sub->add_option("--noise", a.spec.noise_level, "Background noise amplitude")->capture_default_str();
  sub->add_option("--max-shapes", a.spec.max_shapes_per_image, "Maximum shapes per image")->capture_default_str();
}

int run_synth(const SynthArgs& a, std::ostream& out) {
  const DatasetManifest manifest = generate_synthetic_dataset(a.spec, a.out);
  json echo = {{"classes", a.spec.num_shape_classes},
               {"per_class", a.spec.images_per_class},
               {"size", a.spec.image_size},
               {"seed", a.spec.seed},
               {"noise", a.spec.noise_level},
               {"max_shapes", a.spec.max_shapes_per_image}};
  write_json(fs::path(a.out) / "synth.json", echo);
  out << "wrote " << manifest.entries.size() << " image/mask pairs (" << manifest.num_classes() << " classes) to "
      << a.out << "\n"
      << "config " << echo.dump() << "\n";
  return kExitOk;
}

struct TrainArgs {
  std::string config, out, resume, dataset, backbone, weights, pixel_loss, aggregation, shot_fusion;
  int fold = 0, num_folds = 4, shots = 1, grid = 12, channels = 256, batch = 4, epochs = 1, episodes = 200,
      side = 473, workers = 0, log_every = 50;
  double lambda = 1.0, lr = 1e-4;
  std::uint64_t seed = 1, model_seed = 0, backbone_seed = 0;
  bool no_grid_loss = false, no_coords = false, freeze = false, unfreeze = false, augment = false,
       no_augment = false;
  std::map<std::string, CLI::Option*> opts;
};

void add_train(CLI::App& app, TrainArgs& a) {
  auto* sub = app.add_subcommand("train", "Episodic training on the training classes of a fold");
  auto& o = a.opts;
  o["config"] = sub->add_option("--config", a.config, "JSON config file (flags override its values)");
  sub->add_option("--out", a.out, "Output directory for checkpoint.bin, train_log.jsonl, config.json")->required();
  o["resume"] = sub->add_option("--resume", a.resume, "Continue from a checkpoint");
  o["dataset"] = sub->add_option("--dataset", a.dataset, "Dataset manifest path");
  o["fold"] = sub->add_option("--fold", a.fold, "Fold index");
  o["num_folds"] = sub->add_option("--num-folds", a.num_folds, "Number of class folds");
  o["shots"] = sub->add_option("--shots", a.shots, "Support images per episode");
  o["grid"] = sub->add_option("--grid", a.grid, "Grid size S (S*S cells)");
  o["channels"] = sub->add_option("--channels", a.channels, "Head channel width");
  o["coords"] = sub->add_flag("--no-coord-channels", a.no_coords, "Drop coordinate channels from the mask branch");
  o["aggregation"] = sub->add_option("--aggregation", a.aggregation, "sigmoid-sum or sum-sigmoid")
                         ->check(CLI::IsMember({"sigmoid-sum", "sum-sigmoid"}));
  o["shot_fusion"] = sub->add_option("--shot-fusion", a.shot_fusion, "normalize-average or average-normalize")
                         ->check(CLI::IsMember({"normalize-average", "average-normalize"}));
  o["model_seed"] = sub->add_option("--model-seed", a.model_seed, "Head initialisation seed");
  o["lambda"] = sub->add_option("--lambda", a.lambda, "Grid loss weight");
  o["no_grid"] = sub->add_flag("--no-grid-loss", a.no_grid_loss, "Disable the grid loss (lambda = 0)");
  o["no_grid"]->excludes(o["lambda"]);
  o["lr"] = sub->add_option("--lr", a.lr, "Adam learning rate");
  o["batch"] = sub->add_option("--batch", a.batch, "Episodes per step");
  o["epochs"] = sub->add_option("--epochs", a.epochs, "Epochs");
  o["episodes"] = sub->add_option("--episodes", a.episodes, "Training episodes per epoch");
  o["seed"] = sub->add_option("--seed", a.seed, "Episode sampling seed");
  o["backbone"] = sub->add_option("--backbone", a.backbone, "tiny, resnet50 or resnet101")
                      ->check(CLI::IsMember({"tiny", "resnet50", "resnet101"}));
  o["weights"] = sub->add_option("--backbone-weights", a.weights, "Pretrained backbone weights (pickled dict)");
  o["backbone_seed"] = sub->add_option("--backbone-seed", a.backbone_seed, "Backbone initialisation seed");
  o["freeze"] = sub->add_flag("--freeze-backbone", a.freeze, "Keep backbone weights fixed");
  o["unfreeze"] = sub->add_flag("--train-backbone", a.unfreeze, "Update backbone weights");
  o["freeze"]->excludes(o["unfreeze"]);
  o["augment"] = sub->add_flag("--augment", a.augment, "Enable flip, scale, rotation and shift augmentation");
  o["no_augment"] = sub->add_flag("--no-augment", a.no_augment, "Disable all augmentation");
  o["augment"]->excludes(o["no_augment"]);
  o["side"] = sub->add_option("--side", a.side, "Training input side in pixels");
  o["pixel_loss"] = sub->add_option("--pixel-loss", a.pixel_loss, "bce or positive")
                        ->check(CLI::IsMember({"bce", "positive"}));
  o["workers"] = sub->add_option("--workers", a.workers, "Episode preparation workers (0 = deterministic)");
  sub->add_option("--log-every", a.log_every, "Print the loss every N steps (0 = never)")->capture_default_str();
}

TrainConfig effective_train_config(const TrainArgs& a) {
  TrainConfig base;
  if (!a.config.empty()) base = load_train_config(a.config);
  const auto& o = a.opts;
  json doc = json::object();
  overlay(doc, o.at("dataset"), "dataset", a.dataset);
  overlay(doc, o.at("fold"), "fold", a.fold);
  overlay(doc, o.at("num_folds"), "num_folds", a.num_folds);
  overlay(doc, o.at("shots"), "shots", a.shots);
  overlay(doc, o.at("grid"), "grid", a.grid);
  overlay(doc, o.at("channels"), "channels", a.channels);
  if (a.no_coords) doc["coord_channels"] = false;
  overlay(doc, o.at("aggregation"), "aggregation", a.aggregation);
  overlay(doc, o.at("shot_fusion"), "shot_fusion", a.shot_fusion);
  overlay(doc, o.at("model_seed"), "model_seed", a.model_seed);
  overlay(doc, o.at("lambda"), "lambda", a.lambda);
  if (a.no_grid_loss) doc["lambda"] = 0.0;
  overlay(doc, o.at("lr"), "lr", a.lr);
  overlay(doc, o.at("batch"), "batch", a.batch);
  overlay(doc, o.at("epochs"), "epochs", a.epochs);
  overlay(doc, o.at("episodes"), "episodes_per_epoch", a.episodes);
  overlay(doc, o.at("seed"), "seed", a.seed);
  overlay(doc, o.at("side"), "side", a.side);
  overlay(doc, o.at("pixel_loss"), "pixel_loss", a.pixel_loss);
  overlay(doc, o.at("workers"), "workers", a.workers);
  json backbone = json::object();
  overlay(backbone, o.at("backbone"), "kind", a.backbone);
  overlay(backbone, o.at("weights"), "weights", a.weights);
  overlay(backbone, o.at("backbone_seed"), "seed", a.backbone_seed);
  if (a.freeze) backbone["frozen"] = true;
  if (a.unfreeze) backbone["frozen"] = false;
  if (!backbone.empty()) doc["backbone"] = backbone;
  if (a.augment || a.no_augment) {
    const bool on = a.augment;
    doc["augment"] = {{"hflip", on}, {"scale", on}, {"rotate", on}, {"shift", on}};
  }
  TrainConfig config = train_config_from_json(doc, base);
  if (config.dataset.empty()) throw ConfigError("no dataset given (--dataset or \"dataset\" in --config)");
  config.validate();
  return config;
}

int run_train(const TrainArgs& a, std::ostream& out) {
  TrainOptions options;
  options.out_dir = a.out;
  TrainConfig config;
  if (a.opts.at("resume")->count() > 0) {
    options.resume_from = a.resume;
    TrainingState resumed = load_checkpoint(a.resume);
    config = resumed.config;
  } else {
    config = effective_train_config(a);
  }
  write_json(fs::path(a.out) / "config.json", to_json(config));
  out << "config " << to_json(config).dump() << "\n";
  if (a.log_every > 0) {
    options.on_step = [&](const TrainLogRecord& r) {
      if (r.step % static_cast<std::uint64_t>(a.log_every) == 0) {
        out << "step " << r.step << " epoch " << r.epoch << " loss " << r.loss_total << " (pixel " << r.loss_pixel
            << ", grid " << r.loss_grid << ")\n";
      }
    };
  }
  TrainResult result = train(config, options);
  out << "trained " << result.state.step << " steps, checkpoint " << (fs::path(a.out) / "checkpoint.bin").string()
      << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string ckpt, iou_mode, dataset, report;
  int fold = 0, shots = 1, episodes = 1000, runs = 5, batch = 8, workers = 0;
  std::uint64_t seed = 1;
  std::map<std::string, CLI::Option*> opts;
};

void add_eval(CLI::App& app, EvalArgs& a) {
  auto* sub = app.add_subcommand("eval", "Evaluate a checkpoint on the test classes of a fold");
  auto& o = a.opts;
  sub->add_option("--ckpt", a.ckpt, "Checkpoint file")->required();
  o["fold"] = sub->add_option("--fold", a.fold, "Fold index (defaults to the training fold)");
  o["shots"] = sub->add_option("--shots", a.shots, "Support images per episode (defaults to the training value)");
  o["episodes"] = sub->add_option("--episodes", a.episodes, "Episodes per run (defaults to eval_episodes)");
  o["runs"] = sub->add_option("--runs", a.runs, "Independent runs (defaults to eval_runs)");
  sub->add_option("--seed", a.seed, "Seed of run 0; run r uses seed + r")->capture_default_str();
  o["iou"] = sub->add_option("--iou-mode", a.iou_mode, "pooled or mean (defaults to the config value)")
                 ->check(CLI::IsMember({"pooled", "mean"}));
  sub->add_option("--batch", a.batch, "Episodes per forward pass")->capture_default_str();
  sub->add_option("--dataset", a.dataset, "Manifest overriding the checkpoint's dataset");
  sub->add_option("--report", a.report, "Also write the JSON report to this file");
  sub->add_option("--workers", a.workers, "Threads (0 = single-threaded, deterministic)")->capture_default_str();
}

int run_eval(const EvalArgs& a, std::ostream& out) {
  TrainingState state = load_checkpoint(a.ckpt);
  const TrainConfig& tc = state.config;
  EvalConfig eval;
  const auto& o = a.opts;
  eval.fold = o.at("fold")->count() ? a.fold : tc.fold;
  eval.shots = o.at("shots")->count() ? a.shots : tc.shots;
  eval.episodes = o.at("episodes")->count() ? a.episodes : tc.eval_episodes;
  eval.runs = o.at("runs")->count() ? a.runs : tc.eval_runs;
  eval.iou_mode = o.at("iou")->count() ? iou_mode_from_string(a.iou_mode) : tc.iou_mode;
  eval.seed = a.seed;
  eval.batch = a.batch;
  eval.dataset = a.dataset;
  if (eval.shots < 1 || eval.episodes < 1 || eval.runs < 1 || eval.batch < 1 || a.workers < 0) {
    throw ConfigError("shots, episodes, runs and batch must be >= 1 and workers >= 0");
  }
  if (eval.fold < 0 || eval.fold >= tc.num_folds) throw ConfigError("fold outside [0, num_folds)");
  if (a.workers == 0) torch::set_num_threads(1);

  const MetricsReport rep = evaluate(state, eval);
  const std::int64_t head_params = state.model->head_parameter_count();
  json doc = {{"eval",
               {{"checkpoint", a.ckpt},
                {"fold", eval.fold},
                {"shots", eval.shots},
                {"episodes", eval.episodes},
                {"runs", eval.runs},
                {"seed", eval.seed},
                {"iou_mode", to_string(eval.iou_mode)},
                {"dataset", eval.dataset.empty() ? tc.dataset : eval.dataset}}},
              {"train_config", to_json(tc)},
              {"head_parameters", head_params},
              {"report", to_json(rep)}};
  if (!a.report.empty()) write_json(a.report, doc);
  out << doc.dump(2) << "\n"
      << "head parameters: " << head_params << "\n"
      << "iou mode: " << to_string(eval.iou_mode) << "\n"
      << render_table(rep, eval.fold);
  return kExitOk;
}

struct VizArgs {
  std::string ckpt, out, dataset, query, query_mask;
  std::vector<std::string> support, support_mask;
  int fold = 0, shots = 1, episode = 0, tile = 32;
  std::uint64_t seed = 1;
  bool fg_only = false;
  std::map<std::string, CLI::Option*> opts;
};

void add_viz(CLI::App& app, VizArgs& a) {
  auto* sub = app.add_subcommand("viz", "Render the S*S mask planes and the prediction for one episode");
  auto& o = a.opts;
  sub->add_option("--ckpt", a.ckpt, "Checkpoint file")->required();
  sub->add_option("--out", a.out, "Output directory (montage.png, overlay.png, viz.json)")->required();
  o["fold"] = sub->add_option("--fold", a.fold, "Fold whose test classes are sampled (defaults to the training fold)");
  o["shots"] = sub->add_option("--shots", a.shots, "Support images when sampling (defaults to the training value)");
  sub->add_option("--seed", a.seed, "Sampling seed (as in eval run 0)")->capture_default_str();
  sub->add_option("--episode", a.episode, "Episode index within the seeded run")->capture_default_str();
  sub->add_option("--dataset", a.dataset, "Manifest overriding the checkpoint's dataset");
  o["query"] = sub->add_option("--query", a.query, "Query image (instead of sampling)");
  sub->add_option("--query-mask", a.query_mask, "Query mask, only used for reporting IoU");
  sub->add_option("--support", a.support, "Support image (repeat for K shots)");
  sub->add_option("--support-mask", a.support_mask, "Support mask (repeat, one per --support)");
  sub->add_option("--tile-size", a.tile, "Tile side in pixels")->capture_default_str();
  sub->add_flag("--fg-only", a.fg_only, "Blank the tiles of cells with p_fg <= 0.5");
}

torch::Tensor read_rgb(const std::string& path) {
  if (!fs::exists(path)) throw ConfigError("episode file not found: " + path);
  RawImage img = read_image(path);
  return image_to_tensor(img);
}

torch::Tensor read_mask(const std::string& path) {
  if (!fs::exists(path)) throw ConfigError("episode file not found: " + path);
  return binary_mask_to_tensor(read_image(path));
}

Episode explicit_episode(const VizArgs& a) {
  if (a.support.empty() || a.support.size() != a.support_mask.size()) {
    throw ConfigError("--query needs at least one --support and one --support-mask per support");
  }
  Episode e;
  e.query_image = read_rgb(a.query);
  e.query_path = a.query;
  e.query_mask = a.query_mask.empty()
                     ? torch::zeros({e.query_image.size(1), e.query_image.size(2)})
                     : read_mask(a.query_mask);
  if (e.query_mask.size(0) != e.query_image.size(1) || e.query_mask.size(1) != e.query_image.size(2)) {
    throw ConfigError("query mask size differs from the query image");
  }
  for (std::size_t k = 0; k < a.support.size(); ++k) {
    SupportPair s{read_rgb(a.support[k]), read_mask(a.support_mask[k])};
    if (s.mask.size(0) != s.image.size(1) || s.mask.size(1) != s.image.size(2)) {
      throw ConfigError("support mask size differs from " + a.support[k]);
    }
    if (s.mask.sum().item<double>() <= 0) throw ConfigError("support mask is empty: " + a.support_mask[k]);
    e.support.push_back(std::move(s));
  }
  e.original_height = static_cast<int>(e.query_image.size(1));
  e.original_width = static_cast<int>(e.query_image.size(2));
  e.original_query_mask = e.query_mask;
  return e;
}

int run_viz(const VizArgs& a, std::ostream& out) {
  TrainingState state = load_checkpoint(a.ckpt);
  const TrainConfig& tc = state.config;
  if (a.tile < 3) throw ConfigError("--tile-size must be >= 3");
  Episode episode;
  if (a.opts.at("query")->count() > 0) {
    episode = explicit_episode(a);
  } else {
    const int fold_index = a.opts.at("fold")->count() ? a.fold : tc.fold;
    const int shots = a.opts.at("shots")->count() ? a.shots : tc.shots;
    if (shots < 1 || a.episode < 0) throw ConfigError("--shots must be >= 1 and --episode >= 0");
    EpisodeSampler sampler(load_manifest(a.dataset.empty() ? tc.dataset : a.dataset));
    const FoldSpec fold = build_folds(sampler.manifest(), fold_index, tc.num_folds);
    Rng rng(derive_seed(a.seed, static_cast<std::uint64_t>(a.episode)));
    try {
      episode = sampler.sample(fold.test_classes, shots, rng);
    } catch (const SamplingError& e) {
      throw ConfigError(e.what());
    }
  }
  torch::set_num_threads(1);
  Episode resized = resize_episode(episode, tc.side);

  torch::NoGradGuard no_grad;
  state.model->eval();
  ForwardOutput fo = state.model->forward(collate({resized}));
  Prediction pred = aggregate(fo.cells, fo.masks, {resized.original_height, resized.original_width},
                              state.model->config().aggregation, state.model->config().eps);
  MontageOptions mopts{a.tile, a.fg_only};
  RawImage montage = mask_montage(fo.cells, fo.masks, mopts);
  RawImage overlay_img = prediction_overlay(episode.query_image, pred.binary_mask[0]);

  fs::create_directories(a.out);
  write_png(fs::path(a.out) / "montage.png", montage);
  write_png(fs::path(a.out) / "overlay.png", overlay_img);

  const int s = fo.cells.grid;
  auto p_fg = pred.cell_probs[0].contiguous();
  json cells = json::array();
  for (int i = 0; i < s; ++i) {
    for (int j = 0; j < s; ++j) {
      if (p_fg[i][j].item<double>() > 0.5) cells.push_back({i, j});
    }
  }
  json doc = {{"checkpoint", a.ckpt},
              {"query", episode.query_path},
              {"class_id", episode.class_id},
              {"shots", episode.shots()},
              {"seed", a.seed},
              {"episode", a.episode},
              {"grid", s},
              {"tiles", s * s},
              {"tile_size", a.tile},
              {"fg_only", a.fg_only},
              {"foreground_cells", cells},
              {"train_config", to_json(tc)}};
  if (episode.original_query_mask.defined() && episode.original_query_mask.sum().item<double>() > 0) {
    doc["iou"] = binary_iou(pred.binary_mask[0], episode.original_query_mask);
  }
  write_json(fs::path(a.out) / "viz.json", doc);
  out << "montage " << montage.width << "x" << montage.height << " (" << s * s << " tiles, " << cells.size()
      << " foreground) written to " << a.out << "\n";
  return kExitOk;
}

struct ImportArgs {
  std::string format, root, list, mask_dir = "SegmentationClassAug", annotations, images, mask_out, out;
};

void add_import(CLI::App& app, ImportArgs& a) {
  auto* sub = app.add_subcommand("import", "Write a manifest for PASCAL VOC or COCO annotations");
  sub->add_option("--format", a.format, "voc or coco")->required()->check(CLI::IsMember({"voc", "coco"}));
  sub->add_option("--out", a.out, "Manifest path to write")->required();
  sub->add_option("--root", a.root, "voc: dataset root holding JPEGImages/ and the mask directory");
  sub->add_option("--list", a.list, "voc: image id list file");
  sub->add_option("--mask-dir", a.mask_dir, "voc: mask directory under the root")->capture_default_str();
  sub->add_option("--annotations", a.annotations, "coco: instances JSON");
  sub->add_option("--images", a.images, "coco: image directory");
  sub->add_option("--mask-out", a.mask_out, "coco: directory for rasterized label masks");
}

int run_import(const ImportArgs& a, std::ostream& out) {
  DatasetManifest manifest;
  if (a.format == "voc") {
    if (a.root.empty() || a.list.empty()) throw ConfigError("voc import needs --root and --list");
    manifest = import_pascal_voc(a.root, a.list, a.mask_dir);
  } else {
    if (a.annotations.empty() || a.images.empty() || a.mask_out.empty()) {
      throw ConfigError("coco import needs --annotations, --images and --mask-out");
    }
    manifest = import_coco(a.annotations, a.images, a.mask_out);
  }
  save_manifest(manifest, a.out);
  out << "wrote manifest with " << manifest.entries.size() << " images (" << manifest.num_classes()
      << " classes) to " << a.out << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Few-shot segmentation with grid-cell mask aggregation", "manet"};
  app.require_subcommand(1);
  SynthArgs synth;
  TrainArgs train_args;
  EvalArgs eval_args;
  VizArgs viz_args;
  ImportArgs import_args;
  add_synth(app, synth);
  add_train(app, train_args);
  add_eval(app, eval_args);
  add_viz(app, viz_args);
  add_import(app, import_args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (app.got_subcommand("synth")) return run_synth(synth, out);
    if (app.got_subcommand("train")) return run_train(train_args, out);
    if (app.got_subcommand("eval")) return run_eval(eval_args, out);
    if (app.got_subcommand("viz")) return run_viz(viz_args, out);
    if (app.got_subcommand("import")) return run_import(import_args, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace manet::cli
