#include "manet/model.hpp"

#include <cmath>

#include <numeric>

#include "manet/errors.hpp"

namespace manet {
namespace nn = torch::nn;
namespace F = torch::nn::functional;

torch::Tensor coord_channels(int64_t h, int64_t w, torch::TensorOptions options) {
  if (h < 1 || w < 1) throw ContractError("coord_channels needs positive sizes");
  auto axis = [&](int64_t n) { return n == 1 ? torch::zeros({1}, options) : torch::linspace(-1.0, 1.0, n, options); };
  auto xs = axis(w).view({1, w}).expand({h, w});
  auto ys = axis(h).view({h, 1}).expand({h, w});
  return torch::stack({xs, ys}, 0);
}

ConvBlockImpl::ConvBlockImpl(int64_t in, int64_t out) {
  conv_ = register_module("conv", nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1).bias(false)));
  norm_ = register_module("norm", nn::GroupNorm(nn::GroupNormOptions(std::gcd<int64_t>(32, out), out)));
}

torch::Tensor ConvBlockImpl::forward(const torch::Tensor& x) { return torch::relu(norm_(conv_(x))); }

CategoryBranchImpl::CategoryBranchImpl(int64_t channels, int grid) : grid_(grid) {
  merge_ = register_module("merge", nn::Conv2d(nn::Conv2dOptions(2 * channels + 1, channels, 1)));
  blocks_ = register_module("blocks", nn::ModuleList());
  for (int i = 0; i < 3; ++i) blocks_->push_back(ConvBlock(channels, channels));
  classifier_ = register_module("classifier", nn::Conv2d(nn::Conv2dOptions(channels, 2, 1)));
}

CellLogits CategoryBranchImpl::forward(const torch::Tensor& query_features, const Prototype& prototype,
                                       const CorrelationMap& corr) {
  if (query_features.dim() != 4) throw ContractError("category branch expects B×C×H×W query features");
  const int64_t batch = query_features.size(0);
  const int64_t h = query_features.size(2);
  const int64_t w = query_features.size(3);
  if (prototype.vector.dim() != 2 || prototype.vector.size(0) != batch ||
      prototype.vector.size(1) != query_features.size(1)) {
    throw ContractError("prototype " + c10::str(prototype.vector.sizes()) + " does not match query features " +
                        c10::str(query_features.sizes()));
  }
  if (corr.values.dim() != 3 || corr.values.size(0) != batch || corr.values.size(1) != h || corr.values.size(2) != w) {
    throw ContractError("correlation map " + c10::str(corr.values.sizes()) + " does not match query features");
  }
  auto expanded = prototype.vector.view({batch, -1, 1, 1}).expand({batch, prototype.vector.size(1), h, w});
  auto x = merge_(torch::cat({query_features, expanded, corr.values.unsqueeze(1)}, 1));
  x = F::interpolate(x, F::InterpolateFuncOptions()
                            .size(std::vector<int64_t>{grid_, grid_})
                            .mode(torch::kBilinear)
                            .align_corners(false));
  for (auto& block : *blocks_) x = block->as<ConvBlock>()->forward(x);
  return {classifier_(x), grid_};
}

MaskBranchImpl::MaskBranchImpl(int64_t channels, int grid, bool use_coords) : grid_(grid), use_coords_(use_coords) {
  blocks_ = register_module("blocks", nn::ModuleList());
  blocks_->push_back(ConvBlock(channels + (use_coords ? 2 : 0), channels));
  blocks_->push_back(ConvBlock(channels, channels));
  blocks_->push_back(ConvBlock(channels, channels));
  predictor_ = register_module("predictor", nn::Conv2d(nn::Conv2dOptions(channels, int64_t{grid} * grid, 1)));
}

MaskStack MaskBranchImpl::forward(const torch::Tensor& query_features) {
  if (query_features.dim() != 4) throw ContractError("mask branch expects B×C×H×W query features");
  auto x = query_features;
  if (use_coords_) {
    const int64_t batch = x.size(0);
    auto coords = coord_channels(x.size(2), x.size(3), x.options()).unsqueeze(0).expand({batch, 2, x.size(2), x.size(3)});
    x = torch::cat({x, coords}, 1);
  }
  for (auto& block : *blocks_) x = block->as<ConvBlock>()->forward(x);
  x = F::interpolate(x, F::InterpolateFuncOptions()
                            .size(std::vector<int64_t>{2 * query_features.size(2), 2 * query_features.size(3)})
                            .mode(torch::kBilinear)
                            .align_corners(false));
  return {predictor_(x), grid_};
}

Prediction aggregate(const CellLogits& cells, const MaskStack& masks, std::pair<int64_t, int64_t> out_hw,
                     AggregationMode mode, double eps) {
  const int grid = cells.grid;
  const int64_t planes = int64_t{grid} * grid;
  if (cells.logits.dim() != 4 || cells.logits.size(1) != 2 || cells.logits.size(2) != grid ||
      cells.logits.size(3) != grid) {
    throw ContractError("cell logits must be B×2×S×S, got " + c10::str(cells.logits.sizes()));
  }
  if (masks.logits.dim() != 4 || masks.logits.size(1) != planes || masks.logits.size(0) != cells.logits.size(0)) {
    throw ContractError("mask stack " + c10::str(masks.logits.sizes()) + " does not carry S² = " +
                        std::to_string(planes) + " planes");
  }
  const int64_t batch = masks.logits.size(0);
  const int64_t hm = masks.logits.size(2);
  const int64_t wm = masks.logits.size(3);
  auto probs = torch::softmax(cells.logits, 1).select(1, 1);  // B×S×S
  auto weights = probs.reshape({batch, 1, planes});
  auto flat = masks.logits.reshape({batch, planes, hm * wm});
  torch::Tensor score;
  if (mode == AggregationMode::kSigmoidThenSum) {
    score = torch::bmm(weights, torch::sigmoid(flat));
  } else {
    score = torch::sigmoid(torch::bmm(weights, flat));
  }
  score = score.reshape({batch, 1, hm, wm}).clamp(eps, 1.0 - eps);
  if (out_hw.first != hm || out_hw.second != wm) {
    score = F::interpolate(score, F::InterpolateFuncOptions()
                                      .size(std::vector<int64_t>{out_hw.first, out_hw.second})
                                      .mode(torch::kBilinear)
                                      .align_corners(false))
                .clamp(eps, 1.0 - eps);
  }
  score = score.squeeze(1);
  return {score, score.gt(0.5).to(score.scalar_type()), probs};
}

EpisodeBatch collate(const std::vector<Episode>& episodes) {
  if (episodes.empty()) throw ContractError("cannot collate an empty batch");
  const int shots = episodes.front().shots();
  std::vector<torch::Tensor> qi, qm, si, sm;
  EpisodeBatch batch;
  for (const auto& e : episodes) {
    if (e.shots() != shots) throw ContractError("episodes in a batch must share K");
    if (e.query_image.sizes() != episodes.front().query_image.sizes()) {
      throw ContractError("episodes in a batch must share the input size");
    }
    qi.push_back(e.query_image);
    qm.push_back(e.query_mask);
    std::vector<torch::Tensor> imgs, msks;
    for (const auto& s : e.support) {
      if (s.image.sizes() != e.query_image.sizes()) throw ContractError("support and query sizes differ");
      imgs.push_back(s.image);
      msks.push_back(s.mask);
    }
    si.push_back(torch::stack(imgs));
    sm.push_back(torch::stack(msks));
    batch.class_ids.push_back(e.class_id);
  }
  batch.query_images = torch::stack(qi);
  batch.query_masks = torch::stack(qm);
  batch.support_images = torch::stack(si);
  batch.support_masks = torch::stack(sm);
  return batch;
}

ManetImpl::ManetImpl(ModelConfig config, std::shared_ptr<Backbone> backbone)
    : config_(config), backbone_(std::move(backbone)) {
  if (config_.grid < 1 || config_.grid > 64) throw ConfigError("grid size must be in [1, 64]");
  if (config_.channels < 2) throw ConfigError("branch width must be >= 2");
  register_module("backbone", backbone_);
  torch::manual_seed(config_.seed);
  compress_ = register_module("compress", nn::Conv2d(nn::Conv2dOptions(backbone_->mid_channels(), config_.channels, 1)));
  category_ = register_module("category", CategoryBranch(config_.channels, config_.grid));
  mask_ = register_module("mask", MaskBranch(config_.channels, config_.grid, config_.coord_channels));
  torch::NoGradGuard no_grad;
  for (auto* child : {static_cast<nn::Module*>(compress_.get()), static_cast<nn::Module*>(category_.get()),
                      static_cast<nn::Module*>(mask_.get())}) {
    for (auto& m : child->modules(true)) {
      if (auto* conv = m->as<nn::Conv2d>()) {
        nn::init::kaiming_normal_(conv->weight, 0.0, torch::kFanIn, torch::kReLU);
        if (conv->bias.defined()) conv->bias.zero_();
      }
    }
  }
  // Near-zero output layers; every mask plane starts at sigmoid = 1/S².
  const double cells = static_cast<double>(config_.grid) * config_.grid;
  nn::init::normal_(category_->classifier()->weight, 0.0, 0.01);
  nn::init::normal_(mask_->predictor()->weight, 0.0, 0.01);
  mask_->predictor()->bias.fill_(cells > 1 ? -std::log(cells - 1) : 0.0);
}

torch::Tensor ManetImpl::compress(const torch::Tensor& mid) { return torch::relu(compress_(mid)); }

ForwardOutput ManetImpl::forward(const EpisodeBatch& batch, std::optional<std::pair<int64_t, int64_t>> out_hw) {
  const int64_t shots = batch.shots();
  if (shots < 1) throw ContractError("episode batch has no support shots");
  auto dtype = compress_->weight.scalar_type();
  auto query = backbone_->extract(batch.query_images.to(dtype));
  auto query_features = compress(query.mid);
  const int64_t h = query_features.size(2);
  const int64_t w = query_features.size(3);

  std::vector<Prototype> prototypes;
  std::vector<CorrelationMap> maps;
  for (int64_t k = 0; k < shots; ++k) {
    auto support = backbone_->extract(batch.support_images.select(1, k).to(dtype));
    auto mask_ds = downsample_support_mask(batch.support_masks.select(1, k).to(dtype), h, w);
    prototypes.push_back(masked_gap(compress(support.mid), mask_ds, config_.eps));
    maps.push_back(correlation_map(query.high, support.high, mask_ds, config_.eps));
  }
  auto [prototype, correlation] = fuse_shots(prototypes, maps, config_.fusion);

  ForwardOutput out;
  out.cells = category_->forward(query_features, prototype, correlation);
  out.masks = mask_->forward(query_features);
  const auto target = out_hw.value_or(std::pair<int64_t, int64_t>{batch.query_images.size(2), batch.query_images.size(3)});
  out.prediction = aggregate(out.cells, out.masks, target, config_.aggregation, config_.eps);
  out.prototype = prototype;
  out.correlation = correlation;
  return out;
}

std::vector<torch::Tensor> ManetImpl::head_parameters() const {
  std::vector<torch::Tensor> params;
  for (const auto& p : named_parameters(true)) {
    if (!p.key().starts_with("backbone.")) params.push_back(p.value());
  }
  return params;
}

std::vector<torch::Tensor> ManetImpl::trainable_parameters() const {
  std::vector<torch::Tensor> params = head_parameters();
  if (backbone_->trainable()) {
    for (const auto& p : backbone_->parameters()) params.push_back(p);
  }
  return params;
}

int64_t ManetImpl::head_parameter_count() const {
  int64_t total = 0;
  for (const auto& p : head_parameters()) total += p.numel();
  return total;
}

Manet make_model(const ModelConfig& model_config, const BackboneConfig& backbone_config) {
  return Manet(model_config, make_backbone(backbone_config));
}

}  // namespace manet
