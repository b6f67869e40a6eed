#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "manet/backbone.hpp"
#include "manet/correlation.hpp"
#include "manet/episodes.hpp"

namespace manet {

/// How mask planes and cell probabilities combine into the score map.
enum class AggregationMode {
  kSigmoidThenSum,  // score = Σ_k p_k·σ(m_k)
  kSumThenSigmoid,  // score = σ(Σ_k p_k·m_k)
};

struct ModelConfig {
  int grid = 12;                   // S
  int64_t channels = 256;          // width of compression and branch blocks
  bool coord_channels = true;
  AggregationMode aggregation = AggregationMode::kSigmoidThenSum;
  ShotFusion fusion = ShotFusion::kNormalizeThenAverage;
  double eps = kNormEpsilon;
  std::uint64_t seed = 1;
};

/// Per-cell background/foreground logits, laid out B×2×S×S (channel 0 = bg).
struct CellLogits {
  torch::Tensor logits;
  int grid = 0;
};

/// S² mask logit planes, B×S²×H_m×W_m; plane k belongs to cell (k / S, k % S).
struct MaskStack {
  torch::Tensor logits;
  int grid = 0;
};

struct Prediction {
  torch::Tensor score_map;    // B×H×W in [ε, 1−ε]
  torch::Tensor binary_mask;  // B×H×W, 1 where score_map > 0.5
  torch::Tensor cell_probs;   // B×S×S foreground probability
};

/// 2×h×w grid: channel 0 = x, channel 1 = y, each linearly spaced over
/// [−1, 1] inclusive along its axis (0 for a length-1 axis).
torch::Tensor coord_channels(int64_t h, int64_t w, torch::TensorOptions options = {});

/// 3×3 convolution, group normalization and ReLU.
class ConvBlockImpl : public torch::nn::Module {
 public:
  ConvBlockImpl(int64_t in, int64_t out);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv_{nullptr};
  torch::nn::GroupNorm norm_{nullptr};
};
TORCH_MODULE(ConvBlock);

/// Query features + expanded prototype + correlation map → per-cell logits.
class CategoryBranchImpl : public torch::nn::Module {
 public:
  CategoryBranchImpl(int64_t channels, int grid);
  CellLogits forward(const torch::Tensor& query_features, const Prototype& prototype, const CorrelationMap& corr);
  int grid() const { return grid_; }
  torch::nn::Conv2d& classifier() { return classifier_; }

 private:
  int grid_;
  torch::nn::Conv2d merge_{nullptr};
  torch::nn::ModuleList blocks_{nullptr};
  torch::nn::Conv2d classifier_{nullptr};
};
TORCH_MODULE(CategoryBranch);

/// Query features (+ coordinates) → S² mask planes at twice the feature size.
class MaskBranchImpl : public torch::nn::Module {
 public:
  MaskBranchImpl(int64_t channels, int grid, bool use_coords);
  MaskStack forward(const torch::Tensor& query_features);
  int grid() const { return grid_; }
  torch::nn::Conv2d& predictor() { return predictor_; }

 private:
  int grid_;
  bool use_coords_;
  torch::nn::ModuleList blocks_{nullptr};
  torch::nn::Conv2d predictor_{nullptr};
};
TORCH_MODULE(MaskBranch);

/// Weighted sum of mask planes by cell foreground probability, computed as a
/// (1×S²)·(S²×H_m W_m) product per sample, clamped to [ε, 1−ε] and resized
/// bilinearly to out_hw.
Prediction aggregate(const CellLogits& cells, const MaskStack& masks, std::pair<int64_t, int64_t> out_hw,
                     AggregationMode mode = AggregationMode::kSigmoidThenSum, double eps = kNormEpsilon);

/// Episodes stacked along the batch dimension. All must share size and K.
struct EpisodeBatch {
  torch::Tensor query_images;    // B×3×H×W
  torch::Tensor query_masks;     // B×H×W
  torch::Tensor support_images;  // B×K×3×H×W
  torch::Tensor support_masks;   // B×K×H×W
  std::vector<ClassId> class_ids;

  int64_t size() const { return query_images.size(0); }
  int64_t shots() const { return support_images.size(1); }
};

EpisodeBatch collate(const std::vector<Episode>& episodes);

struct ForwardOutput {
  Prediction prediction;
  CellLogits cells;
  MaskStack masks;
  Prototype prototype;
  CorrelationMap correlation;
};

class ManetImpl : public torch::nn::Module {
 public:
  ManetImpl(ModelConfig config, std::shared_ptr<Backbone> backbone);

  /// Backbone → compression → prototypes and correlation maps (fused over
  /// shots) → both branches → aggregation. The score map has the query's
  /// input size unless out_hw is given.
  ForwardOutput forward(const EpisodeBatch& batch, std::optional<std::pair<int64_t, int64_t>> out_hw = std::nullopt);

  const ModelConfig& config() const { return config_; }
  Backbone& backbone() { return *backbone_; }
  const Backbone& backbone() const { return *backbone_; }

  /// Parameters outside the backbone.
  std::vector<torch::Tensor> head_parameters() const;
  /// Head parameters plus the backbone's when it is trainable.
  std::vector<torch::Tensor> trainable_parameters() const;
  int64_t head_parameter_count() const;

 private:
  torch::Tensor compress(const torch::Tensor& mid);

  ModelConfig config_;
  std::shared_ptr<Backbone> backbone_;
  torch::nn::Conv2d compress_{nullptr};
  CategoryBranch category_{nullptr};
  MaskBranch mask_{nullptr};
};
TORCH_MODULE(Manet);

/// Builds backbone and head with seeded fan-in initialisation.
Manet make_model(const ModelConfig& model_config, const BackboneConfig& backbone_config);

}  // namespace manet
