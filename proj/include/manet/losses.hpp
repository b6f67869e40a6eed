#pragma once

#include <torch/torch.h>

#include "manet/correlation.hpp"
#include "manet/model.hpp"

namespace manet {

enum class PixelLossMode {
  kBinaryCrossEntropy,  // −mean[y·log p + (1−y)·log(1−p)]
  kPositiveOnly,        // −mean[y·log p]
};

/// Normalized per-cell foreground share of the ground truth, B×S×S (or S×S).
struct GridTarget {
  torch::Tensor values;
  double epsilon = kNormEpsilon;
};

struct LossReport {
  double pixel = 0.0;
  double grid = 0.0;
  double total = 0.0;
  double lambda = 1.0;
  /// Differentiable pixel + λ·grid when built from tensors; undefined otherwise.
  torch::Tensor objective;
};

/// Mean over every pixel (and batch element). Shapes must match exactly.
torch::Tensor pixel_loss(const torch::Tensor& score_map, const torch::Tensor& gt_mask,
                         PixelLossMode mode = PixelLossMode::kBinaryCrossEntropy);

/// Cell (i, j) covers rows ⌊iH/S⌋ … ⌊(i+1)H/S⌋−1 and the analogous columns;
/// per-cell means are min-max normalized per sample. Requires H, W ≥ S.
GridTarget grid_target(const torch::Tensor& gt_mask, int grid, double eps = kNormEpsilon);

/// −(1/S²) Σ_i G_i · log softmax(g_i)_fg, averaged over the batch.
torch::Tensor grid_loss(const CellLogits& cells, const GridTarget& target);

LossReport total_loss(double pixel, double grid, double lambda = 1.0);
LossReport total_loss(const torch::Tensor& pixel, const torch::Tensor& grid, double lambda = 1.0);

}  // namespace manet
