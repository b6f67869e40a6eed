#include "manet/losses.hpp"

#include <vector>

#include "manet/errors.hpp"

namespace manet {

torch::Tensor pixel_loss(const torch::Tensor& score_map, const torch::Tensor& gt_mask, PixelLossMode mode) {
  if (score_map.sizes() != gt_mask.sizes()) {
    throw ContractError("pixel_loss: prediction " + c10::str(score_map.sizes()) + " vs ground truth " +
                        c10::str(gt_mask.sizes()));
  }
  auto y = gt_mask.to(score_map.scalar_type());
  auto positive = y * torch::log(score_map);
  if (mode == PixelLossMode::kPositiveOnly) return -positive.mean();
  return -(positive + (1.0 - y) * torch::log(1.0 - score_map)).mean();
}

GridTarget grid_target(const torch::Tensor& gt_mask, int grid, double eps) {
  const bool unbatched = gt_mask.dim() == 2;
  auto masks = (unbatched ? gt_mask.unsqueeze(0) : gt_mask).to(torch::kFloat64).contiguous();
  if (masks.dim() != 3) throw ContractError("grid_target expects H×W or B×H×W masks");
  const int64_t batch = masks.size(0);
  const int64_t h = masks.size(1);
  const int64_t w = masks.size(2);
  if (grid < 1 || h < grid || w < grid) {
    throw ContractError("grid_target: mask " + c10::str(gt_mask.sizes()) + " smaller than grid " + std::to_string(grid));
  }
  auto means = torch::zeros({batch, grid, grid}, torch::kFloat64);
  const double* src = masks.data_ptr<double>();
  double* dst = means.data_ptr<double>();
  std::vector<int64_t> rows(grid + 1), cols(grid + 1);
  for (int i = 0; i <= grid; ++i) {
    rows[i] = i * h / grid;
    cols[i] = i * w / grid;
  }
  for (int64_t b = 0; b < batch; ++b) {
    const double* plane = src + b * h * w;
    for (int i = 0; i < grid; ++i) {
      for (int j = 0; j < grid; ++j) {
        double sum = 0.0;
        for (int64_t y = rows[i]; y < rows[i + 1]; ++y) {
          for (int64_t x = cols[j]; x < cols[j + 1]; ++x) sum += plane[y * w + x];
        }
        const double area = static_cast<double>((rows[i + 1] - rows[i]) * (cols[j + 1] - cols[j]));
        dst[(b * grid + i) * grid + j] = sum / area;
      }
    }
  }
  auto normalized = normalize_min_max(means, eps).to(gt_mask.is_floating_point() ? gt_mask.scalar_type() : torch::kFloat32);
  return {unbatched ? normalized.squeeze(0) : normalized, eps};
}

torch::Tensor grid_loss(const CellLogits& cells, const GridTarget& target) {
  auto values = target.values.dim() == 2 ? target.values.unsqueeze(0) : target.values;
  const auto& logits = cells.logits;
  if (logits.dim() != 4 || logits.size(1) != 2 || values.dim() != 3 || logits.size(0) != values.size(0) ||
      logits.size(2) != values.size(1) || logits.size(3) != values.size(2)) {
    throw ContractError("grid_loss: logits " + c10::str(logits.sizes()) + " vs target " +
                        c10::str(target.values.sizes()));
  }
  auto log_fg = torch::log_softmax(logits, 1).select(1, 1);
  auto weighted = values.to(logits.scalar_type()) * log_fg;
  const double cells_per_map = static_cast<double>(values.size(1) * values.size(2));
  return -(weighted.sum({1, 2}) / cells_per_map).mean();
}

LossReport total_loss(double pixel, double grid, double lambda) {
  LossReport r;
  r.pixel = pixel;
  r.grid = grid;
  r.lambda = lambda;
  r.total = pixel + lambda * grid;
  return r;
}

LossReport total_loss(const torch::Tensor& pixel, const torch::Tensor& grid, double lambda) {
  LossReport r = total_loss(pixel.item<double>(), grid.item<double>(), lambda);
  r.objective = lambda == 0.0 ? pixel : pixel + lambda * grid;
  return r;
}

}  // namespace manet
