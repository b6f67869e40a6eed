#include "manet/correlation.hpp"

#include <limits>

#include "manet/errors.hpp"

namespace manet {
namespace F = torch::nn::functional;

torch::Tensor normalize_min_max(const torch::Tensor& batched, double eps) {
  if (batched.dim() < 1) throw ContractError("normalize_min_max needs a batched tensor");
  auto flat = batched.reshape({batched.size(0), -1});
  auto lo = std::get<0>(flat.min(1, true));
  auto hi = std::get<0>(flat.max(1, true));
  return ((flat - lo) / (hi - lo + eps)).reshape(batched.sizes());
}

torch::Tensor downsample_support_mask(const torch::Tensor& masks, int64_t height, int64_t width) {
  if (masks.dim() != 3) throw ContractError("downsample_support_mask expects B×H×W masks");
  auto full = masks.to(torch::kFloat32);
  auto small = F::interpolate(full.unsqueeze(1), F::InterpolateFuncOptions()
                                                     .size(std::vector<int64_t>{height, width})
                                                     .mode(torch::kNearest))
                   .squeeze(1)
                   .contiguous();
  const int64_t batch = masks.size(0);
  const int64_t h = masks.size(1);
  const int64_t w = masks.size(2);
  for (int64_t b = 0; b < batch; ++b) {
    if (small[b].sum().item<double>() > 0) continue;
    auto fg = full[b].nonzero();
    if (fg.size(0) == 0) throw DegenerateSupportError("support mask has no foreground pixels");
    auto coords = fg.to(torch::kFloat64);
    auto centroid = coords.mean(0, true);
    auto nearest = (coords - centroid).pow(2).sum(1).argmin().item<int64_t>();
    const int64_t y = fg[nearest][0].item<int64_t>();
    const int64_t x = fg[nearest][1].item<int64_t>();
    const int64_t cy = std::min(height - 1, y * height / h);
    const int64_t cx = std::min(width - 1, x * width / w);
    small[b][cy][cx] = 1.0f;
  }
  return small.to(masks.scalar_type());
}

Prototype masked_gap(const torch::Tensor& support_mid, const torch::Tensor& support_mask_ds, double eps) {
  const bool unbatched = support_mid.dim() == 3;
  auto feat = unbatched ? support_mid.unsqueeze(0) : support_mid;
  auto mask = unbatched ? support_mask_ds.unsqueeze(0) : support_mask_ds;
  if (feat.dim() != 4 || mask.dim() != 3 || feat.size(0) != mask.size(0) || feat.size(2) != mask.size(1) ||
      feat.size(3) != mask.size(2)) {
    throw ContractError("masked_gap: features " + c10::str(support_mid.sizes()) + " and mask " +
                        c10::str(support_mask_ds.sizes()) + " disagree");
  }
  mask = mask.to(feat.scalar_type());
  auto area = mask.sum({1, 2});
  if ((area <= 0).any().item<bool>()) throw DegenerateSupportError("masked_gap: mask has no foreground cell");
  auto pooled = (feat * mask.unsqueeze(1)).sum({2, 3}) / (area.unsqueeze(1) + eps);
  return {unbatched ? pooled.squeeze(0) : pooled};
}

CorrelationMap correlation_map(const torch::Tensor& query_high, const torch::Tensor& support_high,
                               const torch::Tensor& support_mask_ds, double eps) {
  const bool unbatched = query_high.dim() == 3;
  auto q = unbatched ? query_high.unsqueeze(0) : query_high;
  auto s = unbatched ? support_high.unsqueeze(0) : support_high;
  auto mask = unbatched ? support_mask_ds.unsqueeze(0) : support_mask_ds;
  if (q.dim() != 4 || q.sizes() != s.sizes() || mask.dim() != 3 || mask.size(0) != q.size(0) ||
      mask.size(1) != s.size(2) || mask.size(2) != s.size(3)) {
    throw ContractError("correlation_map: query " + c10::str(query_high.sizes()) + ", support " +
                        c10::str(support_high.sizes()) + " and mask " + c10::str(support_mask_ds.sizes()) +
                        " disagree");
  }
  const int64_t batch = q.size(0);
  const int64_t channels = q.size(1);
  const int64_t h = q.size(2);
  const int64_t w = q.size(3);
  auto fg = mask.reshape({batch, 1, h * w}).gt(0);
  if (!fg.any(2).all().item<bool>()) throw DegenerateSupportError("correlation_map: mask has no foreground cell");

  auto qn = F::normalize(q.reshape({batch, channels, h * w}), F::NormalizeFuncOptions().dim(1).eps(1e-12));
  auto sn = F::normalize(s.reshape({batch, channels, h * w}), F::NormalizeFuncOptions().dim(1).eps(1e-12));
  auto cosine = torch::bmm(qn.transpose(1, 2), sn);  // B × HW_q × HW_s
  auto masked = cosine.masked_fill(fg.logical_not(), -std::numeric_limits<double>::infinity());
  auto raw = std::get<0>(masked.max(2)).reshape({batch, h, w});
  auto values = normalize_min_max(raw, eps);
  if (unbatched) return {values.squeeze(0), raw.squeeze(0), eps};
  return {values, raw, eps};
}

torch::Tensor mean_over_shots(const std::vector<torch::Tensor>& shots) {
  if (shots.empty()) throw ContractError("cannot average an empty list of shots");
  if (shots.size() == 1) return shots.front();
  auto stacked = torch::stack(shots, 0);
  auto sorted = std::get<0>(stacked.sort(0));
  auto reference = sorted.select(0, 0);
  return reference + (sorted - reference.unsqueeze(0)).sum(0) / static_cast<double>(shots.size());
}

std::pair<Prototype, CorrelationMap> fuse_shots(const std::vector<Prototype>& prototypes,
                                                const std::vector<CorrelationMap>& maps, ShotFusion order) {
  if (prototypes.empty() || maps.empty()) throw ContractError("fuse_shots needs at least one shot");
  if (prototypes.size() != maps.size()) throw ContractError("fuse_shots: prototype and map counts differ");
  std::vector<torch::Tensor> vectors, values, raws;
  for (const auto& p : prototypes) vectors.push_back(p.vector);
  for (const auto& m : maps) {
    values.push_back(m.values);
    raws.push_back(m.raw.defined() ? m.raw : m.values);
  }
  CorrelationMap fused;
  fused.epsilon = maps.front().epsilon;
  fused.raw = mean_over_shots(raws);
  if (order == ShotFusion::kNormalizeThenAverage) {
    fused.values = mean_over_shots(values);
  } else {
    const bool unbatched = fused.raw.dim() == 2;
    auto batched = unbatched ? fused.raw.unsqueeze(0) : fused.raw;
    auto normalized = normalize_min_max(batched, fused.epsilon);
    fused.values = unbatched ? normalized.squeeze(0) : normalized;
  }
  return {Prototype{mean_over_shots(vectors)}, fused};
}

}  // namespace manet
