#pragma once

#include <utility>
#include <vector>

#include <torch/torch.h>

namespace manet {

inline constexpr double kNormEpsilon = 1e-7;

/// Class vector from masked global average pooling; B×C (or C when unbatched).
struct Prototype {
  torch::Tensor vector;
};

/// Per-position similarity to the support foreground, normalized to [0,1];
/// B×H_f×W_f (or H_f×W_f). `raw` keeps the pre-normalization maximum cosine.
struct CorrelationMap {
  torch::Tensor values;
  torch::Tensor raw;
  double epsilon = kNormEpsilon;
};

/// Order of min-max normalization and shot averaging when K > 1.
enum class ShotFusion { kNormalizeThenAverage, kAverageThenNormalize };

/// (x − min) / (max − min + eps), taken independently for each leading-dim
/// sample over all remaining dims. Shared by the correlation map and grid target.
torch::Tensor normalize_min_max(const torch::Tensor& batched, double eps = kNormEpsilon);

/// Nearest-neighbour downsample of B×H×W support masks to the feature grid.
/// If a mask loses all foreground, the cell holding the foreground pixel
/// nearest the mask centroid is switched on. An all-zero full-resolution mask
/// raises DegenerateSupportError.
torch::Tensor downsample_support_mask(const torch::Tensor& masks, int64_t height, int64_t width);

/// Σ_p feat(p)·mask(p) / (Σ_p mask(p) + ε). Accepts C×H×W with H×W or the
/// batched B×C×H×W with B×H×W. An all-zero mask raises DegenerateSupportError.
Prototype masked_gap(const torch::Tensor& support_mid, const torch::Tensor& support_mask_ds,
                     double eps = kNormEpsilon);

/// For each query position, the maximum cosine similarity to any foreground
/// support position (zero vectors count as cosine 0), then min-max normalized.
CorrelationMap correlation_map(const torch::Tensor& query_high, const torch::Tensor& support_high,
                               const torch::Tensor& support_mask_ds, double eps = kNormEpsilon);

/// Elementwise mean over shots. Values are sorted across shots before a
/// mean shifted by the smallest shot, so the result does not depend on shot
/// order and equals the input exactly when all shots agree.
torch::Tensor mean_over_shots(const std::vector<torch::Tensor>& shots);

/// Averages prototypes and normalized maps over K shots.
std::pair<Prototype, CorrelationMap> fuse_shots(const std::vector<Prototype>& prototypes,
                                                const std::vector<CorrelationMap>& maps,
                                                ShotFusion order = ShotFusion::kNormalizeThenAverage);

}  // namespace manet
