#pragma once

#include <utility>

#include <torch/torch.h>

#include "manet/episodes.hpp"

namespace manet {

/// Which geometric augmentations are active, and their ranges.
struct AugmentConfig {
  bool hflip = false;
  bool scale = false;
  bool rotate = false;
  bool shift = false;
  double scale_min = 0.8;
  double scale_max = 1.25;
  double max_rotation_deg = 10.0;
  double max_shift = 0.1;  // fraction of the image side

  bool any() const { return hflip || scale || rotate || shift; }
  static AugmentConfig all() { return {true, true, true, true}; }
};

/// One concrete transform. Shifts are fractions of width/height.
struct AffineParams {
  bool flip = false;
  double scale = 1.0;
  double angle_deg = 0.0;
  double shift_x = 0.0;
  double shift_y = 0.0;

  bool is_warp_identity() const { return scale == 1.0 && angle_deg == 0.0 && shift_x == 0.0 && shift_y == 0.0; }
};

/// Draws transform parameters; ranges outside the documented bounds are clamped.
AffineParams sample_affine(const AugmentConfig& config, Rng& rng);

/// Applies the transform about the image centre: flip first (exact index
/// reversal), then scale/rotate/shift. The image is resampled bilinearly, the
/// mask with nearest neighbour. Output keeps the input size; uncovered pixels are 0.
std::pair<torch::Tensor, torch::Tensor> apply_affine(const torch::Tensor& image, const torch::Tensor& mask,
                                                     const AffineParams& params);

std::pair<torch::Tensor, torch::Tensor> augment(const torch::Tensor& image, const torch::Tensor& mask, Rng& rng,
                                                const AugmentConfig& config);

/// Augments every image of an episode independently. A support whose mask
/// loses all foreground is retried, then kept unaugmented.
Episode augment_episode(const Episode& episode, Rng& rng, const AugmentConfig& config);

}  // namespace manet
