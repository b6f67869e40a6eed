#pragma once

#include <filesystem>

#include "manet/image_io.hpp"
#include "manet/model.hpp"

namespace manet {

struct MontageOptions {
  int tile_size = 32;
  bool fg_only = false;
};

/// Grid of all S² sigmoid mask planes of one sample: plane k = i·S + j is
/// drawn as a gray tile at row i, column j. Tiles of foreground cells
/// (p_fg > 0.5) get a red border; with fg_only the other tiles stay black.
/// The image is tile_size·S pixels per side.
RawImage mask_montage(const CellLogits& cells, const MaskStack& masks, const MontageOptions& options = {},
                      int64_t sample = 0);

/// Query image with the binary prediction tinted red.
RawImage prediction_overlay(const torch::Tensor& image, const torch::Tensor& binary_mask, double alpha = 0.5);

}  // namespace manet
