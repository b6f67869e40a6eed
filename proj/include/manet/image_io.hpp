#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <torch/torch.h>

namespace manet {

/// 8-bit interleaved raster, row-major, `channels` samples per pixel (1 or 3).
struct RawImage {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(int y, int x, int c = 0) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t& at(int y, int x, int c = 0) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

/// Reads a PNG. Palette images return raw palette indices (one channel), which
/// is what label-map annotations such as VOC SegmentationClass store. Gray
/// stays one channel; RGB(A) becomes three channels. 16-bit is reduced to 8.
RawImage read_png(const std::filesystem::path& path);

/// Reads a baseline or progressive JPEG into RGB (or gray for 1-component files).
RawImage read_jpeg(const std::filesystem::path& path);

/// Dispatches on the file signature (PNG or JPEG).
RawImage read_image(const std::filesystem::path& path);

/// Writes 1- or 3-channel 8-bit PNG. Output bytes depend only on the pixels.
void write_png(const std::filesystem::path& path, const RawImage& image);

/// 3×H×W float tensor in [0,1]; gray inputs are replicated to three channels.
torch::Tensor image_to_tensor(const RawImage& image);

/// H×W float tensor with values {0,1}: 1 where the sample is > 127.
torch::Tensor binary_mask_to_tensor(const RawImage& mask);

/// H×W float tensor with values {0,1}: 1 where the sample equals `label`.
torch::Tensor label_mask_to_tensor(const RawImage& mask, int label);

/// Inverse of image_to_tensor (values are clamped and rounded).
RawImage tensor_to_image(const torch::Tensor& chw);

/// {0,1} (or [0,1]) H×W tensor to a single-channel 0/255 raster.
RawImage mask_tensor_to_image(const torch::Tensor& hw);

}  // namespace manet
