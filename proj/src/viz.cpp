#include "manet/viz.hpp"

#include "manet/errors.hpp"

namespace manet {
namespace F = torch::nn::functional;

RawImage mask_montage(const CellLogits& cells, const MaskStack& masks, const MontageOptions& options,
                      int64_t sample) {
  const int s = masks.grid;
  const int tile = options.tile_size;
  if (tile < 3) throw ConfigError("tile size must be at least 3");
  if (cells.grid != s || masks.logits.size(1) != static_cast<int64_t>(s) * s) {
    throw ContractError("cell grid and mask stack disagree");
  }
  torch::NoGradGuard no_grad;
  auto planes = torch::sigmoid(masks.logits.slice(0, sample, sample + 1).to(torch::kFloat32));
  planes = F::interpolate(planes, F::InterpolateFuncOptions()
                                      .size(std::vector<int64_t>{tile, tile})
                                      .mode(torch::kBilinear)
                                      .align_corners(false))
               .squeeze(0)
               .contiguous();
  auto p_fg = torch::softmax(cells.logits.slice(0, sample, sample + 1).to(torch::kFloat32), 1)
                  .select(1, 1)
                  .squeeze(0)
                  .contiguous();
  auto pa = planes.accessor<float, 3>();
  auto fa = p_fg.accessor<float, 2>();

  RawImage out;
  out.width = out.height = tile * s;
  out.channels = 3;
  out.pixels.assign(static_cast<std::size_t>(out.width) * out.height * 3, 0);
  for (int i = 0; i < s; ++i) {
    for (int j = 0; j < s; ++j) {
      const bool fg = fa[i][j] > 0.5f;
      if (options.fg_only && !fg) continue;
      const int k = i * s + j;
      for (int y = 0; y < tile; ++y) {
        for (int x = 0; x < tile; ++x) {
          const bool border = y == 0 || x == 0 || y == tile - 1 || x == tile - 1;
          const auto v = static_cast<std::uint8_t>(std::lround(std::clamp(pa[k][y][x], 0.0f, 1.0f) * 255.0f));
          const std::size_t idx = (static_cast<std::size_t>(i * tile + y) * out.width + (j * tile + x)) * 3;
          if (fg && border) {
            out.pixels[idx] = 255;
            out.pixels[idx + 1] = 0;
            out.pixels[idx + 2] = 0;
          } else {
            out.pixels[idx] = out.pixels[idx + 1] = out.pixels[idx + 2] = v;
          }
        }
      }
    }
  }
  return out;
}

RawImage prediction_overlay(const torch::Tensor& image, const torch::Tensor& binary_mask, double alpha) {
  if (image.dim() != 3 || image.size(0) != 3 || binary_mask.dim() != 2 ||
      image.size(1) != binary_mask.size(0) || image.size(2) != binary_mask.size(1)) {
    throw ContractError("overlay needs a 3×H×W image and an H×W mask");
  }
  torch::NoGradGuard no_grad;
  auto img = image.to(torch::kFloat32).clone();
  auto m = (binary_mask > 0.5).to(torch::kFloat32);
  img[0] = img[0] * (1 - alpha * m) + alpha * m;
  img[1] = img[1] * (1 - alpha * m);
  img[2] = img[2] * (1 - alpha * m);
  return tensor_to_image(img);
}

}  // namespace manet
