#include "manet/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "manet/errors.hpp"

namespace manet {

AffineParams sample_affine(const AugmentConfig& config, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  AffineParams p;
  if (config.hflip) p.flip = unit(rng) < 0.5;
  if (config.scale) {
    const double lo = std::clamp(std::min(config.scale_min, config.scale_max), 0.5, 2.0);
    const double hi = std::clamp(std::max(config.scale_min, config.scale_max), 0.5, 2.0);
    p.scale = lo + (hi - lo) * unit(rng);
  }
  if (config.rotate) {
    const double r = std::clamp(std::abs(config.max_rotation_deg), 0.0, 180.0);
    p.angle_deg = (2.0 * unit(rng) - 1.0) * r;
  }
  if (config.shift) {
    const double s = std::clamp(std::abs(config.max_shift), 0.0, 0.5);
    p.shift_x = (2.0 * unit(rng) - 1.0) * s;
    p.shift_y = (2.0 * unit(rng) - 1.0) * s;
  }
  return p;
}

std::pair<torch::Tensor, torch::Tensor> apply_affine(const torch::Tensor& image, const torch::Tensor& mask,
                                                     const AffineParams& params) {
  if (image.dim() != 3 || mask.dim() != 2 || image.size(1) != mask.size(0) || image.size(2) != mask.size(1)) {
    throw ContractError("apply_affine: image must be C×H×W and mask H×W of the same size");
  }
  torch::Tensor img = image.to(torch::kFloat32).contiguous();
  torch::Tensor msk = mask.to(torch::kFloat32).contiguous();
  if (params.flip) {
    img = img.flip({2}).contiguous();
    msk = msk.flip({1}).contiguous();
  }
  if (params.is_warp_identity()) return {img, msk};

  const int64_t channels = img.size(0);
  const int64_t h = img.size(1);
  const int64_t w = img.size(2);
  auto out_img = torch::zeros_like(img);
  auto out_msk = torch::zeros_like(msk);
  const float* src = img.data_ptr<float>();
  const float* src_m = msk.data_ptr<float>();
  float* dst = out_img.data_ptr<float>();
  float* dst_m = out_msk.data_ptr<float>();

  const double scale = std::max(params.scale, 1e-3);
  const double theta = params.angle_deg * std::numbers::pi / 180.0;
  const double cos_t = std::cos(theta);
  const double sin_t = std::sin(theta);
  const double cx = 0.5 * static_cast<double>(w);
  const double cy = 0.5 * static_cast<double>(h);
  const double tx = params.shift_x * static_cast<double>(w);
  const double ty = params.shift_y * static_cast<double>(h);
  const std::size_t plane = static_cast<std::size_t>(h * w);

  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      // Inverse map of: dst = R·S·(src − c) + c + t, on pixel centres.
      const double dx = (x + 0.5) - cx - tx;
      const double dy = (y + 0.5) - cy - ty;
      const double sx = (cos_t * dx + sin_t * dy) / scale + cx;
      const double sy = (-sin_t * dx + cos_t * dy) / scale + cy;
      const std::size_t out_index = static_cast<std::size_t>(y * w + x);

      const auto mx = static_cast<int64_t>(std::floor(sx));
      const auto my = static_cast<int64_t>(std::floor(sy));
      if (mx >= 0 && mx < w && my >= 0 && my < h) dst_m[out_index] = src_m[my * w + mx];

      const double fx = sx - 0.5;
      const double fy = sy - 0.5;
      const auto x0 = static_cast<int64_t>(std::floor(fx));
      const auto y0 = static_cast<int64_t>(std::floor(fy));
      const double ax = fx - x0;
      const double ay = fy - y0;
      for (int64_t c = 0; c < channels; ++c) {
        const float* base = src + c * plane;
        double acc = 0.0;
        for (int j = 0; j < 2; ++j) {
          for (int i = 0; i < 2; ++i) {
            const int64_t xx = x0 + i;
            const int64_t yy = y0 + j;
            if (xx < 0 || xx >= w || yy < 0 || yy >= h) continue;
            acc += (i ? ax : 1.0 - ax) * (j ? ay : 1.0 - ay) * base[yy * w + xx];
          }
        }
        dst[c * plane + out_index] = static_cast<float>(acc);
      }
    }
  }
  return {out_img, out_msk};
}

std::pair<torch::Tensor, torch::Tensor> augment(const torch::Tensor& image, const torch::Tensor& mask, Rng& rng,
                                                const AugmentConfig& config) {
  if (!config.any()) return {image.clone(), mask.clone()};
  return apply_affine(image, mask, sample_affine(config, rng));
}

Episode augment_episode(const Episode& episode, Rng& rng, const AugmentConfig& config) {
  if (!config.any()) return episode;
  Episode out = episode;
  std::tie(out.query_image, out.query_mask) = augment(episode.query_image, episode.query_mask, rng, config);
  for (std::size_t k = 0; k < out.support.size(); ++k) {
    const auto& original = episode.support[k];
    bool done = false;
    for (int attempt = 0; attempt < 5 && !done; ++attempt) {
      auto [img, msk] = augment(original.image, original.mask, rng, config);
      if (msk.sum().item<double>() > 0.0) {
        out.support[k].image = img;
        out.support[k].mask = msk;
        done = true;
      }
    }
    if (!done) out.support[k] = original;
  }
  return out;
}

}  // namespace manet
