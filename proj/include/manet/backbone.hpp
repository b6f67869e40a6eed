#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>

#include <torch/torch.h>

namespace manet {

enum class BackboneKind { kTiny, kResNet50, kResNet101 };

std::string to_string(BackboneKind kind);
BackboneKind backbone_kind_from_string(const std::string& name);

struct BackboneConfig {
  BackboneKind kind = BackboneKind::kTiny;
  bool frozen = false;
  std::uint64_t seed = 1;
  /// Pickled name→tensor dict (torchvision state_dict naming); pretrained kinds only.
  std::string weights_path;
  std::array<double, 3> mean{0.5, 0.5, 0.5};
  std::array<double, 3> stddev{0.5, 0.5, 0.5};

  /// Defaults for a frozen ImageNet-pretrained ResNet.
  static BackboneConfig pretrained(BackboneKind kind, std::string weights);
};

/// Returns a copy of `config` with frozen = !flag.
BackboneConfig set_trainable(BackboneConfig config, bool flag);

/// Per-image features at a common resolution. `mid` feeds the prototype and
/// query features, `high` the correlation map.
struct FeatureSet {
  torch::Tensor mid;   // B×C_mid×H_f×W_f
  torch::Tensor high;  // B×C_high×H_f×W_f
  int stride = 8;
};

/// Feature side produced for a given input side: ceil(side / stride).
int64_t feature_side(int64_t input_side, int stride = 8);

class Backbone : public torch::nn::Module {
 public:
  explicit Backbone(BackboneConfig config) : config_(std::move(config)) {}

  /// `images` is B×3×H×W in [0,1]. Normalizes with the configured mean/std.
  /// A frozen backbone always runs in eval mode without recording gradients.
  FeatureSet extract(const torch::Tensor& images);

  /// Toggles gradient flow into the backbone parameters.
  void set_trainable(bool flag);
  bool trainable() const { return !config_.frozen; }

  const BackboneConfig& config() const { return config_; }
  virtual int64_t mid_channels() const = 0;
  virtual int64_t high_channels() const = 0;
  /// True when parameters come from a weights file rather than the seed.
  virtual bool pretrained() const = 0;

 protected:
  virtual FeatureSet forward_features(const torch::Tensor& normalized) = 0;

 private:
  BackboneConfig config_;
};

/// Three stride-2 stages (32/64/128 channels) and one dilated stride-1 stage.
/// mid = concat(stage2 resized to stage3, stage3) with 192 channels;
/// high = the extra stage with 128 channels.
class TinyBackbone : public Backbone {
 public:
  explicit TinyBackbone(const BackboneConfig& config);
  int64_t mid_channels() const override { return 192; }
  int64_t high_channels() const override { return 128; }
  bool pretrained() const override { return false; }

 protected:
  FeatureSet forward_features(const torch::Tensor& normalized) override;

 private:
  torch::nn::Sequential stage1_{nullptr}, stage2_{nullptr}, stage3_{nullptr}, stage4_{nullptr};
};

/// Bottleneck ResNet-50/101 with layer3/layer4 dilated (stride 8 overall).
/// mid = concat(layer2, layer3) (1536 channels), high = layer4 (2048).
/// Parameter names follow torchvision so a state_dict can be loaded directly.
class ResNetBackbone : public Backbone {
 public:
  explicit ResNetBackbone(const BackboneConfig& config);
  int64_t mid_channels() const override { return 512 + 1024; }
  int64_t high_channels() const override { return 2048; }
  bool pretrained() const override { return true; }

  /// Copies every parameter and buffer from a pickled dict file
  /// (e.g. `torch.save(dict(model.state_dict()), path)`). Missing keys and
  /// shape mismatches raise FormatError; extra keys (fc.*) are ignored.
  void load_weights(const std::string& path);

 protected:
  FeatureSet forward_features(const torch::Tensor& normalized) override;

 private:
  torch::nn::Conv2d conv1_{nullptr};
  torch::nn::BatchNorm2d bn1_{nullptr};
  torch::nn::Sequential layer1_{nullptr}, layer2_{nullptr}, layer3_{nullptr}, layer4_{nullptr};
};

/// Builds the configured backbone; pretrained kinds load `weights_path`
/// (ConfigError when empty). Initialisation is seeded by config.seed.
std::shared_ptr<Backbone> make_backbone(const BackboneConfig& config);

/// Writes a module's parameters and buffers as a pickled name→tensor dict,
/// the same format load_weights reads.
void save_weights_dict(torch::nn::Module& module, const std::string& path);

}  // namespace manet
