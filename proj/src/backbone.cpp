#include "manet/backbone.hpp"

#include <fstream>
#include <iterator>
#include <numeric>

#include <torch/serialize.h>

#include "manet/errors.hpp"

namespace manet {
namespace nn = torch::nn;
namespace F = torch::nn::functional;

std::string to_string(BackboneKind kind) {
  switch (kind) {
    case BackboneKind::kTiny: return "tiny";
    case BackboneKind::kResNet50: return "resnet50";
    case BackboneKind::kResNet101: return "resnet101";
  }
  return "tiny";
}

BackboneKind backbone_kind_from_string(const std::string& name) {
  if (name == "tiny") return BackboneKind::kTiny;
  if (name == "resnet50" || name == "pretrained-resnet50") return BackboneKind::kResNet50;
  if (name == "resnet101" || name == "pretrained-resnet101") return BackboneKind::kResNet101;
  throw ConfigError("unknown backbone '" + name + "' (expected tiny, resnet50 or resnet101)");
}

BackboneConfig BackboneConfig::pretrained(BackboneKind kind, std::string weights) {
  BackboneConfig c;
  c.kind = kind;
  c.frozen = true;
  c.weights_path = std::move(weights);
  c.mean = {0.485, 0.456, 0.406};
  c.stddev = {0.229, 0.224, 0.225};
  return c;
}

BackboneConfig set_trainable(BackboneConfig config, bool flag) {
  config.frozen = !flag;
  return config;
}

int64_t feature_side(int64_t input_side, int stride) { return (input_side + stride - 1) / stride; }

FeatureSet Backbone::extract(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != 3) {
    throw ContractError("backbone expects B×3×H×W images, got " + std::to_string(images.dim()) + "-d input");
  }
  auto opts = images.options();
  auto mean = torch::tensor({config_.mean[0], config_.mean[1], config_.mean[2]}, opts).view({1, 3, 1, 1});
  auto stddev = torch::tensor({config_.stddev[0], config_.stddev[1], config_.stddev[2]}, opts).view({1, 3, 1, 1});
  auto normalized = (images - mean) / stddev;
  if (config_.frozen) {
    torch::NoGradGuard no_grad;
    eval();
    return forward_features(normalized);
  }
  return forward_features(normalized);
}

void Backbone::set_trainable(bool flag) {
  config_.frozen = !flag;
  for (auto& p : parameters()) p.set_requires_grad(flag);
}

namespace {

nn::Sequential tiny_stage(int64_t in, int64_t out, int64_t stride, int64_t dilation = 1) {
  const int64_t groups = std::gcd<int64_t>(8, out);
  return nn::Sequential(
      nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(dilation).dilation(dilation).bias(false)),
      nn::GroupNorm(nn::GroupNormOptions(groups, out)), nn::ReLU(nn::ReLUOptions(true)),
      nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(dilation).dilation(dilation).bias(false)),
      nn::GroupNorm(nn::GroupNormOptions(groups, out)), nn::ReLU(nn::ReLUOptions(true)));
}

void init_conv_weights(nn::Module& module) {
  torch::NoGradGuard no_grad;
  for (auto& m : module.modules(false)) {
    if (auto* conv = m->as<nn::Conv2d>()) {
      nn::init::kaiming_normal_(conv->weight, 0.0, torch::kFanIn, torch::kReLU);
      if (conv->bias.defined()) conv->bias.zero_();
    }
  }
}

// torchvision Bottleneck with conv1/bn1/conv2/bn2/conv3/bn3/downsample names.
struct BottleneckImpl : nn::Module {
  BottleneckImpl(int64_t in, int64_t width, int64_t stride, int64_t dilation, bool downsample_needed) {
    conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in, width, 1).bias(false)));
    bn1 = register_module("bn1", nn::BatchNorm2d(width));
    conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(width, width, 3)
                                                    .stride(stride)
                                                    .padding(dilation)
                                                    .dilation(dilation)
                                                    .bias(false)));
    bn2 = register_module("bn2", nn::BatchNorm2d(width));
    conv3 = register_module("conv3", nn::Conv2d(nn::Conv2dOptions(width, width * 4, 1).bias(false)));
    bn3 = register_module("bn3", nn::BatchNorm2d(width * 4));
    if (downsample_needed) {
      downsample = register_module(
          "downsample", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in, width * 4, 1).stride(stride).bias(false)),
                                       nn::BatchNorm2d(width * 4)));
    }
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto out = torch::relu(bn1(conv1(x)));
    out = torch::relu(bn2(conv2(out)));
    out = bn3(conv3(out));
    auto identity = downsample ? downsample->forward(x) : x;
    return torch::relu(out + identity);
  }

  nn::Conv2d conv1{nullptr}, conv2{nullptr}, conv3{nullptr};
  nn::BatchNorm2d bn1{nullptr}, bn2{nullptr}, bn3{nullptr};
  nn::Sequential downsample{nullptr};
};
TORCH_MODULE(Bottleneck);

// Mirrors torchvision's _make_layer with replace_stride_with_dilation.
nn::Sequential make_resnet_layer(int64_t& in, int64_t width, int64_t blocks, int64_t stride, bool dilate,
                                 int64_t& dilation) {
  const int64_t previous_dilation = dilation;
  if (dilate) {
    dilation *= stride;
    stride = 1;
  }
  nn::Sequential layer;
  const bool needs_downsample = stride != 1 || in != width * 4;
  layer->push_back(Bottleneck(in, width, stride, previous_dilation, needs_downsample));
  in = width * 4;
  for (int64_t i = 1; i < blocks; ++i) layer->push_back(Bottleneck(in, width, 1, dilation, false));
  return layer;
}

}  // namespace

TinyBackbone::TinyBackbone(const BackboneConfig& config) : Backbone(config) {
  torch::manual_seed(config.seed);
  stage1_ = register_module("stage1", tiny_stage(3, 32, 2));
  stage2_ = register_module("stage2", tiny_stage(32, 64, 2));
  stage3_ = register_module("stage3", tiny_stage(64, 128, 2));
  stage4_ = register_module("stage4", tiny_stage(128, 128, 1, 2));
  init_conv_weights(*this);
  set_trainable(!config.frozen);
}

FeatureSet TinyBackbone::forward_features(const torch::Tensor& x) {
  auto s1 = stage1_->forward(x);
  auto s2 = stage2_->forward(s1);
  auto s3 = stage3_->forward(s2);
  auto s4 = stage4_->forward(s3);
  auto s2_resized = F::interpolate(s2, F::InterpolateFuncOptions()
                                           .size(std::vector<int64_t>{s3.size(2), s3.size(3)})
                                           .mode(torch::kBilinear)
                                           .align_corners(false));
  return {torch::cat({s2_resized, s3}, 1), s4, 8};
}

ResNetBackbone::ResNetBackbone(const BackboneConfig& config) : Backbone(config) {
  torch::manual_seed(config.seed);
  const std::array<int64_t, 4> blocks = config.kind == BackboneKind::kResNet101
                                            ? std::array<int64_t, 4>{3, 4, 23, 3}
                                            : std::array<int64_t, 4>{3, 4, 6, 3};
  conv1_ = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(3, 64, 7).stride(2).padding(3).bias(false)));
  bn1_ = register_module("bn1", nn::BatchNorm2d(64));
  int64_t in = 64;
  int64_t dilation = 1;
  layer1_ = register_module("layer1", make_resnet_layer(in, 64, blocks[0], 1, false, dilation));
  layer2_ = register_module("layer2", make_resnet_layer(in, 128, blocks[1], 2, false, dilation));
  layer3_ = register_module("layer3", make_resnet_layer(in, 256, blocks[2], 2, true, dilation));
  layer4_ = register_module("layer4", make_resnet_layer(in, 512, blocks[3], 2, true, dilation));
  init_conv_weights(*this);
  set_trainable(!config.frozen);
}

FeatureSet ResNetBackbone::forward_features(const torch::Tensor& x) {
  auto out = torch::relu(bn1_(conv1_(x)));
  out = F::max_pool2d(out, F::MaxPool2dFuncOptions(3).stride(2).padding(1));
  auto l1 = layer1_->forward(out);
  auto l2 = layer2_->forward(l1);
  auto l3 = layer3_->forward(l2);
  auto l4 = layer4_->forward(l3);
  return {torch::cat({l2, l3}, 1), l4, 8};
}

void ResNetBackbone::load_weights(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open backbone weights " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  c10::IValue value;
  try {
    value = torch::pickle_load(bytes);
  } catch (const c10::Error& e) {
    throw FormatError("backbone weights " + path + " are not a pickled tensor dict: " + e.what_without_backtrace());
  }
  if (!value.isGenericDict()) throw FormatError("backbone weights " + path + " must hold a name→tensor dict");
  std::map<std::string, torch::Tensor> dict;
  for (const auto& item : value.toGenericDict()) {
    if (item.key().isString() && item.value().isTensor()) dict[item.key().toStringRef()] = item.value().toTensor();
  }
  torch::NoGradGuard no_grad;
  auto copy_into = [&](const std::string& name, torch::Tensor& target) {
    auto it = dict.find(name);
    if (it == dict.end()) {
      if (name.ends_with("num_batches_tracked")) return;
      throw FormatError("backbone weights " + path + " lack '" + name + "'");
    }
    if (it->second.sizes() != target.sizes()) {
      throw FormatError("backbone weight '" + name + "' has shape " + c10::str(it->second.sizes()) + ", expected " +
                        c10::str(target.sizes()));
    }
    target.copy_(it->second.to(target.dtype()));
  };
  for (auto& p : named_parameters(true)) copy_into(p.key(), p.value());
  for (auto& b : named_buffers(true)) copy_into(b.key(), b.value());
}

void save_weights_dict(torch::nn::Module& module, const std::string& path) {
  c10::Dict<std::string, torch::Tensor> dict;
  for (const auto& p : module.named_parameters(true)) dict.insert(p.key(), p.value().detach().clone());
  for (const auto& b : module.named_buffers(true)) dict.insert(b.key(), b.value().detach().clone());
  const std::vector<char> bytes = torch::pickle_save(c10::IValue(dict));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write weights " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::shared_ptr<Backbone> make_backbone(const BackboneConfig& config) {
  if (config.kind == BackboneKind::kTiny) return std::make_shared<TinyBackbone>(config);
  if (config.weights_path.empty()) {
    throw ConfigError("pretrained backbone " + to_string(config.kind) + " requires a weights file");
  }
  auto net = std::make_shared<ResNetBackbone>(config);
  net->load_weights(config.weights_path);
  return net;
}

}  // namespace manet
