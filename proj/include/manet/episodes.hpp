#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <torch/torch.h>

#include "manet/image_io.hpp"

namespace manet {

using ClassId = int;
using Rng = std::mt19937_64;

/// How mask files encode classes. Binary masks are 0/255 with a single class
/// per image; label masks hold the class id in each pixel (255 = ignore).
enum class MaskEncoding { kBinary, kLabel };

struct ManifestEntry {
  std::filesystem::path image_path;
  std::filesystem::path mask_path;
  std::vector<ClassId> classes;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::map<ClassId, std::string> class_names;
  MaskEncoding mask_encoding = MaskEncoding::kBinary;

  int num_classes() const { return static_cast<int>(class_names.size()); }
  std::vector<ClassId> class_ids() const;
};

/// Loads a manifest JSON file. Relative paths resolve against the manifest's
/// directory. Checks class membership and that every file is readable.
DatasetManifest load_manifest(const std::filesystem::path& path);

/// Writes the manifest with paths relative to the manifest's directory.
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

struct FoldSpec {
  int fold_index = 0;
  int num_folds = 4;
  std::set<ClassId> train_classes;
  std::set<ClassId> test_classes;
};

/// Fold i tests the i-th contiguous block of ascending class ids.
FoldSpec build_folds(const DatasetManifest& manifest, int fold_index, int num_folds = 4);
FoldSpec build_folds(const std::vector<ClassId>& class_ids, int fold_index, int num_folds = 4);

struct SupportPair {
  torch::Tensor image;  // 3×H×W in [0,1]
  torch::Tensor mask;   // H×W in {0,1}
  std::filesystem::path image_path;
};

/// One few-shot task. Images are CHW float tensors; masks H×W float {0,1}.
struct Episode {
  torch::Tensor query_image;
  torch::Tensor query_mask;
  std::vector<SupportPair> support;
  ClassId class_id = 0;
  std::filesystem::path query_path;
  /// Query size before resize_episode, and the mask at that size.
  int original_height = 0;
  int original_width = 0;
  torch::Tensor original_query_mask;

  int shots() const { return static_cast<int>(support.size()); }
};

/// Fraction of pixels a class must cover for an image to serve as support.
inline constexpr double kMinSupportCoverage = 0.01;

/// Seeded episodic sampler over a manifest. Decoded rasters are cached up to a
/// byte budget; the cache is the only mutable state and is mutex-guarded, so a
/// sampler may be shared by workers as long as each owns its Rng.
class EpisodeSampler {
 public:
  explicit EpisodeSampler(DatasetManifest manifest, std::size_t cache_budget_bytes = 256u << 20);

  const DatasetManifest& manifest() const { return manifest_; }

  /// Uniform class from `classes`, then a query and K distinct supports drawn
  /// without replacement from that class's images. Masks are binarized to the
  /// chosen class. Throws SamplingError naming the class if it is too small.
  Episode sample(const std::set<ClassId>& classes, int shots, Rng& rng) const;

  /// Images containing the class, and the subset eligible as support.
  const std::vector<std::size_t>& images_of(ClassId c) const;
  const std::vector<std::size_t>& support_candidates_of(ClassId c) const;

  torch::Tensor load_image(std::size_t entry) const;
  torch::Tensor load_mask(std::size_t entry, ClassId c) const;

 private:
  std::shared_ptr<const RawImage> raster(const std::filesystem::path& path) const;

  DatasetManifest manifest_;
  std::map<ClassId, std::vector<std::size_t>> images_;
  std::map<ClassId, std::vector<std::size_t>> supports_;
  std::size_t cache_budget_;
  mutable std::mutex cache_mutex_;
  mutable std::unordered_map<std::string, std::shared_ptr<const RawImage>> cache_;
  mutable std::size_t cache_bytes_ = 0;
};

/// Free-function form of EpisodeSampler::sample.
Episode sample_episode(const EpisodeSampler& sampler, const std::set<ClassId>& classes, int shots,
                       Rng& rng);

/// Derives an independent 64-bit seed from a base seed and a stream index.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);

enum class ShapeKind { kDisk, kSquare, kTriangle, kRing, kCross, kStar, kDiamond, kHexagon, kCrescent, kEllipse };

std::string shape_name(ShapeKind kind);
std::vector<ShapeKind> all_shapes();

struct SynthSpec {
  int num_shape_classes = 8;
  int images_per_class = 20;
  int image_size = 128;
  std::vector<ShapeKind> shapes = all_shapes();
  double noise_level = 0.04;
  std::uint64_t seed = 1;
  int max_shapes_per_image = 2;
};

/// Renders shape images and exact masks into out_dir (images/, masks/,
/// manifest.json). Identical specs give byte-identical outputs.
DatasetManifest generate_synthetic_dataset(const SynthSpec& spec, const std::filesystem::path& out_dir);

/// Bilinear image / nearest mask resize of every image in the episode to
/// side×side. Records the original query size and mask.
Episode resize_episode(const Episode& episode, int side = 473);

/// Bilinear (align_corners=false) resize of a C×H×W tensor.
torch::Tensor resize_bilinear(const torch::Tensor& chw, int height, int width);
/// Nearest-neighbour resize of an H×W mask (source index floor(dst·scale)).
torch::Tensor resize_nearest(const torch::Tensor& hw, int height, int width);

}  // namespace manet
