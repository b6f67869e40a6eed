#include "manet/episodes.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>

#include <nlohmann/json.hpp>

#include "manet/errors.hpp"

namespace manet {
namespace fs = std::filesystem;
using nlohmann::json;

std::vector<ClassId> DatasetManifest::class_ids() const {
  std::vector<ClassId> ids;
  ids.reserve(class_names.size());
  for (const auto& [id, name] : class_names) ids.push_back(id);
  return ids;
}

// ---------------------------------------------------------------------------
// Manifest I/O

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  const fs::path base = path.parent_path();
  DatasetManifest manifest;
  try {
    for (const auto& [key, name] : doc.at("class_names").items()) {
      manifest.class_names[std::stoi(key)] = name.get<std::string>();
    }
    const std::string encoding = doc.value("mask_encoding", std::string("binary"));
    if (encoding == "binary") {
      manifest.mask_encoding = MaskEncoding::kBinary;
    } else if (encoding == "label") {
      manifest.mask_encoding = MaskEncoding::kLabel;
    } else {
      throw FormatError("unknown mask_encoding '" + encoding + "'");
    }
    for (const auto& item : doc.at("entries")) {
      ManifestEntry entry;
      entry.image_path = base / item.at("image").get<std::string>();
      entry.mask_path = base / item.at("mask").get<std::string>();
      entry.classes = item.at("classes").get<std::vector<ClassId>>();
      manifest.entries.push_back(std::move(entry));
    }
  } catch (const json::exception& e) {
    throw FormatError("manifest " + path.string() + " is malformed: " + e.what());
  } catch (const std::invalid_argument&) {
    throw FormatError("manifest " + path.string() + " has a non-integer class id");
  }
  if (manifest.class_names.empty()) throw FormatError("manifest declares no classes");

  for (const auto& entry : manifest.entries) {
    for (ClassId c : entry.classes) {
      if (!manifest.class_names.contains(c)) {
        throw FormatError("entry " + entry.image_path.string() + " lists undeclared class " +
                          std::to_string(c));
      }
    }
    for (const auto& p : {entry.image_path, entry.mask_path}) {
      std::ifstream probe(p, std::ios::binary);
      if (!probe) throw IoError("manifest references unreadable file " + p.string());
    }
  }
  return manifest;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
  const fs::path base = path.parent_path().empty() ? fs::path(".") : path.parent_path();
  json doc;
  doc["mask_encoding"] = manifest.mask_encoding == MaskEncoding::kBinary ? "binary" : "label";
  json names = json::object();
  for (const auto& [id, name] : manifest.class_names) names[std::to_string(id)] = name;
  doc["class_names"] = names;
  json entries = json::array();
  for (const auto& e : manifest.entries) {
    entries.push_back({{"image", e.image_path.lexically_relative(base).generic_string()},
                       {"mask", e.mask_path.lexically_relative(base).generic_string()},
                       {"classes", e.classes}});
  }
  doc["entries"] = entries;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << doc.dump(1) << '\n';
  if (!out) throw IoError("failed writing manifest " + path.string());
}

// ---------------------------------------------------------------------------
// Folds

FoldSpec build_folds(const std::vector<ClassId>& class_ids, int fold_index, int num_folds) {
  if (num_folds < 1) throw ConfigError("num_folds must be positive");
  if (fold_index < 0 || fold_index >= num_folds) {
    throw ConfigError("fold index " + std::to_string(fold_index) + " outside [0, " +
                      std::to_string(num_folds) + ")");
  }
  const int n = static_cast<int>(class_ids.size());
  if (n == 0 || n % num_folds != 0) {
    throw ConfigError(std::to_string(n) + " classes cannot be split evenly into " +
                      std::to_string(num_folds) + " folds");
  }
  std::vector<ClassId> sorted = class_ids;
  std::sort(sorted.begin(), sorted.end());
  const int block = n / num_folds;
  FoldSpec fold;
  fold.fold_index = fold_index;
  fold.num_folds = num_folds;
  for (int i = 0; i < n; ++i) {
    if (i / block == fold_index) {
      fold.test_classes.insert(sorted[i]);
    } else {
      fold.train_classes.insert(sorted[i]);
    }
  }
  return fold;
}

FoldSpec build_folds(const DatasetManifest& manifest, int fold_index, int num_folds) {
  return build_folds(manifest.class_ids(), fold_index, num_folds);
}

// ---------------------------------------------------------------------------
// Sampling

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  auto mix = [](std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
  };
  return mix(mix(base) + index);
}

EpisodeSampler::EpisodeSampler(DatasetManifest manifest, std::size_t cache_budget_bytes)
    : manifest_(std::move(manifest)), cache_budget_(cache_budget_bytes) {
  for (std::size_t i = 0; i < manifest_.entries.size(); ++i) {
    const auto& entry = manifest_.entries[i];
    if (entry.classes.empty()) continue;
    auto mask = raster(entry.mask_path);
    const double total = static_cast<double>(mask->width) * mask->height;
    for (ClassId c : entry.classes) {
      std::size_t hits = 0;
      for (int y = 0; y < mask->height; ++y) {
        for (int x = 0; x < mask->width; ++x) {
          const int v = mask->at(y, x);
          hits += manifest_.mask_encoding == MaskEncoding::kBinary ? (v > 127) : (v == c);
        }
      }
      if (hits == 0) continue;
      images_[c].push_back(i);
      if (static_cast<double>(hits) / total >= kMinSupportCoverage) supports_[c].push_back(i);
    }
  }
}

std::shared_ptr<const RawImage> EpisodeSampler::raster(const fs::path& path) const {
  const std::string key = path.string();
  {
    std::lock_guard lock(cache_mutex_);
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
  }
  auto loaded = std::make_shared<const RawImage>(read_image(path));
  std::lock_guard lock(cache_mutex_);
  if (cache_bytes_ + loaded->pixels.size() <= cache_budget_) {
    cache_bytes_ += loaded->pixels.size();
    cache_.emplace(key, loaded);
  }
  return loaded;
}

const std::vector<std::size_t>& EpisodeSampler::images_of(ClassId c) const {
  static const std::vector<std::size_t> kEmpty;
  auto it = images_.find(c);
  return it == images_.end() ? kEmpty : it->second;
}

const std::vector<std::size_t>& EpisodeSampler::support_candidates_of(ClassId c) const {
  static const std::vector<std::size_t> kEmpty;
  auto it = supports_.find(c);
  return it == supports_.end() ? kEmpty : it->second;
}

torch::Tensor EpisodeSampler::load_image(std::size_t entry) const {
  return image_to_tensor(*raster(manifest_.entries.at(entry).image_path));
}

torch::Tensor EpisodeSampler::load_mask(std::size_t entry, ClassId c) const {
  auto mask = raster(manifest_.entries.at(entry).mask_path);
  return manifest_.mask_encoding == MaskEncoding::kBinary ? binary_mask_to_tensor(*mask)
                                                          : label_mask_to_tensor(*mask, c);
}

Episode EpisodeSampler::sample(const std::set<ClassId>& classes, int shots, Rng& rng) const {
  if (shots < 1) throw ContractError("shots must be >= 1");
  if (classes.empty()) throw SamplingError("empty class pool");
  const std::vector<ClassId> pool(classes.begin(), classes.end());
  const ClassId c = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];

  const auto& images = images_of(c);
  const auto& candidates = support_candidates_of(c);
  const std::string name = manifest_.class_names.contains(c) ? manifest_.class_names.at(c) : "?";
  if (images.size() < static_cast<std::size_t>(shots) + 1 ||
      candidates.size() < static_cast<std::size_t>(shots) + 1) {
    throw SamplingError("class " + std::to_string(c) + " (" + name + ") has " +
                        std::to_string(images.size()) + " images and " +
                        std::to_string(candidates.size()) + " support candidates; " +
                        std::to_string(shots + 1) + " required");
  }
  const std::size_t query = images[std::uniform_int_distribution<std::size_t>(0, images.size() - 1)(rng)];

  std::vector<std::size_t> pick;
  pick.reserve(candidates.size());
  for (std::size_t idx : candidates) {
    if (idx != query) pick.push_back(idx);
  }
  // Partial Fisher-Yates: the first draws do not depend on `shots`.
  for (int k = 0; k < shots; ++k) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(k, pick.size() - 1)(rng);
    std::swap(pick[k], pick[j]);
  }

  Episode episode;
  episode.class_id = c;
  episode.query_path = manifest_.entries[query].image_path;
  episode.query_image = load_image(query);
  episode.query_mask = load_mask(query, c);
  episode.original_height = static_cast<int>(episode.query_mask.size(0));
  episode.original_width = static_cast<int>(episode.query_mask.size(1));
  episode.original_query_mask = episode.query_mask;
  for (int k = 0; k < shots; ++k) {
    episode.support.push_back({load_image(pick[k]), load_mask(pick[k], c),
                               manifest_.entries[pick[k]].image_path});
  }
  return episode;
}

Episode sample_episode(const EpisodeSampler& sampler, const std::set<ClassId>& classes, int shots,
                       Rng& rng) {
  return sampler.sample(classes, shots, rng);
}

// ---------------------------------------------------------------------------
// Resizing

torch::Tensor resize_bilinear(const torch::Tensor& chw, int height, int width) {
  if (chw.size(1) == height && chw.size(2) == width) return chw.clone();
  namespace F = torch::nn::functional;
  return F::interpolate(chw.unsqueeze(0), F::InterpolateFuncOptions()
                                              .size(std::vector<int64_t>{height, width})
                                              .mode(torch::kBilinear)
                                              .align_corners(false))
      .squeeze(0);
}

torch::Tensor resize_nearest(const torch::Tensor& hw, int height, int width) {
  if (hw.size(0) == height && hw.size(1) == width) return hw.clone();
  namespace F = torch::nn::functional;
  return F::interpolate(hw.unsqueeze(0).unsqueeze(0),
                        F::InterpolateFuncOptions()
                            .size(std::vector<int64_t>{height, width})
                            .mode(torch::kNearest))
      .squeeze(0)
      .squeeze(0);
}

Episode resize_episode(const Episode& episode, int side) {
  if (side < 64) throw ConfigError("input side must be >= 64");
  Episode out = episode;
  if (out.original_height == 0) {
    out.original_height = static_cast<int>(episode.query_mask.size(0));
    out.original_width = static_cast<int>(episode.query_mask.size(1));
    out.original_query_mask = episode.query_mask;
  }
  out.query_image = resize_bilinear(episode.query_image, side, side);
  out.query_mask = resize_nearest(episode.query_mask, side, side);
  for (auto& s : out.support) {
    s.image = resize_bilinear(s.image, side, side);
    s.mask = resize_nearest(s.mask, side, side);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic shapes

std::vector<ShapeKind> all_shapes() {
  return {ShapeKind::kDisk,    ShapeKind::kSquare,  ShapeKind::kTriangle, ShapeKind::kRing,
          ShapeKind::kCross,   ShapeKind::kStar,    ShapeKind::kDiamond,  ShapeKind::kHexagon,
          ShapeKind::kCrescent, ShapeKind::kEllipse};
}

std::string shape_name(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::kDisk: return "disk";
    case ShapeKind::kSquare: return "square";
    case ShapeKind::kTriangle: return "triangle";
    case ShapeKind::kRing: return "ring";
    case ShapeKind::kCross: return "cross";
    case ShapeKind::kStar: return "star";
    case ShapeKind::kDiamond: return "diamond";
    case ShapeKind::kHexagon: return "hexagon";
    case ShapeKind::kCrescent: return "crescent";
    case ShapeKind::kEllipse: return "ellipse";
  }
  return "unknown";
}

namespace {

struct Point {
  double x, y;
};

bool inside_polygon(const std::vector<Point>& poly, double x, double y) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    if ((poly[i].y > y) != (poly[j].y > y) &&
        x < (poly[j].x - poly[i].x) * (y - poly[i].y) / (poly[j].y - poly[i].y) + poly[i].x) {
      in = !in;
    }
  }
  return in;
}

std::vector<Point> regular_polygon(int sides, double radius, double phase = 0.0) {
  std::vector<Point> pts;
  for (int i = 0; i < sides; ++i) {
    const double a = phase + 2.0 * std::numbers::pi * i / sides;
    pts.push_back({radius * std::cos(a), radius * std::sin(a)});
  }
  return pts;
}

std::vector<Point> star_polygon() {
  std::vector<Point> pts;
  for (int i = 0; i < 10; ++i) {
    const double r = (i % 2 == 0) ? 1.0 : 0.45;
    const double a = -std::numbers::pi / 2 + std::numbers::pi * i / 5;
    pts.push_back({r * std::cos(a), r * std::sin(a)});
  }
  return pts;
}

// Shape membership in unit-radius local coordinates.
bool inside_shape(ShapeKind kind, double u, double v) {
  static const auto kTriangle = regular_polygon(3, 1.0, -std::numbers::pi / 2);
  static const auto kHexagon = regular_polygon(6, 1.0);
  static const auto kStar = star_polygon();
  const double r2 = u * u + v * v;
  switch (kind) {
    case ShapeKind::kDisk: return r2 <= 1.0;
    case ShapeKind::kSquare: return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
    case ShapeKind::kTriangle: return inside_polygon(kTriangle, u, v);
    case ShapeKind::kRing: return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    case ShapeKind::kCross:
      return (std::abs(u) <= 0.3 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.3 && std::abs(u) <= 1.0);
    case ShapeKind::kStar: return inside_polygon(kStar, u, v);
    case ShapeKind::kDiamond: return std::abs(u) / 0.65 + std::abs(v) <= 1.0;
    case ShapeKind::kHexagon: return inside_polygon(kHexagon, u, v);
    case ShapeKind::kCrescent: {
      const double du = u - 0.45;
      return r2 <= 1.0 && du * du + v * v > 0.75 * 0.75;
    }
    case ShapeKind::kEllipse: return u * u + (v / 0.55) * (v / 0.55) <= 1.0;
  }
  return false;
}

struct PlacedShape {
  double cx, cy, radius, angle;
  std::array<double, 3> color;
};

double color_distance(const std::array<double, 3>& a, const std::array<double, 3>& b) {
  return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) +
                   (a[2] - b[2]) * (a[2] - b[2]));
}

void render_sample(ShapeKind kind, const SynthSpec& spec, Rng& rng, RawImage& image, RawImage& mask) {
  const int n = spec.image_size;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  image = RawImage{n, n, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(n) * n * 3)};
  mask = RawImage{n, n, 1, std::vector<std::uint8_t>(static_cast<std::size_t>(n) * n)};

  const std::array<double, 3> background{unit(rng), unit(rng), unit(rng)};
  const double grad_x = (unit(rng) - 0.5) * 0.2;
  const double grad_y = (unit(rng) - 0.5) * 0.2;

  const int count = 1 + std::uniform_int_distribution<int>(0, std::max(0, spec.max_shapes_per_image - 1))(rng);
  std::vector<PlacedShape> shapes;
  for (int s = 0; s < count; ++s) {
    PlacedShape shape{};
    for (int attempt = 0; attempt < 20; ++attempt) {
      shape.radius = n * (0.14 + 0.16 * unit(rng)) / (count > 1 ? 1.3 : 1.0);
      shape.cx = shape.radius + unit(rng) * (n - 2 * shape.radius);
      shape.cy = shape.radius + unit(rng) * (n - 2 * shape.radius);
      bool clear = true;
      for (const auto& other : shapes) {
        clear = clear && std::hypot(shape.cx - other.cx, shape.cy - other.cy) > shape.radius + other.radius;
      }
      if (clear) break;
    }
    shape.angle = unit(rng) * 2.0 * std::numbers::pi;
    do {
      shape.color = {unit(rng), unit(rng), unit(rng)};
    } while (color_distance(shape.color, background) < 0.45);
    shapes.push_back(shape);
  }

  std::normal_distribution<double> noise(0.0, 1.0);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double px = x + 0.5;
      const double py = y + 0.5;
      std::array<double, 3> color{};
      const double shade = grad_x * (px / n - 0.5) + grad_y * (py / n - 0.5);
      for (int c = 0; c < 3; ++c) color[c] = background[c] + shade;
      bool covered = false;
      for (const auto& s : shapes) {
        const double dx = (px - s.cx) / s.radius;
        const double dy = (py - s.cy) / s.radius;
        const double u = std::cos(s.angle) * dx + std::sin(s.angle) * dy;
        const double v = -std::sin(s.angle) * dx + std::cos(s.angle) * dy;
        if (inside_shape(kind, u, v)) {
          covered = true;
          color = s.color;
        }
      }
      mask.at(y, x) = covered ? 255 : 0;
      for (int c = 0; c < 3; ++c) {
        const double value = color[c] + spec.noise_level * noise(rng);
        image.at(y, x, c) = static_cast<std::uint8_t>(std::lround(std::clamp(value, 0.0, 1.0) * 255.0));
      }
    }
  }
}

std::string sample_stem(int class_id, int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "c%02d_%04d", class_id, index);
  return buf;
}

}  // namespace

DatasetManifest generate_synthetic_dataset(const SynthSpec& spec, const fs::path& out_dir) {
  if (spec.num_shape_classes < 8) throw ConfigError("synthetic datasets need at least 8 shape classes");
  if (spec.num_shape_classes > static_cast<int>(spec.shapes.size())) {
    throw ConfigError("requested " + std::to_string(spec.num_shape_classes) + " classes but only " +
                      std::to_string(spec.shapes.size()) + " shapes are enabled");
  }
  if (spec.image_size < 64) throw ConfigError("synthetic image_size must be >= 64");
  if (spec.images_per_class < 1) throw ConfigError("images_per_class must be >= 1");
  if (spec.noise_level < 0) throw ConfigError("noise_level must be >= 0");

  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  fs::create_directories(out_dir / "masks", ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  DatasetManifest manifest;
  manifest.mask_encoding = MaskEncoding::kBinary;
  for (int c = 1; c <= spec.num_shape_classes; ++c) {
    const ShapeKind kind = spec.shapes[c - 1];
    manifest.class_names[c] = shape_name(kind);
    for (int i = 0; i < spec.images_per_class; ++i) {
      Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(c) * 1000003ULL + i));
      RawImage image, mask;
      render_sample(kind, spec, rng, image, mask);
      const std::string stem = sample_stem(c, i);
      ManifestEntry entry{out_dir / "images" / (stem + ".png"), out_dir / "masks" / (stem + ".png"), {c}};
      write_png(entry.image_path, image);
      write_png(entry.mask_path, mask);
      manifest.entries.push_back(std::move(entry));
    }
  }
  save_manifest(manifest, out_dir / "manifest.json");
  return manifest;
}

}  // namespace manet
