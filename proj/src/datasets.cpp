#include "manet/datasets.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>

#include <nlohmann/json.hpp>

#include "manet/errors.hpp"

namespace manet {
namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string>& voc_class_names() {
  static const std::vector<std::string> kNames = {
      "aeroplane", "bicycle", "bird",  "boat",        "bottle", "bus",         "car",
      "cat",       "chair",   "cow",   "diningtable", "dog",    "horse",       "motorbike",
      "person",    "pottedplant", "sheep", "sofa",    "train",  "tvmonitor"};
  return kNames;
}

DatasetManifest import_pascal_voc(const fs::path& root, const std::string& list_file, const std::string& mask_dir) {
  std::ifstream list(root / list_file);
  if (!list) throw IoError("cannot open image list " + (root / list_file).string());
  DatasetManifest manifest;
  manifest.mask_encoding = MaskEncoding::kLabel;
  const auto& names = voc_class_names();
  for (std::size_t i = 0; i < names.size(); ++i) manifest.class_names[static_cast<ClassId>(i + 1)] = names[i];

  std::string id;
  while (list >> id) {
    ManifestEntry entry{root / "JPEGImages" / (id + ".jpg"), root / mask_dir / (id + ".png"), {}};
    const RawImage mask = read_png(entry.mask_path);
    if (mask.channels != 1) throw FormatError("VOC label map must be single channel: " + entry.mask_path.string());
    std::set<ClassId> present;
    for (std::uint8_t v : mask.pixels) {
      if (v >= 1 && v <= names.size()) present.insert(v);
    }
    if (present.empty()) continue;
    entry.classes.assign(present.begin(), present.end());
    manifest.entries.push_back(std::move(entry));
  }
  return manifest;
}

std::vector<std::uint32_t> decode_coco_rle_string(const std::string& counts) {
  std::vector<std::uint32_t> out;
  std::size_t p = 0;
  while (p < counts.size()) {
    long long x = 0;
    int k = 0;
    bool more = true;
    while (more) {
      if (p >= counts.size()) throw FormatError("truncated COCO RLE string");
      const long long c = static_cast<long long>(counts[p]) - 48;
      x |= (c & 0x1f) << (5 * k);
      more = (c & 0x20) != 0;
      ++p;
      ++k;
      if (!more && (c & 0x10)) x |= -1LL << (5 * k);
    }
    if (out.size() > 2) x += out[out.size() - 2];
    if (x < 0) throw FormatError("negative run in COCO RLE");
    out.push_back(static_cast<std::uint32_t>(x));
  }
  return out;
}

std::vector<std::uint8_t> rle_to_raster(const std::vector<std::uint32_t>& counts, int height, int width) {
  const std::size_t total = static_cast<std::size_t>(height) * width;
  std::vector<std::uint8_t> out(total, 0);
  std::size_t pos = 0;
  std::uint8_t value = 0;
  for (std::uint32_t run : counts) {
    if (pos + run > total) throw FormatError("COCO RLE longer than the image");
    for (std::uint32_t r = 0; r < run; ++r, ++pos) {
      const std::size_t col = pos / height;
      const std::size_t row = pos % height;
      out[row * width + col] = value;
    }
    value = 1 - value;
  }
  return out;
}

namespace {

void fill_polygon(const std::vector<double>& xy, RawImage& target, std::uint8_t value) {
  const std::size_t n = xy.size() / 2;
  if (n < 3) return;
  for (int y = 0; y < target.height; ++y) {
    const double py = y + 0.5;
    std::vector<double> crossings;
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
      const double yi = xy[2 * i + 1], yj = xy[2 * j + 1];
      if ((yi > py) != (yj > py)) {
        const double xi = xy[2 * i], xj = xy[2 * j];
        crossings.push_back(xi + (py - yi) * (xj - xi) / (yj - yi));
      }
    }
    std::sort(crossings.begin(), crossings.end());
    for (std::size_t c = 0; c + 1 < crossings.size(); c += 2) {
      const int x0 = std::max(0, static_cast<int>(std::ceil(crossings[c] - 0.5)));
      const int x1 = std::min(target.width - 1, static_cast<int>(std::floor(crossings[c + 1] - 0.5)));
      for (int x = x0; x <= x1; ++x) target.at(y, x) = value;
    }
  }
}

void paint_segmentation(const json& seg, RawImage& target, std::uint8_t value) {
  if (seg.is_array()) {
    for (const auto& poly : seg) fill_polygon(poly.get<std::vector<double>>(), target, value);
    return;
  }
  const auto size = seg.at("size").get<std::vector<int>>();
  if (size.size() != 2 || size[0] != target.height || size[1] != target.width) {
    throw FormatError("COCO RLE size does not match the image");
  }
  const json& counts = seg.at("counts");
  const auto runs = counts.is_string() ? decode_coco_rle_string(counts.get<std::string>())
                                       : counts.get<std::vector<std::uint32_t>>();
  const auto raster = rle_to_raster(runs, target.height, target.width);
  for (std::size_t i = 0; i < raster.size(); ++i) {
    if (raster[i]) target.pixels[i] = value;
  }
}

}  // namespace

DatasetManifest import_coco(const fs::path& annotation_file, const fs::path& image_dir, const fs::path& mask_out_dir) {
  std::ifstream in(annotation_file);
  if (!in) throw IoError("cannot open " + annotation_file.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("invalid COCO annotation file: " + std::string(e.what()));
  }
  std::error_code ec;
  fs::create_directories(mask_out_dir, ec);
  if (ec) throw IoError("cannot create " + mask_out_dir.string());

  DatasetManifest manifest;
  manifest.mask_encoding = MaskEncoding::kLabel;
  std::map<int, ClassId> category_to_class;
  {
    std::vector<std::pair<int, std::string>> cats;
    for (const auto& c : doc.at("categories")) cats.emplace_back(c.at("id").get<int>(), c.at("name").get<std::string>());
    std::sort(cats.begin(), cats.end());
    if (cats.size() > 254) throw FormatError("too many COCO categories for an 8-bit label map");
    for (std::size_t i = 0; i < cats.size(); ++i) {
      category_to_class[cats[i].first] = static_cast<ClassId>(i + 1);
      manifest.class_names[static_cast<ClassId>(i + 1)] = cats[i].second;
    }
  }

  std::map<long long, std::vector<const json*>> by_image;
  for (const auto& ann : doc.at("annotations")) by_image[ann.at("image_id").get<long long>()].push_back(&ann);

  for (const auto& img : doc.at("images")) {
    const long long id = img.at("id").get<long long>();
    auto it = by_image.find(id);
    if (it == by_image.end()) continue;
    RawImage label{img.at("width").get<int>(), img.at("height").get<int>(), 1, {}};
    label.pixels.assign(static_cast<std::size_t>(label.width) * label.height, 0);
    std::set<ClassId> present;
    // Crowd regions are painted last so they override overlapping instances.
    for (int pass = 0; pass < 2; ++pass) {
      for (const json* ann : it->second) {
        const bool crowd = ann->value("iscrowd", 0) != 0;
        if (crowd != (pass == 1)) continue;
        const ClassId c = category_to_class.at(ann->at("category_id").get<int>());
        paint_segmentation(ann->at("segmentation"), label, crowd ? 255 : static_cast<std::uint8_t>(c));
      }
    }
    for (std::uint8_t v : label.pixels) {
      if (v >= 1 && v != 255) present.insert(v);
    }
    if (present.empty()) continue;
    const std::string file = img.at("file_name").get<std::string>();
    ManifestEntry entry{image_dir / file, mask_out_dir / (fs::path(file).stem().string() + ".png"),
                        {present.begin(), present.end()}};
    write_png(entry.mask_path, label);
    manifest.entries.push_back(std::move(entry));
  }
  return manifest;
}

}  // namespace manet
