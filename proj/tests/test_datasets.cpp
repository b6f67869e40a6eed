#include "support/doctest_torch.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

#include "manet/datasets.hpp"
#include "manet/errors.hpp"
#include "manet/image_io.hpp"
#include "support/properties.hpp"

using namespace manet;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Reference compressed-RLE encoder, written from the format description.
std::string encode_rle(const std::vector<std::uint32_t>& counts) {
  std::string out;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    long long x = counts[i];
    if (i > 2) x -= counts[i - 2];
    bool more = true;
    while (more) {
      long long c = x & 0x1f;
      x >>= 5;
      more = (c & 0x10) ? x != -1 : x != 0;
      if (more) c |= 0x20;
      out.push_back(static_cast<char>(c + 48));
    }
  }
  return out;
}

RawImage filled(int w, int h, int channels, std::uint8_t v) {
  return RawImage{w, h, channels, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h * channels, v)};
}

}  // namespace

TEST_SUITE("datasets") {
  TEST_CASE("compressed RLE strings") {
    CHECK(decode_coco_rle_string("5") == std::vector<std::uint32_t>{5});
    CHECK(decode_coco_rle_string("34") == std::vector<std::uint32_t>{3, 4});
    CHECK(decode_coco_rle_string("").empty());
    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<std::uint32_t> counts(1 + rng() % 12);
      for (auto& c : counts) c = static_cast<std::uint32_t>(rng() % 5000);
      CHECK(decode_coco_rle_string(encode_rle(counts)) == counts);
    }
    CHECK_THROWS_AS(decode_coco_rle_string("P"), FormatError);  // continuation bit with nothing after
  }

  TEST_CASE("RLE rasters are column-major") {
    // 2×3 image, runs: 1 background, 2 foreground, 3 background.
    auto r = rle_to_raster({1, 2, 3}, 2, 3);
    // column-major positions 1 and 2 are (row 1, col 0) and (row 0, col 1).
    CHECK(r == std::vector<std::uint8_t>{0, 1, 0, 1, 0, 0});
    CHECK_THROWS_AS(rle_to_raster({7}, 2, 3), FormatError);
  }

  TEST_CASE("VOC trees become label-encoded manifests") {
    const fs::path root = testing::scratch_dir("voc");
    fs::create_directories(root / "JPEGImages");
    fs::create_directories(root / "SegmentationClassAug");
    auto label = filled(8, 8, 1, 0);
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) label.at(y, x) = 15;  // person
    label.at(7, 7) = 255;
    write_png(root / "SegmentationClassAug" / "a.png", label);
    write_png(root / "SegmentationClassAug" / "b.png", filled(8, 8, 1, 0));
    write_png(root / "JPEGImages" / "a.jpg", filled(8, 8, 3, 90));
    write_png(root / "JPEGImages" / "b.jpg", filled(8, 8, 3, 90));
    std::ofstream(root / "train.txt") << "a\nb\n";

    DatasetManifest m = import_pascal_voc(root, "train.txt");
    CHECK(m.num_classes() == 20);
    CHECK(m.class_names.at(15) == "person");
    CHECK(m.mask_encoding == MaskEncoding::kLabel);
    REQUIRE(m.entries.size() == 1);
    CHECK(m.entries[0].classes == std::vector<ClassId>{15});

    save_manifest(m, root / "manifest.json");
    EpisodeSampler sampler(load_manifest(root / "manifest.json"));
    auto mask = sampler.load_mask(0, 15);
    CHECK(mask.sum().item<double>() == 16.0);
    CHECK(mask[7][7].item<double>() == 0.0);

    CHECK_THROWS_AS(import_pascal_voc(root, "missing.txt"), IoError);
  }

  TEST_CASE("COCO instances rasterize into label maps") {
    const fs::path root = testing::scratch_dir("coco");
    fs::create_directories(root / "images");
    write_png(root / "images" / "1.jpg", filled(8, 8, 3, 10));
    write_png(root / "images" / "2.jpg", filled(8, 8, 3, 10));
    json doc;
    doc["categories"] = json::array({{{"id", 18}, {"name", "dog"}}, {{"id", 3}, {"name", "car"}}});
    doc["images"] = json::array({{{"id", 1}, {"file_name", "1.jpg"}, {"width", 8}, {"height", 8}},
                                 {{"id", 2}, {"file_name", "2.jpg"}, {"width", 8}, {"height", 8}}});
    std::vector<std::uint32_t> runs{56, 8};  // last column foreground
    doc["annotations"] = json::array({
        {{"image_id", 1}, {"category_id", 18}, {"iscrowd", 0},
         {"segmentation", json::array({json::array({1, 1, 5, 1, 5, 5, 1, 5})})}},
        {{"image_id", 1}, {"category_id", 3}, {"iscrowd", 0},
         {"segmentation", {{"size", {8, 8}}, {"counts", encode_rle(runs)}}}},
        {{"image_id", 1}, {"category_id", 18}, {"iscrowd", 1},
         {"segmentation", {{"size", {8, 8}}, {"counts", {0, 1, 63}}}}},
        {{"image_id", 2}, {"category_id", 3}, {"iscrowd", 1},
         {"segmentation", {{"size", {8, 8}}, {"counts", {0, 64}}}}},
    });
    std::ofstream(root / "instances.json") << doc.dump();

    DatasetManifest m = import_coco(root / "instances.json", root / "images", root / "masks");
    CHECK(m.class_names.at(1) == "car");
    CHECK(m.class_names.at(2) == "dog");
    REQUIRE(m.entries.size() == 1);  // image 2 holds only a crowd region
    CHECK(m.entries[0].classes == std::vector<ClassId>{1, 2});
    RawImage label = read_png(m.entries[0].mask_path);
    CHECK(label.at(1, 1) == 2);
    CHECK(label.at(4, 4) == 2);
    CHECK(label.at(5, 5) == 0);
    CHECK(label.at(3, 7) == 1);
    CHECK(label.at(0, 0) == 255);

    save_manifest(m, root / "manifest.json");
    EpisodeSampler sampler(load_manifest(root / "manifest.json"));
    CHECK(sampler.load_mask(0, 2).sum().item<double>() == 16.0);
    CHECK(sampler.load_mask(0, 1).sum().item<double>() == 8.0);

    std::ofstream(root / "bad.json") << "{not json";
    CHECK_THROWS_AS(import_coco(root / "bad.json", root / "images", root / "masks"), FormatError);
  }
}
