#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "manet/episodes.hpp"

namespace manet {

/// The 20 PASCAL VOC object classes in label order (id 1 = aeroplane).
const std::vector<std::string>& voc_class_names();

/// Reads a VOC-style tree: `<root>/JPEGImages/<id>.jpg` and
/// `<root>/<mask_dir>/<id>.png` (label maps, palette or gray, 255 = ignore)
/// for every id listed in `<root>/<list_file>`. Each entry records the classes
/// present in its label map; images with no object class are skipped.
DatasetManifest import_pascal_voc(const std::filesystem::path& root, const std::string& list_file,
                                  const std::string& mask_dir = "SegmentationClassAug");

/// Reads a COCO instances file and rasterizes each image's annotations into a
/// label map written under `mask_out_dir` (class ids 1..N in ascending
/// category-id order, crowd regions 255). Polygon and RLE segmentations are
/// supported. Images without non-crowd annotations are skipped.
DatasetManifest import_coco(const std::filesystem::path& annotation_file, const std::filesystem::path& image_dir,
                            const std::filesystem::path& mask_out_dir);

/// Decodes a COCO compressed RLE string into run lengths.
std::vector<std::uint32_t> decode_coco_rle_string(const std::string& counts);

/// Expands column-major COCO run lengths into a row-major height×width raster
/// (1 inside, 0 outside).
std::vector<std::uint8_t> rle_to_raster(const std::vector<std::uint32_t>& counts, int height, int width);

}  // namespace manet
