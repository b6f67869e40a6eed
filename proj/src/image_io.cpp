#include "manet/image_io.hpp"

#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <memory>

#include <jpeglib.h>
#include <png.h>

#include "manet/errors.hpp"

namespace manet {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError("cannot open " + path.string());
  return f;
}

void png_error_handler(png_structp png, png_const_charp message) {
  auto* text = static_cast<std::string*>(png_get_error_ptr(png));
  if (text != nullptr) *text = message;
  png_longjmp(png, 1);
}

void png_warning_handler(png_structp, png_const_charp) {}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

}  // namespace

RawImage read_png(const std::filesystem::path& path) {
  FilePtr file = open_file(path, "rb");
  std::string error_text;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &error_text,
                                           png_error_handler, png_warning_handler);
  if (png == nullptr) throw IoError("libpng initialisation failed");
  png_infop info = png_create_info_struct(png);
  RawImage out;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("invalid PNG " + path.string() + ": " + error_text);
  }
  png_init_io(png, file.get());
  png_read_info(png, info);

  const int color_type = png_get_color_type(png, info);
  const int bit_depth = png_get_bit_depth(png, info);
  if (bit_depth == 16) png_set_strip_16(png);
  if (bit_depth < 8) png_set_packing(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  out.channels = static_cast<int>(png_get_channels(png, info));
  if (out.channels != 1 && out.channels != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("unsupported PNG channel layout in " + path.string());
  }
  out.pixels.resize(static_cast<std::size_t>(out.width) * out.height * out.channels);
  rows.resize(out.height);
  for (int y = 0; y < out.height; ++y) {
    rows[y] = out.pixels.data() + static_cast<std::size_t>(y) * out.width * out.channels;
  }
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

void write_png(const std::filesystem::path& path, const RawImage& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw ContractError("write_png expects 1 or 3 channels");
  }
  if (image.pixels.size() != static_cast<std::size_t>(image.width) * image.height * image.channels) {
    throw ContractError("write_png: pixel buffer does not match dimensions");
  }
  FilePtr file = open_file(path, "wb");
  std::string error_text;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &error_text,
                                            png_error_handler, png_warning_handler);
  if (png == nullptr) throw IoError("libpng initialisation failed");
  png_infop info = png_create_info_struct(png);
  std::vector<png_bytep> rows(image.height);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed writing " + path.string() + ": " + error_text);
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, image.width, image.height, 8,
               image.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < image.height; ++y) {
    rows[y] = const_cast<png_bytep>(image.pixels.data()) +
              static_cast<std::size_t>(y) * image.width * image.channels;
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

RawImage read_jpeg(const std::filesystem::path& path) {
  FilePtr file = open_file(path, "rb");
  jpeg_decompress_struct cinfo{};
  JpegErrorManager err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  RawImage out;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw FormatError("invalid JPEG " + path.string() + ": " + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file.get());
  jpeg_read_header(&cinfo, TRUE);
  if (cinfo.num_components != 1) cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  out.width = static_cast<int>(cinfo.output_width);
  out.height = static_cast<int>(cinfo.output_height);
  out.channels = cinfo.output_components;
  out.pixels.resize(static_cast<std::size_t>(out.width) * out.height * out.channels);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = out.pixels.data() +
                   static_cast<std::size_t>(cinfo.output_scanline) * out.width * out.channels;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return out;
}

RawImage read_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  unsigned char magic[4] = {0, 0, 0, 0};
  in.read(reinterpret_cast<char*>(magic), 4);
  if (magic[0] == 0x89 && magic[1] == 'P' && magic[2] == 'N' && magic[3] == 'G') return read_png(path);
  if (magic[0] == 0xFF && magic[1] == 0xD8) return read_jpeg(path);
  throw FormatError("unrecognised image format: " + path.string());
}

torch::Tensor image_to_tensor(const RawImage& image) {
  auto hwc = torch::from_blob(const_cast<std::uint8_t*>(image.pixels.data()),
                              {image.height, image.width, image.channels}, torch::kUInt8);
  auto chw = hwc.permute({2, 0, 1}).to(torch::kFloat32).div(255.0).contiguous();
  if (image.channels == 1) chw = chw.expand({3, image.height, image.width}).contiguous();
  return chw;
}

torch::Tensor binary_mask_to_tensor(const RawImage& mask) {
  auto hwc = torch::from_blob(const_cast<std::uint8_t*>(mask.pixels.data()),
                              {mask.height, mask.width, mask.channels}, torch::kUInt8);
  return hwc.select(2, 0).gt(127).to(torch::kFloat32).contiguous();
}

torch::Tensor label_mask_to_tensor(const RawImage& mask, int label) {
  auto hwc = torch::from_blob(const_cast<std::uint8_t*>(mask.pixels.data()),
                              {mask.height, mask.width, mask.channels}, torch::kUInt8);
  return hwc.select(2, 0).eq(label).to(torch::kFloat32).contiguous();
}

RawImage tensor_to_image(const torch::Tensor& chw) {
  auto bytes = chw.detach().to(torch::kFloat32).clamp(0.0, 1.0).mul(255.0).round()
                   .to(torch::kUInt8).permute({1, 2, 0}).contiguous();
  RawImage out;
  out.channels = static_cast<int>(bytes.size(2));
  out.height = static_cast<int>(bytes.size(0));
  out.width = static_cast<int>(bytes.size(1));
  out.pixels.assign(bytes.data_ptr<std::uint8_t>(), bytes.data_ptr<std::uint8_t>() + bytes.numel());
  return out;
}

RawImage mask_tensor_to_image(const torch::Tensor& hw) {
  return tensor_to_image(hw.unsqueeze(0));
}

}  // namespace manet
