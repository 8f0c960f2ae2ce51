#include "cmtnet/image_io.hpp"

#include <png.h>

#include <cstring>

namespace cmtnet {

Raster read_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    std::string msg = image.message;
    png_image_free(&image);
    throw ImageError("cannot read image " + path.string() + ": " + msg);
  }

  Raster out;
  out.width = static_cast<int>(image.width);
  out.height = static_cast<int>(image.height);
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  const bool wide = (image.format & PNG_FORMAT_FLAG_LINEAR) != 0;
  out.channels = color ? 3 : 1;
  out.bit_depth = wide ? 16 : 8;
  image.format = (color ? PNG_FORMAT_FLAG_COLOR : 0u) | (wide ? PNG_FORMAT_FLAG_LINEAR : 0u);

  const std::size_t count = static_cast<std::size_t>(out.width) * out.height * out.channels;
  png_color black{0, 0, 0};
  bool ok = false;
  if (wide) {
    std::vector<png_uint_16> buf(count);
    ok = png_image_finish_read(&image, &black, buf.data(), 0, nullptr) != 0;
    out.values.resize(count);
    for (std::size_t i = 0; i < count; ++i) out.values[i] = static_cast<float>(buf[i]) / 65535.0f;
  } else {
    std::vector<png_byte> buf(count);
    ok = png_image_finish_read(&image, &black, buf.data(), 0, nullptr) != 0;
    out.values.resize(count);
    for (std::size_t i = 0; i < count; ++i) out.values[i] = static_cast<float>(buf[i]) / 255.0f;
  }
  if (!ok) {
    std::string msg = image.message;
    png_image_free(&image);
    throw ImageError("cannot decode image " + path.string() + ": " + msg);
  }
  return out;
}

void write_png(const std::filesystem::path& path, int width, int height, int channels,
               std::span<const std::uint8_t> pixels) {
  if (channels != 1 && channels != 3) throw ImageError("write_png: channels must be 1 or 3");
  if (pixels.size() != static_cast<std::size_t>(width) * height * channels) {
    throw ImageError("write_png: pixel buffer size mismatch for " + path.string());
  }
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.c_str(), 0, pixels.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw ImageError("cannot write image " + path.string() + ": " + msg);
  }
}

}  // namespace cmtnet
