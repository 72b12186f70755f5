#include "sfl/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <map>

namespace sfl {

Image8 read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str()))
    throw DataError("cannot read png '" + path.string() + "': " + img.message);
  const bool color = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
  img.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image8 out;
  out.width = static_cast<int>(img.width);
  out.height = static_cast<int>(img.height);
  out.channels = color ? 3 : 1;
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&img);
    throw DataError("cannot decode png '" + path.string() + "': " + img.message);
  }
  return out;
}

void write_png(const std::filesystem::path& path, const Image8& image) {
  if (image.channels != 1 && image.channels != 3) throw ContractError("write_png: channels must be 1 or 3");
  if (image.pixels.size() != static_cast<std::size_t>(image.width) * image.height * image.channels)
    throw ContractError("write_png: pixel buffer size does not match geometry");
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, image.pixels.data(), 0, nullptr))
    throw DataError("cannot write png '" + path.string() + "': " + img.message);
}

const std::array<std::array<std::uint8_t, 3>, 5>& mask_palette() {
  static const std::array<std::array<std::uint8_t, 3>, 5> palette{{
      {0, 0, 0},
      {230, 159, 0},
      {86, 180, 233},
      {0, 158, 115},
      {204, 121, 167},
  }};
  return palette;
}

Image8 colorize_mask(std::span<const ClassId> mask, int width, int height) {
  if (mask.size() != static_cast<std::size_t>(width) * height) throw ContractError("colorize_mask: size mismatch");
  Image8 out{width, height, 3, std::vector<std::uint8_t>(mask.size() * 3)};
  const auto& pal = mask_palette();
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const auto& c = pal[std::min<std::size_t>(mask[i], pal.size() - 1)];
    std::copy(c.begin(), c.end(), out.pixels.begin() + static_cast<std::ptrdiff_t>(3 * i));
  }
  return out;
}

namespace {

std::vector<float> resize_bilinear(const Image8& in, int size) {
  std::vector<float> out(static_cast<std::size_t>(3) * size * size);
  const double sy = static_cast<double>(in.height) / size, sx = static_cast<double>(in.width) / size;
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  auto px = [&](int y, int x, int c) {
    const int ch = in.channels == 3 ? c : 0;
    return in.pixels[(static_cast<std::size_t>(y) * in.width + x) * in.channels + ch] / 255.0;
  };
  for (int y = 0; y < size; ++y) {
    const double fy = std::max(0.0, (y + 0.5) * sy - 0.5);
    const int y0 = std::min(static_cast<int>(fy), in.height - 1), y1 = std::min(y0 + 1, in.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < size; ++x) {
      const double fx = std::max(0.0, (x + 0.5) * sx - 0.5);
      const int x0 = std::min(static_cast<int>(fx), in.width - 1), x1 = std::min(x0 + 1, in.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double v = (1 - wy) * ((1 - wx) * px(y0, x0, c) + wx * px(y0, x1, c)) +
                         wy * ((1 - wx) * px(y1, x0, c) + wx * px(y1, x1, c));
        out[c * plane + static_cast<std::size_t>(y) * size + x] = static_cast<float>(v);
      }
    }
  }
  return out;
}

std::vector<ClassId> resize_mask(const Image8& in, int size, int num_classes, const std::string& stem) {
  if (in.channels != 1) throw DataError("mask '" + stem + "' is not single-channel");
  bool binary255 = true;
  for (auto v : in.pixels)
    if (v != 0 && v != 255) binary255 = false;
  std::vector<ClassId> out(static_cast<std::size_t>(size) * size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const int sy = std::min(in.height - 1, static_cast<int>((y + 0.5) * in.height / size));
      const int sx = std::min(in.width - 1, static_cast<int>((x + 0.5) * in.width / size));
      int v = in.pixels[static_cast<std::size_t>(sy) * in.width + sx];
      if (binary255) v = v ? 1 : 0;
      if (v >= num_classes)
        throw DataError("mask '" + stem + "' holds class id " + std::to_string(v) + " >= num_classes " +
                        std::to_string(num_classes));
      out[static_cast<std::size_t>(y) * size + x] = static_cast<ClassId>(v);
    }
  return out;
}

}  // namespace

std::vector<Sample> load_image_mask_dir(const std::filesystem::path& images, const std::filesystem::path& masks,
                                        int num_classes, int size) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(images)) throw DataError("image directory '" + images.string() + "' not found");
  if (!fs::is_directory(masks)) throw DataError("mask directory '" + masks.string() + "' not found");
  std::map<std::string, fs::path> image_files, mask_files;
  for (const auto& e : fs::directory_iterator(images))
    if (e.path().extension() == ".png") image_files[e.path().stem().string()] = e.path();
  for (const auto& e : fs::directory_iterator(masks))
    if (e.path().extension() == ".png") mask_files[e.path().stem().string()] = e.path();
  std::string missing;
  for (const auto& [stem, p] : image_files)
    if (!mask_files.count(stem)) missing += (missing.empty() ? "" : ", ") + stem;
  if (!missing.empty()) throw DataError("no mask for image(s): " + missing);

  std::vector<Sample> out;
  for (const auto& [stem, p] : image_files) {
    Sample s;
    s.id = stem;
    s.channels = 3;
    s.height = s.width = size;
    s.image = resize_bilinear(read_png(p), size);
    s.mask = resize_mask(read_png(mask_files[stem]), size, num_classes, stem);
    out.push_back(std::move(s));
  }
  return out;
}

void save_sample_png(const std::filesystem::path& image_path, const std::filesystem::path& mask_path,
                     const Sample& s) {
  Image8 img{s.width, s.height, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(3) * s.width * s.height)};
  const std::size_t plane = static_cast<std::size_t>(s.width) * s.height;
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) {
      const float v = s.image[std::min(c, s.channels - 1) * plane + i];
      img.pixels[3 * i + c] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
    }
  write_png(image_path, img);
  Image8 m{s.width, s.height, 1, std::vector<std::uint8_t>(s.mask.begin(), s.mask.end())};
  write_png(mask_path, m);
}

}  // namespace sfl
