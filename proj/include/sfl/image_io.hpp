#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sfl/data.hpp"

namespace sfl {

struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1 or 3
  std::vector<std::uint8_t> pixels;  // interleaved rows
};

Image8 read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image8& image);

// Fixed palette used when dumping class-id masks.
const std::array<std::array<std::uint8_t, 3>, 5>& mask_palette();
Image8 colorize_mask(std::span<const ClassId> mask, int width, int height);

// Pairs <images>/<stem>.png with <masks>/<stem>.png, resizing to size x size
// (bilinear for images, nearest for masks). Masks holding only {0,255} are
// read as {0,1}.
std::vector<Sample> load_image_mask_dir(const std::filesystem::path& images, const std::filesystem::path& masks,
                                        int num_classes, int size = 240);

void save_sample_png(const std::filesystem::path& image_path, const std::filesystem::path& mask_path,
                     const Sample& s);

}  // namespace sfl
