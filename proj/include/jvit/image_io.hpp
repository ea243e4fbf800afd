// SPDX-License-Identifier: Apache-2.0
//
// Netpbm image files: PGM (P5) maps and PPM (P6) colour images.

#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

#include "jvit/dataset.hpp"
#include "jvit/model.hpp"

namespace jvit {

/// Binary PGM (P5, maxval 255), nearest-neighbour upsampled by `scale`.
/// Values must lie in [0, 1].
void export_grid_pgm(const Grid& grid, std::size_t scale, const std::filesystem::path& path);

struct PixelImage {
  ImageShape shape;
  std::vector<float> pixels;  // H x W x C in [0, 1]
};

PixelImage read_pgm(const std::filesystem::path& path);
PixelImage read_ppm(const std::filesystem::path& path);
void write_ppm(const PixelImage& image, const std::filesystem::path& path);

}  // namespace jvit
