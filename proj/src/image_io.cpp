// SPDX-License-Identifier: Apache-2.0

#include "jvit/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

namespace jvit {

namespace {

void write_bytes(const std::filesystem::path& path, const std::string& header,
                 const std::vector<unsigned char>& payload) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << header;
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size()));
  if (!out) throw FormatError("write failed: " + path.string());
}

unsigned char to_byte(double v) { return static_cast<unsigned char>(std::lround(v * 255.0)); }

// Next header token, skipping whitespace and '#' comments.
std::size_t header_int(std::istream& in, const std::string& file) {
  int ch;
  while ((ch = in.peek()) != EOF) {
    if (std::isspace(ch)) {
      in.get();
    } else if (ch == '#') {
      std::string line;
      std::getline(in, line);
    } else {
      break;
    }
  }
  std::size_t v = 0;
  if (!(in >> v)) throw FormatError(file + ": malformed netpbm header");
  return v;
}

PixelImage read_netpbm(const std::filesystem::path& path, const char* magic, std::size_t c) {
  const std::string file = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + file);
  char m[2] = {};
  in.read(m, 2);
  if (!in || m[0] != magic[0] || m[1] != magic[1])
    throw FormatError(file + ": expected a " + std::string(magic, 2) + " file");
  const std::size_t w = header_int(in, file), h = header_int(in, file);
  const std::size_t maxval = header_int(in, file);
  if (w == 0 || h == 0 || maxval == 0 || maxval > 255)
    throw FormatError(file + ": unsupported dimensions or maxval");
  if (!std::isspace(in.get())) throw FormatError(file + ": malformed netpbm header");
  PixelImage img{{h, w, c}, std::vector<float>(h * w * c)};
  std::vector<unsigned char> raw(img.pixels.size());
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size()))
    throw FormatError(file + ": truncated pixel data");
  for (std::size_t i = 0; i < raw.size(); ++i)
    img.pixels[i] = static_cast<float>(raw[i]) / static_cast<float>(maxval);
  return img;
}

}  // namespace

void export_grid_pgm(const Grid& grid, std::size_t scale, const std::filesystem::path& path) {
  if (scale == 0) throw std::invalid_argument("export_grid_pgm: scale must be positive");
  if (grid.rows == 0 || grid.cols == 0 || grid.values.size() != grid.rows * grid.cols)
    throw std::invalid_argument("export_grid_pgm: grid size does not match its shape");
  for (double v : grid.values)
    if (!(v >= 0.0 && v <= 1.0))
      throw std::invalid_argument("export_grid_pgm: value outside [0, 1]");
  const std::size_t w = grid.cols * scale, h = grid.rows * scale;
  std::vector<unsigned char> payload(w * h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      payload[y * w + x] = to_byte(grid.values[(y / scale) * grid.cols + x / scale]);
  std::ostringstream header;
  header << "P5\n" << w << ' ' << h << "\n255\n";
  write_bytes(path, header.str(), payload);
}

PixelImage read_pgm(const std::filesystem::path& path) { return read_netpbm(path, "P5", 1); }

PixelImage read_ppm(const std::filesystem::path& path) { return read_netpbm(path, "P6", 3); }

void write_ppm(const PixelImage& image, const std::filesystem::path& path) {
  if (image.shape.c != 3 || image.pixels.size() != image.shape.pixels())
    throw std::invalid_argument("write_ppm: need an H x W x 3 image");
  std::vector<unsigned char> payload(image.pixels.size());
  for (std::size_t i = 0; i < payload.size(); ++i)
    payload[i] = to_byte(std::clamp(static_cast<double>(image.pixels[i]), 0.0, 1.0));
  std::ostringstream header;
  header << "P6\n" << image.shape.w << ' ' << image.shape.h << "\n255\n";
  write_bytes(path, header.str(), payload);
}

}  // namespace jvit
