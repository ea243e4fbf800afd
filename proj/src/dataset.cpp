// SPDX-License-Identifier: Apache-2.0

#include "jvit/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

namespace jvit {

std::vector<std::size_t> Dataset::labels() const {
  std::vector<std::size_t> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.label);
  return out;
}

void Dataset::validate() const {
  const std::size_t n = shape.pixels();
  if (n == 0) throw FormatError(name + ": empty image shape");
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.pixels.size() != n) {
      std::ostringstream os;
      os << name << ": record " << i << " has " << r.pixels.size() << " values, expected " << n;
      throw FormatError(os.str());
    }
    if (r.label >= num_classes) {
      std::ostringstream os;
      os << name << ": record " << i << " label " << r.label << " >= " << num_classes;
      throw FormatError(os.str());
    }
    for (float v : r.pixels)
      if (!(v >= 0.0f && v <= 1.0f))
        throw FormatError(name + ": record " + std::to_string(i) + " has a pixel outside [0, 1]");
  }
}

template <typename T>
Tensor<T> make_batch(const Dataset& data, std::span<const std::size_t> indices) {
  const ImageShape s = data.shape;
  std::vector<T> buf;
  buf.reserve(indices.size() * s.pixels());
  for (std::size_t i : indices) {
    const auto& px = data.records.at(i).pixels;
    buf.insert(buf.end(), px.begin(), px.end());
  }
  return Tensor<T>({indices.size(), s.h, s.w, s.c}, std::move(buf));
}

template Tensor<float> make_batch<float>(const Dataset&, std::span<const std::size_t>);
template Tensor<double> make_batch<double>(const Dataset&, std::span<const std::size_t>);

Dataset load_cifar10_bin(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() % kCifarRecordBytes != 0) {
    std::ostringstream os;
    os << path.string() << ": size " << bytes.size() << " is not a multiple of "
       << kCifarRecordBytes;
    throw FormatError(os.str());
  }
  Dataset d;
  d.name = path.filename().string();
  d.shape = {32, 32, 3};
  d.num_classes = 10;
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  d.records.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + i * kCifarRecordBytes;
    if (rec[0] >= 10) {
      std::ostringstream os;
      os << path.string() << ": record " << i << " has label byte " << int(rec[0]);
      throw FormatError(os.str());
    }
    auto& r = d.records[i];
    r.label = rec[0];
    r.pixels.resize(3072);
    // planar R, G, B -> interleaved HWC
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < 1024; ++p)
        r.pixels[p * 3 + c] = static_cast<float>(rec[1 + c * 1024 + p]) / 255.0f;
  }
  return d;
}

void write_cifar10_bin(const Dataset& data, const std::filesystem::path& path) {
  if (data.shape != ImageShape{32, 32, 3})
    throw FormatError("CIFAR-10 records must be 32x32x3");
  std::vector<unsigned char> bytes(data.size() * kCifarRecordBytes);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& r = data.records[i];
    if (r.label >= 10) throw FormatError("CIFAR-10 labels must be below 10");
    unsigned char* rec = bytes.data() + i * kCifarRecordBytes;
    rec[0] = static_cast<unsigned char>(r.label);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < 1024; ++p) {
        const float v = std::clamp(r.pixels[p * 3 + c], 0.0f, 1.0f);
        rec[1 + c * 1024 + p] = static_cast<unsigned char>(std::lround(v * 255.0f));
      }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed: " + path.string());
}

Dataset gen_synthetic(const SyntheticSpec& spec) {
  if (spec.patch_size == 0 || spec.h % spec.patch_size || spec.w % spec.patch_size) {
    std::ostringstream os;
    os << "synthetic: " << spec.h << "x" << spec.w << " is not divisible by patch size "
       << spec.patch_size;
    throw std::invalid_argument(os.str());
  }
  if (spec.num_classes == 0 || spec.c == 0)
    throw std::invalid_argument("synthetic: need at least one class and one channel");

  Dataset d;
  d.name = "synthetic";
  d.shape = {spec.h, spec.w, spec.c};
  d.num_classes = spec.num_classes;
  d.records.resize(spec.num_images);

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.02);
  const double two_pi = 2.0 * std::numbers::pi;
  constexpr double kRamp = 0.3, kTexRamp = 0.25, kTex = 0.5;
  const double k_count = static_cast<double>(spec.num_classes);
  const double grid_cycles = static_cast<double>(std::max(spec.h, spec.w) / spec.patch_size);

  for (std::size_t i = 0; i < spec.num_images; ++i) {
    auto& r = d.records[i];
    r.label = i % spec.num_classes;
    const double k = static_cast<double>(r.label);
    const double theta = std::numbers::pi * k / k_count;
    // One to two patches per cycle, so a single patch shows the orientation.
    const double freq = grid_cycles * (0.5 + 0.25 * static_cast<double>(r.label % 3));
    const double phase = two_pi * unit(rng);
    const double amp = 0.8 + 0.4 * unit(rng);
    const double ct = std::cos(theta), st = std::sin(theta);
    r.pixels.resize(d.shape.pixels());
    for (std::size_t y = 0; y < spec.h; ++y) {
      const double fy = (static_cast<double>(y) + 0.5) / static_cast<double>(spec.h);
      for (std::size_t x = 0; x < spec.w; ++x) {
        const double fx = (static_cast<double>(x) + 0.5) / static_cast<double>(spec.w);
        const double tex = amp * std::sin(two_pi * freq * (fx * ct + fy * st) + phase);
        for (std::size_t c = 0; c < spec.c; ++c) {
          double v;
          switch (c % 3) {
            case 0: v = 0.5 + kRamp * (fx - 0.5) + kTexRamp * tex; break;
            case 1: v = 0.5 + kRamp * (fy - 0.5) + kTexRamp * tex; break;
            default: v = 0.5 + kTex * tex; break;
          }
          v += noise(rng);
          r.pixels[(y * spec.w + x) * spec.c + c] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
  }
  return d;
}

}  // namespace jvit
