// SPDX-License-Identifier: Apache-2.0
//
// Image datasets: CIFAR-10 binary batches and synthetic textures.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "jvit/tensor.hpp"

namespace jvit {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ImageShape {
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t c = 0;
  std::size_t pixels() const { return h * w * c; }
  bool operator==(const ImageShape&) const = default;
};

/// H x W x C floats in [0, 1], row-major with channels innermost.
struct ImageRecord {
  std::vector<float> pixels;
  std::size_t label = 0;
};

struct Dataset {
  std::string name;
  ImageShape shape;
  std::size_t num_classes = 0;
  std::vector<ImageRecord> records;

  std::size_t size() const { return records.size(); }
  std::vector<std::size_t> labels() const;
  /// Throws FormatError when a record breaks the shape/range/label contract.
  void validate() const;
};

/// Images at the given indices as a [B, H, W, C] tensor.
template <typename T>
Tensor<T> make_batch(const Dataset& data, std::span<const std::size_t> indices);

// --- CIFAR-10 binary -------------------------------------------------------

inline constexpr std::size_t kCifarRecordBytes = 3073;

/// Records are 1 label byte + 3072 channel-planar (R, G, B) pixel bytes.
Dataset load_cifar10_bin(const std::filesystem::path& path);
/// Inverse of load_cifar10_bin; pixels are rounded to the nearest byte.
void write_cifar10_bin(const Dataset& data, const std::filesystem::path& path);

// --- synthetic data ----------------------------------------------------------

struct SyntheticSpec {
  std::size_t num_images = 1000;
  std::size_t h = 32;
  std::size_t w = 32;
  std::size_t c = 3;
  std::size_t patch_size = 4;
  std::size_t num_classes = 10;
  std::uint64_t seed = 0;
};

/// Class-conditioned oriented texture on top of a horizontal intensity ramp
/// (channel 0) and a vertical ramp (channel 1), so every patch carries both
/// class and grid-position evidence. Pure function of the spec.
Dataset gen_synthetic(const SyntheticSpec& spec);

}  // namespace jvit
