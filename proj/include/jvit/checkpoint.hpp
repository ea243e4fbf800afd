// SPDX-License-Identifier: Apache-2.0
//
// JVIT checkpoint container: "JVIT" magic, u32 version, u64-length UTF-8
// JSON config blob, u32 tensor count, then per tensor a u32-length name,
// u32 rank, u64 dims and a little-endian float32 payload.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "jvit/dataset.hpp"
#include "jvit/jigsaw.hpp"
#include "jvit/model.hpp"
#include "jvit/train.hpp"

namespace jvit {

inline constexpr char kCheckpointMagic[4] = {'J', 'V', 'I', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
/// magic + version u32 + config length u64 + tensor count u32.
inline constexpr std::size_t kCheckpointHeaderBytes = 4 + 4 + 8 + 4;

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

/// Raw container: header, UTF-8 JSON config blob, tensor table.
void write_tensor_file(const std::filesystem::path& path, const nlohmann::json& config,
                       std::span<const NamedTensor> tensors);
struct TensorFile {
  nlohmann::json config;
  std::vector<NamedTensor> tensors;
};
TensorFile read_tensor_file(const std::filesystem::path& path);

struct Checkpoint {
  ModelConfig model;
  Parameters<float> params;
  JigsawHead<float> head;
  std::optional<OptimState> optim;
  nlohmann::json extra;  // free-form metadata (resolved run config, ...)
};

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& model,
                     const Parameters<float>& params, const JigsawHead<float>& head,
                     const OptimState* optim = nullptr,
                     const nlohmann::json& extra = nlohmann::json::object());
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace jvit
