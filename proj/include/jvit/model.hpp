// SPDX-License-Identifier: Apache-2.0
//
// Vision Transformer backbone: patchify, patch embedding, class token,
// positional embeddings, pre-norm encoder blocks and the linear
// classification head.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "jvit/tensor.hpp"

namespace jvit {

struct ModelConfig {
  std::size_t image_h = 32;
  std::size_t image_w = 32;
  std::size_t channels = 3;
  std::size_t patch_size = 4;
  std::size_t embed_dim = 64;
  std::size_t num_layers = 4;
  std::size_t num_heads = 4;
  std::size_t num_classes = 10;

  std::size_t grid_h() const { return image_h / patch_size; }
  std::size_t grid_w() const { return image_w / patch_size; }
  std::size_t num_patches() const { return grid_h() * grid_w(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t head_dim() const { return embed_dim / num_heads; }
  std::size_t mlp_dim() const { return 4 * embed_dim; }
  std::size_t pixels() const { return image_h * image_w * channels; }

  /// Throws std::invalid_argument naming the violated constraint.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct EncoderBlock {
  Tensor<T> norm1_weight, norm1_bias;
  Tensor<T> q_weight, q_bias;
  Tensor<T> k_weight, k_bias;
  Tensor<T> v_weight, v_bias;
  Tensor<T> proj_weight, proj_bias;
  Tensor<T> norm2_weight, norm2_bias;
  Tensor<T> fc1_weight, fc1_bias;
  Tensor<T> fc2_weight, fc2_bias;
};

/// Learnable weights of the backbone and classification head. Tensor
/// members are shared handles; use clone() for an independent copy.
template <typename T>
struct Parameters {
  Tensor<T> patch_weight, patch_bias;  // (P*P*C) x D, D
  Tensor<T> cls_token;                 // D
  Tensor<T> pos_embed;                 // (L+1) x D
  std::vector<EncoderBlock<T>> blocks;
  Tensor<T> norm_weight, norm_bias;    // final layernorm
  Tensor<T> head_weight, head_bias;    // D x K, K

  /// Visits every tensor as f(name, tensor, decay) in a fixed order.
  /// decay is false for biases, layernorm affines, cls_token and pos_embed.
  template <typename F>
  void for_each(F&& f);
  template <typename F>
  void for_each(F&& f) const;

  Parameters clone() const;
  /// Deep copy with requires_grad cleared: a read-only snapshot that
  /// several threads may run forward passes on.
  Parameters frozen() const;
  void zero_grad();
};

/// Token sequence flowing through the encoder. tokens is [B, T, D].
template <typename T>
struct TokenSequence {
  Tensor<T> tokens;
  bool has_cls = false;
};

template <typename T>
struct EncoderOutput {
  TokenSequence<T> sequence;
  /// Last-layer attention probabilities [B, heads, T, T] when requested.
  std::vector<T> attention;
};

struct EmbedOptions {
  bool use_pos_embed = true;
  bool prepend_cls = true;
  /// Per-image kept patch indices, flattened [B * M]. Empty keeps all.
  std::vector<std::size_t> kept;
};

/// images [B, H, W, C] -> patches [B, L, P*P*C]; grid row-major, each patch
/// flattened over (row, col, channel). Differentiable in the pixels.
template <typename T>
Tensor<T> patchify(Graph<T>& g, const Tensor<T>& images, std::size_t patch_size);

template <typename T>
Tensor<T> embed(Graph<T>& g, const Tensor<T>& patches, const Parameters<T>& params,
                const EmbedOptions& options);

template <typename T>
EncoderOutput<T> encoder_forward(Graph<T>& g, const TokenSequence<T>& input,
                                 const Parameters<T>& params,
                                 const ModelConfig& config, bool record_attention);

/// Linear head on the CLS token: [B, T, D] -> [B, K].
template <typename T>
Tensor<T> classify(Graph<T>& g, const TokenSequence<T>& encoded,
                   const Parameters<T>& params);

/// Full classification flow: patchify, embed (CLS + positions), encoder,
/// head. images [B, H, W, C] -> logits [B, K].
template <typename T>
Tensor<T> classification_logits(Graph<T>& g, const Tensor<T>& images,
                                const Parameters<T>& params, const ModelConfig& config);

template <typename T>
Parameters<T> init_parameters(const ModelConfig& config, std::uint64_t seed);

template <typename T>
std::size_t count_parameters(const Parameters<T>& params);

/// Closed-form parameter count of the backbone + classification head.
std::size_t expected_parameter_count(const ModelConfig& config);

template <typename To, typename From>
Parameters<To> cast_parameters(const Parameters<From>& params);

/// 2-D map in row-major order.
struct Grid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
};

/// Saliency of the last-layer CLS attention over patches, one map for all
/// heads: each head's CLS->patch row is min-max normalized, heads are
/// averaged, and the grid is min-max normalized again. A constant map is
/// reported as all zeros.
Grid class_attention_map(std::span<const float> image, const Parameters<float>& params,
                         const ModelConfig& config);

/// Reduction used by class_attention_map, exposed for testing:
/// attention is [heads, T, T] with the CLS token at index 0.
Grid reduce_cls_attention(std::span<const double> attention, std::size_t heads,
                          std::size_t tokens, std::size_t grid_h, std::size_t grid_w);

// ---------------------------------------------------------------------------

template <typename T>
template <typename F>
void Parameters<T>::for_each(F&& f) {
  f("patch_embed.weight", patch_weight, true);
  f("patch_embed.bias", patch_bias, false);
  f("cls_token", cls_token, false);
  f("pos_embed", pos_embed, false);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    auto& b = blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    f(p + "norm1.weight", b.norm1_weight, false);
    f(p + "norm1.bias", b.norm1_bias, false);
    f(p + "attn.q.weight", b.q_weight, true);
    f(p + "attn.q.bias", b.q_bias, false);
    f(p + "attn.k.weight", b.k_weight, true);
    f(p + "attn.k.bias", b.k_bias, false);
    f(p + "attn.v.weight", b.v_weight, true);
    f(p + "attn.v.bias", b.v_bias, false);
    f(p + "attn.proj.weight", b.proj_weight, true);
    f(p + "attn.proj.bias", b.proj_bias, false);
    f(p + "norm2.weight", b.norm2_weight, false);
    f(p + "norm2.bias", b.norm2_bias, false);
    f(p + "mlp.fc1.weight", b.fc1_weight, true);
    f(p + "mlp.fc1.bias", b.fc1_bias, false);
    f(p + "mlp.fc2.weight", b.fc2_weight, true);
    f(p + "mlp.fc2.bias", b.fc2_bias, false);
  }
  f("norm.weight", norm_weight, false);
  f("norm.bias", norm_bias, false);
  f("head.weight", head_weight, true);
  f("head.bias", head_bias, false);
}

template <typename T>
template <typename F>
void Parameters<T>::for_each(F&& f) const {
  const_cast<Parameters*>(this)->for_each(
      [&](const std::string& name, Tensor<T>& t, bool decay) {
        f(name, static_cast<const Tensor<T>&>(t), decay);
      });
}

}  // namespace jvit
