// SPDX-License-Identifier: Apache-2.0
//
// Jigsaw position-prediction flow.
//
// A random subset of L - floor(gamma * L) patches, in shuffled order, is fed
// through the shared encoder without positional embeddings and without a
// class token. A 3-layer MLP head (Linear+ReLU, Linear+ReLU, Linear) maps
// every kept token to L position logits; the target of a token is the grid
// index the patch was cut from. The joint objective is
//
//   L_total = CE(cls_logits, y) + eta * CE(position_logits, kept_positions)
//
// with the position term averaged over kept tokens.

#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "jvit/model.hpp"
#include "jvit/tensor.hpp"

namespace jvit {

using Rng = std::mt19937_64;

struct JigsawConfig {
  double eta = 1.0;    // weight of the position loss
  double gamma = 0.5;  // mask ratio in [0, 1)

  void validate() const;
};

struct JigsawSample {
  std::vector<std::size_t> kept;     // shuffled original patch positions
  std::vector<std::size_t> targets;  // == kept
};

template <typename T>
struct JigsawHead {
  Tensor<T> fc1_weight, fc1_bias;  // D x D
  Tensor<T> fc2_weight, fc2_bias;  // D x D
  Tensor<T> fc3_weight, fc3_bias;  // D x L

  template <typename F>
  void for_each(F&& f);
  template <typename F>
  void for_each(F&& f) const;

  JigsawHead clone() const;
  JigsawHead frozen() const;
  void zero_grad();
};

template <typename T>
struct LossBreakdown {
  T loss_cls = 0;
  T loss_jigsaw = 0;
  T loss_total = 0;
  T eta = 0;
};

/// The one expression that defines L_total from its parts.
template <typename T>
T combine_losses(T loss_cls, T loss_jigsaw, T eta) {
  return loss_cls + eta * loss_jigsaw;
}

template <typename T>
struct JointLoss {
  Tensor<T> total;  // differentiable L_total
  LossBreakdown<T> parts;
};

/// Number of patches that survive masking: L - floor(gamma * L).
std::size_t kept_count(std::size_t num_patches, double gamma);

/// Uniform permutation of [0, L), truncated to the first L - floor(gamma*L).
JigsawSample sample_jigsaw(std::size_t num_patches, double gamma, Rng& rng);

template <typename T>
JigsawHead<T> init_jigsaw_head(const ModelConfig& config, std::uint64_t seed);

template <typename To, typename From>
JigsawHead<To> cast_head(const JigsawHead<From>& head);

/// Position logits [B, M, L] for a batch of images [B, H, W, C]; all samples
/// must keep the same number M of patches.
template <typename T>
Tensor<T> jigsaw_forward(Graph<T>& g, const Tensor<T>& images, const Parameters<T>& params,
                         const JigsawHead<T>& head, const ModelConfig& config,
                         std::span<const JigsawSample> samples);

/// Position cross-entropy over kept tokens (mean over all B*M rows).
template <typename T>
Tensor<T> jigsaw_loss(Graph<T>& g, const Tensor<T>& jigsaw_logits,
                      std::span<const JigsawSample> samples);

/// cls_logits [B, K], labels [B]; jigsaw_logits [B, M, L]. Both terms are
/// batch means; L_total = L_cls + eta * L_jigsaw.
template <typename T>
JointLoss<T> total_loss(Graph<T>& g, const Tensor<T>& cls_logits,
                        std::span<const std::size_t> labels, const Tensor<T>& jigsaw_logits,
                        std::span<const JigsawSample> samples, double eta);

// ---------------------------------------------------------------------------

template <typename T>
template <typename F>
void JigsawHead<T>::for_each(F&& f) {
  f("jigsaw.fc1.weight", fc1_weight, true);
  f("jigsaw.fc1.bias", fc1_bias, false);
  f("jigsaw.fc2.weight", fc2_weight, true);
  f("jigsaw.fc2.bias", fc2_bias, false);
  f("jigsaw.fc3.weight", fc3_weight, true);
  f("jigsaw.fc3.bias", fc3_bias, false);
}

template <typename T>
template <typename F>
void JigsawHead<T>::for_each(F&& f) const {
  const_cast<JigsawHead*>(this)->for_each(
      [&](const std::string& name, Tensor<T>& t, bool decay) {
        f(name, static_cast<const Tensor<T>&>(t), decay);
      });
}

}  // namespace jvit
