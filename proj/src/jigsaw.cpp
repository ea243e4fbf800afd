// SPDX-License-Identifier: Apache-2.0

#include "jvit/jigsaw.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace jvit {

void JigsawConfig::validate() const {
  if (!(gamma >= 0.0 && gamma < 1.0))
    throw std::invalid_argument("jigsaw config: gamma must be in [0, 1)");
  if (!(eta >= 0.0)) throw std::invalid_argument("jigsaw config: eta must be non-negative");
}

std::size_t kept_count(std::size_t num_patches, double gamma) {
  if (!(gamma >= 0.0 && gamma < 1.0))
    throw std::invalid_argument("jigsaw: gamma must be in [0, 1)");
  // The 1e-9 slack keeps decimal ratios such as 0.57 * 100 from flooring to 56.
  const auto masked = static_cast<std::size_t>(
      std::floor(gamma * static_cast<double>(num_patches) + 1e-9));
  return num_patches - std::min(masked, num_patches);
}

JigsawSample sample_jigsaw(std::size_t num_patches, double gamma, Rng& rng) {
  const std::size_t keep = kept_count(num_patches, gamma);
  std::vector<std::size_t> perm(num_patches);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  perm.resize(keep);
  JigsawSample s;
  s.targets = perm;
  s.kept = std::move(perm);
  return s;
}

template <typename T>
JigsawHead<T> JigsawHead<T>::clone() const {
  JigsawHead out;
  std::vector<const Tensor<T>*> src;
  for_each([&](const std::string&, const Tensor<T>& t, bool) { src.push_back(&t); });
  std::size_t i = 0;
  out.for_each([&](const std::string&, Tensor<T>& t, bool) { t = src[i++]->clone(); });
  return out;
}

template <typename T>
JigsawHead<T> JigsawHead<T>::frozen() const {
  JigsawHead out = clone();
  out.for_each([](const std::string&, Tensor<T>& t, bool) { t.set_requires_grad(false); });
  return out;
}

template <typename T>
void JigsawHead<T>::zero_grad() {
  for_each([](const std::string&, Tensor<T>& t, bool) { t.zero_grad(); });
}

template <typename T>
JigsawHead<T> init_jigsaw_head(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t d = cfg.embed_dim, l = cfg.num_patches();
  JigsawHead<T> h;
  h.fc1_weight = Tensor<T>::zeros({d, d}, true);
  h.fc1_bias = Tensor<T>::zeros({d}, true);
  h.fc2_weight = Tensor<T>::zeros({d, d}, true);
  h.fc2_bias = Tensor<T>::zeros({d}, true);
  h.fc3_weight = Tensor<T>::zeros({d, l}, true);
  h.fc3_bias = Tensor<T>::zeros({l}, true);
  // He-scaled truncated normal: the head is narrow (width D), where a fixed
  // 0.02 would shrink activations ~10x per ReLU layer.
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill = [&](Tensor<T>& w, double stddev) {
    for (T& v : w.mutable_data()) {
      double z;
      do {
        z = normal(rng);
      } while (std::abs(z) > 2.0);
      v = static_cast<T>(stddev * z);
    }
  };
  const double fan_in = static_cast<double>(d);
  fill(h.fc1_weight, std::sqrt(2.0 / fan_in));
  fill(h.fc2_weight, std::sqrt(2.0 / fan_in));
  fill(h.fc3_weight, std::sqrt(1.0 / fan_in));
  return h;
}

template <typename To, typename From>
JigsawHead<To> cast_head(const JigsawHead<From>& head) {
  JigsawHead<To> out;
  std::vector<const Tensor<From>*> src;
  head.for_each([&](const std::string&, const Tensor<From>& t, bool) { src.push_back(&t); });
  std::size_t i = 0;
  out.for_each([&](const std::string&, Tensor<To>& t, bool) {
    const auto& s = *src[i++];
    t = Tensor<To>(s.shape(), std::vector<To>(s.data().begin(), s.data().end()),
                   s.requires_grad());
  });
  return out;
}

template <typename T>
Tensor<T> jigsaw_forward(Graph<T>& g, const Tensor<T>& images, const Parameters<T>& params,
                         const JigsawHead<T>& head, const ModelConfig& cfg,
                         std::span<const JigsawSample> samples) {
  if (images.rank() != 4 || samples.size() != images.dim(0))
    throw ShapeError("jigsaw_forward: need one sample per image");
  if (head.fc3_weight.dim(1) != cfg.num_patches())
    throw ShapeError("jigsaw_forward: head output width differs from the patch count");
  const std::size_t m = samples.front().kept.size();
  EmbedOptions opt;
  opt.use_pos_embed = false;
  opt.prepend_cls = false;
  for (const auto& s : samples) {
    if (s.kept.size() != m || s.kept.empty())
      throw ShapeError("jigsaw_forward: all samples must keep the same non-zero patch count");
    opt.kept.insert(opt.kept.end(), s.kept.begin(), s.kept.end());
  }
  auto patches = patchify(g, images, cfg.patch_size);
  TokenSequence<T> seq{embed(g, patches, params, opt), false};
  auto enc = encoder_forward(g, seq, params, cfg, false);
  auto x = enc.sequence.tokens;  // [B, M, D]
  x = g.relu(g.add(g.matmul(x, head.fc1_weight), head.fc1_bias));
  x = g.relu(g.add(g.matmul(x, head.fc2_weight), head.fc2_bias));
  return g.add(g.matmul(x, head.fc3_weight), head.fc3_bias);
}

template <typename T>
Tensor<T> jigsaw_loss(Graph<T>& g, const Tensor<T>& logits,
                      std::span<const JigsawSample> samples) {
  if (logits.rank() != 3 || logits.dim(0) != samples.size())
    throw ShapeError("jigsaw_loss: expected logits [B, M, L], got " + shape_str(logits.shape()));
  const std::size_t b = logits.dim(0), m = logits.dim(1), l = logits.dim(2);
  std::vector<std::size_t> targets;
  targets.reserve(b * m);
  for (const auto& s : samples) {
    if (s.targets.size() != m) throw ShapeError("jigsaw_loss: target count mismatch");
    targets.insert(targets.end(), s.targets.begin(), s.targets.end());
  }
  return g.cross_entropy(g.reshape(logits, {b * m, l}), targets);
}

template <typename T>
JointLoss<T> total_loss(Graph<T>& g, const Tensor<T>& cls_logits,
                        std::span<const std::size_t> labels, const Tensor<T>& jigsaw_logits,
                        std::span<const JigsawSample> samples, double eta) {
  if (!(eta >= 0.0)) throw std::invalid_argument("total_loss: eta must be non-negative");
  const T eta_t = static_cast<T>(eta);
  auto cls = g.cross_entropy(cls_logits, labels);
  auto jig = jigsaw_loss(g, jigsaw_logits, samples);
  auto total = g.add(cls, g.scale(jig, eta_t));
  JointLoss<T> out;
  out.total = total;
  out.parts = {cls.item(), jig.item(), total.item(), eta_t};
  return out;
}

#define JVIT_INSTANTIATE_JIGSAW(T)                                                        \
  template struct JigsawHead<T>;                                                          \
  template JigsawHead<T> init_jigsaw_head<T>(const ModelConfig&, std::uint64_t);          \
  template Tensor<T> jigsaw_forward(Graph<T>&, const Tensor<T>&, const Parameters<T>&,    \
                                    const JigsawHead<T>&, const ModelConfig&,             \
                                    std::span<const JigsawSample>);                       \
  template Tensor<T> jigsaw_loss(Graph<T>&, const Tensor<T>&,                             \
                                 std::span<const JigsawSample>);                          \
  template JointLoss<T> total_loss(Graph<T>&, const Tensor<T>&,                           \
                                   std::span<const std::size_t>, const Tensor<T>&,        \
                                   std::span<const JigsawSample>, double);

JVIT_INSTANTIATE_JIGSAW(float)
JVIT_INSTANTIATE_JIGSAW(double)
#undef JVIT_INSTANTIATE_JIGSAW

template JigsawHead<double> cast_head<double, float>(const JigsawHead<float>&);
template JigsawHead<float> cast_head<float, double>(const JigsawHead<double>&);

}  // namespace jvit
