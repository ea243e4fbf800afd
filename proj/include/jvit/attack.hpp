// SPDX-License-Identifier: Apache-2.0
//
// Adversarial attacks on [0, 1] images: FGSM, BIM, PGD and MI (L-inf, sign
// gradient), CW-L2 (tanh box), Square (query-only random search), plus the
// transfer harness that crafts on a surrogate and scores a target.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "jvit/dataset.hpp"
#include "jvit/model.hpp"

namespace jvit {

enum class AttackKind { kFgsm, kBim, kPgd, kMi, kCw, kSquare };

std::string_view attack_name(AttackKind kind);
/// Throws std::invalid_argument for an unknown name.
AttackKind parse_attack_kind(std::string_view name);

struct AttackConfig {
  AttackKind kind = AttackKind::kPgd;
  double epsilon = 16.0 / 255.0;  // L-inf budget, [0, 1] units
  double alpha = 2.0 / 255.0;     // step size, [0, 1] units
  std::int64_t steps = 10;
  double mi_decay = 1.0;
  double cw_c = 1.0;
  double cw_lr = 0.5;
  std::int64_t max_queries = 500;
  bool random_start = true;  // PGD only

  void validate() const;
};

/// Differentiable image classifier. Implementations must be safe to call
/// from several threads at once.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual ImageShape input_shape() const = 0;
  virtual std::size_t num_classes() const = 0;
  virtual std::vector<float> logits(std::span<const float> image) const = 0;
  /// d CE(logits(x), label) / dx.
  virtual std::vector<float> ce_gradient(std::span<const float> image,
                                         std::size_t label) const = 0;
  /// d <weights, logits(x)> / dx.
  virtual std::vector<float> logit_gradient(std::span<const float> image,
                                            std::span<const float> weights) const = 0;
};

/// Classification flow of a ViT over a frozen weight snapshot.
class VitClassifier final : public Classifier {
 public:
  VitClassifier(ModelConfig config, const Parameters<float>& params);
  ImageShape input_shape() const override;
  std::size_t num_classes() const override { return config_.num_classes; }
  std::vector<float> logits(std::span<const float> image) const override;
  std::vector<float> ce_gradient(std::span<const float> image, std::size_t label) const override;
  std::vector<float> logit_gradient(std::span<const float> image,
                                    std::span<const float> weights) const override;

 private:
  ModelConfig config_;
  Parameters<float> params_;
};

/// Query access only: image -> logits.
using QueryFn = std::function<std::vector<float>(std::span<const float>)>;

/// z_label - max_{k != label} z_k; negative means misclassified.
double margin(std::span<const float> logits, std::size_t label);

std::vector<float> fgsm(const Classifier& model, std::span<const float> image,
                        std::size_t label, double epsilon);

/// BIM, PGD or MI. rng is used only for the PGD random start.
std::vector<float> iterative_linf(const Classifier& model, std::span<const float> image,
                                  std::size_t label, const AttackConfig& config,
                                  std::mt19937_64& rng);

std::vector<float> cw_l2(const Classifier& model, std::span<const float> image,
                         std::size_t label, const AttackConfig& config);

struct SquareResult {
  std::vector<float> image;
  std::int64_t queries = 0;
  std::vector<double> accepted_margins;  // margin after every accepted candidate
};

SquareResult square_attack(const QueryFn& query, ImageShape shape, std::span<const float> image,
                           std::size_t label, double epsilon, std::int64_t max_queries,
                           std::mt19937_64& rng);

/// Fraction of the initial square size used at iteration `it` of `n_iters`.
double square_p_selection(double p_init, std::int64_t it, std::int64_t n_iters);

struct AttackReport {
  AttackConfig config;
  std::size_t n_images = 0;
  double clean_acc = 0;
  double robust_acc = 0;
  double mean_queries = 0;
  std::int64_t max_queries_used = 0;
  std::vector<double> linf;  // per image ||x' - x||_inf
  std::vector<double> l2;
  std::vector<std::vector<float>> adversarial;
};

/// Crafts every example with white-box access to `surrogate` (queries only
/// for Square) and scores `target` on the result. Pass the same model twice
/// for a white-box evaluation. Per-image work runs in parallel.
AttackReport run_attack(const Classifier& target, const Classifier& surrogate,
                        const Dataset& data, const AttackConfig& config, std::uint64_t seed,
                        bool keep_images = false);

/// {clean_acc, robust_acc, n_images, attack: {kind, eps_255, alpha_255, steps, queries}}.
nlohmann::json report_to_json(const AttackReport& report);

}  // namespace jvit
