// SPDX-License-Identifier: Apache-2.0
//
// Training engine: AdamW with decoupled weight decay, linear warm-up +
// cosine learning-rate schedule, symmetric label noise, and the three
// regimens (baseline, joint auxiliary loss, jigsaw pretext then
// classification fine-tuning).

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "jvit/dataset.hpp"
#include "jvit/jigsaw.hpp"
#include "jvit/model.hpp"

namespace jvit {

enum class Regimen { kBaseline, kAuxiliary, kPretext };

std::string_view regimen_name(Regimen r);
Regimen parse_regimen(std::string_view name);

struct TrainConfig {
  std::int64_t steps = 500;
  std::size_t batch_size = 8;
  double base_lr = 1e-3;
  double min_lr = 1e-6;
  std::int64_t warmup_steps = 0;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  JigsawConfig jigsaw;
  Regimen regimen = Regimen::kAuxiliary;
  std::int64_t pretext_steps = 0;
  double noise_rate = 0.0;
  std::uint64_t seed = 0;
  std::int64_t log_interval = 10;
  std::int64_t eval_interval = 0;  // 0: evaluate only at the last step

  void validate() const;
};

/// Raised when the loss stops being finite.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::int64_t step, const std::string& what)
      : std::runtime_error(what), step_(step) {}
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

struct MomentSlot {
  Shape shape;
  std::vector<float> m;
  std::vector<float> v;
  std::int64_t step = 0;
};

/// AdamW moments keyed by parameter name. Parameters that never received a
/// gradient have no slot.
struct OptimState {
  std::map<std::string, MomentSlot> slots;
  std::int64_t step = 0;
};

struct AdamWHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

/// Learning rate at `step` in [0, config.steps]: linear ramp 0 -> base_lr
/// over warmup_steps, then cosine decay base_lr -> min_lr.
double lr_at(std::int64_t step, const TrainConfig& config);

/// One AdamW update of a single tensor; t is the (already incremented)
/// per-tensor step count.
template <typename T>
void adamw_update(std::span<T> w, std::span<const T> g, std::span<T> m, std::span<T> v,
                  std::int64_t t, const AdamWHyper& hyper, bool decay);

/// AdamW over every tensor holding a gradient. Biases, layernorm affines,
/// cls_token and pos_embed are exempt from weight decay.
void adamw_step(Parameters<float>& params, JigsawHead<float>& head, OptimState& state,
                const AdamWHyper& hyper);

struct NoisyLabels {
  std::vector<std::size_t> labels;
  std::vector<bool> corrupted;
};

/// Each label is replaced with probability noise_rate by a uniformly drawn
/// different class.
NoisyLabels inject_label_noise(std::span<const std::size_t> labels, double noise_rate,
                               std::size_t num_classes, std::uint64_t seed);

struct MetricsRecord {
  std::int64_t step = 0;
  double lr = 0;
  float loss_cls = 0;
  float loss_jigsaw = 0;
  float loss_total = 0;
  double train_acc = 0;
  double jigsaw_acc = 0;
  std::optional<double> eval_acc;
};

struct MetricsLog {
  std::vector<MetricsRecord> records;
};

inline constexpr const char* kMetricsHeader =
    "step,lr,loss_cls,loss_jigsaw,loss_total,train_acc,jigsaw_acc,eval_acc";

void write_metrics_csv(const MetricsLog& log, std::ostream& out);

struct TrainResult {
  Parameters<float> params;
  JigsawHead<float> head;
  OptimState optim;
  MetricsLog log;
  NoisyLabels train_labels;
};

using StepCallback = std::function<void(const MetricsRecord&)>;

/// Runs config.steps optimizer steps on copies of the given weights.
/// Deterministic given config.seed.
TrainResult train(const ModelConfig& model, const Parameters<float>& params,
                  const JigsawHead<float>& head, const Dataset& train_set,
                  const TrainConfig& config, const Dataset* eval_set = nullptr,
                  const StepCallback& on_log = {});

/// Index of the largest value; ties resolve to the lowest index.
template <typename T>
std::size_t argmax(std::span<const T> values);

/// Fraction of rows of `logits` ([rows, k] flattened) whose argmax equals
/// the label.
double top1_accuracy(std::span<const float> logits, std::size_t k,
                     std::span<const std::size_t> labels);

std::vector<std::size_t> predict(const ModelConfig& model, const Parameters<float>& params,
                                 const Dataset& data, std::size_t batch_size = 64);

/// Top-1 accuracy of the classification flow.
double evaluate(const ModelConfig& model, const Parameters<float>& params,
                const Dataset& data, std::size_t batch_size = 64);

/// Fraction of kept tokens whose predicted position is their true position.
double jigsaw_position_accuracy(const ModelConfig& model, const Parameters<float>& params,
                                const JigsawHead<float>& head, const Dataset& data,
                                double gamma, std::uint64_t seed,
                                std::size_t batch_size = 64);

}  // namespace jvit
