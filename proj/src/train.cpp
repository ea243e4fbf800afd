// SPDX-License-Identifier: Apache-2.0

#include "jvit/train.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <sstream>

namespace jvit {

namespace {

// Uniform double in [0, 1) from the top 53 bits.
double unit_uniform(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

std::string_view regimen_name(Regimen r) {
  switch (r) {
    case Regimen::kBaseline: return "baseline";
    case Regimen::kAuxiliary: return "auxiliary";
    case Regimen::kPretext: return "pretext";
  }
  return "unknown";
}

Regimen parse_regimen(std::string_view name) {
  if (name == "baseline") return Regimen::kBaseline;
  if (name == "auxiliary") return Regimen::kAuxiliary;
  if (name == "pretext") return Regimen::kPretext;
  throw std::invalid_argument("unknown regimen: " + std::string(name));
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("train config: " + what); };
  if (steps < 1) fail("steps must be positive");
  if (batch_size == 0) fail("batch_size must be positive");
  if (warmup_steps < 0 || warmup_steps > steps) fail("warmup_steps must be in [0, steps]");
  if (!(min_lr >= 0.0) || !(base_lr >= min_lr)) fail("need 0 <= min_lr <= base_lr");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    fail("betas must be in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  if (!(noise_rate >= 0.0 && noise_rate <= 1.0)) fail("noise_rate must be in [0, 1]");
  if (pretext_steps < 0 || pretext_steps > steps) fail("pretext_steps must be in [0, steps]");
  if (log_interval < 1) fail("log_interval must be positive");
  if (eval_interval < 0) fail("eval_interval must be non-negative");
  jigsaw.validate();
}

double lr_at(std::int64_t step, const TrainConfig& c) {
  if (step < 0 || step > c.steps) {
    std::ostringstream os;
    os << "lr_at: step " << step << " outside [0, " << c.steps << "]";
    throw std::out_of_range(os.str());
  }
  if (step < c.warmup_steps)
    return c.base_lr * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
  const std::int64_t span = c.steps - c.warmup_steps;
  if (span == 0) return c.base_lr;
  const double progress = static_cast<double>(step - c.warmup_steps) / static_cast<double>(span);
  return c.min_lr + 0.5 * (c.base_lr - c.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
void adamw_update(std::span<T> w, std::span<const T> g, std::span<T> m, std::span<T> v,
                  std::int64_t t, const AdamWHyper& h, bool decay) {
  if (g.size() != w.size() || m.size() != w.size() || v.size() != w.size())
    throw ShapeError("adamw_update: parameter, gradient and moment sizes differ");
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
  const double wd = decay ? h.weight_decay : 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double gi = g[i];
    const double mi = h.beta1 * static_cast<double>(m[i]) + (1.0 - h.beta1) * gi;
    const double vi = h.beta2 * static_cast<double>(v[i]) + (1.0 - h.beta2) * gi * gi;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double mhat = mi / bc1;
    const double vhat = vi / bc2;
    const double wi = w[i];
    w[i] = static_cast<T>(wi - h.lr * (mhat / (std::sqrt(vhat) + h.eps) + wd * wi));
  }
}

template void adamw_update<float>(std::span<float>, std::span<const float>, std::span<float>,
                                  std::span<float>, std::int64_t, const AdamWHyper&, bool);
template void adamw_update<double>(std::span<double>, std::span<const double>,
                                   std::span<double>, std::span<double>, std::int64_t,
                                   const AdamWHyper&, bool);

void adamw_step(Parameters<float>& params, JigsawHead<float>& head, OptimState& state,
                const AdamWHyper& hyper) {
  ++state.step;
  auto visit = [&](const std::string& name, Tensor<float>& t, bool decay) {
    if (!t.has_grad()) return;
    auto [it, inserted] = state.slots.try_emplace(name);
    MomentSlot& slot = it->second;
    if (inserted) {
      slot.shape = t.shape();
      slot.m.assign(t.numel(), 0.0f);
      slot.v.assign(t.numel(), 0.0f);
    } else if (slot.shape != t.shape()) {
      throw ShapeError("adamw_step: moment shape mismatch for " + name);
    }
    ++slot.step;
    adamw_update<float>(t.mutable_data(), t.grad(), slot.m, slot.v, slot.step, hyper, decay);
  };
  params.for_each(visit);
  head.for_each(visit);
}

NoisyLabels inject_label_noise(std::span<const std::size_t> labels, double noise_rate,
                               std::size_t num_classes, std::uint64_t seed) {
  if (!(noise_rate >= 0.0 && noise_rate <= 1.0))
    throw std::invalid_argument("inject_label_noise: noise_rate must be in [0, 1]");
  if (noise_rate > 0.0 && num_classes < 2)
    throw std::invalid_argument("inject_label_noise: need at least 2 classes to corrupt labels");
  NoisyLabels out{std::vector<std::size_t>(labels.begin(), labels.end()),
                  std::vector<bool>(labels.size(), false)};
  Rng rng(seed);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!(unit_uniform(rng) < noise_rate)) continue;
    std::uniform_int_distribution<std::size_t> pick(0, num_classes - 2);
    const std::size_t r = pick(rng);
    out.labels[i] = r >= labels[i] ? r + 1 : r;
    out.corrupted[i] = true;
  }
  return out;
}

void write_metrics_csv(const MetricsLog& log, std::ostream& out) {
  out << kMetricsHeader << '\n';
  char buf[256];
  for (const auto& r : log.records) {
    std::snprintf(buf, sizeof(buf), "%" PRId64 ",%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,", r.step, r.lr,
                  static_cast<double>(r.loss_cls), static_cast<double>(r.loss_jigsaw),
                  static_cast<double>(r.loss_total), r.train_acc, r.jigsaw_acc);
    out << buf;
    if (r.eval_acc) {
      std::snprintf(buf, sizeof(buf), "%.9g", *r.eval_acc);
      out << buf;
    }
    out << '\n';
  }
}

template <typename T>
std::size_t argmax(std::span<const T> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

template std::size_t argmax<float>(std::span<const float>);
template std::size_t argmax<double>(std::span<const double>);

double top1_accuracy(std::span<const float> logits, std::size_t k,
                     std::span<const std::size_t> labels) {
  if (labels.empty()) throw std::invalid_argument("top1_accuracy: empty label set");
  if (logits.size() != labels.size() * k)
    throw ShapeError("top1_accuracy: logits do not match label count");
  std::size_t hits = 0;
  for (std::size_t r = 0; r < labels.size(); ++r)
    if (argmax(logits.subspan(r * k, k)) == labels[r]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

namespace {

void check_compatible(const ModelConfig& model, const Dataset& data) {
  if (data.records.empty()) throw std::invalid_argument("dataset is empty");
  if (data.num_classes != model.num_classes) {
    std::ostringstream os;
    os << "class-count mismatch: dataset has " << data.num_classes << ", model has "
       << model.num_classes;
    throw std::invalid_argument(os.str());
  }
  if (data.shape != ImageShape{model.image_h, model.image_w, model.channels}) {
    std::ostringstream os;
    os << "image shape mismatch: dataset " << data.shape.h << "x" << data.shape.w << "x"
       << data.shape.c << ", model " << model.image_h << "x" << model.image_w << "x"
       << model.channels;
    throw std::invalid_argument(os.str());
  }
}

}  // namespace

std::vector<std::size_t> predict(const ModelConfig& model, const Parameters<float>& params,
                                 const Dataset& data, std::size_t batch_size) {
  check_compatible(model, data);
  std::vector<std::size_t> out;
  out.reserve(data.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    Graph<float> g(GradMode::kInference);
    auto logits = classification_logits(g, make_batch<float>(data, idx), params, model);
    const std::size_t k = model.num_classes;
    for (std::size_t r = 0; r < idx.size(); ++r)
      out.push_back(argmax(logits.data().subspan(r * k, k)));
  }
  return out;
}

double evaluate(const ModelConfig& model, const Parameters<float>& params, const Dataset& data,
                std::size_t batch_size) {
  const auto pred = predict(model, params, data, batch_size);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (pred[i] == data.records[i].label) ++hits;
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

namespace {

std::size_t count_position_hits(const Tensor<float>& logits,
                                std::span<const JigsawSample> samples) {
  const std::size_t m = logits.dim(1), l = logits.dim(2);
  std::size_t hits = 0;
  for (std::size_t b = 0; b < samples.size(); ++b)
    for (std::size_t j = 0; j < m; ++j)
      if (argmax(logits.data().subspan((b * m + j) * l, l)) == samples[b].targets[j]) ++hits;
  return hits;
}

}  // namespace

double jigsaw_position_accuracy(const ModelConfig& model, const Parameters<float>& params,
                                const JigsawHead<float>& head, const Dataset& data,
                                double gamma, std::uint64_t seed, std::size_t batch_size) {
  check_compatible(model, data);
  Rng rng(seed);
  std::size_t hits = 0, total = 0;
  std::vector<std::size_t> idx;
  std::vector<JigsawSample> samples;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    samples.clear();
    for (std::size_t i = 0; i < idx.size(); ++i)
      samples.push_back(sample_jigsaw(model.num_patches(), gamma, rng));
    Graph<float> g(GradMode::kInference);
    auto logits = jigsaw_forward(g, make_batch<float>(data, idx), params, head, model, samples);
    hits += count_position_hits(logits, samples);
    total += idx.size() * samples.front().kept.size();
  }
  return static_cast<double>(hits) / static_cast<double>(total);
}

TrainResult train(const ModelConfig& model, const Parameters<float>& init,
                  const JigsawHead<float>& head_init, const Dataset& train_set,
                  const TrainConfig& cfg, const Dataset* eval_set, const StepCallback& on_log) {
  model.validate();
  cfg.validate();
  check_compatible(model, train_set);
  if (eval_set) check_compatible(model, *eval_set);

  TrainResult res;
  res.params = init.clone();
  res.head = head_init.clone();
  res.train_labels = inject_label_noise(train_set.labels(), cfg.noise_rate,
                                        train_set.num_classes, mix_seed(cfg.seed, 1));
  const auto& labels = res.train_labels.labels;

  Rng order_rng(mix_seed(cfg.seed, 2));
  Rng jigsaw_rng(mix_seed(cfg.seed, 3));
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();  // forces a shuffle on the first step

  const std::size_t num_patches = model.num_patches();
  const std::size_t k = model.num_classes;
  std::vector<std::size_t> batch, batch_labels;
  std::vector<JigsawSample> samples;

  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    if (cursor >= order.size()) {
      std::shuffle(order.begin(), order.end(), order_rng);
      cursor = 0;
    }
    const std::size_t end = std::min(order.size(), cursor + cfg.batch_size);
    batch.assign(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                 order.begin() + static_cast<std::ptrdiff_t>(end));
    cursor = end;
    batch_labels.clear();
    for (std::size_t i : batch) batch_labels.push_back(labels[i]);

    const bool pretext_phase = cfg.regimen == Regimen::kPretext && step < cfg.pretext_steps;
    const bool want_cls = !pretext_phase;
    const bool want_jigsaw = cfg.regimen == Regimen::kAuxiliary || pretext_phase;
    const double eta = cfg.regimen == Regimen::kAuxiliary ? cfg.jigsaw.eta : 0.0;

    samples.clear();
    if (want_jigsaw)
      for (std::size_t i = 0; i < batch.size(); ++i)
        samples.push_back(sample_jigsaw(num_patches, cfg.jigsaw.gamma, jigsaw_rng));

    const auto images = make_batch<float>(train_set, batch);
    Graph<float> g;
    Graph<float> side(GradMode::kInference);
    Tensor<float> cls_logits, jig_logits, root;
    LossBreakdown<float> parts;

    if (want_cls) cls_logits = classification_logits(g, images, res.params, model);
    if (want_jigsaw) {
      // With eta == 0 the position flow is only observed, so the jigsaw head
      // receives no gradient and stays untouched by the optimizer.
      Graph<float>& jg = (want_cls && eta == 0.0) ? side : g;
      jig_logits = jigsaw_forward(jg, images, res.params, res.head, model, samples);
    }

    if (want_cls && want_jigsaw && eta > 0.0) {
      auto joint = total_loss(g, cls_logits, batch_labels, jig_logits, samples, eta);
      root = joint.total;
      parts = joint.parts;
    } else if (want_cls) {
      root = g.cross_entropy(cls_logits, batch_labels);
      const float jig = want_jigsaw ? jigsaw_loss(side, jig_logits, samples).item() : 0.0f;
      parts = {root.item(), jig, combine_losses(root.item(), jig, 0.0f), 0.0f};
    } else {
      root = jigsaw_loss(g, jig_logits, samples);
      parts = {0.0f, root.item(), combine_losses(0.0f, root.item(), 1.0f), 1.0f};
    }

    if (!std::isfinite(parts.loss_total)) {
      std::ostringstream os;
      os << "loss diverged at step " << step + 1 << " (L_total=" << parts.loss_total << ")";
      throw DivergenceError(step + 1, os.str());
    }

    g.backward(root);
    const double lr = lr_at(step + 1, cfg);
    adamw_step(res.params, res.head, res.optim,
               AdamWHyper{lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay});
    res.params.zero_grad();
    res.head.zero_grad();

    const std::int64_t done = step + 1;
    if (done % cfg.log_interval == 0 || done == cfg.steps) {
      MetricsRecord rec;
      rec.step = done;
      rec.lr = lr;
      rec.loss_cls = parts.loss_cls;
      rec.loss_jigsaw = parts.loss_jigsaw;
      rec.loss_total = parts.loss_total;
      if (want_cls) rec.train_acc = top1_accuracy(cls_logits.data(), k, batch_labels);
      if (want_jigsaw)
        rec.jigsaw_acc = static_cast<double>(count_position_hits(jig_logits, samples)) /
                         static_cast<double>(samples.size() * samples.front().kept.size());
      const bool eval_now =
          cfg.eval_interval > 0 ? (done % cfg.eval_interval == 0 || done == cfg.steps)
                                : done == cfg.steps;
      if (eval_set && eval_now) rec.eval_acc = evaluate(model, res.params, *eval_set);
      res.log.records.push_back(rec);
      if (on_log) on_log(rec);
    }
  }
  return res;
}

}  // namespace jvit
