// SPDX-License-Identifier: Apache-2.0

#include "jvit/attack.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "jvit/train.hpp"

namespace jvit {

namespace {

float sign(float v) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); }

void check_image(const Classifier& model, std::span<const float> image, std::size_t label) {
  if (image.size() != model.input_shape().pixels())
    throw ShapeError("attack: image size does not match the model input");
  if (label >= model.num_classes()) throw std::out_of_range("attack: label out of range");
}

void require_finite(std::span<const float> g) {
  for (float v : g)
    if (!std::isfinite(v)) throw NonFiniteError("attack: non-finite input gradient");
}

// Projection onto the eps-ball around x intersected with the unit box.
void project(std::span<float> adv, std::span<const float> x, double eps) {
  const float e = static_cast<float>(eps);
  for (std::size_t i = 0; i < adv.size(); ++i)
    adv[i] = std::clamp(std::clamp(adv[i], x[i] - e, x[i] + e), 0.0f, 1.0f);
}

std::uint64_t image_seed(std::uint64_t seed, std::size_t index) {
  std::uint64_t z = seed ^ (0x9E3779B97F4A7C15ULL * (index + 1));
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

std::string_view attack_name(AttackKind kind) {
  switch (kind) {
    case AttackKind::kFgsm: return "fgsm";
    case AttackKind::kBim: return "bim";
    case AttackKind::kPgd: return "pgd";
    case AttackKind::kMi: return "mi";
    case AttackKind::kCw: return "cw";
    case AttackKind::kSquare: return "square";
  }
  return "unknown";
}

AttackKind parse_attack_kind(std::string_view name) {
  for (auto k : {AttackKind::kFgsm, AttackKind::kBim, AttackKind::kPgd, AttackKind::kMi,
                 AttackKind::kCw, AttackKind::kSquare})
    if (attack_name(k) == name) return k;
  throw std::invalid_argument("unknown attack method: " + std::string(name));
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0 && epsilon <= 1.0))
    throw std::invalid_argument("attack: epsilon must be in [0, 1]");
  if (!(alpha >= 0.0)) throw std::invalid_argument("attack: alpha must be non-negative");
  if (kind != AttackKind::kFgsm && kind != AttackKind::kSquare && steps < 1)
    throw std::invalid_argument("attack: iterative attacks need steps >= 1");
  if (kind == AttackKind::kSquare && max_queries < 1)
    throw std::invalid_argument("attack: square needs max_queries >= 1");
  if (!(cw_c >= 0.0) || !(cw_lr > 0.0))
    throw std::invalid_argument("attack: need cw_c >= 0 and cw_lr > 0");
}

// --- ViT adapter -------------------------------------------------------------

VitClassifier::VitClassifier(ModelConfig config, const Parameters<float>& params)
    : config_(config), params_(params.frozen()) {
  config_.validate();
}

ImageShape VitClassifier::input_shape() const {
  return {config_.image_h, config_.image_w, config_.channels};
}

std::vector<float> VitClassifier::logits(std::span<const float> image) const {
  Graph<float> g(GradMode::kInference);
  Tensor<float> x({1, config_.image_h, config_.image_w, config_.channels},
                  std::vector<float>(image.begin(), image.end()));
  auto z = classification_logits(g, x, params_, config_);
  return {z.data().begin(), z.data().end()};
}

std::vector<float> VitClassifier::ce_gradient(std::span<const float> image,
                                              std::size_t label) const {
  Graph<float> g;
  Tensor<float> x({1, config_.image_h, config_.image_w, config_.channels},
                  std::vector<float>(image.begin(), image.end()), true);
  const std::size_t labels[1] = {label};
  auto loss = g.cross_entropy(classification_logits(g, x, params_, config_), labels);
  g.backward(loss);
  return {x.grad().begin(), x.grad().end()};
}

std::vector<float> VitClassifier::logit_gradient(std::span<const float> image,
                                                 std::span<const float> weights) const {
  if (weights.size() != config_.num_classes)
    throw ShapeError("logit_gradient: need one weight per class");
  Graph<float> g;
  Tensor<float> x({1, config_.image_h, config_.image_w, config_.channels},
                  std::vector<float>(image.begin(), image.end()), true);
  Tensor<float> w({config_.num_classes, 1}, std::vector<float>(weights.begin(), weights.end()));
  auto z = classification_logits(g, x, params_, config_);
  auto root = g.reshape(g.matmul(z, w), {1});
  g.backward(root);
  if (!x.has_grad()) return std::vector<float>(image.size(), 0.0f);
  return {x.grad().begin(), x.grad().end()};
}

// --- gradient attacks ----------------------------------------------------------

double margin(std::span<const float> logits, std::size_t label) {
  double other = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < logits.size(); ++k)
    if (k != label) other = std::max(other, static_cast<double>(logits[k]));
  return static_cast<double>(logits[label]) - other;
}

std::vector<float> fgsm(const Classifier& model, std::span<const float> image,
                        std::size_t label, double epsilon) {
  check_image(model, image, label);
  std::vector<float> adv(image.begin(), image.end());
  if (epsilon == 0.0) return adv;
  const auto g = model.ce_gradient(image, label);
  require_finite(g);
  const float e = static_cast<float>(epsilon);
  for (std::size_t i = 0; i < adv.size(); ++i)
    adv[i] = std::clamp(adv[i] + e * sign(g[i]), 0.0f, 1.0f);
  return adv;
}

std::vector<float> iterative_linf(const Classifier& model, std::span<const float> image,
                                  std::size_t label, const AttackConfig& cfg,
                                  std::mt19937_64& rng) {
  if (cfg.kind != AttackKind::kBim && cfg.kind != AttackKind::kPgd && cfg.kind != AttackKind::kMi)
    throw std::invalid_argument("iterative_linf: kind must be bim, pgd or mi");
  cfg.validate();
  check_image(model, image, label);
  std::vector<float> adv(image.begin(), image.end());
  if (cfg.epsilon == 0.0) return adv;

  if (cfg.kind == AttackKind::kPgd && cfg.random_start) {
    std::uniform_real_distribution<double> u(-cfg.epsilon, cfg.epsilon);
    for (float& v : adv) v += static_cast<float>(u(rng));
    project(adv, image, cfg.epsilon);
  }
  const float a = static_cast<float>(cfg.alpha);
  std::vector<double> momentum(adv.size(), 0.0);
  for (std::int64_t t = 0; t < cfg.steps; ++t) {
    const auto g = model.ce_gradient(adv, label);
    require_finite(g);
    if (cfg.kind == AttackKind::kMi) {
      double l1 = 0.0;
      for (float v : g) l1 += std::abs(static_cast<double>(v));
      l1 = std::max(l1, 1e-12);
      for (std::size_t i = 0; i < adv.size(); ++i) {
        momentum[i] = cfg.mi_decay * momentum[i] + static_cast<double>(g[i]) / l1;
        adv[i] += a * static_cast<float>((momentum[i] > 0) - (momentum[i] < 0));
      }
    } else {
      for (std::size_t i = 0; i < adv.size(); ++i) adv[i] += a * sign(g[i]);
    }
    project(adv, image, cfg.epsilon);
  }
  return adv;
}

std::vector<float> cw_l2(const Classifier& model, std::span<const float> image,
                         std::size_t label, const AttackConfig& cfg) {
  cfg.validate();
  check_image(model, image, label);
  const std::size_t n = image.size(), k = model.num_classes();
  // x' = (tanh(w) + 1) / 2; the start is pulled inside the open box so atanh stays finite.
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = std::atanh((2.0 * static_cast<double>(image[i]) - 1.0) * (1.0 - 1e-6));

  std::vector<float> adv(n), best, grad_w(n);
  double best_l2 = std::numeric_limits<double>::infinity();
  auto materialize = [&] {
    for (std::size_t i = 0; i < n; ++i)
      adv[i] = static_cast<float>((std::tanh(w[i]) + 1.0) / 2.0);
  };
  auto l2_sq = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = static_cast<double>(adv[i]) - static_cast<double>(image[i]);
      s += d * d;
    }
    return s;
  };

  materialize();
  for (std::int64_t t = 0; t < cfg.steps; ++t) {
    const auto z = model.logits(adv);
    // Margin term max(z_y - max_{j != y} z_j, -kappa) with kappa = 0.
    std::size_t j = label == 0 ? 1 : 0;
    for (std::size_t c = 0; c < k; ++c)
      if (c != label && z[c] > z[j]) j = c;
    const double m = static_cast<double>(z[label]) - static_cast<double>(z[j]);
    std::vector<float> dmargin(n, 0.0f);
    if (m > 0.0 && cfg.cw_c > 0.0) {
      std::vector<float> weights(k, 0.0f);
      weights[label] = 1.0f;
      weights[j] = -1.0f;
      dmargin = model.logit_gradient(adv, weights);
      require_finite(dmargin);
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double th = std::tanh(w[i]);
      const double dx = 2.0 * (static_cast<double>(adv[i]) - static_cast<double>(image[i])) +
                        cfg.cw_c * static_cast<double>(dmargin[i]);
      w[i] -= cfg.cw_lr * dx * 0.5 * (1.0 - th * th);
    }
    materialize();
    if (margin(model.logits(adv), label) < 0.0) {
      const double d = l2_sq();
      if (d < best_l2) {
        best_l2 = d;
        best = adv;
      }
    }
  }
  return best.empty() ? adv : best;
}

// --- square attack -------------------------------------------------------------

double square_p_selection(double p_init, std::int64_t it, std::int64_t n_iters) {
  // Piecewise-constant halving schedule of the reference implementation,
  // written for a 10000-iteration budget and rescaled to n_iters.
  const std::int64_t i = n_iters > 0 ? it * 10000 / n_iters : it;
  if (i <= 10) return p_init;
  if (i <= 50) return p_init / 2;
  if (i <= 200) return p_init / 4;
  if (i <= 500) return p_init / 8;
  if (i <= 1000) return p_init / 16;
  if (i <= 2000) return p_init / 32;
  if (i <= 4000) return p_init / 64;
  if (i <= 6000) return p_init / 128;
  if (i <= 8000) return p_init / 256;
  return p_init / 512;
}

SquareResult square_attack(const QueryFn& query, ImageShape shape, std::span<const float> image,
                           std::size_t label, double epsilon, std::int64_t max_queries,
                           std::mt19937_64& rng) {
  if (max_queries < 1) throw std::invalid_argument("square_attack: max_queries must be >= 1");
  if (image.size() != shape.pixels()) throw ShapeError("square_attack: image/shape mismatch");
  const std::size_t h = shape.h, w = shape.w, c = shape.c, n = image.size();
  constexpr double kPInit = 0.05;

  SquareResult res;
  res.image.assign(image.begin(), image.end());
  double best = margin(query(res.image), label);
  res.queries = 1;
  if (epsilon == 0.0 || best < 0.0) return res;

  const float e = static_cast<float>(epsilon);
  std::bernoulli_distribution coin(0.5);
  auto pm = [&] { return coin(rng) ? e : -e; };

  // Vertical stripes: one sign per (column, channel).
  std::vector<float> cand(n);
  for (std::size_t x = 0; x < w; ++x)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const float d = pm();
      for (std::size_t y = 0; y < h; ++y) {
        const std::size_t i = (y * w + x) * c + ch;
        cand[i] = std::clamp(image[i] + d, 0.0f, 1.0f);
      }
    }
  if (res.queries < max_queries) {
    const double m = margin(query(cand), label);
    ++res.queries;
    if (m < best) {
      best = m;
      res.image = cand;
      res.accepted_margins.push_back(m);
    }
  }

  for (std::int64_t it = 0; res.queries < max_queries && best >= 0.0; ++it) {
    const double p = square_p_selection(kPInit, it, max_queries);
    auto s = static_cast<std::size_t>(std::lround(std::sqrt(p * static_cast<double>(n) / c)));
    s = std::clamp<std::size_t>(s, 1, std::max<std::size_t>(h - 1, 1));
    std::uniform_int_distribution<std::size_t> row(0, h - s), col(0, w - s);
    const std::size_t r0 = row(rng), c0 = col(rng);

    cand = res.image;
    // Redraw until the window actually moves (bounded; eps > 0 makes it rare).
    for (int attempt = 0; attempt < 100; ++attempt) {
      bool changed = false;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const float d = pm();
        for (std::size_t y = r0; y < r0 + s; ++y)
          for (std::size_t x = c0; x < c0 + s; ++x) {
            const std::size_t i = (y * w + x) * c + ch;
            cand[i] = std::clamp(image[i] + d, 0.0f, 1.0f);
            if (std::abs(cand[i] - res.image[i]) >= 1e-7f) changed = true;
          }
      }
      if (changed) break;
    }
    const double m = margin(query(cand), label);
    ++res.queries;
    if (m < best) {
      best = m;
      res.image = cand;
      res.accepted_margins.push_back(m);
    }
  }
  return res;
}

// --- harness -------------------------------------------------------------------

AttackReport run_attack(const Classifier& target, const Classifier& surrogate,
                        const Dataset& data, const AttackConfig& cfg, std::uint64_t seed,
                        bool keep_images) {
  cfg.validate();
  if (data.records.empty()) throw std::invalid_argument("run_attack: empty dataset");
  if (target.input_shape() != surrogate.input_shape() ||
      target.num_classes() != surrogate.num_classes())
    throw ShapeError("run_attack: surrogate and target disagree on input shape or classes");
  if (target.input_shape() != data.shape)
    throw ShapeError("run_attack: dataset images do not match the model input");

  const std::size_t n = data.size();
  AttackReport rep;
  rep.config = cfg;
  rep.n_images = n;
  rep.linf.assign(n, 0.0);
  rep.l2.assign(n, 0.0);
  if (keep_images) rep.adversarial.resize(n);
  std::vector<int> clean_hit(n, 0), robust_hit(n, 0);
  std::vector<std::int64_t> queries(n, 0);
  QueryFn query = [&](std::span<const float> x) { return surrogate.logits(x); };

  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic, 1)
  for (std::size_t i = 0; i < n; ++i) {
    try {
      const auto& rec = data.records[i];
      std::mt19937_64 rng(image_seed(seed, i));
      std::vector<float> adv;
      switch (cfg.kind) {
        case AttackKind::kFgsm: adv = fgsm(surrogate, rec.pixels, rec.label, cfg.epsilon); break;
        case AttackKind::kBim:
        case AttackKind::kPgd:
        case AttackKind::kMi:
          adv = iterative_linf(surrogate, rec.pixels, rec.label, cfg, rng);
          break;
        case AttackKind::kCw: adv = cw_l2(surrogate, rec.pixels, rec.label, cfg); break;
        case AttackKind::kSquare: {
          auto sq = square_attack(query, surrogate.input_shape(), rec.pixels, rec.label,
                                  cfg.epsilon, cfg.max_queries, rng);
          adv = std::move(sq.image);
          queries[i] = sq.queries;
          break;
        }
      }
      clean_hit[i] = argmax<float>(target.logits(rec.pixels)) == rec.label;
      robust_hit[i] = argmax<float>(target.logits(adv)) == rec.label;
      double linf = 0.0, l2 = 0.0;
      for (std::size_t p = 0; p < adv.size(); ++p) {
        const double d = std::abs(static_cast<double>(adv[p]) - rec.pixels[p]);
        linf = std::max(linf, d);
        l2 += d * d;
      }
      rep.linf[i] = linf;
      rep.l2[i] = std::sqrt(l2);
      if (keep_images) rep.adversarial[i] = std::move(adv);
    } catch (...) {
#pragma omp critical(jvit_attack_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);

  std::size_t clean = 0, robust = 0;
  std::int64_t qsum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    clean += clean_hit[i];
    robust += robust_hit[i];
    qsum += queries[i];
    rep.max_queries_used = std::max(rep.max_queries_used, queries[i]);
  }
  rep.clean_acc = static_cast<double>(clean) / static_cast<double>(n);
  rep.robust_acc = static_cast<double>(robust) / static_cast<double>(n);
  rep.mean_queries = static_cast<double>(qsum) / static_cast<double>(n);
  return rep;
}

nlohmann::json report_to_json(const AttackReport& r) {
  const auto& c = r.config;
  const bool square = c.kind == AttackKind::kSquare;
  nlohmann::json attack{{"kind", std::string(attack_name(c.kind))},
                        {"eps_255", c.epsilon * 255.0},
                        {"alpha_255", c.alpha * 255.0},
                        {"steps", c.steps},
                        {"queries", square ? c.max_queries : 0}};
  nlohmann::json j{{"clean_acc", r.clean_acc},
                   {"robust_acc", r.robust_acc},
                   {"n_images", r.n_images},
                   {"attack", attack}};
  if (square) {
    j["mean_queries"] = r.mean_queries;
    j["max_queries_used"] = r.max_queries_used;
  }
  double max_linf = 0.0, mean_l2 = 0.0;
  for (std::size_t i = 0; i < r.linf.size(); ++i) {
    max_linf = std::max(max_linf, r.linf[i]);
    mean_l2 += r.l2[i];
  }
  if (!r.l2.empty()) mean_l2 /= static_cast<double>(r.l2.size());
  j["max_linf"] = max_linf;
  j["mean_l2"] = mean_l2;
  return j;
}

}  // namespace jvit
