// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "jvit/attack.hpp"
#include "jvit/train.hpp"

using namespace jvit;

namespace {

// z = W x + b over a flat image, with analytic input gradients.
class LinearModel final : public Classifier {
 public:
  LinearModel(ImageShape shape, std::size_t k, std::uint64_t seed) : shape_(shape), k_(k) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> n(0.0f, 1.0f);
    w_.resize(k * shape.pixels());
    for (auto& v : w_) v = n(rng);
    b_.assign(k, 0.0f);
  }
  LinearModel(ImageShape shape, std::vector<float> w, std::vector<float> b)
      : shape_(shape), k_(b.size()), w_(std::move(w)), b_(std::move(b)) {}

  ImageShape input_shape() const override { return shape_; }
  std::size_t num_classes() const override { return k_; }
  std::vector<float> logits(std::span<const float> x) const override {
    ++queries;
    std::vector<float> z(b_);
    for (std::size_t c = 0; c < k_; ++c)
      for (std::size_t i = 0; i < x.size(); ++i) z[c] += w_[c * x.size() + i] * x[i];
    return z;
  }
  std::vector<float> ce_gradient(std::span<const float> x, std::size_t label) const override {
    auto z = logits(x);
    const float mx = *std::max_element(z.begin(), z.end());
    float s = 0;
    for (auto& v : z) s += (v = std::exp(v - mx));
    std::vector<float> wts(k_);
    for (std::size_t c = 0; c < k_; ++c) wts[c] = z[c] / s - (c == label ? 1.0f : 0.0f);
    return logit_gradient(x, wts);
  }
  std::vector<float> logit_gradient(std::span<const float> x,
                                    std::span<const float> wts) const override {
    std::vector<float> g(x.size(), 0.0f);
    for (std::size_t c = 0; c < k_; ++c)
      for (std::size_t i = 0; i < x.size(); ++i) g[i] += wts[c] * w_[c * x.size() + i];
    return g;
  }
  mutable std::size_t queries = 0;

 private:
  ImageShape shape_;
  std::size_t k_;
  std::vector<float> w_, b_;
};

std::vector<float> random_image(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0, 1);
  std::vector<float> v(n);
  for (auto& x : v) x = u(rng);
  v[0] = 0.0f;  // exercise both box faces
  v[1] = 1.0f;
  return v;
}

void check_linf(std::span<const float> adv, std::span<const float> x, double eps) {
  double worst = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    REQUIRE(adv[i] >= 0.0f);
    REQUIRE(adv[i] <= 1.0f);
    worst = std::max(worst, std::abs(double(adv[i]) - double(x[i])));
  }
  CHECK(worst <= eps + 1e-6);
}

const ImageShape kShape{6, 6, 3};

}  // namespace

TEST_SUITE("attack") {

TEST_CASE("names") {
  for (auto k : {AttackKind::kFgsm, AttackKind::kBim, AttackKind::kPgd, AttackKind::kMi,
                 AttackKind::kCw, AttackKind::kSquare})
    CHECK(parse_attack_kind(attack_name(k)) == k);
  CHECK_THROWS_AS(parse_attack_kind("aa"), std::invalid_argument);
}

TEST_CASE("fgsm respects the budget and is the identity at eps 0") {
  LinearModel m(kShape, 4, 1);
  const auto x = random_image(kShape.pixels(), 2);
  CHECK(fgsm(m, x, 1, 0.0) == x);
  for (double eps : {4 / 255.0, 8 / 255.0, 16 / 255.0}) check_linf(fgsm(m, x, 1, eps), x, eps);
}

TEST_CASE("fgsm on a one-pixel linear model pushes the pixel up") {
  // z = (0, 2 x): label 0 loses as x grows, so the CE gradient is positive.
  LinearModel m({1, 1, 1}, {0.0f, 2.0f}, {0.0f, 0.0f});
  for (float x0 : {0.0f, 0.3f, 0.97f}) {
    const std::vector<float> x = {x0};
    const auto adv = fgsm(m, x, 0, 0.05);
    CHECK(adv[0] == std::clamp(x0 + 0.05f, 0.0f, 1.0f));
  }
}

TEST_CASE("iterative attacks stay in the ball") {
  LinearModel m(kShape, 4, 3);
  const auto x = random_image(kShape.pixels(), 4);
  std::mt19937_64 rng(5);
  for (auto kind : {AttackKind::kBim, AttackKind::kPgd, AttackKind::kMi})
    for (double eps : {0.0, 4 / 255.0, 8 / 255.0, 16 / 255.0}) {
      AttackConfig c;
      c.kind = kind;
      c.epsilon = eps;
      c.alpha = 2 / 255.0;
      c.steps = 10;
      const auto adv = iterative_linf(m, x, 2, c, rng);
      check_linf(adv, x, eps);
      if (eps == 0.0) CHECK(adv == x);
    }
  AttackConfig bad;
  bad.kind = AttackKind::kCw;
  CHECK_THROWS_AS(iterative_linf(m, x, 0, bad, rng), std::invalid_argument);
}

TEST_CASE("one saturating PGD step is FGSM") {
  LinearModel m(kShape, 4, 6);
  const auto x = random_image(kShape.pixels(), 7);
  AttackConfig c;
  c.kind = AttackKind::kPgd;
  c.epsilon = 8 / 255.0;
  c.alpha = 10 / 255.0;
  c.steps = 1;
  c.random_start = false;
  std::mt19937_64 rng(0);
  CHECK(iterative_linf(m, x, 3, c, rng) == fgsm(m, x, 3, c.epsilon));
}

TEST_CASE("PGD without random start and MI without memory are BIM") {
  LinearModel m(kShape, 5, 8);
  const auto x = random_image(kShape.pixels(), 9);
  AttackConfig c;
  c.epsilon = 16 / 255.0;
  c.steps = 7;
  std::mt19937_64 rng(0);
  c.kind = AttackKind::kBim;
  const auto bim = iterative_linf(m, x, 0, c, rng);
  c.kind = AttackKind::kPgd;
  c.random_start = false;
  CHECK(iterative_linf(m, x, 0, c, rng) == bim);
  c.kind = AttackKind::kMi;
  c.mi_decay = 0.0;
  CHECK(iterative_linf(m, x, 0, c, rng) == bim);
}

TEST_CASE("cw output stays in the box and c = 0 stays near the input") {
  LinearModel m(kShape, 4, 10);
  const auto x = random_image(kShape.pixels(), 11);
  AttackConfig c;
  c.kind = AttackKind::kCw;
  c.steps = 20;
  c.cw_c = 0.0;
  auto adv = cw_l2(m, x, 1, c);
  double l2 = 0;
  for (std::size_t i = 0; i < x.size(); ++i) l2 += std::pow(adv[i] - x[i], 2);
  CHECK(std::sqrt(l2) < 1e-2);

  c.cw_c = 10.0;
  const auto z = m.logits(x);
  const std::size_t label = argmax<float>(z);
  adv = cw_l2(m, x, label, c);
  for (float v : adv) CHECK((v >= 0.0f && v <= 1.0f));
  CHECK(margin(m.logits(adv), label) < 0.0);  // the linear model is easy to flip
}

TEST_CASE("square: budget, strict improvement, early stop, eps 0") {
  LinearModel m(kShape, 4, 12);
  QueryFn q = [&](std::span<const float> x) { return m.logits(x); };
  const auto x = random_image(kShape.pixels(), 13);
  const std::size_t label = argmax<float>(m.logits(x));
  for (std::int64_t budget : {1, 5, 50, 200}) {
    std::mt19937_64 rng(budget);
    auto r = square_attack(q, kShape, x, label, 4 / 255.0, budget, rng);
    CHECK(r.queries <= budget);
    check_linf(r.image, x, 4 / 255.0);
    for (std::size_t i = 1; i < r.accepted_margins.size(); ++i)
      CHECK(r.accepted_margins[i] < r.accepted_margins[i - 1]);
    if (r.queries < budget) CHECK(margin(m.logits(r.image), label) < 0.0);
  }
  std::mt19937_64 rng(1);
  auto zero = square_attack(q, kShape, x, label, 0.0, 100, rng);
  CHECK(zero.image == x);
  CHECK(zero.queries == 1);
}

TEST_CASE("square size schedule") {
  CHECK(square_p_selection(0.05, 0, 10000) == 0.05);
  CHECK(square_p_selection(0.05, 30, 10000) == 0.025);
  CHECK(square_p_selection(0.05, 9000, 10000) == 0.05 / 512);
  // rescaled: the same fraction of a smaller budget
  CHECK(square_p_selection(0.05, 3, 1000) == square_p_selection(0.05, 30, 10000));
  for (std::int64_t i = 1; i < 500; ++i)
    CHECK(square_p_selection(0.05, i, 500) <= square_p_selection(0.05, i - 1, 500));
}

TEST_CASE("harness: eps 0, white-box identity, shape checks, report") {
  ModelConfig cfg;
  cfg.image_h = cfg.image_w = 8;
  cfg.embed_dim = 8;
  cfg.num_layers = 1;
  cfg.num_heads = 2;
  cfg.num_classes = 3;
  auto params = init_parameters<float>(cfg, 1);
  const VitClassifier vit(cfg, params);
  SyntheticSpec s;
  s.num_images = 12;
  s.h = s.w = 8;
  s.num_classes = 3;
  const auto data = gen_synthetic(s);

  double before = 0;
  params.for_each([&](const std::string&, const Tensor<float>& t, bool) {
    for (float v : t.data()) before += v;
  });

  AttackConfig c;
  c.kind = AttackKind::kPgd;
  c.epsilon = 0.0;
  auto r0 = run_attack(vit, vit, data, c, 1);
  CHECK(r0.robust_acc == r0.clean_acc);

  c.kind = AttackKind::kFgsm;
  c.epsilon = 8 / 255.0;
  auto white = run_attack(vit, vit, data, c, 1, true);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto adv = fgsm(vit, data.records[i].pixels, data.records[i].label, c.epsilon);
    CHECK(adv == white.adversarial[i]);
    hits += argmax<float>(vit.logits(adv)) == data.records[i].label;
    CHECK(white.linf[i] <= c.epsilon + 1e-6);
  }
  CHECK(white.robust_acc == double(hits) / data.size());

  c.kind = AttackKind::kSquare;
  c.max_queries = 20;
  auto sq = run_attack(vit, vit, data, c, 2);
  CHECK(sq.max_queries_used <= 20);
  const auto j = report_to_json(sq);
  CHECK(j["attack"]["kind"] == "square");
  CHECK(j["attack"]["queries"] == 20);
  CHECK(j["attack"]["eps_255"].get<double>() == doctest::Approx(8.0));
  CHECK(j.contains("clean_acc"));
  CHECK(j["n_images"] == 12);

  double after = 0;
  params.for_each([&](const std::string&, const Tensor<float>& t, bool) {
    for (float v : t.data()) after += v;
  });
  CHECK(before == after);

  LinearModel other({8, 8, 3}, 4, 1);
  CHECK_THROWS_AS(run_attack(vit, other, data, c, 1), ShapeError);
  LinearModel wrong({6, 6, 3}, 3, 1);
  CHECK_THROWS_AS(run_attack(wrong, wrong, data, c, 1), ShapeError);
}

TEST_CASE("white-box ViT gradients match finite differences of the loss") {
  ModelConfig cfg;
  cfg.image_h = cfg.image_w = 8;
  cfg.embed_dim = 8;
  cfg.num_layers = 1;
  cfg.num_heads = 2;
  cfg.num_classes = 3;
  const VitClassifier vit(cfg, init_parameters<float>(cfg, 3));
  auto x = random_image(cfg.pixels(), 14);
  const auto g = vit.ce_gradient(x, 1);
  auto ce = [&](const std::vector<float>& im) {
    auto z = vit.logits(im);
    double mx = *std::max_element(z.begin(), z.end()), s = 0;
    for (float v : z) s += std::exp(v - mx);
    return -(z[1] - mx - std::log(s));
  };
  // directional derivative along the gradient itself
  const float h = 1e-2f;
  double gn = 0;
  for (float v : g) gn += double(v) * v;
  auto up = x, down = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    up[i] += h * g[i] / float(std::sqrt(gn));
    down[i] -= h * g[i] / float(std::sqrt(gn));
  }
  const double fd = (ce(up) - ce(down)) / (2 * h);
  CHECK(fd == doctest::Approx(std::sqrt(gn)).epsilon(0.05));
}

}
