// SPDX-License-Identifier: Apache-2.0

#include "jvit/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "jvit/jigsaw.hpp"
#include "jvit/model.hpp"

namespace jvit {

double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

double grad_check_leaves(const ScalarProgram& f, std::span<const Tensor<double>> leaves,
                         double step, std::size_t per_leaf, std::uint64_t coord_seed,
                         std::size_t* probed) {
  if (!(step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
  std::vector<Tensor<double>> handles(leaves.begin(), leaves.end());
  for (auto& t : handles) {
    t.zero_grad();
    t.set_requires_grad(true);
  }
  {
    Graph<double> g;
    auto root = f(g);
    g.backward(root);
  }
  double worst = 0.0;
  for (auto& t : handles) {
    const std::vector<double> analytic =
        t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                     : std::vector<double>(t.numel(), 0.0);
    auto eval = [&] {
      Graph<double> g(GradMode::kInference);
      return f(g).item();
    };
    auto probe = [&](std::size_t i) {
      double& x = t.mutable_data()[i];
      const double x0 = x;
      x = x0 + step;
      const double up = eval();
      x = x0 - step;
      const double down = eval();
      x = x0;
      worst = std::max(worst, relative_error(analytic[i], (up - down) / (2.0 * step)));
    };
    std::vector<std::size_t> coords(t.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (per_leaf > 0 && per_leaf < coords.size()) {
      std::mt19937_64 rng(coord_seed + coords.size());
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(per_leaf);
    }
    for (std::size_t i : coords) probe(i);
    if (probed) *probed += coords.size();
    t.zero_grad();
  }
  return worst;
}

double grad_check(const PointProgram& f, const Tensor<double>& point, double step) {
  Tensor<double> x = point.clone();
  const Tensor<double> leaves[1] = {x};
  return grad_check_leaves([&](Graph<double>& g) { return f(g, x); }, leaves, step);
}

bool GradCheckSuite::passed() const {
  return std::all_of(entries.begin(), entries.end(),
                     [&](const GradCheckEntry& e) { return e.max_rel_error <= tolerance; });
}

namespace {

using Rng64 = std::mt19937_64;

Tensor<double> random_tensor(Shape shape, Rng64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = u(rng);
  return Tensor<double>(std::move(shape), std::move(v), true);
}

// Linear read-out <w, out> so every output element carries its own weight.
Tensor<double> read_out(Graph<double>& g, const Tensor<double>& out, const Tensor<double>& w) {
  auto flat = g.reshape(out, {1, out.numel()});
  return g.reshape(g.matmul(flat, w), {1});
}

struct OpCase {
  std::vector<Tensor<double>> inputs;
  OpAttrs attrs;
};

std::vector<OpCase> cases_for(OpKind kind, Rng64& rng) {
  auto r = [&](Shape s) { return random_tensor(std::move(s), rng); };
  std::vector<OpCase> out;
  switch (kind) {
    case OpKind::kMatmul:
      out.push_back({{r({2, 3, 4}), r({4, 5})}, {}});
      out.push_back({{r({2, 3, 4}), r({2, 4, 2})}, {}});
      break;
    case OpKind::kAdd:
      out.push_back({{r({2, 3}), r({2, 3})}, {}});
      out.push_back({{r({3, 4}), r({4})}, {}});
      break;
    case OpKind::kScale: {
      OpAttrs a;
      a.scale = -1.7;
      out.push_back({{r({3, 4})}, a});
      break;
    }
    case OpKind::kLayerNorm:
      out.push_back({{r({3, 6}), r({6}), r({6})}, {}});
      out.push_back({{r({2, 5})}, {}});
      break;
    case OpKind::kSoftmax: {
      out.push_back({{r({3, 5})}, {}});
      OpAttrs a;
      a.axis = 1;
      out.push_back({{r({2, 3, 4})}, a});
      break;
    }
    case OpKind::kGelu:
      out.push_back({{random_tensor({4, 5}, rng, -3.0, 3.0)}, {}});
      break;
    case OpKind::kRelu: {
      // Keep away from the kink, where central differences are meaningless.
      auto x = r({4, 5});
      for (double& v : x.mutable_data()) v = v < 0 ? v - 0.05 : v + 0.05;
      out.push_back({{x}, {}});
      break;
    }
    case OpKind::kGatherRows: {
      OpAttrs a, b;
      a.indices = {4, 0, 4, 2};
      b.indices = {1, 3, 0, 0};
      out.push_back({{r({5, 3})}, a});
      out.push_back({{r({2, 4, 3})}, b});
      break;
    }
    case OpKind::kReshape: {
      OpAttrs a;
      a.shape = {3, 4};
      out.push_back({{r({2, 6})}, a});
      break;
    }
    case OpKind::kTranspose: {
      OpAttrs a;
      a.perm = {2, 0, 1};
      out.push_back({{r({2, 3, 4})}, a});
      break;
    }
    case OpKind::kMean:
      out.push_back({{r({3, 4})}, {}});
      break;
    case OpKind::kConcat: {
      OpAttrs a, b;
      a.axis = 1;
      b.axis = 0;
      out.push_back({{r({2, 3}), r({2, 2})}, a});
      out.push_back({{r({2, 3}), r({1, 3})}, b});
      break;
    }
    case OpKind::kCrossEntropy: {
      OpAttrs a;
      a.targets = {0, 3, 4, 1};
      out.push_back({{random_tensor({4, 5}, rng, -2.0, 2.0)}, a});
      break;
    }
  }
  return out;
}

constexpr double kZeroGradTolerance = 1e-9;

// Largest |analytic| or |numeric| derivative over leaves whose gradient
// must vanish identically.
double zero_gradient_residual(const ScalarProgram& f, std::span<const Tensor<double>> leaves,
                              double step, std::size_t* probed) {
  std::vector<Tensor<double>> handles(leaves.begin(), leaves.end());
  for (auto& t : handles) t.zero_grad();
  {
    Graph<double> g;
    auto root = f(g);
    g.backward(root);
  }
  double worst = 0.0;
  for (auto& t : handles) {
    if (t.has_grad())
      for (double v : t.grad()) worst = std::max(worst, std::abs(v));
    for (std::size_t i = 0; i < t.numel(); ++i) {
      double& x = t.mutable_data()[i];
      const double x0 = x;
      x = x0 + step;
      Graph<double> up_graph(GradMode::kInference);
      const double up = f(up_graph).item();
      x = x0 - step;
      Graph<double> down_graph(GradMode::kInference);
      const double down = f(down_graph).item();
      x = x0;
      worst = std::max(worst, std::abs((up - down) / (2.0 * step)));
    }
    if (probed) *probed += t.numel();
    t.zero_grad();
  }
  return worst;
}

// Joint loss of a tiny model with both flows active.
GradCheckEntry check_total_loss(std::size_t trials, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.image_h = 8;
  cfg.image_w = 8;
  cfg.channels = 3;
  cfg.patch_size = 4;
  cfg.embed_dim = 8;
  cfg.num_layers = 2;
  cfg.num_heads = 2;
  cfg.num_classes = 3;
  constexpr double kEta = 0.7, kGamma = 0.5;
  GradCheckEntry entry{"l_total", 0.0, 0};

  for (std::size_t trial = 0; trial < trials; ++trial) {
    Rng64 rng(seed * 1000003 + trial);
    auto params = init_parameters<double>(cfg, rng());
    auto head = init_jigsaw_head<double>(cfg, rng());
    // Wider weights than the training init keep every gradient well above
    // finite-difference noise.
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    std::vector<Tensor<double>> leaves, key_biases;
    auto widen = [&](const std::string& name, Tensor<double>& t, bool) {
      const bool ln_scale = name.find("norm") != std::string::npos &&
                            name.find("weight") != std::string::npos;
      for (double& v : t.mutable_data()) v = (ln_scale ? 1.0 : 0.0) + u(rng);
      // A key bias shifts every score of a query by the same amount, which
      // softmax ignores: its gradient is exactly zero and its difference
      // quotient is pure rounding, so it gets an absolute test instead.
      (name.ends_with("attn.k.bias") ? key_biases : leaves).push_back(t);
    };
    params.for_each(widen);
    head.for_each(widen);

    const Tensor<double> images = random_tensor({2, 8, 8, 3}, rng, 0.0, 1.0);
    const std::vector<std::size_t> labels = {0, 2};
    std::vector<JigsawSample> samples;
    for (int b = 0; b < 2; ++b) samples.push_back(sample_jigsaw(cfg.num_patches(), kGamma, rng));

    ScalarProgram f = [&](Graph<double>& g) {
      auto cls = classification_logits(g, images.detached(), params, cfg);
      auto jig = jigsaw_forward(g, images.detached(), params, head, cfg, samples);
      return total_loss(g, cls, labels, jig, samples, kEta).total;
    };
    const std::size_t per_leaf = trial == 0 ? 0 : 4;
    entry.max_rel_error = std::max(
        entry.max_rel_error,
        grad_check_leaves(f, leaves, 1e-4, per_leaf, rng(), &entry.coordinates));
    if (zero_gradient_residual(f, key_biases, 1e-4, &entry.coordinates) > kZeroGradTolerance)
      entry.max_rel_error = std::numeric_limits<double>::infinity();
  }
  return entry;
}

}  // namespace

GradCheckSuite run_gradcheck_suite(std::size_t trials, std::uint64_t seed) {
  if (trials == 0) throw std::invalid_argument("gradcheck: need at least one trial");
  GradCheckSuite suite;
  for (OpKind kind : kAllOpKinds) {
    GradCheckEntry entry{std::string(op_name(kind)), 0.0, 0};
    for (std::size_t trial = 0; trial < trials; ++trial) {
      Rng64 rng(seed * 7919 + trial * 131 + static_cast<std::size_t>(kind));
      for (auto& c : cases_for(kind, rng)) {
        Graph<double> probe(GradMode::kInference);
        const std::size_t n = probe.apply(kind, c.inputs, c.attrs).numel();
        Tensor<double> w = random_tensor({n, 1}, rng);
        w.set_requires_grad(false);
        ScalarProgram f = [&](Graph<double>& g) {
          return read_out(g, g.apply(kind, c.inputs, c.attrs), w);
        };
        const std::size_t per_leaf = trial == 0 ? 0 : 8;
        entry.max_rel_error = std::max(
            entry.max_rel_error,
            grad_check_leaves(f, c.inputs, 1e-5, per_leaf, rng(), &entry.coordinates));
      }
    }
    suite.entries.push_back(entry);
  }
  suite.entries.push_back(check_total_loss(trials, seed));
  return suite;
}

}  // namespace jvit
