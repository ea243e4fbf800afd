// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any fails. Pass criterion numbers to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "jvit/attack.hpp"
#include "jvit/checkpoint.hpp"
#include "jvit/cli.hpp"
#include "jvit/config.hpp"
#include "jvit/dataset.hpp"
#include "jvit/jigsaw.hpp"
#include "jvit/model.hpp"
#include "jvit/train.hpp"

#ifndef JVIT_CONFIG_DIR
#define JVIT_CONFIG_DIR "configs"
#endif

using namespace jvit;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

fs::path config_path(const std::string& name) { return fs::path(JVIT_CONFIG_DIR) / name; }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<char> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct ScratchDir {
  fs::path path;
  explicit ScratchDir(const std::string& tag) {
    path = fs::temp_directory_path() /
           ("jvit_accept_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

Tensor<float> random_images(std::size_t b, const ModelConfig& c, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0, 1);
  std::vector<float> v(b * c.pixels());
  for (auto& x : v) x = u(rng);
  return Tensor<float>({b, c.image_h, c.image_w, c.channels}, std::move(v));
}

void perturb(Parameters<float>& p, JigsawHead<float>* h, std::uint64_t seed, float scale) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-scale, scale);
  auto f = [&](const std::string&, Tensor<float>& t, bool) {
    for (auto& v : t.mutable_data()) v += u(rng);
  };
  p.for_each(f);
  if (h) h->for_each(f);
}

ModelConfig toy_config() {
  ModelConfig c;  // 32x32x3, P4, D64, 4 layers, 4 heads, 10 classes
  return c;
}

// --- 1 ---------------------------------------------------------------------------

Outcome gradient_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  std::ostringstream out, err;
  const int code = cli::run({"gradcheck"}, out, err);
  const double secs = seconds_since(t0);
  const std::string text = out.str();
  double worst = 0;
  std::size_t entries = 0;
  std::istringstream lines(text);
  for (std::string line; std::getline(lines, line);) {
    const auto at = line.find("max_rel_err=");
    if (at == std::string::npos) continue;
    worst = std::max(worst, std::stod(line.substr(at + 12)));
    ++entries;
  }
  const bool e2e = text.find("l_total") != std::string::npos;
  return {code == cli::kExitOk && e2e && entries > 0 && worst <= 1e-4 && secs < 60,
          fmt("%zu checks incl. l_total, worst rel err %.2e, %.1fs (limit 1e-4, 60s)", entries,
              worst, secs)};
}

// --- 2 ---------------------------------------------------------------------------

Outcome loss_composition() {
  ModelConfig cfg;
  cfg.image_h = cfg.image_w = 16;
  cfg.embed_dim = 32;
  cfg.num_layers = 2;
  cfg.num_heads = 2;
  auto params = init_parameters<float>(cfg, 1);
  auto head = init_jigsaw_head<float>(cfg, 2);
  perturb(params, &head, 3, 0.2f);
  std::mt19937_64 rng(4);
  Rng jrng(5);
  std::uniform_int_distribution<std::size_t> label(0, cfg.num_classes - 1);
  std::uniform_real_distribution<double> gamma(0.05, 0.9);
  std::size_t batches = 0, exact = 0;
  for (double eta : {0.0, 0.1, 0.5, 1.0, 2.0}) {
    for (int b = 0; b < 100; ++b) {
      const std::size_t n = 1 + b % 4;
      const auto x = random_images(n, cfg, rng);
      std::vector<std::size_t> labels(n);
      for (auto& l : labels) l = label(rng);
      std::vector<JigsawSample> s;
      const double gm = gamma(rng);
      for (std::size_t i = 0; i < n; ++i) s.push_back(sample_jigsaw(cfg.num_patches(), gm, jrng));
      Graph<float> g;
      const auto l = total_loss(g, classification_logits(g, x, params, cfg), labels,
                                jigsaw_forward(g, x, params, head, cfg, s), s, eta);
      const float composed = l.parts.loss_cls + static_cast<float>(eta) * l.parts.loss_jigsaw;
      ++batches;
      if (l.parts.loss_total - composed == 0.0f && l.total.item() == l.parts.loss_total)
        ++exact;
    }
  }
  return {exact == batches,
          fmt("%zu/%zu batches exact over eta in {0, 0.1, 0.5, 1, 2}", exact, batches)};
}

// --- 3 ---------------------------------------------------------------------------

Tensor<float> permute_rows(const Tensor<float>& x, const std::vector<std::size_t>& perm) {
  const std::size_t d = x.dim(2);
  std::vector<float> out(x.numel());
  for (std::size_t i = 0; i < perm.size(); ++i)
    std::copy_n(x.data().begin() + perm[i] * d, d, out.begin() + i * d);
  return Tensor<float>(x.shape(), std::move(out));
}

double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

Outcome permutation_equivariance() {
  const auto cfg = toy_config();
  auto params = init_parameters<float>(cfg, 7);
  perturb(params, nullptr, 8, 0.1f);
  const std::size_t n = cfg.num_patches();
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<float> u(0, 1);
  std::vector<float> pv(n * cfg.patch_dim());
  for (auto& v : pv) v = u(rng);
  const Tensor<float> patches({1, n, cfg.patch_dim()}, pv);

  Graph<float> g(GradMode::kInference);
  const EmbedOptions plain{false, false, {}};
  const EmbedOptions pos{true, false, {}};
  const auto base_plain = encoder_forward(g, {embed(g, patches, params, plain), false}, params,
                                          cfg, false);
  const auto base_pos = encoder_forward(g, {embed(g, patches, params, pos), false}, params,
                                        cfg, false);
  double worst_plain = 0, best_pos = 0;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (int trial = 0; trial < 100; ++trial) {
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto px = permute_rows(patches, perm);
    const auto a = encoder_forward(g, {embed(g, px, params, plain), false}, params, cfg, false);
    worst_plain = std::max(worst_plain, max_abs_diff(a.sequence.tokens.data(),
                                                     permute_rows(base_plain.sequence.tokens,
                                                                  perm)
                                                         .data()));
    const auto b = encoder_forward(g, {embed(g, px, params, pos), false}, params, cfg, false);
    best_pos = std::max(best_pos, max_abs_diff(b.sequence.tokens.data(),
                                               permute_rows(base_pos.sequence.tokens, perm)
                                                   .data()));
  }
  return {worst_plain <= 1e-5 && best_pos > 1e-2,
          fmt("100 perms: max dev without positions %.2e (<= 1e-5), with positions %.3f (> 1e-2)",
              worst_plain, best_pos)};
}

// --- 4 ---------------------------------------------------------------------------

Outcome mask_semantics() {
  std::size_t count_ok = 0, count_total = 0, ident_ok = 0, ident_total = 0;
  // L = 64: 32x32 / P4; L = 196: 28x28 / P2.
  for (const auto& [side, patch] : {std::pair<std::size_t, std::size_t>{32, 4}, {28, 2}}) {
    ModelConfig cfg;
    cfg.image_h = cfg.image_w = side;
    cfg.patch_size = patch;
    cfg.embed_dim = 32;
    cfg.num_layers = 2;
    cfg.num_heads = 2;
    const std::size_t L = cfg.num_patches();
    auto params = init_parameters<float>(cfg, 11);
    auto head = init_jigsaw_head<float>(cfg, 12);
    perturb(params, &head, 13, 0.2f);
    std::mt19937_64 rng(14);
    Rng jrng(15);
    for (int tenths : {1, 2, 5}) {
      const double gamma = tenths / 10.0;
      const std::size_t oracle = L - (static_cast<std::size_t>(tenths) * L) / 10;
      ++count_total;
      if (kept_count(L, gamma) == oracle) ++count_ok;
      for (int rep = 0; rep < 5; ++rep) {
        const std::vector<JigsawSample> s = {sample_jigsaw(L, gamma, jrng)};
        ++count_total;
        if (s[0].kept.size() == oracle) ++count_ok;
        const auto x = random_images(1, cfg, rng);
        auto y = x.clone();
        const std::set<std::size_t> kept(s[0].kept.begin(), s[0].kept.end());
        const std::size_t gw = cfg.grid_w();
        std::uniform_real_distribution<float> u(0, 1);
        for (std::size_t p = 0; p < L; ++p) {
          if (kept.count(p)) continue;
          const std::size_t r0 = (p / gw) * patch, c0 = (p % gw) * patch;
          for (std::size_t r = r0; r < r0 + patch; ++r)
            for (std::size_t c = c0; c < c0 + patch; ++c)
              for (std::size_t ch = 0; ch < cfg.channels; ++ch)
                y.mutable_data()[(r * side + c) * cfg.channels + ch] = u(rng);
        }
        Graph<float> g(GradMode::kInference);
        const auto a = jigsaw_forward(g, x, params, head, cfg, s);
        const auto b = jigsaw_forward(g, y, params, head, cfg, s);
        ++ident_total;
        if (a.numel() == b.numel() &&
            std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0)
          ++ident_ok;
      }
    }
  }
  return {count_ok == count_total && ident_ok == ident_total,
          fmt("kept counts %zu/%zu, bit-identical logits %zu/%zu (L in {64, 196})", count_ok,
              count_total, ident_ok, ident_total)};
}

// --- 5, 6, 7: training runs from the shipped configs -------------------------------

struct Run {
  RunConfig rc;
  Dataset train_set;
  std::optional<Dataset> eval_set;
};

Run prepare(const std::string& config) {
  Run r{load_run_config(config_path(config)), {}, {}};
  r.train_set = load_dataset(r.rc.data, r.rc.model);
  if (r.rc.eval_data) r.eval_set = load_dataset(*r.rc.eval_data, r.rc.model);
  return r;
}

TrainResult train_run(const Run& r, std::uint64_t seed) {
  TrainConfig tc = r.rc.train;
  tc.seed = seed;
  return train(r.rc.model, init_parameters<float>(r.rc.model, seed),
               init_jigsaw_head<float>(r.rc.model, seed + 1), r.train_set, tc);
}

Outcome memorization() {
  const auto r = prepare("overfit.json");
  const auto& m = r.rc.model;
  const bool shape_ok = m.image_h == 32 && m.image_w == 32 && m.channels == 3 &&
                        m.patch_size == 4 && m.embed_dim == 64 && m.num_heads == 4 &&
                        m.num_layers == 4 && m.num_classes == 10 &&
                        r.rc.train.batch_size == 8 && r.train_set.size() == 8 &&
                        r.rc.train.steps <= 500 && r.rc.train.regimen == Regimen::kAuxiliary;
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = train_run(r, r.rc.train.seed);
  const double secs = seconds_since(t0);
  const float final_loss = res.log.records.back().loss_total;
  return {shape_ok && final_loss < 0.05f && secs < 120,
          fmt("L_total %.4f after %lld steps (< 0.05), %.1fs (< 120s)%s", final_loss,
              static_cast<long long>(r.rc.train.steps), secs,
              shape_ok ? "" : ", config does not match the toy setting")};
}

Outcome jigsaw_learnability() {
  const auto r = prepare("jigsaw_pretext.json");
  const bool setup_ok = r.train_set.size() == 5000 && r.eval_set && r.eval_set->size() == 1000 &&
                        r.rc.train.steps <= 2000 && r.rc.train.jigsaw.gamma == 0.5;
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = train_run(r, r.rc.train.seed);
  const double secs = seconds_since(t0);
  const double acc = jigsaw_position_accuracy(r.rc.model, res.params, res.head, *r.eval_set,
                                              r.rc.train.jigsaw.gamma, 12345);
  const double chance = 1.0 / static_cast<double>(r.rc.model.num_patches());
  return {setup_ok && acc > 0.9,
          fmt("held-out position accuracy %.4f (> 0.90, chance %.4f), %lld steps, %.1fs", acc,
              chance, static_cast<long long>(r.rc.train.steps), secs)};
}

Outcome noisy_label_trend() {
  const auto base = prepare("noisy_baseline.json");
  const auto aux = prepare("noisy_auxiliary.json");
  const bool setup_ok =
      base.rc.train.noise_rate == 0.4 && aux.rc.train.noise_rate == 0.4 &&
      base.rc.train.regimen == Regimen::kBaseline && base.rc.train.jigsaw.eta == 0.0 &&
      aux.rc.train.regimen == Regimen::kAuxiliary && aux.rc.train.jigsaw.eta == 1.0 &&
      aux.rc.train.jigsaw.gamma == 0.2 && base.eval_set && aux.eval_set;
  const auto t0 = std::chrono::steady_clock::now();
  double sum_b = 0, sum_a = 0;
  int wins = 0;
  std::string per_seed;
  for (std::uint64_t seed : {0, 1, 2}) {
    const double b = evaluate(base.rc.model, train_run(base, seed).params, *base.eval_set);
    const double a = evaluate(aux.rc.model, train_run(aux, seed).params, *aux.eval_set);
    std::printf("      seed %llu: baseline %.4f, jigsaw %.4f\n",
                static_cast<unsigned long long>(seed), b, a);
    std::fflush(stdout);
    sum_b += b;
    sum_a += a;
    if (a >= b) ++wins;
  }
  const double secs = seconds_since(t0);
  const double mb = sum_b / 3, ma = sum_a / 3;
  return {setup_ok && ma >= mb - 0.005 && wins >= 2 && secs < 1800,
          fmt("mean clean acc jigsaw %.4f vs baseline %.4f (>= -0.5 pt), wins %d/3 (>= 2), "
              "%.0fs (< 1800s)",
              ma, mb, wins, secs)};
}

// --- 8, 9: attacks on a trained toy model -------------------------------------------

struct ToyModel {
  ModelConfig cfg;
  Parameters<float> params;
  Dataset test;
};

const ToyModel& attack_model() {
  static const ToyModel toy = [] {
    const auto r = prepare("attack_toy.json");
    const auto res = train_run(r, r.rc.train.seed);
    ToyModel t{r.rc.model, res.params, *r.eval_set};
    std::printf("      toy model clean accuracy %.3f on %zu images\n",
                evaluate(t.cfg, t.params, t.test), t.test.size());
    std::fflush(stdout);
    return t;
  }();
  return toy;
}

// Exact check against the float ball the attacks project onto.
bool inside_ball(std::span<const float> adv, std::span<const float> x, double eps) {
  const float e = static_cast<float>(eps);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const float lo = std::max(x[i] - e, 0.0f), hi = std::min(x[i] + e, 1.0f);
    if (!(adv[i] >= lo && adv[i] <= hi)) return false;
  }
  return true;
}

Outcome attack_invariants() {
  const auto& toy = attack_model();
  const VitClassifier model(toy.cfg, toy.params);
  std::size_t images = 0, in_ball = 0, identity = 0, identity_total = 0;
  std::string ordering;
  bool order_ok = true;
  for (int eps255 : {0, 4, 8, 16}) {
    double fgsm_acc = 0, pgd_acc = 0;
    for (AttackKind kind : {AttackKind::kFgsm, AttackKind::kBim, AttackKind::kPgd,
                            AttackKind::kMi}) {
      AttackConfig c;
      c.kind = kind;
      c.epsilon = eps255 / 255.0;
      c.alpha = 2 / 255.0;
      c.steps = 10;
      const auto rep = run_attack(model, model, toy.test, c, 31, true);
      for (std::size_t i = 0; i < toy.test.size(); ++i) {
        const auto& x = toy.test.records[i].pixels;
        if (eps255 == 0) {
          ++identity_total;
          if (rep.adversarial[i] == x) ++identity;
        } else {
          ++images;
          if (inside_ball(rep.adversarial[i], x, c.epsilon)) ++in_ball;
        }
      }
      if (kind == AttackKind::kFgsm) fgsm_acc = rep.robust_acc;
      if (kind == AttackKind::kPgd) pgd_acc = rep.robust_acc;
    }
    if (eps255 > 0) {
      order_ok = order_ok && pgd_acc <= fgsm_acc;
      ordering += fmt(" eps%d: pgd %.2f <= fgsm %.2f;", eps255, pgd_acc, fgsm_acc);
    }
  }
  return {in_ball == images && identity == identity_total && order_ok,
          fmt("in ball+box %zu/%zu, eps 0 identity %zu/%zu,", in_ball, images, identity,
              identity_total) +
              ordering};
}

Outcome square_monotonicity() {
  const auto& toy = attack_model();
  const VitClassifier model(toy.cfg, toy.params);
  std::string trace;
  double prev = 2.0;
  bool ok = true;
  for (std::int64_t q : {50, 100, 200, 500}) {
    AttackConfig c;
    c.kind = AttackKind::kSquare;
    c.epsilon = 16 / 255.0;
    c.max_queries = q;
    const auto rep = run_attack(model, model, toy.test, c, 41);
    ok = ok && rep.robust_acc <= prev && rep.max_queries_used <= q;
    prev = rep.robust_acc;
    trace += fmt(" %lld:%.2f", static_cast<long long>(q), rep.robust_acc);
  }
  return {ok, "robust acc by query budget (eps 16/255):" + trace};
}

// --- 10 --------------------------------------------------------------------------

Outcome adamw_oracle() {
  // t = 1: m_hat = g and v_hat = g^2, so w1 = w0 - lr (g / (|g| + eps) + wd w0).
  const double w0 = 1.0, g0 = 0.5, lr = 0.1, eps = 1e-8, wd = 0.05;
  const double oracle = w0 - lr * (g0 / (std::abs(g0) + eps) + wd * w0);
  std::vector<double> w = {w0}, g = {g0}, m = {0}, v = {0};
  adamw_update<double>(w, g, m, v, 1, AdamWHyper{lr, 0.9, 0.999, eps, wd}, true);
  const double err = std::abs(w[0] - oracle);

  TrainConfig tc;
  tc.steps = 1000;
  tc.warmup_steps = 100;
  tc.base_lr = 1e-3;
  tc.min_lr = 1e-6;
  const double warm = lr_at(tc.warmup_steps, tc), last = lr_at(tc.steps, tc);
  const bool sched_ok = std::abs(warm - 1e-3) <= 1e-15 && std::abs(last - 1e-6) <= 1e-15;
  return {err <= 1e-10 && sched_ok,
          fmt("w1 = %.10f (oracle %.10f, err %.1e); lr %.3g at warmup end, %.3g at final step",
              w[0], oracle, err, warm, last)};
}

// --- 11 --------------------------------------------------------------------------

Outcome serialization() {
  ScratchDir dir("ser");
  std::mt19937_64 rng(51);
  std::size_t exact = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<NamedTensor> ts(1 + rng() % 5);
    for (std::size_t i = 0; i < ts.size(); ++i) {
      auto& t = ts[i];
      t.name = "t" + std::to_string(i) + "." + std::string(rng() % 12, 'x');
      const std::size_t rank = rng() % 4;
      t.shape.clear();
      for (std::size_t r = 0; r < rank; ++r) t.shape.push_back(1 + rng() % 7);
      t.data.resize(shape_numel(t.shape));
      // Raw bit patterns, including NaN payloads and subnormals.
      for (auto& f : t.data) {
        const auto bits = static_cast<std::uint32_t>(rng());
        std::memcpy(&f, &bits, sizeof(f));
      }
    }
    const nlohmann::json cfg{{"trial", trial}, {"note", std::string(rng() % 40, 'c')}};
    const auto path = dir.path / "t.jvit";
    write_tensor_file(path, cfg, ts);
    const auto back = read_tensor_file(path);
    bool same = back.config == cfg && back.tensors.size() == ts.size();
    for (std::size_t i = 0; same && i < ts.size(); ++i)
      same = back.tensors[i].name == ts[i].name && back.tensors[i].shape == ts[i].shape &&
             std::memcmp(back.tensors[i].data.data(), ts[i].data.data(),
                         ts[i].data.size() * sizeof(float)) == 0;
    if (same) ++exact;
  }

  std::vector<fs::path> batches;
  std::string source;
  if (const char* env = std::getenv("JVIT_CIFAR10_DIR"); env && *env) {
    for (const char* name : {"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin",
                             "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"})
      if (fs::exists(fs::path(env) / name)) batches.push_back(fs::path(env) / name);
    source = "real batch files from " + std::string(env);
  }
  if (batches.empty()) {
    SyntheticSpec spec;
    spec.num_images = 10000;
    spec.seed = 52;
    write_cifar10_bin(gen_synthetic(spec), dir.path / "data_batch_1.bin");
    batches.push_back(dir.path / "data_batch_1.bin");
    source = "JVIT_CIFAR10_DIR unset; generated 10000-record stand-in";
  }
  bool counts_ok = true;
  std::size_t total = 0;
  for (const auto& b : batches) {
    const auto size = fs::file_size(b);
    const auto d = load_cifar10_bin(b);
    counts_ok = counts_ok && size % kCifarRecordBytes == 0 &&
                d.size() == size / kCifarRecordBytes;
    total += d.size();
  }
  return {exact == 1000 && counts_ok,
          fmt("%zu/1000 roundtrips bit-exact; %zu files, %zu records = size/3073 (", exact,
              batches.size(), total) +
              source + ")"};
}

// --- 12 --------------------------------------------------------------------------

Outcome determinism() {
  ::setenv("JVIT_THREADS", "1", 1);
  cli::configure_threads_from_env();
  ScratchDir dir("det");
  const auto cfg = config_path("determinism.json").string();
  for (const char* sub : {"a", "b"}) {
    std::ostringstream out, err;
    const int code = cli::run({"train", "--config", cfg, "--out", (dir.path / sub).string(),
                               "--seed", "17", "--quiet"},
                              out, err);
    if (code != cli::kExitOk) return {false, "train failed: " + err.str()};
  }
  const bool csv = read_bytes(dir.path / "a" / "metrics.csv") ==
                   read_bytes(dir.path / "b" / "metrics.csv");
  const bool ck = read_bytes(dir.path / "a" / "checkpoint.jvit") ==
                  read_bytes(dir.path / "b" / "checkpoint.jvit");
  return {csv && ck, fmt("metrics.csv %s, checkpoint.jvit %s (JVIT_THREADS=1)",
                         csv ? "identical" : "differs", ck ? "identical" : "differs")};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  cli::tune_allocator();
  cli::configure_threads_from_env();
  const std::vector<Criterion> all = {
      {1, "gradient oracle", gradient_oracle},
      {2, "loss composition", loss_composition},
      {3, "permutation equivariance", permutation_equivariance},
      {4, "mask semantics", mask_semantics},
      {5, "memorization", memorization},
      {6, "jigsaw learnability", jigsaw_learnability},
      {7, "noisy-label trend", noisy_label_trend},
      {8, "attack invariants", attack_invariants},
      {9, "square budget monotonicity", square_monotonicity},
      {10, "adamw oracle and schedule", adamw_oracle},
      {11, "serialization", serialization},
      {12, "determinism", determinism},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const auto& c : all) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::printf("%s %2d %s: %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", c.id, c.name,
                o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
