// SPDX-License-Identifier: Apache-2.0

#include "jvit/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>

#include "CLI11.hpp"
#include "jvit/attack.hpp"
#include "jvit/checkpoint.hpp"
#include "jvit/config.hpp"
#include "jvit/gradcheck.hpp"
#include "jvit/image_io.hpp"
#include "jvit/kernels.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace jvit::cli {

namespace fs = std::filesystem;

void configure_threads_from_env() {
  int n = 1;
  if (const char* env = std::getenv("JVIT_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) n = static_cast<int>(v);
  }
  kernels::set_threads(n);
}

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 32 << 20);  // glibc's upper limit
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

namespace {

struct TrainArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
};

struct EvalArgs {
  std::string ckpt, data;
};

struct AttackArgs {
  std::string ckpt, surrogate, method, data, out;
  int eps = 16;
  int alpha = 2;
  std::int64_t steps = 10;
  std::int64_t queries = 500;
  double cw_c = 1.0;
  double cw_lr = 0.5;
  bool no_random_start = false;
  std::uint64_t seed = 0;
};

struct AttnArgs {
  std::string ckpt, image, out;
  std::size_t scale = 0;
};

struct GradArgs {
  std::size_t trials = 3;
  std::uint64_t seed = 0;
  std::string fault;
};

struct GenArgs {
  std::string data, out, ppm;
};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  RunConfig rc = load_run_config(a.config);
  if (a.seed) {
    rc.train.seed = *a.seed;
    rc.init_seed = *a.seed;
  }
  if (!a.out.empty()) rc.output_dir = a.out;
  if (rc.output_dir.empty()) throw ConfigError("output_dir: give --out or set output_dir");
  fs::create_directories(rc.output_dir);

  const Dataset train_set = load_dataset(rc.data, rc.model);
  std::optional<Dataset> eval_set;
  if (rc.eval_data) eval_set = load_dataset(*rc.eval_data, rc.model);

  const auto params = init_parameters<float>(rc.model, rc.init_seed);
  const auto head = init_jigsaw_head<float>(rc.model, rc.init_seed + 1);
  StepCallback log;
  if (!a.quiet)
    log = [&](const MetricsRecord& r) {
      err << "step " << r.step << " lr=" << fmt(r.lr) << " loss_total=" << fmt(r.loss_total)
          << " loss_cls=" << fmt(r.loss_cls) << " loss_jigsaw=" << fmt(r.loss_jigsaw)
          << " train_acc=" << fmt(r.train_acc) << " jigsaw_acc=" << fmt(r.jigsaw_acc);
      if (r.eval_acc) err << " eval_acc=" << fmt(*r.eval_acc);
      err << '\n';
    };
  TrainResult res = train(rc.model, params, head, train_set, rc.train,
                          eval_set ? &*eval_set : nullptr, log);

  {
    std::ofstream csv(rc.output_dir / "metrics.csv");
    write_metrics_csv(res.log, csv);
    if (!csv) throw std::runtime_error("cannot write metrics.csv");
  }
  {
    std::ofstream js(rc.output_dir / "config.json");
    js << std::setw(2) << to_json(rc) << '\n';
  }
  nlohmann::json extra{{"train", to_json(rc.train)},
                       {"data", to_json(rc.data)},
                       {"init_seed", rc.init_seed}};
  save_checkpoint(rc.output_dir / "checkpoint.jvit", rc.model, res.params, res.head, &res.optim,
                  extra);
  out << "wrote " << (rc.output_dir / "checkpoint.jvit").string() << '\n';
  return kExitOk;
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const Dataset data = load_dataset(parse_data_spec(a.data), ck.model);
  out << "top1=" << fmt(evaluate(ck.model, ck.params, data)) << '\n';
  return kExitOk;
}

int cmd_attack(const AttackArgs& a, std::ostream& out) {
  AttackConfig cfg;
  try {
    cfg.kind = parse_attack_kind(a.method);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (a.eps < 0 || a.eps > 255 || a.alpha < 0 || a.alpha > 255)
    throw ConfigError("--eps and --alpha are integers in [0, 255]");
  cfg.epsilon = a.eps / 255.0;
  cfg.alpha = a.alpha / 255.0;
  cfg.steps = a.steps;
  cfg.max_queries = a.queries;
  cfg.cw_c = a.cw_c;
  cfg.cw_lr = a.cw_lr;
  cfg.random_start = !a.no_random_start;
  cfg.validate();

  const Checkpoint target_ck = load_checkpoint(a.ckpt);
  const VitClassifier target(target_ck.model, target_ck.params);
  std::optional<Checkpoint> sur_ck;
  if (!a.surrogate.empty()) sur_ck = load_checkpoint(a.surrogate);
  const VitClassifier surrogate = sur_ck ? VitClassifier(sur_ck->model, sur_ck->params)
                                         : VitClassifier(target_ck.model, target_ck.params);
  const Dataset data = load_dataset(parse_data_spec(a.data), target_ck.model);
  const AttackReport rep = run_attack(target, surrogate, data, cfg, a.seed);
  const auto j = report_to_json(rep);
  std::ofstream f(a.out);
  if (!f) throw std::runtime_error("cannot write " + a.out);
  f << std::setw(2) << j << '\n';
  out << "clean_acc=" << fmt(rep.clean_acc) << " robust_acc=" << fmt(rep.robust_acc) << '\n';
  return kExitOk;
}

int cmd_attnmap(const AttnArgs& a, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const PixelImage img = read_ppm(a.image);
  if (img.shape != ImageShape{ck.model.image_h, ck.model.image_w, ck.model.channels}) {
    std::ostringstream os;
    os << "image is " << img.shape.w << "x" << img.shape.h << "x" << img.shape.c
       << ", model expects " << ck.model.image_w << "x" << ck.model.image_h << "x"
       << ck.model.channels;
    throw std::invalid_argument(os.str());
  }
  const Grid grid = class_attention_map(img.pixels, ck.params, ck.model);
  const std::size_t scale = a.scale ? a.scale : ck.model.patch_size;
  export_grid_pgm(grid, scale, a.out);
  out << "wrote " << grid.cols * scale << "x" << grid.rows * scale << " map to " << a.out
      << '\n';
  return kExitOk;
}

int cmd_gradcheck(const GradArgs& a, std::ostream& out) {
  if (!a.fault.empty()) {
    try {
      debug::inject_backward_fault(parse_op_kind(a.fault));
    } catch (const UnknownOpError& e) {
      throw ConfigError(e.what());
    }
  }
  struct Reset {
    ~Reset() { debug::clear_backward_fault(); }
  } reset;
  const GradCheckSuite suite = run_gradcheck_suite(a.trials, a.seed);
  for (const auto& e : suite.entries) {
    const bool ok = e.max_rel_error <= suite.tolerance;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-14s max_rel_err=%.3e coords=%zu %s\n", e.name.c_str(),
                  e.max_rel_error, e.coordinates, ok ? "ok" : "FAIL");
    out << buf;
  }
  if (suite.passed()) {
    out << "gradcheck passed\n";
    return kExitOk;
  }
  for (const auto& e : suite.entries)
    if (e.max_rel_error > suite.tolerance) out << "gradcheck failed: " << e.name << '\n';
  return kExitVerify;
}

int cmd_gen_data(const GenArgs& a, std::ostream& out) {
  DataSpec spec = parse_data_spec(a.data);
  if (spec.kind != DataSpec::Kind::kSynthetic)
    throw ConfigError("gen-data: --data must be a synthetic spec");
  ModelConfig geom;  // 32x32x3, patch 4
  geom.num_classes = spec.synthetic.num_classes;
  const Dataset d = load_dataset(spec, geom);
  if (!a.out.empty()) {
    write_cifar10_bin(d, a.out);
    out << "wrote " << d.size() << " records to " << a.out << '\n';
  }
  if (!a.ppm.empty()) {
    write_ppm(PixelImage{d.shape, d.records.front().pixels}, a.ppm);
    out << "wrote first image to " << a.ppm << '\n';
  }
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Jigsaw-ViT: training, evaluation, attacks and verification", "jvit"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a JSON run config");
  train_cmd->add_option("--config", ta.config, "Run config (JSON)")->required();
  train_cmd->add_option("--out", ta.out, "Output directory");
  train_cmd->add_option("--seed", ta.seed, "Overrides train.seed and init_seed");
  train_cmd->add_flag("--quiet", ta.quiet, "No per-interval progress on stderr");

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "Top-1 accuracy of a checkpoint");
  eval_cmd->add_option("--ckpt", ea.ckpt)->required();
  eval_cmd->add_option("--data", ea.data, "cifar10:<path> | synthetic:n=N,seed=S[,classes=K]")
      ->required();

  AttackArgs aa;
  auto* attack_cmd = app.add_subcommand("attack", "Adversarial robustness report");
  attack_cmd->add_option("--ckpt", aa.ckpt, "Target checkpoint")->required();
  attack_cmd->add_option("--surrogate", aa.surrogate, "Craft on this model (transfer)");
  attack_cmd->add_option("--method", aa.method, "fgsm|bim|pgd|mi|cw|square")->required();
  attack_cmd->add_option("--eps", aa.eps, "L-inf budget in 1/255 units")->required();
  attack_cmd->add_option("--alpha", aa.alpha, "Step size in 1/255 units");
  attack_cmd->add_option("--steps", aa.steps, "Iterations");
  attack_cmd->add_option("--queries", aa.queries, "Square query budget");
  attack_cmd->add_option("--cw-c", aa.cw_c, "CW trade-off constant");
  attack_cmd->add_option("--cw-lr", aa.cw_lr, "CW step size");
  attack_cmd->add_flag("--no-random-start", aa.no_random_start, "PGD starts at the image");
  attack_cmd->add_option("--seed", aa.seed);
  attack_cmd->add_option("--data", aa.data)->required();
  attack_cmd->add_option("--out", aa.out, "Report JSON")->required();

  AttnArgs ma;
  auto* attn_cmd = app.add_subcommand("attnmap", "Export the class-token attention map");
  attn_cmd->add_option("--ckpt", ma.ckpt)->required();
  attn_cmd->add_option("--image", ma.image, "PPM (P6) image")->required();
  attn_cmd->add_option("--out", ma.out, "PGM (P5) output")->required();
  attn_cmd->add_option("--scale", ma.scale, "Upsampling factor (default: patch size)");

  GradArgs ga;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient check");
  grad_cmd->add_option("--trials", ga.trials)->check(CLI::PositiveNumber);
  grad_cmd->add_option("--seed", ga.seed);
  grad_cmd->add_option("--inject-fault", ga.fault)->group("");

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic set in CIFAR-10 format");
  gen_cmd->add_option("--data", gen.data, "synthetic:n=N,seed=S[,classes=K]")->required();
  gen_cmd->add_option("--out", gen.out, "CIFAR-10 binary output");
  gen_cmd->add_option("--ppm", gen.ppm, "Also write the first image as PPM");

  std::vector<const char*> argv{"jvit"};
  for (const auto& s : args) argv.push_back(s.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(ta, out, err);
    if (*eval_cmd) return cmd_eval(ea, out);
    if (*attack_cmd) return cmd_attack(aa, out);
    if (*attn_cmd) return cmd_attnmap(ma, out);
    if (*grad_cmd) return cmd_gradcheck(ga, out);
    if (*gen_cmd) return cmd_gen_data(gen, out);
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << '\n';
    return kExitDiverged;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace jvit::cli
