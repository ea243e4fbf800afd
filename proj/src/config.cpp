// SPDX-License-Identifier: Apache-2.0

#include "jvit/config.hpp"

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

namespace jvit {

using nlohmann::json;

namespace {

// Reads typed fields out of one JSON object and rejects leftovers.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected a JSON object");
  }

  std::string path(const std::string& key) const {
    return where_.empty() ? key : where_ + "." + key;
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  const json& at(const std::string& key) const { return j_.at(key); }

  void get(const std::string& key, std::size_t& out) {
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
      throw ConfigError(path(key) + ": expected a non-negative integer");
    out = v.get<std::size_t>();
  }
  void get(const std::string& key, std::uint64_t& out, int)  {
    std::size_t tmp = out;
    get(key, tmp);
    out = tmp;
  }
  void get(const std::string& key, std::int64_t& out) {
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_number_integer()) throw ConfigError(path(key) + ": expected an integer");
    out = v.get<std::int64_t>();
  }
  void get(const std::string& key, double& out) {
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_number()) throw ConfigError(path(key) + ": expected a number");
    out = v.get<double>();
  }
  void get(const std::string& key, std::string& out) {
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_string()) throw ConfigError(path(key) + ": expected a string");
    out = v.get<std::string>();
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw ConfigError("unknown config key: " + path(key));
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

template <typename F>
auto rethrow_invalid(const std::string& where, F&& f) {
  try {
    return f();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  std::size_t out = 0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size())
    throw ConfigError("data spec: bad value for " + key + ": '" + value + "'");
  return out;
}

}  // namespace

json to_json(const ModelConfig& c) {
  return json{{"image_h", c.image_h},     {"image_w", c.image_w},
              {"channels", c.channels},   {"patch_size", c.patch_size},
              {"embed_dim", c.embed_dim}, {"num_layers", c.num_layers},
              {"num_heads", c.num_heads}, {"num_classes", c.num_classes}};
}

json to_json(const TrainConfig& c) {
  return json{{"steps", c.steps},
              {"batch_size", c.batch_size},
              {"base_lr", c.base_lr},
              {"min_lr", c.min_lr},
              {"warmup_steps", c.warmup_steps},
              {"weight_decay", c.weight_decay},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"adam_eps", c.adam_eps},
              {"jigsaw", {{"eta", c.jigsaw.eta}, {"gamma", c.jigsaw.gamma}}},
              {"regimen", std::string(regimen_name(c.regimen))},
              {"pretext_steps", c.pretext_steps},
              {"noise_rate", c.noise_rate},
              {"seed", c.seed},
              {"log_interval", c.log_interval},
              {"eval_interval", c.eval_interval}};
}

json to_json(const DataSpec& d) {
  if (d.kind == DataSpec::Kind::kCifar10) return json{{"kind", "cifar10"}, {"path", d.path.string()}};
  return json{{"kind", "synthetic"},
              {"num_images", d.synthetic.num_images},
              {"seed", d.synthetic.seed},
              {"num_classes", d.synthetic.num_classes}};
}

json to_json(const RunConfig& c) {
  json j{{"model", to_json(c.model)},
         {"train", to_json(c.train)},
         {"data", to_json(c.data)},
         {"output_dir", c.output_dir.string()},
         {"init_seed", c.init_seed}};
  if (c.eval_data) j["eval_data"] = to_json(*c.eval_data);
  return j;
}

ModelConfig model_from_json(const json& j, const std::string& where) {
  ModelConfig c;
  Reader r(j, where);
  r.get("image_h", c.image_h);
  r.get("image_w", c.image_w);
  r.get("channels", c.channels);
  r.get("patch_size", c.patch_size);
  r.get("embed_dim", c.embed_dim);
  r.get("num_layers", c.num_layers);
  r.get("num_heads", c.num_heads);
  r.get("num_classes", c.num_classes);
  r.finish();
  rethrow_invalid(where, [&] { c.validate(); });
  return c;
}

TrainConfig train_from_json(const json& j, const std::string& where) {
  TrainConfig c;
  Reader r(j, where);
  r.get("steps", c.steps);
  r.get("batch_size", c.batch_size);
  r.get("base_lr", c.base_lr);
  r.get("min_lr", c.min_lr);
  r.get("warmup_steps", c.warmup_steps);
  r.get("weight_decay", c.weight_decay);
  r.get("beta1", c.beta1);
  r.get("beta2", c.beta2);
  r.get("adam_eps", c.adam_eps);
  if (r.has("jigsaw")) {
    Reader jr(r.at("jigsaw"), r.path("jigsaw"));
    jr.get("eta", c.jigsaw.eta);
    jr.get("gamma", c.jigsaw.gamma);
    jr.finish();
  }
  std::string regimen;
  r.get("regimen", regimen);
  if (!regimen.empty())
    c.regimen = rethrow_invalid(r.path("regimen"), [&] { return parse_regimen(regimen); });
  r.get("pretext_steps", c.pretext_steps);
  r.get("noise_rate", c.noise_rate);
  r.get("seed", c.seed, 0);
  r.get("log_interval", c.log_interval);
  r.get("eval_interval", c.eval_interval);
  r.finish();
  rethrow_invalid(where, [&] { c.validate(); });
  return c;
}

DataSpec data_from_json(const json& j, const std::string& where) {
  if (j.is_string()) {
    try {
      return parse_data_spec(j.get<std::string>());
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  DataSpec d;
  Reader r(j, where);
  std::string kind = "synthetic";
  r.get("kind", kind);
  if (kind == "cifar10") {
    d.kind = DataSpec::Kind::kCifar10;
    std::string path;
    r.get("path", path);
    if (path.empty()) throw ConfigError(r.path("path") + ": required for cifar10 data");
    d.path = path;
  } else if (kind == "synthetic") {
    d.kind = DataSpec::Kind::kSynthetic;
    r.get("num_images", d.synthetic.num_images);
    r.get("seed", d.synthetic.seed, 0);
    r.get("num_classes", d.synthetic.num_classes);
  } else {
    throw ConfigError(r.path("kind") + ": unknown data kind '" + kind + "'");
  }
  r.finish();
  return d;
}

RunConfig run_from_json(const json& j) {
  RunConfig c;
  Reader r(j, "");
  if (r.has("model")) c.model = model_from_json(r.at("model"), "model");
  if (r.has("train")) c.train = train_from_json(r.at("train"), "train");
  if (r.has("data")) c.data = data_from_json(r.at("data"), "data");
  if (r.has("eval_data")) c.eval_data = data_from_json(r.at("eval_data"), "eval_data");
  std::string out;
  r.get("output_dir", out);
  c.output_dir = out;
  r.get("init_seed", c.init_seed, 0);
  r.finish();
  for (const DataSpec* d : {&c.data, c.eval_data ? &*c.eval_data : nullptr}) {
    if (!d) continue;
    if (d->kind == DataSpec::Kind::kCifar10) {
      if (!std::filesystem::exists(d->path))
        throw ConfigError("data file does not exist: " + d->path.string());
      if (c.model.image_h != 32 || c.model.image_w != 32 || c.model.channels != 3 ||
          c.model.num_classes != 10)
        throw ConfigError("model: cifar10 data needs a 32x32x3 model with 10 classes");
    } else if (d->synthetic.num_classes != c.model.num_classes) {
      throw ConfigError("data.num_classes differs from model.num_classes");
    }
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_from_json(j);
}

DataSpec parse_data_spec(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos)
    throw ConfigError("data spec '" + text + "': expected cifar10:<path> or synthetic:n=N,seed=S");
  const std::string kind = text.substr(0, colon), rest = text.substr(colon + 1);
  DataSpec d;
  if (kind == "cifar10") {
    if (rest.empty()) throw ConfigError("data spec: cifar10 needs a path");
    d.kind = DataSpec::Kind::kCifar10;
    d.path = rest;
    return d;
  }
  if (kind != "synthetic") throw ConfigError("data spec: unknown kind '" + kind + "'");
  d.kind = DataSpec::Kind::kSynthetic;
  std::istringstream ss(rest);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("data spec: expected key=value, got '" + item + "'");
    const std::string key = item.substr(0, eq), value = item.substr(eq + 1);
    if (key == "n") d.synthetic.num_images = parse_size(key, value);
    else if (key == "seed") d.synthetic.seed = parse_size(key, value);
    else if (key == "classes") d.synthetic.num_classes = parse_size(key, value);
    else throw ConfigError("data spec: unknown key '" + key + "'");
  }
  return d;
}

Dataset load_dataset(const DataSpec& spec, const ModelConfig& model) {
  if (spec.kind == DataSpec::Kind::kCifar10) return load_cifar10_bin(spec.path);
  SyntheticSpec s = spec.synthetic;
  s.h = model.image_h;
  s.w = model.image_w;
  s.c = model.channels;
  s.patch_size = model.patch_size;
  return gen_synthetic(s);
}

}  // namespace jvit
