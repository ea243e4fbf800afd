// SPDX-License-Identifier: Apache-2.0

#include "jvit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "jvit/config.hpp"

namespace jvit {

using nlohmann::json;

namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  template <typename U>
  void le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i)
      buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  const std::vector<char>& data() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Cursor {
 public:
  Cursor(std::vector<char> data, std::string file) : buf_(std::move(data)), file_(std::move(file)) {}

  void need(std::size_t n, const char* what) const {
    if (buf_.size() - pos_ < n)
      throw FormatError(file_ + ": truncated file while reading " + what);
  }
  template <typename U>
  U le(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  std::vector<char> buf_;
  std::size_t pos_ = 0;
  std::string file_;
};

const std::string kMomentM = "optim.m.";
const std::string kMomentV = "optim.v.";

}  // namespace

void write_tensor_file(const std::filesystem::path& path, const json& config,
                       std::span<const NamedTensor> tensors) {
  std::set<std::string> names;
  for (const auto& t : tensors) {
    if (!names.insert(t.name).second) throw FormatError("duplicate tensor name: " + t.name);
    if (shape_numel(t.shape) != t.data.size())
      throw FormatError("tensor " + t.name + ": payload does not match its shape");
  }
  const std::string blob = config.dump();
  Writer w;
  w.bytes(kCheckpointMagic, 4);
  w.le<std::uint32_t>(kCheckpointVersion);
  w.le<std::uint64_t>(blob.size());
  w.le<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  w.bytes(blob.data(), blob.size());
  for (const auto& t : tensors) {
    w.le<std::uint32_t>(static_cast<std::uint32_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.le<std::uint32_t>(static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) w.le<std::uint64_t>(d);
    for (float v : t.data) w.le<std::uint32_t>(std::bit_cast<std::uint32_t>(v));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
  if (!out) throw FormatError("write failed: " + path.string());
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Cursor c(std::move(bytes), path.string());

  if (c.str(4, "magic") != std::string(kCheckpointMagic, 4))
    throw FormatError(path.string() + ": magic mismatch (not a JVIT checkpoint)");
  const auto version = c.le<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw FormatError(path.string() + ": unsupported checkpoint version " +
                      std::to_string(version));
  const auto blob_len = c.le<std::uint64_t>("config length");
  const auto count = c.le<std::uint32_t>("tensor count");
  TensorFile f;
  try {
    f.config = json::parse(c.str(blob_len, "config"));
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": bad config blob: " + e.what());
  }
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = c.str(c.le<std::uint32_t>("name length"), "name");
    if (!names.insert(t.name).second)
      throw FormatError(path.string() + ": duplicate tensor name " + t.name);
    const auto rank = c.le<std::uint32_t>("rank");
    std::size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      t.shape.push_back(c.le<std::uint64_t>("dims"));
      n *= t.shape.back();
    }
    c.need(4 * n, "payload");
    t.data.resize(n);
    for (float& v : t.data) v = std::bit_cast<float>(c.le<std::uint32_t>("payload"));
    f.tensors.push_back(std::move(t));
  }
  if (!c.done()) throw FormatError(path.string() + ": trailing bytes after tensor table");
  return f;
}

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& model,
                     const Parameters<float>& params, const JigsawHead<float>& head,
                     const OptimState* optim, const json& extra) {
  std::vector<NamedTensor> tensors;
  auto add = [&](const std::string& name, const Tensor<float>& t, bool) {
    tensors.push_back({name, t.shape(), std::vector<float>(t.data().begin(), t.data().end())});
  };
  params.for_each(add);
  head.for_each(add);
  json config{{"model", to_json(model)}, {"extra", extra}};
  if (optim) {
    json steps = json::object();
    for (const auto& [name, slot] : optim->slots) {
      tensors.push_back({kMomentM + name, slot.shape, slot.m});
      tensors.push_back({kMomentV + name, slot.shape, slot.v});
      steps[name] = slot.step;
    }
    config["optim"] = {{"step", optim->step}, {"slot_steps", steps}};
  }
  write_tensor_file(path, config, tensors);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  TensorFile f = read_tensor_file(path);
  const std::string file = path.string();
  Checkpoint ck;
  try {
    ck.model = model_from_json(f.config.at("model"), "model");
    ck.extra = f.config.value("extra", json::object());
  } catch (const json::exception& e) {
    throw FormatError(file + ": bad checkpoint config: " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(file + ": " + e.what());
  }
  ck.params = init_parameters<float>(ck.model, 0);
  ck.head = init_jigsaw_head<float>(ck.model, 0);

  std::map<std::string, NamedTensor*> by_name;
  for (auto& t : f.tensors) by_name[t.name] = &t;
  std::set<std::string> used;
  auto fill = [&](const std::string& name, Tensor<float>& t, bool) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError(file + ": missing tensor " + name);
    if (it->second->shape != t.shape())
      throw FormatError(file + ": tensor " + name + " has shape " +
                        shape_str(it->second->shape) + ", model expects " +
                        shape_str(t.shape()));
    t = Tensor<float>(t.shape(), std::move(it->second->data), true);
    used.insert(name);
  };
  ck.params.for_each(fill);
  ck.head.for_each(fill);

  if (f.config.contains("optim")) {
    OptimState st;
    try {
      const auto& o = f.config.at("optim");
      st.step = o.at("step").get<std::int64_t>();
      for (const auto& [name, step] : o.at("slot_steps").items()) {
        auto m = by_name.find(kMomentM + name), v = by_name.find(kMomentV + name);
        if (m == by_name.end() || v == by_name.end())
          throw FormatError(file + ": missing optimizer moments for " + name);
        MomentSlot slot{m->second->shape, std::move(m->second->data),
                        std::move(v->second->data), step.get<std::int64_t>()};
        st.slots.emplace(name, std::move(slot));
        used.insert(m->first);
        used.insert(v->first);
      }
    } catch (const json::exception& e) {
      throw FormatError(file + ": bad optimizer metadata: " + e.what());
    }
    ck.optim = std::move(st);
  }
  for (const auto& t : f.tensors)
    if (!used.count(t.name)) throw FormatError(file + ": unexpected tensor " + t.name);
  return ck;
}

}  // namespace jvit
