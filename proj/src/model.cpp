// SPDX-License-Identifier: Apache-2.0

#include "jvit/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

namespace jvit {

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
  if (image_h == 0 || image_w == 0 || channels == 0) fail("image dimensions must be positive");
  if (patch_size == 0) fail("patch_size must be positive");
  if (image_h % patch_size != 0) fail("image_h must be divisible by patch_size");
  if (image_w % patch_size != 0) fail("image_w must be divisible by patch_size");
  if (embed_dim == 0 || num_heads == 0) fail("embed_dim and num_heads must be positive");
  if (embed_dim % num_heads != 0) fail("embed_dim must be divisible by num_heads");
  if (num_layers == 0) fail("num_layers must be positive");
  if (num_classes == 0) fail("num_classes must be positive");
}

namespace {

double truncated_normal(std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, 1.0);
  double z;
  do {
    z = dist(rng);
  } while (std::abs(z) > 2.0);
  return z * stddev;
}

template <typename T>
void copy_structure(const Parameters<T>& src, std::size_t blocks, auto&& make,
                    auto& dst) {
  dst.blocks.resize(blocks);
  std::vector<const Tensor<T>*> flat;
  src.for_each([&](const std::string&, const Tensor<T>& t, bool) { flat.push_back(&t); });
  std::size_t i = 0;
  dst.for_each([&](const std::string&, auto& t, bool) { t = make(*flat[i++]); });
}

}  // namespace

template <typename T>
Parameters<T> Parameters<T>::clone() const {
  Parameters out;
  copy_structure(*this, blocks.size(), [](const Tensor<T>& t) { return t.clone(); }, out);
  return out;
}

template <typename T>
Parameters<T> Parameters<T>::frozen() const {
  Parameters out;
  copy_structure(*this, blocks.size(), [](const Tensor<T>& t) { return t.detached(); }, out);
  return out;
}

template <typename T>
void Parameters<T>::zero_grad() {
  for_each([](const std::string&, Tensor<T>& t, bool) { t.zero_grad(); });
}

template <typename To, typename From>
Parameters<To> cast_parameters(const Parameters<From>& params) {
  Parameters<To> out;
  copy_structure(
      params, params.blocks.size(),
      [](const Tensor<From>& t) {
        std::vector<To> data(t.data().begin(), t.data().end());
        return Tensor<To>(t.shape(), std::move(data), t.requires_grad());
      },
      out);
  return out;
}

template <typename T>
Tensor<T> patchify(Graph<T>& g, const Tensor<T>& images, std::size_t p) {
  if (images.rank() != 4)
    throw ShapeError("patchify: expected [B, H, W, C], got " + shape_str(images.shape()));
  const std::size_t b = images.dim(0), h = images.dim(1), w = images.dim(2), c = images.dim(3);
  if (p == 0 || h % p != 0 || w % p != 0) {
    std::ostringstream os;
    os << "patchify: image " << h << "x" << w << " not divisible by patch size " << p;
    throw std::invalid_argument(os.str());
  }
  const std::size_t gh = h / p, gw = w / p;
  auto x = g.reshape(images, {b, gh, p, gw, p, c});
  const std::size_t perm[] = {0, 1, 3, 2, 4, 5};
  x = g.transpose(x, perm);
  return g.reshape(x, {b, gh * gw, p * p * c});
}

template <typename T>
Tensor<T> embed(Graph<T>& g, const Tensor<T>& patches, const Parameters<T>& params,
                const EmbedOptions& opt) {
  if (patches.rank() != 3)
    throw ShapeError("embed: expected patches [B, L, F], got " + shape_str(patches.shape()));
  const std::size_t b = patches.dim(0);
  const std::size_t l = patches.dim(1);
  const std::size_t d = params.patch_weight.dim(1);

  Tensor<T> x = patches;
  std::size_t m = l;
  std::vector<std::size_t> pos_rows;
  if (!opt.kept.empty()) {
    if (opt.kept.size() % b != 0)
      throw std::invalid_argument("embed: kept index count is not a multiple of the batch size");
    m = opt.kept.size() / b;
    for (std::size_t bi = 0; bi < b; ++bi) {
      std::vector<bool> seen(l, false);
      for (std::size_t j = 0; j < m; ++j) {
        const std::size_t idx = opt.kept[bi * m + j];
        if (idx >= l) {
          std::ostringstream os;
          os << "embed: kept index " << idx << " out of range [0, " << l << ")";
          throw std::invalid_argument(os.str());
        }
        if (seen[idx]) {
          std::ostringstream os;
          os << "embed: duplicate kept index " << idx;
          throw std::invalid_argument(os.str());
        }
        seen[idx] = true;
      }
    }
    x = g.gather_rows(x, opt.kept);
    for (std::size_t idx : opt.kept) pos_rows.push_back(idx + 1);
  }
  x = g.add(g.matmul(x, params.patch_weight), params.patch_bias);

  if (opt.use_pos_embed) {
    if (pos_rows.empty()) {
      for (std::size_t i = 1; i <= l; ++i) pos_rows.push_back(i);
      x = g.add(x, g.gather_rows(params.pos_embed, pos_rows));
    } else {
      auto pos = g.gather_rows(params.pos_embed, pos_rows);
      x = g.add(x, g.reshape(pos, {b, m, d}));
    }
  }
  if (opt.prepend_cls) {
    Tensor<T> cls = params.cls_token;
    if (opt.use_pos_embed) {
      const std::size_t zero[] = {0};
      cls = g.add(cls, g.reshape(g.gather_rows(params.pos_embed, zero), {d}));
    }
    const std::vector<std::size_t> zeros(b, 0);
    auto tok = g.gather_rows(g.reshape(cls, {1, d}), zeros);
    x = g.concat(g.reshape(tok, {b, 1, d}), x, 1);
  }
  return x;
}

template <typename T>
EncoderOutput<T> encoder_forward(Graph<T>& g, const TokenSequence<T>& input,
                                 const Parameters<T>& params, const ModelConfig& cfg,
                                 bool record_attention) {
  const auto& in = input.tokens;
  if (in.rank() != 3 || in.dim(2) != cfg.embed_dim) {
    std::ostringstream os;
    os << "encoder_forward: expected tokens [B, T, " << cfg.embed_dim << "], got "
       << shape_str(in.shape());
    throw ShapeError(os.str());
  }
  const std::size_t b = in.dim(0), t = in.dim(1), d = cfg.embed_dim;
  const std::size_t h = cfg.num_heads, dh = cfg.head_dim();
  const T attn_scale = T(1) / std::sqrt(static_cast<T>(dh));
  const std::size_t split[] = {0, 2, 1, 3};
  const std::size_t split_t[] = {0, 2, 3, 1};

  EncoderOutput<T> out;
  Tensor<T> v = in;
  for (std::size_t li = 0; li < params.blocks.size(); ++li) {
    const auto& blk = params.blocks[li];
    auto x = g.layernorm(v, blk.norm1_weight, blk.norm1_bias);
    auto q = g.add(g.matmul(x, blk.q_weight), blk.q_bias);
    auto k = g.add(g.matmul(x, blk.k_weight), blk.k_bias);
    auto val = g.add(g.matmul(x, blk.v_weight), blk.v_bias);
    q = g.transpose(g.reshape(q, {b, t, h, dh}), split);        // [B,H,T,dh]
    k = g.transpose(g.reshape(k, {b, t, h, dh}), split_t);      // [B,H,dh,T]
    val = g.transpose(g.reshape(val, {b, t, h, dh}), split);    // [B,H,T,dh]
    auto attn = g.softmax(g.scale(g.matmul(q, k), attn_scale));  // [B,H,T,T]
    if (record_attention && li + 1 == params.blocks.size())
      out.attention.assign(attn.data().begin(), attn.data().end());
    auto o = g.matmul(attn, val);                                // [B,H,T,dh]
    o = g.reshape(g.transpose(o, split), {b, t, d});
    o = g.add(g.matmul(o, blk.proj_weight), blk.proj_bias);
    auto vp = g.add(o, v);

    auto y = g.layernorm(vp, blk.norm2_weight, blk.norm2_bias);
    y = g.gelu(g.add(g.matmul(y, blk.fc1_weight), blk.fc1_bias));
    y = g.add(g.matmul(y, blk.fc2_weight), blk.fc2_bias);
    v = g.add(y, vp);
  }
  out.sequence.tokens = g.layernorm(v, params.norm_weight, params.norm_bias);
  out.sequence.has_cls = input.has_cls;
  return out;
}

template <typename T>
Tensor<T> classify(Graph<T>& g, const TokenSequence<T>& encoded, const Parameters<T>& params) {
  if (!encoded.has_cls) throw std::invalid_argument("classify: sequence has no CLS token");
  const auto& tok = encoded.tokens;
  const std::size_t b = tok.dim(0), d = tok.dim(2);
  const std::vector<std::size_t> first(b, 0);
  auto cls = g.reshape(g.gather_rows(tok, first), {b, d});
  return g.add(g.matmul(cls, params.head_weight), params.head_bias);
}

template <typename T>
Tensor<T> classification_logits(Graph<T>& g, const Tensor<T>& images,
                                const Parameters<T>& params, const ModelConfig& cfg) {
  auto patches = patchify(g, images, cfg.patch_size);
  TokenSequence<T> seq{embed(g, patches, params, EmbedOptions{}), true};
  auto enc = encoder_forward(g, seq, params, cfg, false);
  return classify(g, enc.sequence, params);
}

template <typename T>
Parameters<T> init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t d = cfg.embed_dim;
  Parameters<T> p;
  auto mat = [](std::size_t r, std::size_t c) { return Tensor<T>::zeros({r, c}, true); };
  auto vec = [](std::size_t n) { return Tensor<T>::zeros({n}, true); };
  p.patch_weight = mat(cfg.patch_dim(), d);
  p.patch_bias = vec(d);
  p.cls_token = vec(d);
  p.pos_embed = mat(cfg.num_patches() + 1, d);
  p.blocks.resize(cfg.num_layers);
  for (auto& b : p.blocks) {
    b.norm1_weight = vec(d);
    b.norm1_bias = vec(d);
    b.q_weight = mat(d, d);
    b.q_bias = vec(d);
    b.k_weight = mat(d, d);
    b.k_bias = vec(d);
    b.v_weight = mat(d, d);
    b.v_bias = vec(d);
    b.proj_weight = mat(d, d);
    b.proj_bias = vec(d);
    b.norm2_weight = vec(d);
    b.norm2_bias = vec(d);
    b.fc1_weight = mat(d, cfg.mlp_dim());
    b.fc1_bias = vec(cfg.mlp_dim());
    b.fc2_weight = mat(cfg.mlp_dim(), d);
    b.fc2_bias = vec(d);
  }
  p.norm_weight = vec(d);
  p.norm_bias = vec(d);
  p.head_weight = mat(d, cfg.num_classes);
  p.head_bias = vec(cfg.num_classes);

  std::mt19937_64 rng(seed);
  p.for_each([&](const std::string& name, Tensor<T>& t, bool) {
    auto data = t.mutable_data();
    const bool is_norm = name.find("norm") != std::string::npos;
    const bool is_bias = name.ends_with(".bias");
    if (is_norm && !is_bias) {
      std::fill(data.begin(), data.end(), T(1));
    } else if (is_bias) {
      std::fill(data.begin(), data.end(), T(0));
    } else {
      for (T& v : data) v = static_cast<T>(truncated_normal(rng, 0.02));
    }
  });
  return p;
}

template <typename T>
std::size_t count_parameters(const Parameters<T>& params) {
  std::size_t n = 0;
  params.for_each([&](const std::string&, const Tensor<T>& t, bool) { n += t.numel(); });
  return n;
}

std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.embed_dim, hid = c.mlp_dim();
  const std::size_t per_block = 2 * d                // norm1
                                + 4 * (d * d + d)    // q, k, v, proj
                                + 2 * d              // norm2
                                + (d * hid + hid)    // fc1
                                + (hid * d + d);     // fc2
  return c.patch_dim() * d + d + d + (c.num_patches() + 1) * d + c.num_layers * per_block +
         2 * d + d * c.num_classes + c.num_classes;
}

Grid reduce_cls_attention(std::span<const double> attention, std::size_t heads,
                          std::size_t tokens, std::size_t grid_h, std::size_t grid_w) {
  const std::size_t l = grid_h * grid_w;
  if (tokens != l + 1 || attention.size() != heads * tokens * tokens)
    throw ShapeError("reduce_cls_attention: attention does not match the patch grid");
  auto minmax_normalize = [](std::vector<double>& v) {
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    const double mn = *lo, range = *hi - *lo;
    if (!(range > 0.0)) {
      std::fill(v.begin(), v.end(), 0.0);
      return;
    }
    for (double& x : v) x = (x - mn) / range;
  };
  Grid grid{grid_h, grid_w, std::vector<double>(l, 0.0)};
  std::vector<double> row(l);
  for (std::size_t h = 0; h < heads; ++h) {
    const double* cls_row = attention.data() + h * tokens * tokens;  // query 0
    std::copy(cls_row + 1, cls_row + tokens, row.begin());
    minmax_normalize(row);
    for (std::size_t i = 0; i < l; ++i) grid.values[i] += row[i];
  }
  for (double& v : grid.values) v /= static_cast<double>(heads);
  minmax_normalize(grid.values);
  return grid;
}

Grid class_attention_map(std::span<const float> image, const Parameters<float>& params,
                         const ModelConfig& cfg) {
  if (image.size() != cfg.pixels()) {
    std::ostringstream os;
    os << "class_attention_map: image has " << image.size() << " values, model expects "
       << cfg.pixels();
    throw ShapeError(os.str());
  }
  Graph<float> g(GradMode::kInference);
  Tensor<float> x({1, cfg.image_h, cfg.image_w, cfg.channels},
                  std::vector<float>(image.begin(), image.end()));
  auto patches = patchify(g, x, cfg.patch_size);
  TokenSequence<float> seq{embed(g, patches, params, EmbedOptions{}), true};
  auto enc = encoder_forward(g, seq, params, cfg, true);
  std::vector<double> attn(enc.attention.begin(), enc.attention.end());
  return reduce_cls_attention(attn, cfg.num_heads, cfg.num_patches() + 1, cfg.grid_h(),
                              cfg.grid_w());
}

#define JVIT_INSTANTIATE_MODEL(T)                                                          \
  template struct Parameters<T>;                                                           \
  template Tensor<T> patchify(Graph<T>&, const Tensor<T>&, std::size_t);                   \
  template Tensor<T> embed(Graph<T>&, const Tensor<T>&, const Parameters<T>&,              \
                           const EmbedOptions&);                                           \
  template EncoderOutput<T> encoder_forward(Graph<T>&, const TokenSequence<T>&,            \
                                            const Parameters<T>&, const ModelConfig&,      \
                                            bool);                                         \
  template Tensor<T> classify(Graph<T>&, const TokenSequence<T>&, const Parameters<T>&);   \
  template Tensor<T> classification_logits(Graph<T>&, const Tensor<T>&,                    \
                                           const Parameters<T>&, const ModelConfig&);      \
  template Parameters<T> init_parameters<T>(const ModelConfig&, std::uint64_t);            \
  template std::size_t count_parameters(const Parameters<T>&);

JVIT_INSTANTIATE_MODEL(float)
JVIT_INSTANTIATE_MODEL(double)
#undef JVIT_INSTANTIATE_MODEL

template Parameters<double> cast_parameters<double, float>(const Parameters<float>&);
template Parameters<float> cast_parameters<float, double>(const Parameters<double>&);
template Parameters<float> cast_parameters<float, float>(const Parameters<float>&);
template Parameters<double> cast_parameters<double, double>(const Parameters<double>&);

}  // namespace jvit
