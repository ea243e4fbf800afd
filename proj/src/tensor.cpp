// SPDX-License-Identifier: Apache-2.0

#include "jvit/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>

#include "jvit/kernels.hpp"

namespace jvit {

namespace {

std::atomic<std::uint64_t> g_next_graph_id{1};
std::atomic<int> g_fault{-1};

std::size_t normalize_axis(int axis, std::size_t rank, std::string_view op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    std::ostringstream os;
    os << op << ": axis " << axis << " out of range for rank " << rank;
    throw ShapeError(os.str());
  }
  return static_cast<std::size_t>(a);
}

[[noreturn]] void shape_mismatch(std::string_view op, const Shape& a,
                                 const Shape& b) {
  std::ostringstream os;
  os << op << ": shape mismatch " << shape_str(a) << " vs " << shape_str(b);
  throw ShapeError(os.str());
}

template <typename T>
void accumulate(TensorData<T>& dst, std::span<const T> src) {
  auto& g = grad_buffer(dst);
  for (std::size_t i = 0; i < src.size(); ++i) g[i] += src[i];
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kMatmul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kScale: return "scale";
    case OpKind::kLayerNorm: return "layernorm";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kGelu: return "gelu";
    case OpKind::kRelu: return "relu";
    case OpKind::kGatherRows: return "gather_rows";
    case OpKind::kReshape: return "reshape";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kMean: return "mean";
    case OpKind::kConcat: return "concat";
    case OpKind::kCrossEntropy: return "cross_entropy";
  }
  return "unknown";
}

OpKind parse_op_kind(std::string_view name) {
  for (OpKind k : kAllOpKinds)
    if (op_name(k) == name) return k;
  throw UnknownOpError("unknown op kind: " + std::string(name));
}

namespace debug {
void inject_backward_fault(OpKind kind) { g_fault = static_cast<int>(kind); }
void clear_backward_fault() { g_fault = -1; }
}  // namespace debug

template <typename T>
std::vector<T>& grad_buffer(TensorData<T>& t) {
  if (t.grad.empty()) t.grad.assign(t.data.size(), T(0));
  return t.grad;
}

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad)
    : impl_(std::make_shared<TensorData<T>>()) {
  for (std::size_t d : shape)
    if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_str(shape));
  if (shape_numel(shape) != data.size()) {
    std::ostringstream os;
    os << "tensor: shape " << shape_str(shape) << " needs " << shape_numel(shape)
       << " values, got " << data.size();
    throw ShapeError(os.str());
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  std::vector<T> data(shape_numel(shape), value);
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not a scalar");
  return impl_->data[0];
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor(impl_->shape, impl_->data, impl_->requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::detached() const {
  return Tensor(impl_->shape, impl_->data, false);
}

// ---------------------------------------------------------------------------
// Graph

template <typename T>
Graph<T>::Graph(GradMode mode) : mode_(mode), id_(g_next_graph_id++) {}

template <typename T>
bool Graph<T>::tracks(std::initializer_list<const Tensor<T>*> inputs) const {
  if (mode_ != GradMode::kRecord) return false;
  for (const Tensor<T>* t : inputs)
    if (t && t->defined() && t->requires_grad()) return true;
  return false;
}

template <typename T>
Tensor<T> Graph<T>::finish(OpKind kind, Tensor<T> out,
                           std::vector<std::shared_ptr<TensorData<T>>> inputs,
                           Backward backward) {
  if (check_finite_) {
    for (T v : out.data())
      if (!std::isfinite(v))
        throw NonFiniteError(std::string(op_name(kind)) + ": produced a non-finite value");
  }
  bool record = false;
  if (mode_ == GradMode::kRecord)
    for (const auto& in : inputs)
      if (in && in->requires_grad) record = true;
  if (!record) return out;
  auto* impl = out.impl();
  impl->requires_grad = true;
  impl->graph_id = id_;
  impl->node = nodes_.size();
  nodes_.push_back(Node{kind, std::move(inputs), out.shared(), std::move(backward)});
  return out;
}

template <typename T>
Tensor<T> Graph<T>::matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) shape_mismatch("matmul", a.shape(), b.shape());
  const bool shared_rhs = b.rank() == 2;
  const std::size_t m = a.dim(a.rank() - 2);
  const std::size_t k = a.dim(a.rank() - 1);
  const std::size_t n = b.dim(b.rank() - 1);
  if (b.dim(b.rank() - 2) != k) shape_mismatch("matmul", a.shape(), b.shape());
  if (!shared_rhs) {
    if (b.rank() != a.rank() ||
        !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()))
      shape_mismatch("matmul", a.shape(), b.shape());
  }
  const std::size_t batch = a.numel() / (m * k);
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);

  kernels::GemmShape g;
  if (shared_rhs) {
    g = {1, batch * m, n, k, 0, 0, 0};
  } else {
    g = {batch, m, n, k, m * k, k * n, m * n};
  }
  std::vector<T> out(batch * m * n, T(0));
  kernels::gemm_nn(g, a.data().data(), b.data().data(), out.data());

  auto ai = a.shared();
  auto bi = b.shared();
  auto backward = [ai, bi, g, shared_rhs](const std::vector<T>& gout) {
    if (ai->requires_grad) {
      // dA (m x k) += dC (m x n) * B^T
      kernels::GemmShape s{g.batch, g.m, g.k, g.n, g.m * g.n, g.stride_b, g.m * g.k};
      kernels::gemm_nt(s, gout.data(), bi->data.data(), grad_buffer(*ai).data());
    }
    if (bi->requires_grad) {
      // dB (k x n) += A^T * dC
      kernels::GemmShape s{g.batch, g.k, g.n, g.m, g.m * g.k, g.m * g.n,
                           shared_rhs ? 0 : g.k * g.n};
      kernels::gemm_tn(s, ai->data.data(), gout.data(), grad_buffer(*bi).data());
    }
  };
  return finish(OpKind::kMatmul, Tensor<T>(std::move(out_shape), std::move(out)),
                {ai, bi}, std::move(backward));
}

template <typename T>
Tensor<T> Graph<T>::add(const Tensor<T>& a, const Tensor<T>& b) {
  if (b.rank() > a.rank() ||
      !std::equal(b.shape().begin(), b.shape().end(), a.shape().end() - b.rank()))
    shape_mismatch("add", a.shape(), b.shape());
  const std::size_t bn = b.numel();
  std::vector<T> out(a.numel());
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  for (std::size_t off = 0; off < out.size(); off += bn)
    for (std::size_t j = 0; j < bn; ++j) out[off + j] = ad[off + j] + bd[j];

  auto ai = a.shared();
  auto bi = b.shared();
  auto backward = [ai, bi, bn](const std::vector<T>& gout) {
    if (ai->requires_grad) accumulate<T>(*ai, gout);
    if (bi->requires_grad) {
      auto& gb = grad_buffer(*bi);
      for (std::size_t off = 0; off < gout.size(); off += bn)
        for (std::size_t j = 0; j < bn; ++j) gb[j] += gout[off + j];
    }
  };
  return finish(OpKind::kAdd, Tensor<T>(a.shape(), std::move(out)), {ai, bi},
                std::move(backward));
}

template <typename T>
Tensor<T> Graph<T>::scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  const T* ad = a.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * ad[i];
  auto ai = a.shared();
  auto backward = [ai, s](const std::vector<T>& gout) {
    auto& ga = grad_buffer(*ai);
    for (std::size_t i = 0; i < gout.size(); ++i) ga[i] += s * gout[i];
  };
  return finish(OpKind::kScale, Tensor<T>(a.shape(), std::move(out)), {ai},
                std::move(backward));
}

template <typename T>
Tensor<T> Graph<T>::layernorm(const Tensor<T>& x, const Tensor<T>& gamma,
                              const Tensor<T>& beta) {
  if (x.rank() < 1) throw ShapeError("layernorm: rank-0 input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  const bool affine = gamma.defined();
  if (affine != beta.defined())
    throw ShapeError("layernorm: gamma and beta must be given together");
  if (affine && (gamma.shape() != Shape{n} || beta.shape() != Shape{n}))
    shape_mismatch("layernorm", x.shape(), gamma.shape());

  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  kernels::layernorm_rows(rows, n, x.data().data(), static_cast<T>(kLayerNormEps),
                          xhat->data(), rstd->data());
  std::vector<T> out(*xhat);
  if (affine) {
    const T* gd = gamma.data().data();
    const T* bd = beta.data().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] * gd[i % n] + bd[i % n];
  }

  auto xi = x.shared();
  auto gi = affine ? gamma.shared() : nullptr;
  auto bi = affine ? beta.shared() : nullptr;
  auto backward = [xi, gi, bi, xhat, rstd, rows, n](const std::vector<T>& gout) {
    if (gi && gi->requires_grad) {
      auto& gg = grad_buffer(*gi);
      for (std::size_t i = 0; i < gout.size(); ++i) gg[i % n] += gout[i] * (*xhat)[i];
    }
    if (bi && bi->requires_grad) {
      auto& gb = grad_buffer(*bi);
      for (std::size_t i = 0; i < gout.size(); ++i) gb[i % n] += gout[i];
    }
    if (xi->requires_grad) {
      std::vector<T> dxhat(gout);
      if (gi)
        for (std::size_t i = 0; i < dxhat.size(); ++i) dxhat[i] *= gi->data[i % n];
      kernels::layernorm_rows_backward(rows, n, xhat->data(), rstd->data(),
                                       dxhat.data(), grad_buffer(*xi).data());
    }
  };
  return finish(OpKind::kLayerNorm, Tensor<T>(x.shape(), std::move(out)),
                {xi, gi, bi}, std::move(backward));
}

template <typename T>
Tensor<T> Graph<T>::softmax(const Tensor<T>& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank(), "softmax");
  const std::size_t len = x.dim(ax);
  std::size_t inner = 1;
  for (std::size_t i = ax + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t outer = x.numel() / (len * inner);

  auto y = std::make_shared<std::vector<T>>(x.numel());
  if (inner == 1) {
    kernels::softmax_rows(outer, len, x.data().data(), y->data());
  } else {
    std::vector<T> row(len), res(len);
    const T* xd = x.data().data();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        for (std::size_t j = 0; j < len; ++j) row[j] = xd[(o * len + j) * inner + in];
        kernels::softmax_rows<T>(1, len, row.data(), res.data());
        for (std::size_t j = 0; j < len; ++j) (*y)[(o * len + j) * inner + in] = res[j];
      }
  }
  std::vector<T> out(*y);
  auto xi = x.shared();
  auto backward = [xi, y, outer, len, inner](const std::vector<T>& gout) {
    auto& gx = grad_buffer(*xi);
    if (inner == 1) {
      kernels::softmax_rows_backward(outer, len, y->data(), gout.data(), gx.data());
      return;
    }
    std::vector<T> yr(len), gr(len), dr(len);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        for (std::size_t j = 0; j < len; ++j) {
          yr[j] = (*y)[(o * len + j) * inner + in];
          gr[j] = gout[(o * len + j) * inner + in];
          dr[j] = T(0);
        }
        kernels::softmax_rows_backward<T>(1, len, yr.data(), gr.data(), dr.data());
        for (std::size_t j = 0; j < len; ++j) gx[(o * len + j) * inner + in] += dr[j];
      }
  };
  return finish(OpKind::kSoftmax, Tensor<T>(x.shape(), std::move(out)), {xi},
                std::move(backward));
}

template <typename T>
Tensor<T> Graph<T>::gelu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  kernels::gelu(x.numel(), x.data().data(), out.data());
  auto xi = x.shared();
  auto backward = [xi](const std::vector<T>& gout) {
    kernels::gelu_backward(gout.size(), xi->data.data(), gout.data(),
                           grad_buffer(*xi).data());
  };
  return finish(OpKind::kGelu, Tensor<T>(x.shape(), std::move(out)), {xi},
                std::move(backward));
}

template <typename T>
Tensor<T> Graph<T>::relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  const T* xd = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > T(0) ? xd[i] : T(0);
  auto xi = x.shared();
  auto backward = [xi](const std::vector<T>& gout) {
    auto& gx = grad_buffer(*xi);
    for (std::size_t i = 0; i < gout.size(); ++i)
      if (xi->data[i] > T(0)) gx[i] += gout[i];
  };
  return finish(OpKind::kRelu, Tensor<T>(x.shape(), std::move(out)), {xi},
                std::move(backward));
}

template <typename T>
Tensor<T> Graph<T>::gather_rows(const Tensor<T>& x,
                                std::span<const std::size_t> indices) {
  if (x.rank() != 2 && x.rank() != 3)
    throw ShapeError("gather_rows: source must be rank 2 or 3, got " + shape_str(x.shape()));
  if (indices.empty()) throw ShapeError("gather_rows: empty index list");
  const bool batched = x.rank() == 3;
  const std::size_t batch = batched ? x.dim(0) : 1;
  const std::size_t rows = x.dim(x.rank() - 2);
  const std::size_t feat = x.dim(x.rank() - 1);
  if (indices.size() % batch != 0)
    throw ShapeError("gather_rows: index count not divisible by batch size");
  const std::size_t per = indices.size() / batch;
  for (std::size_t idx : indices)
    if (idx >= rows) {
      std::ostringstream os;
      os << "gather_rows: index " << idx << " out of range for " << rows << " rows";
      throw ShapeError(os.str());
    }
  std::vector<std::size_t> src(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i)
    src[i] = (i / per) * rows + indices[i];

  std::vector<T> out(indices.size() * feat);
  const T* xd = x.data().data();
  for (std::size_t i = 0; i < src.size(); ++i)
    std::copy_n(xd + src[i] * feat, feat, out.begin() + i * feat);

  Shape out_shape = batched ? Shape{batch, per, feat} : Shape{per, feat};
  auto xi = x.shared();
  auto backward = [xi, src = std::move(src), feat](const std::vector<T>& gout) {
    auto& gx = grad_buffer(*xi);
    for (std::size_t i = 0; i < src.size(); ++i)
      for (std::size_t f = 0; f < feat; ++f) gx[src[i] * feat + f] += gout[i * feat + f];
  };
  return finish(OpKind::kGatherRows, Tensor<T>(std::move(out_shape), std::move(out)),
                {xi}, std::move(backward));
}

template <typename T>
Tensor<T> Graph<T>::reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) shape_mismatch("reshape", x.shape(), shape);
  std::vector<T> out(x.data().begin(), x.data().end());
  auto xi = x.shared();
  auto backward = [xi](const std::vector<T>& gout) { accumulate<T>(*xi, gout); };
  return finish(OpKind::kReshape, Tensor<T>(std::move(shape), std::move(out)), {xi},
                std::move(backward));
}

template <typename T>
Tensor<T> Graph<T>::transpose(const Tensor<T>& x, std::span<const std::size_t> perm) {
  const std::size_t r = x.rank();
  std::vector<bool> seen(r, false);
  bool valid = perm.size() == r;
  for (std::size_t p : perm) {
    if (!valid || p >= r || seen[p]) {
      valid = false;
      break;
    }
    seen[p] = true;
  }
  if (!valid) throw ShapeError("transpose: invalid permutation for " + shape_str(x.shape()));

  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r - 1; i > 0; --i) in_stride[i - 1] = in_stride[i] * x.dim(i);
  Shape out_shape(r);
  std::vector<std::size_t> step(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = x.dim(perm[i]);
    step[i] = in_stride[perm[i]];
  }
  // Odometer over output coordinates; map[o] is the source offset.
  const std::size_t total = x.numel();
  auto map = std::make_shared<std::vector<std::size_t>>(total);
  std::vector<std::size_t> coord(r, 0);
  std::size_t off = 0;
  for (std::size_t o = 0; o < total; ++o) {
    (*map)[o] = off;
    for (std::size_t d = r; d-- > 0;) {
      if (++coord[d] < out_shape[d]) {
        off += step[d];
        break;
      }
      off -= step[d] * (out_shape[d] - 1);
      coord[d] = 0;
    }
  }
  std::vector<T> out(total);
  const T* xd = x.data().data();
  for (std::size_t o = 0; o < total; ++o) out[o] = xd[(*map)[o]];

  auto xi = x.shared();
  auto backward = [xi, map](const std::vector<T>& gout) {
    auto& gx = grad_buffer(*xi);
    for (std::size_t o = 0; o < gout.size(); ++o) gx[(*map)[o]] += gout[o];
  };
  return finish(OpKind::kTranspose, Tensor<T>(std::move(out_shape), std::move(out)),
                {xi}, std::move(backward));
}

template <typename T>
Tensor<T> Graph<T>::mean(const Tensor<T>& x) {
  T sum = 0;
  for (T v : x.data()) sum += v;
  const T n = static_cast<T>(x.numel());
  auto xi = x.shared();
  auto backward = [xi, n](const std::vector<T>& gout) {
    auto& gx = grad_buffer(*xi);
    const T g = gout[0] / n;
    for (T& v : gx) v += g;
  };
  return finish(OpKind::kMean, Tensor<T>::scalar(sum / n), {xi}, std::move(backward));
}

template <typename T>
Tensor<T> Graph<T>::concat(const Tensor<T>& a, const Tensor<T>& b, int axis) {
  if (a.rank() != b.rank()) shape_mismatch("concat", a.shape(), b.shape());
  const std::size_t ax = normalize_axis(axis, a.rank(), "concat");
  for (std::size_t i = 0; i < a.rank(); ++i)
    if (i != ax && a.dim(i) != b.dim(i)) shape_mismatch("concat", a.shape(), b.shape());
  std::size_t inner = 1;
  for (std::size_t i = ax + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const std::size_t outer = a.numel() / (a.dim(ax) * inner);
  const std::size_t ablk = a.dim(ax) * inner;
  const std::size_t bblk = b.dim(ax) * inner;

  std::vector<T> out(a.numel() + b.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(a.data().begin() + o * ablk, ablk, out.begin() + o * (ablk + bblk));
    std::copy_n(b.data().begin() + o * bblk, bblk, out.begin() + o * (ablk + bblk) + ablk);
  }
  Shape shape = a.shape();
  shape[ax] += b.dim(ax);
  auto ai = a.shared();
  auto bi = b.shared();
  auto backward = [ai, bi, outer, ablk, bblk](const std::vector<T>& gout) {
    for (std::size_t o = 0; o < outer; ++o) {
      const T* src = gout.data() + o * (ablk + bblk);
      if (ai->requires_grad) {
        T* ga = grad_buffer(*ai).data() + o * ablk;
        for (std::size_t i = 0; i < ablk; ++i) ga[i] += src[i];
      }
      if (bi->requires_grad) {
        T* gb = grad_buffer(*bi).data() + o * bblk;
        for (std::size_t i = 0; i < bblk; ++i) gb[i] += src[ablk + i];
      }
    }
  };
  return finish(OpKind::kConcat, Tensor<T>(std::move(shape), std::move(out)), {ai, bi},
                std::move(backward));
}

template <typename T>
Tensor<T> Graph<T>::cross_entropy(const Tensor<T>& logits,
                                  std::span<const std::size_t> targets) {
  if (logits.rank() != 2)
    throw ShapeError("cross_entropy: logits must be [rows, K], got " + shape_str(logits.shape()));
  const std::size_t rows = logits.dim(0);
  const std::size_t k = logits.dim(1);
  if (targets.size() != rows) {
    std::ostringstream os;
    os << "cross_entropy: " << targets.size() << " targets for " << rows << " rows";
    throw ShapeError(os.str());
  }
  for (std::size_t t : targets)
    if (t >= k) {
      std::ostringstream os;
      os << "cross_entropy: target " << t << " out of range for " << k << " classes";
      throw std::out_of_range(os.str());
    }
  auto probs = std::make_shared<std::vector<T>>(logits.numel());
  kernels::softmax_rows(rows, k, logits.data().data(), probs->data());
  const T* ld = logits.data().data();
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = ld + r * k;
    const T mx = *std::max_element(row, row + k);
    T s = 0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - mx);
    total += (mx + std::log(s)) - row[targets[r]];
  }
  const T nrows = static_cast<T>(rows);
  auto li = logits.shared();
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  auto backward = [li, probs, tg = std::move(tg), k, nrows](const std::vector<T>& gout) {
    auto& gl = grad_buffer(*li);
    const T g = gout[0] / nrows;
    for (std::size_t r = 0; r < tg.size(); ++r)
      for (std::size_t j = 0; j < k; ++j) {
        const T onehot = j == tg[r] ? T(1) : T(0);
        gl[r * k + j] += g * ((*probs)[r * k + j] - onehot);
      }
  };
  return finish(OpKind::kCrossEntropy, Tensor<T>::scalar(total / nrows), {li},
                std::move(backward));
}

template <typename T>
Tensor<T> Graph<T>::apply(OpKind kind, std::span<const Tensor<T>> in,
                          const OpAttrs& attrs) {
  auto need = [&](std::size_t lo, std::size_t hi) {
    if (in.size() < lo || in.size() > hi) {
      std::ostringstream os;
      os << op_name(kind) << ": expected " << lo << (lo == hi ? "" : "..")
         << (lo == hi ? "" : std::to_string(hi)) << " inputs, got " << in.size();
      throw ShapeError(os.str());
    }
  };
  switch (kind) {
    case OpKind::kMatmul: need(2, 2); return matmul(in[0], in[1]);
    case OpKind::kAdd: need(2, 2); return add(in[0], in[1]);
    case OpKind::kScale: need(1, 1); return scale(in[0], static_cast<T>(attrs.scale));
    case OpKind::kLayerNorm:
      need(1, 3);
      if (in.size() == 2) throw ShapeError("layernorm: gamma and beta must be given together");
      return in.size() == 3 ? layernorm(in[0], in[1], in[2]) : layernorm(in[0]);
    case OpKind::kSoftmax: need(1, 1); return softmax(in[0], attrs.axis);
    case OpKind::kGelu: need(1, 1); return gelu(in[0]);
    case OpKind::kRelu: need(1, 1); return relu(in[0]);
    case OpKind::kGatherRows: need(1, 1); return gather_rows(in[0], attrs.indices);
    case OpKind::kReshape: need(1, 1); return reshape(in[0], attrs.shape);
    case OpKind::kTranspose: need(1, 1); return transpose(in[0], attrs.perm);
    case OpKind::kMean: need(1, 1); return mean(in[0]);
    case OpKind::kConcat: need(2, 2); return concat(in[0], in[1], attrs.axis);
    case OpKind::kCrossEntropy: need(1, 1); return cross_entropy(in[0], attrs.targets);
  }
  throw UnknownOpError("apply: unknown op kind");
}

template <typename T>
void Graph<T>::backward(const Tensor<T>& root) {
  if (!root.defined() || root.numel() != 1)
    throw GraphError("backward: root must be a scalar, got " +
                     (root.defined() ? shape_str(root.shape()) : std::string("undefined")));
  const auto* impl = root.impl();
  if (impl->graph_id != id_ || impl->node >= nodes_.size() ||
      nodes_[impl->node].output.get() != impl)
    throw GraphError("backward: root was not produced by this graph");

  const std::size_t last = impl->node;
  for (std::size_t i = 0; i <= last; ++i) nodes_[i].output->grad.clear();
  nodes_[last].output->grad.assign(1, T(1));

  const int fault = g_fault.load();
  for (std::size_t i = last + 1; i-- > 0;) {
    Node& node = nodes_[i];
    const auto& g = node.output->grad;
    if (g.empty()) continue;
    if (static_cast<int>(node.kind) == fault) {
      std::vector<T> bent(g);
      for (T& v : bent) v *= T(1.5);
      node.backward(bent);
    } else {
      node.backward(g);
    }
  }
}

template std::vector<float>& grad_buffer(TensorData<float>&);
template std::vector<double>& grad_buffer(TensorData<double>&);
template class Tensor<float>;
template class Tensor<double>;
template class Graph<float>;
template class Graph<double>;

}  // namespace jvit
