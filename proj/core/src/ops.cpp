// SPDX-License-Identifier: Apache-2.0
#include "tialab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

namespace tialab {

namespace detail {
void note_probe_input(bool requires_grad);
}  // namespace detail

namespace {

template <typename T>
using NodeT = detail::Node<T>;
template <typename T>
using BackwardFn = typename NodeT<T>::BackwardFn;

template <typename T>
std::span<const T> in_data(const NodeT<T>& n, size_t i) {
  const auto& s = *n.inputs[i]->storage;
  return {s.data(), s.size()};
}

template <typename T>
void check_finite(const char* op, const std::vector<T>& v) {
  for (const auto& e : v) {
    if (!std::isfinite(e)) throw NumericError(std::string("non-finite output in ") + op);
  }
}

template <typename T>
Tensor<T> record(const char* op, Tensor<T> out, std::initializer_list<const Tensor<T>*> inputs,
                 BackwardFn<T> fn) {
  bool any = false;
  for (const auto* in : inputs) any = any || in->requires_grad();
  if (!grad_enabled()) {
    detail::note_probe_input(any);
    return out;
  }
  if (!any) return out;
  auto node = std::make_shared<NodeT<T>>();
  node->op = op;
  node->region = current_region();
  for (const auto* in : inputs) {
    node->inputs.push_back(in->impl());
    node->needs_grad.push_back(in->requires_grad() ? 1 : 0);
  }
  node->backward = std::move(fn);
  out.impl()->requires_grad = true;
  out.impl()->attach_node(std::move(node));
  return out;
}

template <typename T>
Tensor<T> finish(const char* op, Shape shape, std::vector<T> values,
                 std::initializer_list<const Tensor<T>*> inputs, BackwardFn<T> fn) {
  check_finite(op, values);
  return record(op, Tensor<T>(std::move(shape), std::move(values)), inputs, std::move(fn));
}

template <typename T>
Tensor<T> finish_list(const char* op, Shape shape, std::vector<T> values,
                      const std::vector<Tensor<T>>& inputs, BackwardFn<T> fn) {
  check_finite(op, values);
  Tensor<T> out(std::move(shape), std::move(values));
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!grad_enabled()) {
    detail::note_probe_input(any);
    return out;
  }
  if (!any) return out;
  auto node = std::make_shared<NodeT<T>>();
  node->op = op;
  node->region = current_region();
  for (const auto& in : inputs) {
    node->inputs.push_back(in.impl());
    node->needs_grad.push_back(in.requires_grad() ? 1 : 0);
  }
  node->backward = std::move(fn);
  out.impl()->requires_grad = true;
  out.impl()->attach_node(std::move(node));
  return out;
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw ContractViolation(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                          shape_str(b));
}

Shape strip_leading_ones(const Shape& s) {
  size_t i = 0;
  while (i + 1 < s.size() && s[i] == 1) ++i;
  return Shape(s.begin() + static_cast<std::ptrdiff_t>(i), s.end());
}

// True when `small` broadcasts onto `big` by suffix matching.
bool suffix_broadcastable(const Shape& small, const Shape& big) {
  if (numel(small) == 1) return true;
  Shape s = strip_leading_ones(small);
  if (s.size() > big.size()) return false;
  return std::equal(s.begin(), s.end(), big.end() - static_cast<std::ptrdiff_t>(s.size()));
}

enum class BinOp { kAdd, kSub, kMul };

template <typename T>
Tensor<T> binary(const char* op, BinOp kind, const Tensor<T>& a, const Tensor<T>& b) {
  Shape out_shape;
  if (a.shape() == b.shape()) {
    out_shape = a.shape();
  } else if (b.numel() <= a.numel() && suffix_broadcastable(b.shape(), a.shape())) {
    out_shape = a.shape();
  } else if (a.numel() < b.numel() && suffix_broadcastable(a.shape(), b.shape())) {
    out_shape = b.shape();
  } else {
    shape_error(op, a.shape(), b.shape());
  }
  const int64_t n = numel(out_shape);
  const int64_t na = a.numel();
  const int64_t nb = b.numel();
  auto da = a.data();
  auto db = b.data();
  std::vector<T> out(n);
  for (int64_t i = 0; i < n; ++i) {
    T x = da[na == n ? i : i % na];
    T y = db[nb == n ? i : i % nb];
    switch (kind) {
      case BinOp::kAdd: out[i] = x + y; break;
      case BinOp::kSub: out[i] = x - y; break;
      case BinOp::kMul: out[i] = x * y; break;
    }
  }
  return finish<T>(op, out_shape, std::move(out), {&a, &b},
                   [kind, n, na, nb](const NodeT<T>& node, std::span<const T> g,
                                     typename NodeT<T>::GradBuffers& gin) {
                     if (node.needs_grad[0]) {
                       auto y = in_data(node, 1);
                       for (int64_t i = 0; i < n; ++i) {
                         T gi = g[i];
                         if (kind == BinOp::kMul) gi *= y[nb == n ? i : i % nb];
                         gin[0][na == n ? i : i % na] += gi;
                       }
                     }
                     if (node.needs_grad[1]) {
                       auto x = in_data(node, 0);
                       for (int64_t i = 0; i < n; ++i) {
                         T gi = g[i];
                         if (kind == BinOp::kSub) gi = -gi;
                         if (kind == BinOp::kMul) gi *= x[na == n ? i : i % na];
                         gin[1][nb == n ? i : i % nb] += gi;
                       }
                     }
                   });
}

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_acc(const T* A, const T* B, T* C, int64_t M, int64_t K, int64_t N) {
  for (int64_t i = 0; i < M; ++i) {
    T* c = C + i * N;
    const T* a = A + i * K;
    for (int64_t k = 0; k < K; ++k) {
      const T av = a[k];
      const T* b = B + k * N;
      for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn_acc(const T* A, const T* B, T* C, int64_t M, int64_t K, int64_t N) {
  for (int64_t k = 0; k < K; ++k) {
    const T* a = A + k * M;
    const T* b = B + k * N;
    for (int64_t i = 0; i < M; ++i) {
      const T av = a[i];
      T* c = C + i * N;
      for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

template <typename T>
std::vector<T> transposed(const T* src, int64_t rows, int64_t cols) {
  std::vector<T> t(static_cast<size_t>(rows * cols));
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) t[c * rows + r] = src[r * cols + c];
  return t;
}

int64_t norm_axis(int64_t axis, int64_t rank, const char* op) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw ContractViolation(std::string(op) + ": axis out of range");
  }
  return axis;
}

template <typename T>
T gelu_scalar(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
}

template <typename T>
T gelu_grad_scalar(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
T softplus_scalar(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary("add", BinOp::kAdd, a, b);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary("sub", BinOp::kSub, a, b);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary("mul", BinOp::kMul, a, b);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  auto d = x.data();
  std::vector<T> out(d.size());
  for (size_t i = 0; i < d.size(); ++i) out[i] = d[i] * factor;
  return finish<T>("scale", x.shape(), std::move(out), {&x},
                   [factor](const NodeT<T>&, std::span<const T> g, typename NodeT<T>::GradBuffers& gin) {
                     for (size_t i = 0; i < g.size(); ++i) gin[0][i] = g[i] * factor;
                   });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  int64_t batch = 1, M = 0, K = 0, N = 0;
  Shape out_shape;
  if (sa.size() == 2 && sb.size() == 2) {
    M = sa[0]; K = sa[1]; N = sb[1];
    if (sb[0] != K) shape_error("matmul", sa, sb);
    out_shape = {M, N};
  } else if (sa.size() == 2 && sb.size() == 1) {
    M = sa[0]; K = sa[1]; N = 1;
    if (sb[0] != K) shape_error("matmul", sa, sb);
    out_shape = {M};
  } else if (sa.size() == 3 && sb.size() == 3) {
    batch = sa[0]; M = sa[1]; K = sa[2]; N = sb[2];
    if (sb[0] != batch || sb[1] != K) shape_error("matmul", sa, sb);
    out_shape = {batch, M, N};
  } else {
    shape_error("matmul", sa, sb);
  }
  std::vector<T> out(static_cast<size_t>(batch * M * N), T(0));
  auto da = a.data();
  auto db = b.data();
  for (int64_t bi = 0; bi < batch; ++bi) {
    gemm_acc(da.data() + bi * M * K, db.data() + bi * K * N, out.data() + bi * M * N, M, K, N);
  }
  return finish<T>("matmul", out_shape, std::move(out), {&a, &b},
                   [batch, M, K, N](const NodeT<T>& node, std::span<const T> g,
                                    typename NodeT<T>::GradBuffers& gin) {
                     auto A = in_data(node, 0);
                     auto B = in_data(node, 1);
                     for (int64_t bi = 0; bi < batch; ++bi) {
                       const T* gb = g.data() + bi * M * N;
                       if (node.needs_grad[0]) {
                         // dA = dC * B^T
                         auto bt = transposed(B.data() + bi * K * N, K, N);
                         gemm_acc(gb, bt.data(), gin[0].data() + bi * M * K, M, N, K);
                       }
                       if (node.needs_grad[1]) {
                         // dB = A^T * dC
                         gemm_tn_acc(A.data() + bi * M * K, gb, gin[1].data() + bi * K * N, K, M, N);
                       }
                     }
                   });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  if (w.rank() != 2 || x.dim(-1) != w.dim(0)) shape_error("linear", x.shape(), w.shape());
  if (bias.rank() != 1 || bias.dim(0) != w.dim(1)) shape_error("linear", w.shape(), bias.shape());
  const int64_t K = w.dim(0);
  Shape out_shape = x.shape();
  out_shape.back() = w.dim(1);
  auto x2 = x.rank() == 2 ? x : reshape(x, Shape{x.numel() / K, K});
  auto y = add(matmul(x2, w), bias);
  return y.rank() == static_cast<int64_t>(out_shape.size()) && y.shape() == out_shape
             ? y
             : reshape(y, out_shape);
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  auto d = x.data();
  std::vector<T> out(d.size());
  for (size_t i = 0; i < d.size(); ++i) out[i] = gelu_scalar(d[i]);
  return finish<T>("gelu", x.shape(), std::move(out), {&x},
                   [](const NodeT<T>& node, std::span<const T> g, typename NodeT<T>::GradBuffers& gin) {
                     auto xs = in_data(node, 0);
                     for (size_t i = 0; i < g.size(); ++i) gin[0][i] = g[i] * gelu_grad_scalar(xs[i]);
                   });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  auto d = x.data();
  auto out = std::make_shared<std::vector<T>>(d.size());
  for (size_t i = 0; i < d.size(); ++i) (*out)[i] = sigmoid_scalar(d[i]);
  std::vector<T> copy = *out;
  return finish<T>("sigmoid", x.shape(), std::move(copy), {&x},
                   [out](const NodeT<T>&, std::span<const T> g, typename NodeT<T>::GradBuffers& gin) {
                     for (size_t i = 0; i < g.size(); ++i) {
                       const T s = (*out)[i];
                       gin[0][i] = g[i] * s * (T(1) - s);
                     }
                   });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  auto d = x.data();
  std::vector<T> out(d.size());
  for (size_t i = 0; i < d.size(); ++i) out[i] = softplus_scalar(d[i]);
  return finish<T>("softplus", x.shape(), std::move(out), {&x},
                   [](const NodeT<T>& node, std::span<const T> g, typename NodeT<T>::GradBuffers& gin) {
                     auto xs = in_data(node, 0);
                     for (size_t i = 0; i < g.size(); ++i) gin[0][i] = g[i] * sigmoid_scalar(xs[i]);
                   });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const int64_t C = x.dim(-1);
  if (gamma.shape() != Shape{C}) shape_error("layer_norm", x.shape(), gamma.shape());
  if (beta.shape() != Shape{C}) shape_error("layer_norm", x.shape(), beta.shape());
  const int64_t rows = x.numel() / C;
  auto d = x.data();
  auto gm = gamma.data();
  auto bt = beta.data();
  auto xhat = std::make_shared<std::vector<T>>(d.size());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(d.size());
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = d.data() + r * C;
    T mu = 0;
    for (int64_t c = 0; c < C; ++c) mu += xr[c];
    mu /= T(C);
    T var = 0;
    for (int64_t c = 0; c < C; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= T(C);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (int64_t c = 0; c < C; ++c) {
      const T xh = (xr[c] - mu) * rs;
      (*xhat)[r * C + c] = xh;
      out[r * C + c] = xh * gm[c] + bt[c];
    }
  }
  return finish<T>(
      "layer_norm", x.shape(), std::move(out), {&x, &gamma, &beta},
      [xhat, rstd, rows, C](const NodeT<T>& node, std::span<const T> g,
                            typename NodeT<T>::GradBuffers& gin) {
        auto gm = in_data(node, 1);
        for (int64_t r = 0; r < rows; ++r) {
          const T* gr = g.data() + r * C;
          const T* xh = xhat->data() + r * C;
          if (node.needs_grad[0]) {
            T mean_g = 0, mean_gx = 0;
            for (int64_t c = 0; c < C; ++c) {
              const T dxh = gr[c] * gm[c];
              mean_g += dxh;
              mean_gx += dxh * xh[c];
            }
            mean_g /= T(C);
            mean_gx /= T(C);
            const T rs = (*rstd)[r];
            for (int64_t c = 0; c < C; ++c) {
              gin[0][r * C + c] = rs * (gr[c] * gm[c] - mean_g - xh[c] * mean_gx);
            }
          }
          if (node.needs_grad[1])
            for (int64_t c = 0; c < C; ++c) gin[1][c] += gr[c] * xh[c];
          if (node.needs_grad[2])
            for (int64_t c = 0; c < C; ++c) gin[2][c] += gr[c];
        }
      });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  const int64_t C = x.dim(-1);
  const int64_t rows = x.numel() / C;
  auto d = x.data();
  auto y = std::make_shared<std::vector<T>>(d.size());
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = d.data() + r * C;
    T* yr = y->data() + r * C;
    T mx = *std::max_element(xr, xr + C);
    T s = 0;
    for (int64_t c = 0; c < C; ++c) {
      yr[c] = std::exp(xr[c] - mx);
      s += yr[c];
    }
    const T inv = T(1) / s;
    for (int64_t c = 0; c < C; ++c) yr[c] *= inv;
  }
  std::vector<T> copy = *y;
  return finish<T>("softmax", x.shape(), std::move(copy), {&x},
                   [y, rows, C](const NodeT<T>&, std::span<const T> g, typename NodeT<T>::GradBuffers& gin) {
                     for (int64_t r = 0; r < rows; ++r) {
                       const T* yr = y->data() + r * C;
                       const T* gr = g.data() + r * C;
                       T dot = 0;
                       for (int64_t c = 0; c < C; ++c) dot += gr[c] * yr[c];
                       for (int64_t c = 0; c < C; ++c) gin[0][r * C + c] = yr[c] * (gr[c] - dot);
                     }
                   });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape) {
  if (numel(shape) != x.numel()) shape_error("reshape", x.shape(), shape);
  for (auto e : shape)
    if (e <= 0) shape_error("reshape", x.shape(), shape);
  // Shares storage with the input.
  auto impl = std::make_shared<detail::TensorImpl<T>>();
  impl->shape = shape;
  impl->storage = x.impl()->storage;
  return record<T>("reshape", Tensor<T>(std::move(impl)), {&x},
                   [](const NodeT<T>&, std::span<const T> g, typename NodeT<T>::GradBuffers& gin) {
                     std::copy(g.begin(), g.end(), gin[0].begin());
                   });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int64_t>& axes) {
  const int64_t r = x.rank();
  if (static_cast<int64_t>(axes.size()) != r) {
    throw ContractViolation("permute: axes length does not match shape " + shape_str(x.shape()));
  }
  std::vector<char> seen(r, 0);
  for (auto a : axes) {
    if (a < 0 || a >= r || seen[a]) throw ContractViolation("permute: invalid axes");
    seen[a] = 1;
  }
  const auto& in_shape = x.shape();
  Shape out_shape(r);
  for (int64_t i = 0; i < r; ++i) out_shape[i] = in_shape[axes[i]];
  std::vector<int64_t> in_strides(r, 1);
  for (int64_t i = r - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
  // src_index[o] gives the input flat index of output element o.
  const int64_t n = x.numel();
  auto src_index = std::make_shared<std::vector<int64_t>>(n);
  std::vector<int64_t> counter(r, 0);
  for (int64_t o = 0; o < n; ++o) {
    int64_t src = 0;
    for (int64_t i = 0; i < r; ++i) src += counter[i] * in_strides[axes[i]];
    (*src_index)[o] = src;
    for (int64_t i = r - 1; i >= 0; --i) {
      if (++counter[i] < out_shape[i]) break;
      counter[i] = 0;
    }
  }
  auto d = x.data();
  std::vector<T> out(n);
  for (int64_t o = 0; o < n; ++o) out[o] = d[(*src_index)[o]];
  return finish<T>("permute", out_shape, std::move(out), {&x},
                   [src_index](const NodeT<T>&, std::span<const T> g, typename NodeT<T>::GradBuffers& gin) {
                     for (size_t o = 0; o < g.size(); ++o) gin[0][(*src_index)[o]] += g[o];
                   });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  const int64_t r = x.rank();
  if (r < 2) throw ContractViolation("transpose needs rank >= 2, got " + shape_str(x.shape()));
  std::vector<int64_t> axes(r);
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[r - 1], axes[r - 2]);
  return permute(x, axes);
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int64_t axis) {
  if (parts.empty()) throw ContractViolation("concat of zero tensors");
  const int64_t r = parts[0].rank();
  axis = norm_axis(axis, r, "concat");
  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != r) shape_error("concat", parts[0].shape(), p.shape());
    for (int64_t i = 0; i < r; ++i) {
      if (i != axis && p.shape()[i] != parts[0].shape()[i]) shape_error("concat", parts[0].shape(), p.shape());
    }
    out_shape[axis] += p.shape()[axis];
  }
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= out_shape[i];
  for (int64_t i = axis + 1; i < r; ++i) inner *= out_shape[i];
  const int64_t out_axis = out_shape[axis];
  std::vector<int64_t> offsets;
  std::vector<int64_t> extents;
  std::vector<T> out(numel(out_shape));
  int64_t off = 0;
  for (const auto& p : parts) {
    const int64_t e = p.shape()[axis];
    auto d = p.data();
    for (int64_t o = 0; o < outer; ++o) {
      std::copy(d.begin() + o * e * inner, d.begin() + (o + 1) * e * inner,
                out.begin() + (o * out_axis + off) * inner);
    }
    offsets.push_back(off);
    extents.push_back(e);
    off += e;
  }
  return finish_list<T>("concat", out_shape, std::move(out), parts,
                        [offsets, extents, outer, inner, out_axis](const NodeT<T>& node, std::span<const T> g,
                                                                   typename NodeT<T>::GradBuffers& gin) {
                          for (size_t p = 0; p < offsets.size(); ++p) {
                            if (!node.needs_grad[p]) continue;
                            const int64_t e = extents[p];
                            for (int64_t o = 0; o < outer; ++o) {
                              std::copy(g.begin() + (o * out_axis + offsets[p]) * inner,
                                        g.begin() + (o * out_axis + offsets[p] + e) * inner,
                                        gin[p].begin() + o * e * inner);
                            }
                          }
                        });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int64_t axis, int64_t start, int64_t length) {
  const int64_t r = x.rank();
  axis = norm_axis(axis, r, "slice");
  const int64_t extent = x.shape()[axis];
  if (start < 0 || length <= 0 || start + length > extent) {
    throw ContractViolation("slice [" + std::to_string(start) + ", +" + std::to_string(length) +
                            ") out of range for shape " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= out_shape[i];
  for (int64_t i = axis + 1; i < r; ++i) inner *= out_shape[i];
  auto d = x.data();
  std::vector<T> out(numel(out_shape));
  for (int64_t o = 0; o < outer; ++o) {
    std::copy(d.begin() + (o * extent + start) * inner, d.begin() + (o * extent + start + length) * inner,
              out.begin() + o * length * inner);
  }
  return finish<T>("slice", out_shape, std::move(out), {&x},
                   [outer, inner, extent, start, length](const NodeT<T>&, std::span<const T> g,
                                                         typename NodeT<T>::GradBuffers& gin) {
                     for (int64_t o = 0; o < outer; ++o) {
                       std::copy(g.begin() + o * length * inner, g.begin() + (o + 1) * length * inner,
                                 gin[0].begin() + (o * extent + start) * inner);
                     }
                   });
}

template <typename T>
Tensor<T> index_select(const Tensor<T>& x, int64_t axis, const std::vector<int64_t>& indices) {
  const int64_t r = x.rank();
  axis = norm_axis(axis, r, "index_select");
  const int64_t extent = x.shape()[axis];
  if (indices.empty()) throw ContractViolation("index_select with no indices");
  for (auto i : indices) {
    if (i < 0 || i >= extent) throw ContractViolation("index_select: index out of range for " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  const int64_t m = static_cast<int64_t>(indices.size());
  out_shape[axis] = m;
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= out_shape[i];
  for (int64_t i = axis + 1; i < r; ++i) inner *= out_shape[i];
  auto d = x.data();
  std::vector<T> out(numel(out_shape));
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < m; ++j)
      std::copy(d.begin() + (o * extent + indices[j]) * inner, d.begin() + (o * extent + indices[j] + 1) * inner,
                out.begin() + (o * m + j) * inner);
  return finish<T>("index_select", out_shape, std::move(out), {&x},
                   [indices, outer, inner, extent, m](const NodeT<T>&, std::span<const T> g,
                                                      typename NodeT<T>::GradBuffers& gin) {
                     for (int64_t o = 0; o < outer; ++o)
                       for (int64_t j = 0; j < m; ++j)
                         for (int64_t k = 0; k < inner; ++k)
                           gin[0][(o * extent + indices[j]) * inner + k] += g[(o * m + j) * inner + k];
                   });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  auto d = x.data();
  T s = 0;
  for (auto v : d) s += v;
  return finish<T>("sum", Shape{1}, std::vector<T>{s}, {&x},
                   [](const NodeT<T>&, std::span<const T> g, typename NodeT<T>::GradBuffers& gin) {
                     std::fill(gin[0].begin(), gin[0].end(), g[0]);
                   });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / T(x.numel()));
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, int64_t axis) {
  const int64_t r = x.rank();
  axis = norm_axis(axis, r, "mean_axis");
  Shape out_shape;
  for (int64_t i = 0; i < r; ++i)
    if (i != axis) out_shape.push_back(x.shape()[i]);
  if (out_shape.empty()) out_shape = {1};
  const int64_t extent = x.shape()[axis];
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (int64_t i = axis + 1; i < r; ++i) inner *= x.shape()[i];
  auto d = x.data();
  std::vector<T> out(outer * inner, T(0));
  const T inv = T(1) / T(extent);
  for (int64_t o = 0; o < outer; ++o) {
    T* dst = out.data() + o * inner;
    for (int64_t e = 0; e < extent; ++e) {
      const T* src = d.data() + (o * extent + e) * inner;
      for (int64_t k = 0; k < inner; ++k) dst[k] += src[k];
    }
    for (int64_t k = 0; k < inner; ++k) dst[k] *= inv;
  }
  return finish<T>("mean_axis", out_shape, std::move(out), {&x},
                   [outer, inner, extent, inv](const NodeT<T>&, std::span<const T> g,
                                               typename NodeT<T>::GradBuffers& gin) {
                     for (int64_t o = 0; o < outer; ++o)
                       for (int64_t e = 0; e < extent; ++e)
                         for (int64_t k = 0; k < inner; ++k)
                           gin[0][(o * extent + e) * inner + k] = g[o * inner + k] * inv;
                   });
}

template <typename T>
Tensor<T> depthwise_temporal_conv(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                                  ConvLayout layout, int64_t stride) {
  if (kernel.rank() != 2) shape_error("depthwise_temporal_conv", x.shape(), kernel.shape());
  const int64_t C = kernel.dim(0);
  const int64_t k = kernel.dim(1);
  if (k % 2 == 0) throw ConfigError("depthwise_temporal_conv: kernel size must be odd, got " + std::to_string(k));
  if (stride < 1) throw ConfigError("depthwise_temporal_conv: stride must be positive");
  if (bias.shape() != Shape{C}) shape_error("depthwise_temporal_conv", kernel.shape(), bias.shape());

  // View x as [outer, T, inner]; the channel of an element depends on layout.
  const auto& s = x.shape();
  const int64_t r = x.rank();
  int64_t outer = 1, Tn = 0, inner = 1;
  const bool channels_last = layout == ConvLayout::kChannelsLast;
  if (!channels_last) {
    if (r < 2 || s[0] != C) shape_error("depthwise_temporal_conv", s, kernel.shape());
    outer = C;
    Tn = s[1];
    for (int64_t i = 2; i < r; ++i) inner *= s[i];
  } else if (r == 2) {
    if (s[1] != C) shape_error("depthwise_temporal_conv", s, kernel.shape());
    Tn = s[0];
    inner = C;
  } else {
    if (r < 3 || s[r - 1] != C) shape_error("depthwise_temporal_conv", s, kernel.shape());
    for (int64_t i = 0; i < r - 3; ++i) outer *= s[i];
    Tn = s[r - 3];
    inner = s[r - 2] * C;
  }
  const int64_t To = (Tn + stride - 1) / stride;
  const int64_t pad = (k - 1) / 2;
  Shape out_shape = s;
  out_shape[channels_last ? (r == 2 ? 0 : r - 3) : 1] = To;

  auto xd = x.data();
  auto kd = kernel.data();
  auto bd = bias.data();
  std::vector<T> out(static_cast<size_t>(outer * To * inner));
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t t = 0; t < To; ++t) {
      T* dst = out.data() + (o * To + t) * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] = bd[channels_last ? i % C : o];
      for (int64_t j = 0; j < k; ++j) {
        const int64_t ti = t * stride + j - pad;
        if (ti < 0 || ti >= Tn) continue;
        const T* src = xd.data() + (o * Tn + ti) * inner;
        if (channels_last) {
          for (int64_t p = 0; p < inner; p += C)
            for (int64_t c = 0; c < C; ++c) dst[p + c] += kd[c * k + j] * src[p + c];
        } else {
          const T w = kd[o * k + j];
          for (int64_t i = 0; i < inner; ++i) dst[i] += w * src[i];
        }
      }
    }
  }
  return finish<T>(
      "depthwise_temporal_conv", out_shape, std::move(out), {&x, &kernel, &bias},
      [=](const NodeT<T>& node, std::span<const T> g, typename NodeT<T>::GradBuffers& gin) {
        auto xs = in_data(node, 0);
        auto ks = in_data(node, 1);
        for (int64_t o = 0; o < outer; ++o) {
          for (int64_t t = 0; t < To; ++t) {
            const T* gt = g.data() + (o * To + t) * inner;
            if (node.needs_grad[2]) {
              for (int64_t i = 0; i < inner; ++i) gin[2][channels_last ? i % C : o] += gt[i];
            }
            for (int64_t j = 0; j < k; ++j) {
              const int64_t ti = t * stride + j - pad;
              if (ti < 0 || ti >= Tn) continue;
              const int64_t base = (o * Tn + ti) * inner;
              if (channels_last) {
                for (int64_t p = 0; p < inner; p += C) {
                  for (int64_t c = 0; c < C; ++c) {
                    if (node.needs_grad[0]) gin[0][base + p + c] += ks[c * k + j] * gt[p + c];
                    if (node.needs_grad[1]) gin[1][c * k + j] += xs[base + p + c] * gt[p + c];
                  }
                }
              } else {
                const T w = ks[o * k + j];
                T acc = 0;
                for (int64_t i = 0; i < inner; ++i) {
                  if (node.needs_grad[0]) gin[0][base + i] += w * gt[i];
                  acc += xs[base + i] * gt[i];
                }
                if (node.needs_grad[1]) gin[1][o * k + j] += acc;
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> spatial_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4) throw ContractViolation("spatial_avg_pool expects [d,t,h,w], got " + shape_str(x.shape()));
  const auto& s = x.shape();
  return mean_axis(reshape(x, Shape{s[0], s[1], s[2] * s[3]}), 2);
}

template <typename T>
Tensor<T> temporal_resize(const Tensor<T>& x, int64_t target_len) {
  if (target_len <= 0) throw ConfigError("temporal_resize: target length must be positive");
  if (x.rank() != 2) throw ContractViolation("temporal_resize expects [d,t], got " + shape_str(x.shape()));
  const int64_t D = x.dim(0);
  const int64_t Tn = x.dim(1);
  // Each output sample is w0 * x[lo] + w1 * x[lo + 1].
  struct Tap {
    int64_t lo;
    T w0, w1;
  };
  std::vector<Tap> taps(target_len);
  const bool mean_mode = target_len == 1 && Tn > 1;
  for (int64_t i = 0; i < target_len; ++i) {
    if (Tn == 1 || target_len == 1) {
      taps[i] = {0, T(1), T(0)};
      continue;
    }
    const double pos = static_cast<double>(i * (Tn - 1)) / static_cast<double>(target_len - 1);
    int64_t lo = static_cast<int64_t>(std::floor(pos));
    double frac = pos - static_cast<double>(lo);
    if (lo >= Tn - 1) {
      lo = Tn - 1;
      frac = 0.0;
    }
    taps[i] = {lo, static_cast<T>(1.0 - frac), static_cast<T>(frac)};
  }
  auto d = x.data();
  std::vector<T> out(D * target_len);
  for (int64_t c = 0; c < D; ++c) {
    const T* src = d.data() + c * Tn;
    if (mean_mode) {
      T acc = 0;
      for (int64_t t = 0; t < Tn; ++t) acc += src[t];
      out[c] = acc / T(Tn);
      continue;
    }
    for (int64_t i = 0; i < target_len; ++i) {
      const auto& tp = taps[i];
      T v = tp.w0 * src[tp.lo];
      if (tp.w1 != T(0)) v += tp.w1 * src[tp.lo + 1];
      out[c * target_len + i] = v;
    }
  }
  return finish<T>("temporal_resize", Shape{D, target_len}, std::move(out), {&x},
                   [taps, D, Tn, target_len, mean_mode](const NodeT<T>&, std::span<const T> g,
                                                        typename NodeT<T>::GradBuffers& gin) {
                     for (int64_t c = 0; c < D; ++c) {
                       if (mean_mode) {
                         for (int64_t t = 0; t < Tn; ++t) gin[0][c * Tn + t] = g[c] / T(Tn);
                         continue;
                       }
                       for (int64_t i = 0; i < target_len; ++i) {
                         const auto& tp = taps[i];
                         const T gv = g[c * target_len + i];
                         gin[0][c * Tn + tp.lo] += tp.w0 * gv;
                         if (tp.w1 != T(0)) gin[0][c * Tn + tp.lo + 1] += tp.w1 * gv;
                       }
                     }
                   });
}

template <typename T>
Tensor<T> sigmoid_focal_loss(const Tensor<T>& logits, const Tensor<T>& targets, T alpha, T gamma) {
  if (logits.shape() != targets.shape()) shape_error("sigmoid_focal_loss", logits.shape(), targets.shape());
  auto x = logits.data();
  auto y = targets.data();
  std::vector<T> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    const T p = sigmoid_scalar(x[i]);
    const T ce = softplus_scalar(x[i]) - y[i] * x[i];
    const T pt = y[i] * p + (T(1) - y[i]) * (T(1) - p);
    const T at = y[i] * alpha + (T(1) - y[i]) * (T(1) - alpha);
    out[i] = at * std::pow(T(1) - pt, gamma) * ce;
  }
  // Targets are constants; no gradient flows into them.
  return finish<T>("sigmoid_focal_loss", logits.shape(), std::move(out), {&logits, &targets},
                   [alpha, gamma](const NodeT<T>& node, std::span<const T> g, typename NodeT<T>::GradBuffers& gin) {
                     if (!node.needs_grad[0]) return;
                     auto x = in_data(node, 0);
                     auto y = in_data(node, 1);
                     for (size_t i = 0; i < g.size(); ++i) {
                       const T p = sigmoid_scalar(x[i]);
                       const T ce = softplus_scalar(x[i]) - y[i] * x[i];
                       const T pt = y[i] * p + (T(1) - y[i]) * (T(1) - p);
                       const T at = y[i] * alpha + (T(1) - y[i]) * (T(1) - alpha);
                       const T q = T(1) - pt;
                       const T dpt = (T(2) * y[i] - T(1)) * p * (T(1) - p);
                       const T mod_grad = gamma == T(0) ? T(0) : -gamma * std::pow(q, gamma - T(1)) * dpt;
                       gin[0][i] = g[i] * at * (mod_grad * ce + std::pow(q, gamma) * (p - y[i]));
                     }
                   });
}

template <typename T>
Tensor<T> interval_iou_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.rank() != 2 || pred.dim(1) != 2 || pred.shape() != target.shape()) {
    shape_error("interval_iou_loss", pred.shape(), target.shape());
  }
  const int64_t n = pred.dim(0);
  auto p = pred.data();
  auto q = target.data();
  for (auto v : p)
    if (v < 0) throw ContractViolation("interval_iou_loss: negative predicted distance");
  for (auto v : q)
    if (v < 0) throw ContractViolation("interval_iou_loss: negative target distance");
  constexpr T kTiny = std::numeric_limits<T>::min();
  std::vector<T> out(n);
  for (int64_t i = 0; i < n; ++i) {
    const T ps = p[2 * i], pe = p[2 * i + 1], gs = q[2 * i], ge = q[2 * i + 1];
    const T inter = std::min(ps, gs) + std::min(pe, ge);
    const T uni = ps + pe + gs + ge - inter;
    out[i] = uni <= kTiny ? T(0) : T(1) - inter / uni;
  }
  return finish<T>("interval_iou_loss", Shape{n}, std::move(out), {&pred, &target},
                   [n](const NodeT<T>& node, std::span<const T> g, typename NodeT<T>::GradBuffers& gin) {
                     if (!node.needs_grad[0]) return;
                     auto p = in_data(node, 0);
                     auto q = in_data(node, 1);
                     for (int64_t i = 0; i < n; ++i) {
                       const T ps = p[2 * i], pe = p[2 * i + 1], gs = q[2 * i], ge = q[2 * i + 1];
                       const T inter = std::min(ps, gs) + std::min(pe, ge);
                       const T uni = ps + pe + gs + ge - inter;
                       if (uni <= kTiny) continue;
                       const T di_s = ps < gs ? T(1) : T(0);
                       const T di_e = pe < ge ? T(1) : T(0);
                       // d(1 - I/U) = -(dI * U - I * dU) / U^2 with dU = 1 - dI.
                       const T u2 = uni * uni;
                       gin[0][2 * i] = -g[i] * (di_s * uni - inter * (T(1) - di_s)) / u2;
                       gin[0][2 * i + 1] = -g[i] * (di_e * uni - inter * (T(1) - di_e)) / u2;
                     }
                   });
}

#define TIALAB_INSTANTIATE_OPS(T)                                                                   \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                                 \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                                     \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                                  \
  template Tensor<T> softplus<T>(const Tensor<T>&);                                                 \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);        \
  template Tensor<T> softmax<T>(const Tensor<T>&);                                                  \
  template Tensor<T> reshape<T>(const Tensor<T>&, const Shape&);                                    \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                                \
  template Tensor<T> permute<T>(const Tensor<T>&, const std::vector<int64_t>&);                     \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, int64_t);                             \
  template Tensor<T> slice<T>(const Tensor<T>&, int64_t, int64_t, int64_t);                         \
  template Tensor<T> index_select<T>(const Tensor<T>&, int64_t, const std::vector<int64_t>&);       \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                      \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                     \
  template Tensor<T> mean_axis<T>(const Tensor<T>&, int64_t);                                       \
  template Tensor<T> depthwise_temporal_conv<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                                ConvLayout, int64_t);                               \
  template Tensor<T> spatial_avg_pool<T>(const Tensor<T>&);                                         \
  template Tensor<T> temporal_resize<T>(const Tensor<T>&, int64_t);                                 \
  template Tensor<T> sigmoid_focal_loss<T>(const Tensor<T>&, const Tensor<T>&, T, T);               \
  template Tensor<T> interval_iou_loss<T>(const Tensor<T>&, const Tensor<T>&);

TIALAB_INSTANTIATE_OPS(float)
TIALAB_INSTANTIATE_OPS(double)

}  // namespace tialab
