// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. Every op is pure in its inputs, validates shapes
// (ContractViolation naming the offending shapes) and rejects non-finite
// results (NumericError).

#pragma once

#include <cstdint>
#include <vector>

#include "tialab/tensor.hpp"

namespace tialab {

// Elementwise. `b` may equal `a` in shape, be a single element, or match a
// trailing suffix of `a`'s shape (leading extents of 1 are ignored). The
// roles may also be swapped.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& x, T factor);

// [M,K]x[K,N], [M,K]x[K] or batched [B,M,K]x[B,K,N].
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// x[..., K] * w[K, N] + bias[N].
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

// Exact Gaussian-CDF GELU.
template <typename T> Tensor<T> gelu(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T> Tensor<T> softplus(const Tensor<T>& x);
// Normalizes over the last axis.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5));
// Softmax over the last axis.
template <typename T> Tensor<T> softmax(const Tensor<T>& x);

template <typename T> Tensor<T> reshape(const Tensor<T>& x, const Shape& shape);
// Swaps the last two axes.
template <typename T> Tensor<T> transpose(const Tensor<T>& x);
template <typename T> Tensor<T> permute(const Tensor<T>& x, const std::vector<int64_t>& axes);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, int64_t axis);
template <typename T> Tensor<T> slice(const Tensor<T>& x, int64_t axis, int64_t start, int64_t length);
// Picks entries along `axis`; indices may repeat.
template <typename T> Tensor<T> index_select(const Tensor<T>& x, int64_t axis, const std::vector<int64_t>& indices);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
// Mean over one axis, which is removed.
template <typename T> Tensor<T> mean_axis(const Tensor<T>& x, int64_t axis);

enum class ConvLayout {
  // x[C, T, H, W]: channels outermost.
  kChannelsFirst,
  // x[..., T, S, C] (any leading batch extents, S >= 1 trailing spatial
  // positions, channels innermost). A rank-2 x[T, C] is accepted as S = 1.
  kChannelsLast,
};

// Depth-wise temporal convolution with zero padding of (k-1)/2 on both ends.
// kernel[C, k] with k odd, bias[C]. With stride s the output length is
// ceil(T / s) and output position i is centred on input position i*s.
template <typename T>
Tensor<T> depthwise_temporal_conv(const Tensor<T>& x, const Tensor<T>& kernel,
                                  const Tensor<T>& bias,
                                  ConvLayout layout = ConvLayout::kChannelsFirst,
                                  int64_t stride = 1);

// x[d, t, h, w] -> [d, t], mean over h*w.
template <typename T> Tensor<T> spatial_avg_pool(const Tensor<T>& x);

// x[d, t] -> [d, target_len] by endpoint-aligned linear interpolation;
// target_len == 1 takes the temporal mean.
template <typename T> Tensor<T> temporal_resize(const Tensor<T>& x, int64_t target_len);

// Elementwise sigmoid focal loss against {0,1} targets of the same shape.
template <typename T>
Tensor<T> sigmoid_focal_loss(const Tensor<T>& logits, const Tensor<T>& targets,
                             T alpha = T(0.25), T gamma = T(2));

// pred, target: [n, 2] non-negative (start, end) distances from a shared
// anchor point. Returns [n] values of 1 - tIoU.
template <typename T>
Tensor<T> interval_iou_loss(const Tensor<T>& pred, const Tensor<T>& target);

}  // namespace tialab
