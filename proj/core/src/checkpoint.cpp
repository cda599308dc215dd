// SPDX-License-Identifier: Apache-2.0
#include "tialab/checkpoint.hpp"

#include <cmath>
#include <memory>

namespace tialab {

int64_t default_segment_size(int64_t num_blocks) {
  if (num_blocks <= 1) return 1;
  auto s = static_cast<int64_t>(std::ceil(std::sqrt(static_cast<double>(num_blocks))));
  while (s * s < num_blocks) ++s;
  while (s > 1 && (s - 1) * (s - 1) >= num_blocks) --s;
  return s;
}

template <typename T>
Tensor<T> plain_sequence(const std::vector<Block<T>>& blocks, const Tensor<T>& x) {
  Tensor<T> h = x;
  for (const auto& b : blocks) h = b(h);
  return h;
}

namespace {

template <typename T>
Tensor<T> run_segment(std::vector<Block<T>> segment, const Tensor<T>& x) {
  Tensor<T> y;
  bool needs_node = false;
  {
    NoGradGuard no_grad;
    RequiresGradProbe probe;
    y = plain_sequence(segment, x);
    needs_node = probe.saw_requires_grad() || x.requires_grad();
  }
  if (!needs_node) return y;
  if (y.impl() == x.impl() || y.impl()->storage == x.impl()->storage) y = y.detach();

  auto node = std::make_shared<detail::Node<T>>();
  node->op = "checkpoint_segment";
  node->region = current_region();
  node->inputs.push_back(x.impl());
  node->needs_grad.push_back(x.requires_grad() ? 1 : 0);
  node->backward = [segment = std::move(segment)](const detail::Node<T>& n, std::span<const T> g,
                                                  typename detail::Node<T>::GradBuffers& gin) {
    Tensor<T> xin(n.inputs[0]->shape, *n.inputs[0]->storage);
    xin.set_requires_grad(n.needs_grad[0] != 0);
    Tensor<T> yr;
    {
      EnableGradGuard grad_on;
      yr = plain_sequence(segment, xin);
    }
    backward_from(yr, g);
    if (n.needs_grad[0] && xin.has_grad()) {
      const auto gx = *xin.grad();
      std::copy(gx.data().begin(), gx.data().end(), gin[0].begin());
    }
  };
  y.impl()->requires_grad = true;
  y.impl()->attach_node(std::move(node));
  return y;
}

}  // namespace

template <typename T>
Tensor<T> checkpointed_sequence(const std::vector<Block<T>>& blocks, const Tensor<T>& x,
                                CheckpointPolicy policy) {
  const auto n = static_cast<int64_t>(blocks.size());
  if (!grad_enabled() || n == 0) return plain_sequence(blocks, x);
  const int64_t seg = policy.segment_size > 0 ? policy.segment_size : default_segment_size(n);
  Tensor<T> h = x;
  for (int64_t start = 0; start < n; start += seg) {
    const int64_t end = std::min(n, start + seg);
    std::vector<Block<T>> segment(blocks.begin() + start, blocks.begin() + end);
    h = run_segment(std::move(segment), h);
  }
  return h;
}

template Tensor<float> plain_sequence<float>(const std::vector<Block<float>>&, const Tensor<float>&);
template Tensor<double> plain_sequence<double>(const std::vector<Block<double>>&, const Tensor<double>&);
template Tensor<float> checkpointed_sequence<float>(const std::vector<Block<float>>&, const Tensor<float>&,
                                                    CheckpointPolicy);
template Tensor<double> checkpointed_sequence<double>(const std::vector<Block<double>>&, const Tensor<double>&,
                                                      CheckpointPolicy);

}  // namespace tialab
