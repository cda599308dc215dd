// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "tialab/tensor.hpp"

namespace tialab {

template <typename T>
using Block = std::function<Tensor<T>(const Tensor<T>&)>;

// ceil(sqrt(n)) blocks per segment.
int64_t default_segment_size(int64_t num_blocks);

struct CheckpointPolicy {
  // Blocks per segment; 0 selects default_segment_size.
  int64_t segment_size = 0;
};

template <typename T>
Tensor<T> plain_sequence(const std::vector<Block<T>>& blocks, const Tensor<T>& x);

// Runs each segment without recording intermediates and recomputes it during
// backward. Forward values are bit-identical to plain_sequence.
template <typename T>
Tensor<T> checkpointed_sequence(const std::vector<Block<T>>& blocks, const Tensor<T>& x,
                                CheckpointPolicy policy = {});

}  // namespace tialab
