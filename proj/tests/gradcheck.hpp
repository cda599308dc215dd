// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference gradient checks in double precision, plus the
// table of per-op cases shared by the unit tests and the acceptance binary.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "tialab/adapters.hpp"
#include "tialab/detector.hpp"
#include "tialab/ops.hpp"

namespace tialab::testing {

using Fn = std::function<TensorD(const std::vector<TensorD>&)>;

struct GradCase {
  std::vector<TensorD> inputs;
  Fn fn;  // must return a scalar
};

struct GradReport {
  double max_rel_error = 0;
  std::string worst;
};

inline double rel_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nb), 1e-8});
  return std::sqrt(diff) / denom;
}

// Compares backward() against (f(x+h) - f(x-h)) / 2h for every element of
// every input.
inline GradReport check_gradients(GradCase c, double h = 1e-5) {
  std::vector<TensorD> leaves;
  for (const auto& x : c.inputs) leaves.push_back(x.detach().set_requires_grad(true));
  auto loss = c.fn(leaves);
  backward(loss);
  GradReport rep;
  for (size_t i = 0; i < leaves.size(); ++i) {
    const auto g = leaves[i].grad_or_zeros();
    std::vector<double> analytic = g.to_vector(), numeric(analytic.size());
    for (size_t j = 0; j < analytic.size(); ++j) {
      NoGradGuard ng;
      std::vector<TensorD> plus, minus;
      for (size_t k = 0; k < leaves.size(); ++k) {
        plus.push_back(leaves[k].detach());
        minus.push_back(leaves[k].detach());
      }
      plus[i].mutable_data()[j] += h;
      minus[i].mutable_data()[j] -= h;
      numeric[j] = (c.fn(plus).item() - c.fn(minus).item()) / (2 * h);
    }
    const double e = rel_error(analytic, numeric);
    if (e > rep.max_rel_error) {
      rep.max_rel_error = e;
      rep.worst = "input " + std::to_string(i);
    }
  }
  return rep;
}

inline TensorD rand_t(const Shape& s, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  return TensorD::uniform(s, lo, hi, rng);
}

inline int64_t rand_i(std::mt19937_64& rng, int64_t lo, int64_t hi) {
  return std::uniform_int_distribution<int64_t>(lo, hi)(rng);
}

// sum(y * R) for a fixed random R, so every output element gets a distinct
// upstream gradient.
inline TensorD project(const TensorD& y, uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, TensorD::uniform(y.shape(), -1, 1, rng)));
}

struct OpCase {
  std::string name;
  std::function<GradCase(std::mt19937_64&)> make;
};

inline std::vector<OpCase> op_cases() {
  std::vector<OpCase> out;
  auto unary = [&](std::string name, std::function<TensorD(const TensorD&)> f, double lo = -2, double hi = 2) {
    out.push_back({name, [f, lo, hi](std::mt19937_64& rng) {
                     Shape s{rand_i(rng, 1, 4), rand_i(rng, 1, 5)};
                     const uint64_t seed = rng();
                     return GradCase{{rand_t(s, rng, lo, hi)}, [f, seed](const std::vector<TensorD>& in) {
                                       return project(f(in[0]), seed);
                                     }};
                   }});
  };
  auto binary = [&](std::string name, std::function<TensorD(const TensorD&, const TensorD&)> f) {
    out.push_back({name, [f](std::mt19937_64& rng) {
                     Shape s{rand_i(rng, 1, 3), rand_i(rng, 1, 4)};
                     // Alternate full shape, trailing suffix and a single element.
                     const int64_t form = rand_i(rng, 0, 2);
                     Shape sb = form == 0 ? s : form == 1 ? Shape{s[1]} : Shape{1};
                     const uint64_t seed = rng();
                     return GradCase{{rand_t(s, rng), rand_t(sb, rng)}, [f, seed](const std::vector<TensorD>& in) {
                                       return project(f(in[0], in[1]), seed);
                                     }};
                   }});
  };
  binary("add", [](const TensorD& a, const TensorD& b) { return add(a, b); });
  binary("sub", [](const TensorD& a, const TensorD& b) { return sub(a, b); });
  binary("mul", [](const TensorD& a, const TensorD& b) { return mul(a, b); });
  unary("scale", [](const TensorD& x) { return scale(x, 0.7); });
  unary("gelu", [](const TensorD& x) { return gelu(x); });
  unary("sigmoid", [](const TensorD& x) { return sigmoid(x); });
  unary("softplus", [](const TensorD& x) { return softplus(x); });
  unary("softmax", [](const TensorD& x) { return softmax(x); });
  unary("transpose", [](const TensorD& x) { return transpose(x); });
  unary("sum", [](const TensorD& x) { return sum(x); });
  unary("mean", [](const TensorD& x) { return mean(x); });
  out.push_back({"matmul", [](std::mt19937_64& rng) {
                   const int64_t m = rand_i(rng, 1, 4), k = rand_i(rng, 1, 4), n = rand_i(rng, 1, 4);
                   const int64_t form = rand_i(rng, 0, 2);
                   const uint64_t seed = rng();
                   std::vector<TensorD> in;
                   if (form == 0) in = {rand_t({m, k}, rng), rand_t({k, n}, rng)};
                   if (form == 1) in = {rand_t({m, k}, rng), rand_t({k}, rng)};
                   if (form == 2) in = {rand_t({2, m, k}, rng), rand_t({2, k, n}, rng)};
                   return GradCase{in, [seed](const std::vector<TensorD>& x) { return project(matmul(x[0], x[1]), seed); }};
                 }});
  out.push_back({"linear", [](std::mt19937_64& rng) {
                   const int64_t m = rand_i(rng, 1, 4), k = rand_i(rng, 1, 4), n = rand_i(rng, 1, 4);
                   const uint64_t seed = rng();
                   return GradCase{{rand_t({2, m, k}, rng), rand_t({k, n}, rng), rand_t({n}, rng)},
                                   [seed](const std::vector<TensorD>& x) {
                                     return project(linear(x[0], x[1], x[2]), seed);
                                   }};
                 }});
  out.push_back({"layer_norm", [](std::mt19937_64& rng) {
                   const int64_t r = rand_i(rng, 1, 3), c = rand_i(rng, 2, 6);
                   const uint64_t seed = rng();
                   return GradCase{{rand_t({r, c}, rng), rand_t({c}, rng, 0.5, 1.5), rand_t({c}, rng)},
                                   [seed](const std::vector<TensorD>& x) {
                                     return project(layer_norm(x[0], x[1], x[2]), seed);
                                   }};
                 }});
  out.push_back({"reshape", [](std::mt19937_64& rng) {
                   const int64_t a = rand_i(rng, 1, 3), b = rand_i(rng, 1, 4);
                   const uint64_t seed = rng();
                   return GradCase{{rand_t({a, b, 2}, rng)}, [a, b, seed](const std::vector<TensorD>& x) {
                                     return project(reshape(x[0], Shape{2 * b, a}), seed);
                                   }};
                 }});
  out.push_back({"permute", [](std::mt19937_64& rng) {
                   std::vector<int64_t> axes{0, 1, 2, 3};
                   std::shuffle(axes.begin(), axes.end(), rng);
                   const uint64_t seed = rng();
                   return GradCase{{rand_t({2, 3, 1, 2}, rng)}, [axes, seed](const std::vector<TensorD>& x) {
                                     return project(permute(x[0], axes), seed);
                                   }};
                 }});
  out.push_back({"concat", [](std::mt19937_64& rng) {
                   const int64_t axis = rand_i(rng, 0, 1);
                   Shape a{2, 3}, b{2, 3};
                   a[axis] = rand_i(rng, 1, 3);
                   b[axis] = rand_i(rng, 1, 3);
                   const uint64_t seed = rng();
                   return GradCase{{rand_t(a, rng), rand_t(b, rng)}, [axis, seed](const std::vector<TensorD>& x) {
                                     return project(concat<double>({x[0], x[1]}, axis), seed);
                                   }};
                 }});
  out.push_back({"slice", [](std::mt19937_64& rng) {
                   const int64_t axis = rand_i(rng, 0, 1);
                   const int64_t start = rand_i(rng, 0, 2), len = rand_i(rng, 1, 2);
                   const uint64_t seed = rng();
                   return GradCase{{rand_t({4, 4}, rng)}, [axis, start, len, seed](const std::vector<TensorD>& x) {
                                     return project(slice(x[0], axis, start, len), seed);
                                   }};
                 }});
  out.push_back({"index_select", [](std::mt19937_64& rng) {
                   std::vector<int64_t> idx;
                   for (int i = 0; i < 5; ++i) idx.push_back(rand_i(rng, 0, 3));
                   const uint64_t seed = rng();
                   return GradCase{{rand_t({4, 3}, rng)}, [idx, seed](const std::vector<TensorD>& x) {
                                     return project(index_select(x[0], 0, idx), seed);
                                   }};
                 }});
  out.push_back({"mean_axis", [](std::mt19937_64& rng) {
                   const int64_t axis = rand_i(rng, 0, 2);
                   const uint64_t seed = rng();
                   return GradCase{{rand_t({2, 3, 4}, rng)}, [axis, seed](const std::vector<TensorD>& x) {
                                     return project(mean_axis(x[0], axis), seed);
                                   }};
                 }});
  out.push_back({"depthwise_temporal_conv", [](std::mt19937_64& rng) {
                   const int64_t c = rand_i(rng, 1, 3), t = rand_i(rng, 1, 6), k = 2 * rand_i(rng, 0, 2) + 1;
                   const int64_t stride = rand_i(rng, 1, 2);
                   const bool last = rand_i(rng, 0, 1) == 1;
                   const uint64_t seed = rng();
                   Shape xs = last ? Shape{2, t, 3, c} : Shape{c, t, 2, 1};
                   return GradCase{{rand_t(xs, rng), rand_t({c, k}, rng), rand_t({c}, rng)},
                                   [last, stride, seed](const std::vector<TensorD>& x) {
                                     const auto layout = last ? ConvLayout::kChannelsLast : ConvLayout::kChannelsFirst;
                                     return project(depthwise_temporal_conv(x[0], x[1], x[2], layout, stride), seed);
                                   }};
                 }});
  out.push_back({"spatial_avg_pool", [](std::mt19937_64& rng) {
                   const uint64_t seed = rng();
                   return GradCase{{rand_t({2, 3, rand_i(rng, 1, 3), rand_i(rng, 1, 3)}, rng)},
                                   [seed](const std::vector<TensorD>& x) {
                                     return project(spatial_avg_pool(x[0]), seed);
                                   }};
                 }});
  out.push_back({"temporal_resize", [](std::mt19937_64& rng) {
                   const int64_t target = rand_i(rng, 1, 7);
                   const uint64_t seed = rng();
                   return GradCase{{rand_t({2, rand_i(rng, 1, 5)}, rng)}, [target, seed](const std::vector<TensorD>& x) {
                                     return project(temporal_resize(x[0], target), seed);
                                   }};
                 }});
  out.push_back({"sigmoid_focal_loss", [](std::mt19937_64& rng) {
                   const int64_t n = rand_i(rng, 1, 4), k = rand_i(rng, 1, 3);
                   std::vector<double> tv(static_cast<size_t>(n * k));
                   for (auto& v : tv) v = static_cast<double>(rand_i(rng, 0, 1));
                   TensorD target({n, k}, tv);
                   return GradCase{{rand_t({n, k}, rng, -3, 3)}, [target](const std::vector<TensorD>& x) {
                                     return sum(sigmoid_focal_loss(x[0], target));
                                   }};
                 }});
  out.push_back({"interval_iou_loss", [](std::mt19937_64& rng) {
                   const int64_t n = rand_i(rng, 1, 4);
                   TensorD target = rand_t({n, 2}, rng, 0.2, 3);
                   const uint64_t seed = rng();
                   return GradCase{{rand_t({n, 2}, rng, 0.2, 3)}, [target, seed](const std::vector<TensorD>& x) {
                                     return project(interval_iou_loss(x[0], target), seed);
                                   }};
                 }});
  return out;
}

// TIA (token layout) feeding the pyramid head, differentiated with respect to
// the input tokens and every adapter weight. The adapter starts from random
// (not zero) W_up so every path carries gradient.
inline GradCase tia_head_case(std::mt19937_64& rng) {
  const int64_t d = 4, t = 16;
  auto w = adapters::init_tia<double>(d, 2, 3, rng());
  w.up_w.tensor = rand_t(w.up_w.tensor.shape(), rng);
  w.up_b.tensor = rand_t(w.up_b.tensor.shape(), rng);
  w.dw_kernel.tensor = rand_t(w.dw_kernel.tensor.shape(), rng);
  detector::PyramidConfig pc;
  pc.levels = 2;
  pc.num_classes = 2;
  pc.dim = 4;
  pc.range_bounds = {3};
  pc.context_blocks = 1;
  pc.context_kernel = 3;
  pc.seed = rng();
  auto head = std::make_shared<detector::PyramidHead<double>>(pc, d);
  std::vector<detector::Segment> segs{{2.0, 5.5, 0}, {8.0, 15.0, 1}};
  auto targets = detector::assign_targets(segs, pc, t);
  std::vector<TensorD> inputs{rand_t({1, t, 2, d}, rng)};
  for (auto* p : w.parameters()) inputs.push_back(p->tensor);
  const auto names = w.parameters().size();
  auto fn = [w, head, targets, names](const std::vector<TensorD>& in) mutable {
    auto params = w.parameters();
    for (size_t i = 0; i < names; ++i) params[i]->tensor = in[i + 1];
    auto y = adapters::tia_tokens(w, in[0], true);                    // [1,t,2,d]
    auto f = reshape(mean_axis(y, 2), Shape{in[0].dim(1), in[0].dim(3)});  // [t,d]
    return detector::compute_loss(head->forward(f), targets);
  };
  return {inputs, fn};
}

}  // namespace tialab::testing
