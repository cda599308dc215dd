// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with a reverse-mode differentiation record.
//
// A Tensor is a cheap handle onto shared, immutable-after-construction
// storage. Ops never mutate their inputs. When grad mode is enabled and any
// input requires grad, the op appends a Node to the differentiation record;
// backward() walks that record once and then marks it consumed.

#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tialab/errors.hpp"

namespace tialab {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct TensorImpl;

template <typename T>
struct Node {
  using GradBuffers = std::vector<std::vector<T>>;
  // Fills grad_in[i] (already sized) for every i with needs_grad[i] set.
  using BackwardFn =
      std::function<void(const Node&, std::span<const T> grad_out, GradBuffers& grad_in)>;

  std::string op;
  std::string region;
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  std::vector<char> needs_grad;
  BackwardFn backward;
  bool consumed = false;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::shared_ptr<std::vector<T>> storage;
  bool requires_grad = false;
  std::optional<std::vector<T>> grad;
  std::shared_ptr<Node<T>> node;

  TensorImpl() = default;
  TensorImpl(const TensorImpl&) = delete;
  TensorImpl& operator=(const TensorImpl&) = delete;
  ~TensorImpl();

  void attach_node(std::shared_ptr<Node<T>> n);
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor();
  Tensor(Shape shape, std::vector<T> values);

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, T value);
  static Tensor scalar(T value);
  static Tensor uniform(const Shape& shape, T lo, T hi, std::mt19937_64& rng);
  static Tensor normal(const Shape& shape, T mean, T stddev, std::mt19937_64& rng);

  const Shape& shape() const;
  int64_t dim(int64_t axis) const;
  int64_t rank() const;
  int64_t numel() const;
  bool defined() const { return impl_ != nullptr; }

  std::span<const T> data() const;
  // Only valid on leaves; used by optimizers, initializers and tests.
  std::span<T> mutable_data();
  std::vector<T> to_vector() const;
  T item() const;
  T at(std::initializer_list<int64_t> index) const;

  bool requires_grad() const;
  // Marks a leaf as differentiable. Throws StateError on non-leaf tensors.
  Tensor& set_requires_grad(bool value);
  bool is_leaf() const;

  std::optional<Tensor> grad() const;
  Tensor grad_or_zeros() const;
  bool has_grad() const;
  void zero_grad();

  // Same values, no differentiation record, fresh storage.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  std::string op_name() const;

  const std::shared_ptr<detail::TensorImpl<T>>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl<T>> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x);

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// ---------------------------------------------------------------------------
// Grad mode and region tags

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class EnableGradGuard {
 public:
  EnableGradGuard();
  ~EnableGradGuard();
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  bool prev_;
};

// Ops created while a RegionScope is alive carry its tag; backward counts rule
// invocations per tag.
class RegionScope {
 public:
  explicit RegionScope(std::string tag);
  ~RegionScope();
  RegionScope(const RegionScope&) = delete;
  RegionScope& operator=(const RegionScope&) = delete;

 private:
  std::string prev_;
};

const std::string& current_region();

// Per-thread backward-rule invocation counters, keyed by region tag.
class BackwardCounters {
 public:
  static BackwardCounters& instance();
  void reset() { counts_.clear(); }
  int64_t count(const std::string& region) const;
  int64_t total() const;
  const std::map<std::string, int64_t>& all() const { return counts_; }
  void bump(const std::string& region) { ++counts_[region]; }

 private:
  std::map<std::string, int64_t> counts_;
};

// Per-thread accounting of live tensors that are part of a differentiation
// record (intermediates retained for backward).
struct RetentionStats {
  int64_t live_tensors = 0;
  int64_t live_elements = 0;
  int64_t peak_tensors = 0;
  int64_t peak_elements = 0;
};

class RetentionTracker {
 public:
  static RetentionTracker& instance();
  const RetentionStats& stats() const { return stats_; }
  // Resets peaks to the current live values.
  void reset_peak();
  void on_retain(int64_t elements);
  void on_release(int64_t elements);

 private:
  RetentionStats stats_;
};

// Inside a probe scope, ops running with grad disabled still record whether
// any of their inputs required grad. Checkpointing uses this to decide whether
// a segment needs a recompute node.
class RequiresGradProbe {
 public:
  RequiresGradProbe();
  ~RequiresGradProbe();
  RequiresGradProbe(const RequiresGradProbe&) = delete;
  RequiresGradProbe& operator=(const RequiresGradProbe&) = delete;
  bool saw_requires_grad() const;

 private:
  bool prev_active_;
  bool prev_seen_;
};

// ---------------------------------------------------------------------------
// Backward

// Populates .grad on every requires-grad leaf reachable from a scalar loss.
template <typename T>
void backward(const Tensor<T>& loss);

// Seeds an arbitrary-shape root with grad_output. Used by recomputation.
template <typename T>
void backward_from(const Tensor<T>& root, std::span<const T> grad_output);

// ---------------------------------------------------------------------------
// Parameters

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> t, bool train = true);
  void set_trainable(bool value);
};

}  // namespace tialab
