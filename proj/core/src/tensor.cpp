// SPDX-License-Identifier: Apache-2.0
#include "tialab/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_map>

namespace tialab {

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace {

thread_local bool tls_grad_enabled = true;
thread_local std::string tls_region;
thread_local bool tls_probe_active = false;
thread_local bool tls_probe_seen = false;

void validate_shape(const Shape& shape) {
  for (auto e : shape) {
    if (e <= 0) throw ContractViolation("tensor extents must be positive, got " + shape_str(shape));
  }
}

}  // namespace

bool grad_enabled() { return tls_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(tls_grad_enabled) { tls_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { tls_grad_enabled = prev_; }

EnableGradGuard::EnableGradGuard() : prev_(tls_grad_enabled) { tls_grad_enabled = true; }
EnableGradGuard::~EnableGradGuard() { tls_grad_enabled = prev_; }

RegionScope::RegionScope(std::string tag) : prev_(std::move(tls_region)) {
  tls_region = std::move(tag);
}
RegionScope::~RegionScope() { tls_region = std::move(prev_); }

const std::string& current_region() { return tls_region; }

RequiresGradProbe::RequiresGradProbe()
    : prev_active_(tls_probe_active), prev_seen_(tls_probe_seen) {
  tls_probe_active = true;
  tls_probe_seen = false;
}

RequiresGradProbe::~RequiresGradProbe() {
  // An enclosing probe also observes what this one saw.
  bool seen = tls_probe_seen;
  tls_probe_active = prev_active_;
  tls_probe_seen = prev_seen_ || (prev_active_ && seen);
}

bool RequiresGradProbe::saw_requires_grad() const { return tls_probe_seen; }

namespace detail {
void note_probe_input(bool requires_grad) {
  if (tls_probe_active && requires_grad) tls_probe_seen = true;
}
}  // namespace detail

BackwardCounters& BackwardCounters::instance() {
  thread_local BackwardCounters counters;
  return counters;
}

int64_t BackwardCounters::count(const std::string& region) const {
  auto it = counts_.find(region);
  return it == counts_.end() ? 0 : it->second;
}

int64_t BackwardCounters::total() const {
  int64_t t = 0;
  for (const auto& [k, v] : counts_) t += v;
  return t;
}

RetentionTracker& RetentionTracker::instance() {
  thread_local RetentionTracker tracker;
  return tracker;
}

void RetentionTracker::reset_peak() {
  stats_.peak_tensors = stats_.live_tensors;
  stats_.peak_elements = stats_.live_elements;
}

void RetentionTracker::on_retain(int64_t elements) {
  stats_.live_tensors += 1;
  stats_.live_elements += elements;
  stats_.peak_tensors = std::max(stats_.peak_tensors, stats_.live_tensors);
  stats_.peak_elements = std::max(stats_.peak_elements, stats_.live_elements);
}

void RetentionTracker::on_release(int64_t elements) {
  stats_.live_tensors -= 1;
  stats_.live_elements -= elements;
}

namespace detail {

template <typename T>
TensorImpl<T>::~TensorImpl() {
  if (node) RetentionTracker::instance().on_release(tialab::numel(shape));
}

template <typename T>
void TensorImpl<T>::attach_node(std::shared_ptr<Node<T>> n) {
  if (!node) RetentionTracker::instance().on_retain(tialab::numel(shape));
  node = std::move(n);
}

}  // namespace detail

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T>::Tensor() = default;

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) {
  validate_shape(shape);
  if (static_cast<int64_t>(values.size()) != tialab::numel(shape)) {
    throw ContractViolation("element count " + std::to_string(values.size()) +
                            " does not match shape " + shape_str(shape));
  }
  impl_ = std::make_shared<detail::TensorImpl<T>>();
  impl_->shape = std::move(shape);
  impl_->storage = std::make_shared<std::vector<T>>(std::move(values));
}

template <typename T>
Tensor<T> Tensor<T>::zeros(const Shape& shape) {
  validate_shape(shape);
  return Tensor(shape, std::vector<T>(tialab::numel(shape), T(0)));
}

template <typename T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value) {
  validate_shape(shape);
  return Tensor(shape, std::vector<T>(tialab::numel(shape), value));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{1}, std::vector<T>{value});
}

template <typename T>
Tensor<T> Tensor<T>::uniform(const Shape& shape, T lo, T hi, std::mt19937_64& rng) {
  validate_shape(shape);
  std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
  std::vector<T> v(tialab::numel(shape));
  for (auto& e : v) e = static_cast<T>(dist(rng));
  return Tensor(shape, std::move(v));
}

template <typename T>
Tensor<T> Tensor<T>::normal(const Shape& shape, T mean, T stddev, std::mt19937_64& rng) {
  validate_shape(shape);
  std::normal_distribution<double> dist(static_cast<double>(mean), static_cast<double>(stddev));
  std::vector<T> v(tialab::numel(shape));
  for (auto& e : v) e = static_cast<T>(dist(rng));
  return Tensor(shape, std::move(v));
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  return impl_->shape;
}

template <typename T>
int64_t Tensor<T>::dim(int64_t axis) const {
  auto r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ContractViolation("axis " + std::to_string(axis) + " out of range for shape " +
                            shape_str(shape()));
  }
  return impl_->shape[axis];
}

template <typename T>
int64_t Tensor<T>::rank() const {
  return static_cast<int64_t>(impl_->shape.size());
}

template <typename T>
int64_t Tensor<T>::numel() const {
  return tialab::numel(impl_->shape);
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  return {impl_->storage->data(), impl_->storage->size()};
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (impl_->node) throw StateError("mutable_data() on a non-leaf tensor (" + op_name() + ")");
  return {impl_->storage->data(), impl_->storage->size()};
}

template <typename T>
std::vector<T> Tensor<T>::to_vector() const {
  return *impl_->storage;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractViolation("item() on tensor of shape " + shape_str(shape()));
  return (*impl_->storage)[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<int64_t> index) const {
  if (static_cast<int64_t>(index.size()) != rank()) {
    throw ContractViolation("index rank mismatch for shape " + shape_str(shape()));
  }
  int64_t flat = 0;
  int64_t axis = 0;
  for (auto i : index) {
    if (i < 0 || i >= impl_->shape[axis]) {
      throw ContractViolation("index out of range for shape " + shape_str(shape()));
    }
    flat = flat * impl_->shape[axis] + i;
    ++axis;
  }
  return (*impl_->storage)[flat];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return impl_->requires_grad;
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool value) {
  if (impl_->node) throw StateError("set_requires_grad on a non-leaf tensor (" + op_name() + ")");
  impl_->requires_grad = value;
  if (!value) impl_->grad.reset();
  return *this;
}

template <typename T>
bool Tensor<T>::is_leaf() const {
  return impl_->node == nullptr;
}

template <typename T>
std::optional<Tensor<T>> Tensor<T>::grad() const {
  if (!impl_->grad) return std::nullopt;
  return Tensor(impl_->shape, *impl_->grad);
}

template <typename T>
Tensor<T> Tensor<T>::grad_or_zeros() const {
  if (!impl_->grad) return zeros(impl_->shape);
  return Tensor(impl_->shape, *impl_->grad);
}

template <typename T>
bool Tensor<T>::has_grad() const {
  return impl_->grad.has_value();
}

template <typename T>
void Tensor<T>::zero_grad() {
  impl_->grad.reset();
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(impl_->shape, *impl_->storage);
}

template <typename T>
std::string Tensor<T>::op_name() const {
  return impl_->node ? impl_->node->op : std::string("leaf");
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x) {
  auto src = x.data();
  std::vector<To> v(src.size());
  for (size_t i = 0; i < src.size(); ++i) v[i] = static_cast<To>(src[i]);
  return Tensor<To>(x.shape(), std::move(v));
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
void accumulate(std::vector<T>& dst, const std::vector<T>& src) {
  if (dst.empty()) {
    dst = src;
    return;
  }
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
void run_backward(const std::shared_ptr<detail::TensorImpl<T>>& root, std::vector<T> seed) {
  using Impl = detail::TensorImpl<T>;
  if (!root->node) {
    if (root->requires_grad) {
      if (!root->grad) root->grad = std::vector<T>(seed.size(), T(0));
      for (size_t i = 0; i < seed.size(); ++i) (*root->grad)[i] += seed[i];
    }
    return;
  }
  if (root->node->consumed) {
    throw StateError("backward over a consumed differentiation record (op " + root->node->op + ")");
  }

  // Post-order DFS over impls that carry nodes.
  // Owning handles keep intermediates alive while earlier nodes release their
  // inputs below.
  std::vector<std::shared_ptr<Impl>> order;
  std::unordered_map<Impl*, int> state;  // 1 = visiting, 2 = done
  std::vector<std::pair<std::shared_ptr<Impl>, size_t>> stack;
  stack.emplace_back(root, 0);
  state[root.get()] = 1;
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    auto& inputs = impl->node->inputs;
    if (next < inputs.size()) {
      std::shared_ptr<Impl> child = inputs[next];
      ++next;
      if (child->node && !state.count(child.get())) {
        if (child->node->consumed) {
          throw StateError("backward over a consumed differentiation record (op " +
                           child->node->op + ")");
        }
        state[child.get()] = 1;
        stack.emplace_back(std::move(child), 0);
      }
      continue;
    }
    state[impl.get()] = 2;
    order.push_back(impl);
    stack.pop_back();
  }

  std::unordered_map<Impl*, std::vector<T>> grads;
  grads[root.get()] = std::move(seed);
  auto& counters = BackwardCounters::instance();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* impl = it->get();
    auto found = grads.find(impl);
    auto node = impl->node;
    if (found != grads.end()) {
      std::vector<T> gout = std::move(found->second);
      grads.erase(found);
      typename detail::Node<T>::GradBuffers gin(node->inputs.size());
      for (size_t i = 0; i < node->inputs.size(); ++i) {
        if (node->needs_grad[i]) gin[i].assign(tialab::numel(node->inputs[i]->shape), T(0));
      }
      counters.bump(node->region);
      node->backward(*node, std::span<const T>(gout), gin);
      for (size_t i = 0; i < node->inputs.size(); ++i) {
        if (!node->needs_grad[i]) continue;
        auto& in = node->inputs[i];
        if (in->node) {
          accumulate(grads[in.get()], gin[i]);
        } else if (in->requires_grad) {
          if (!in->grad) {
            in->grad = std::move(gin[i]);
          } else {
            for (size_t j = 0; j < in->grad->size(); ++j) (*in->grad)[j] += gin[i][j];
          }
        }
      }
    }
    node->consumed = true;
    node->backward = nullptr;
    node->inputs.clear();
  }
}

}  // namespace

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractViolation("backward requires a scalar loss, got shape " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  run_backward(loss.impl(), std::vector<T>{T(1)});
}

template <typename T>
void backward_from(const Tensor<T>& root, std::span<const T> grad_output) {
  if (static_cast<int64_t>(grad_output.size()) != root.numel()) {
    throw ContractViolation("grad_output size does not match root shape " + shape_str(root.shape()));
  }
  run_backward(root.impl(), std::vector<T>(grad_output.begin(), grad_output.end()));
}

template <typename T>
Parameter<T>::Parameter(std::string n, Tensor<T> t, bool train)
    : name(std::move(n)), tensor(std::move(t)), trainable(train) {
  tensor.set_requires_grad(trainable);
}

template <typename T>
void Parameter<T>::set_trainable(bool value) {
  trainable = value;
  tensor.set_requires_grad(value);
}

template struct detail::TensorImpl<float>;
template struct detail::TensorImpl<double>;
template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> cast<float, double>(const Tensor<double>&);
template Tensor<double> cast<double, float>(const Tensor<float>&);
template Tensor<float> cast<float, float>(const Tensor<float>&);
template Tensor<double> cast<double, double>(const Tensor<double>&);
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);
template void backward_from<float>(const Tensor<float>&, std::span<const float>);
template void backward_from<double>(const Tensor<double>&, std::span<const double>);
template struct Parameter<float>;
template struct Parameter<double>;

}  // namespace tialab
