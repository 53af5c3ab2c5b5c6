#pragma once

// Dense float64 tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle to a node. Operations that consume at least one
// tensor with requires_grad() record their inputs and a backward rule; the
// node's tape position is a process-wide increasing counter, so sorting the
// reachable nodes by position yields a valid topological order for backward().
//
// Gradients accumulate: calling backward() twice adds into leaf grads. Use
// zero_grad() between optimizer steps.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "focalpyr/errors.hpp"

namespace focalpyr {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::uint64_t position = 0;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

inline std::uint64_t next_tape_position() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed) + 1;
}

inline thread_local bool grad_disabled = false;

}  // namespace detail

// Disables recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_disabled) { detail::grad_disabled = true; }
  ~NoGradGuard() { detail::grad_disabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// View handed to a backward rule: the output's value and incoming gradient,
// and accumulation targets for each input that wants a gradient.
class BackwardContext {
 public:
  explicit BackwardContext(detail::Node& out) : out_(out) {}

  std::span<const double> grad() const { return out_.grad; }
  std::span<const double> value() const { return out_.data; }
  const Shape& shape() const { return out_.shape; }

  std::size_t input_count() const { return out_.inputs.size(); }
  std::span<const double> input_value(std::size_t i) const {
    return out_.inputs.at(i)->data;
  }
  const Shape& input_shape(std::size_t i) const { return out_.inputs.at(i)->shape; }

  // Empty span when input i does not require a gradient.
  std::span<double> input_grad(std::size_t i) {
    detail::Node& in = *out_.inputs.at(i);
    if (!in.requires_grad) return {};
    in.ensure_grad();
    return in.grad;
  }

 private:
  detail::Node& out_;
};

using BackwardRule = std::function<void(BackwardContext&)>;

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
    validate(shape, data.size());
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    node->position = detail::next_tape_position();
    return Tensor(std::move(node));
  }
  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const std::size_t n = focalpyr::numel(shape);
    return from(std::move(shape), std::vector<double>(n, value), requires_grad);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 0.0, requires_grad);
  }
  static Tensor scalar(double value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  // Records an operation result. If no input requires a gradient (or recording
  // is disabled) the result is a plain leaf and `rule` is dropped.
  static Tensor record(std::string op, Shape shape, std::vector<double> data,
                       std::span<const Tensor> inputs, BackwardRule rule) {
    Tensor out = from(std::move(shape), std::move(data));
    out.node_->op = std::move(op);
    if (detail::grad_disabled) return out;
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
    if (!any) return out;
    out.node_->requires_grad = true;
    out.node_->inputs.reserve(inputs.size());
    for (const Tensor& t : inputs) out.node_->inputs.push_back(t.node_);
    out.node_->backward = [rule = std::move(rule)](detail::Node& self) {
      BackwardContext ctx(self);
      rule(ctx);
    };
    return out;
  }
  static Tensor record(std::string op, Shape shape, std::vector<double> data,
                       std::initializer_list<Tensor> inputs, BackwardRule rule) {
    return record(std::move(op), std::move(shape), std::move(data),
                  std::span<const Tensor>(inputs.begin(), inputs.size()), std::move(rule));
  }

  bool defined() const { return node_ != nullptr; }

  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t dim(std::size_t i) const {
    if (i >= rank()) throw DimensionError("axis " + std::to_string(i) + " out of range for shape " + to_string(shape()));
    return node().shape[i];
  }
  std::size_t numel() const { return node().data.size(); }

  std::span<const double> data() const { return node().data; }
  // In-place access, intended for optimizer updates on leaf parameters.
  std::span<double> mutable_data() { return node().data; }
  std::vector<double> to_vector() const { return node().data; }
  double operator[](std::size_t i) const { return node().data.at(i); }
  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
    return node().data[0];
  }

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool value) {
    if (!is_leaf()) throw ContractError("set_requires_grad on a non-leaf tensor");
    node().requires_grad = value;
  }
  bool is_leaf() const { return node().inputs.empty(); }

  bool has_grad() const { return !node().grad.empty(); }
  std::span<const double> grad() const { return node().grad; }
  std::span<double> mutable_grad() {
    node().ensure_grad();
    return node().grad;
  }
  void zero_grad() { std::fill(node().grad.begin(), node().grad.end(), 0.0); }

  std::uint64_t tape_position() const { return node().position; }
  const std::string& op() const { return node().op; }

  // Copy of the value with no history.
  Tensor detach() const { return from(shape(), node().data, false); }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  friend class Tape;

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  static void validate(const Shape& shape, std::size_t length) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
    for (std::size_t d : shape)
      if (d == 0) throw DimensionError("tensor shape " + to_string(shape) + " has a zero dimension");
    if (focalpyr::numel(shape) != length)
      throw DimensionError("shape " + to_string(shape) + " does not match data length " +
                           std::to_string(length));
  }

  detail::Node& node() const {
    if (!node_) throw ContractError("use of an undefined tensor");
    return *node_;
  }

  std::shared_ptr<detail::Node> node_;
};

// The recorded operations reachable from a root, in recording order.
class Tape {
 public:
  struct Entry {
    std::string op;
    std::uint64_t output;
    std::vector<std::uint64_t> inputs;
  };

  static Tape collect(const Tensor& root) {
    Tape tape;
    std::unordered_set<const detail::Node*> seen;
    std::vector<std::shared_ptr<detail::Node>> stack{root.node_};
    while (!stack.empty()) {
      auto node = std::move(stack.back());
      stack.pop_back();
      if (!node || !node->requires_grad || !seen.insert(node.get()).second) continue;
      for (const auto& in : node->inputs) stack.push_back(in);
      tape.nodes_.push_back(std::move(node));
    }
    std::sort(tape.nodes_.begin(), tape.nodes_.end(),
              [](const auto& a, const auto& b) { return a->position < b->position; });
    return tape;
  }

  std::vector<Entry> entries() const {
    std::vector<Entry> out;
    for (const auto& n : nodes_) {
      if (n->inputs.empty()) continue;
      Entry e{n->op, n->position, {}};
      for (const auto& in : n->inputs) e.inputs.push_back(in->position);
      out.push_back(std::move(e));
    }
    return out;
  }

  bool topologically_ordered() const {
    for (const Entry& e : entries())
      for (std::uint64_t in : e.inputs)
        if (in >= e.output) return false;
    return true;
  }

  // Runs backward rules in reverse recording order. Non-leaf gradients are
  // reset first so repeated calls accumulate only into leaves.
  void run(const Tensor& root) const {
    for (const auto& n : nodes_)
      if (!n->inputs.empty()) std::fill(n->grad.begin(), n->grad.end(), 0.0);
    detail::Node& r = *root.node_;
    r.ensure_grad();
    r.grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      detail::Node& n = **it;
      if (n.backward) {
        n.ensure_grad();
        n.backward(n);
      }
    }
  }

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

inline void backward(const Tensor& root) {
  if (root.numel() != 1)
    throw ContractError("backward() requires a scalar root, got shape " + to_string(root.shape()));
  if (!root.requires_grad()) return;
  Tape::collect(root).run(root);
}

inline void zero_grad(std::span<Tensor> params) {
  for (Tensor& p : params) p.zero_grad();
}

// Maximum over all coordinates of every tensor in `wrt` of
//   |analytic - central difference| / max(1, |analytic|).
// `wrt` must be leaves with requires_grad; their values are restored.
inline double grad_check(const std::function<Tensor()>& f, std::span<Tensor> wrt,
                         double step = 1e-5) {
  if (!(step > 0.0 && step <= 1e-3))
    throw ParameterError("grad_check step must lie in (0, 1e-3], got " + std::to_string(step));
  for (Tensor& t : wrt) {
    if (!t.is_leaf() || !t.requires_grad())
      throw ContractError("grad_check: every checked tensor must be a leaf with requires_grad");
    t.zero_grad();
  }
  backward(f());
  double worst = 0.0;
  for (Tensor& t : wrt) {
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    auto values = t.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      double up, down;
      {
        NoGradGuard guard;
        values[i] = saved + step;
        up = f().item();
        values[i] = saved - step;
        down = f().item();
      }
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

inline double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> wrt,
                         double step = 1e-5) {
  return grad_check(f, std::span<Tensor>(wrt), step);
}

// Single-input convenience: differentiates f at a copy of `point`.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                         double step = 1e-5) {
  Tensor x = Tensor::from(point.shape(), point.to_vector(), true);
  std::vector<Tensor> wrt{x};
  return grad_check([&] { return f(x); }, std::span<Tensor>(wrt), step);
}

}  // namespace focalpyr
