// Dense row-major tensors and a define-by-run reverse-mode tape.
//
// Every differentiable operation is a free function taking `Var<Scalar>`
// handles. When any input is recorded on a `Tape` and requires a gradient, the
// result is recorded on the same tape together with a closure that maps the
// output gradient to input gradients. Without a tape the same functions run as
// plain forward computations and intermediates are released eagerly.
#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace intrack {

using Index = std::ptrdiff_t;
using Shape = std::vector<Index>;

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

class DimensionError : public std::invalid_argument {
 public:
  DimensionError(const std::string& what, const Shape& a, const Shape& b)
      : std::invalid_argument(what + ": " + to_string(a) + " vs " + to_string(b)) {}
  explicit DimensionError(const std::string& what) : std::invalid_argument(what) {}
};

class StaleTapeError : public std::logic_error {
 public:
  StaleTapeError() : std::logic_error("backward already ran on this tape; re-record the forward pass") {}
};

template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)), data_(Array::Constant(shape_size(shape_), fill)) {}
  Tensor(Shape shape, Array data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size())
      throw DimensionError("buffer length does not match shape " + to_string(shape_));
  }

  /// Tensor with unspecified contents, for outputs that are fully overwritten.
  static Tensor uninitialized(Shape shape) {
    Tensor t;
    t.data_.resize(shape_size(shape));
    t.shape_ = std::move(shape);
    return t;
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Array& array() { return data_; }
  const Array& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  template <typename... I>
  Scalar& at(I... idx) { return data_[offset({static_cast<Index>(idx)...})]; }
  template <typename... I>
  Scalar at(I... idx) const { return data_[offset({static_cast<Index>(idx)...})]; }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  bool all_finite() const { return data_.isFinite().all(); }

 private:
  Index offset(std::initializer_list<Index> idx) const {
    Index off = 0;
    std::size_t axis = 0;
    for (Index i : idx) off = off * shape_[axis++] + i;
    return off;
  }

  Shape shape_;
  Array data_;
};

template <typename Scalar>
class Tape;

namespace detail {

template <typename Scalar>
struct Node {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  // Reads `grad` (and `value` if needed) and accumulates into the inputs.
  std::function<void(Node&)> backward;
  bool requires_grad = false;
  int id = -1;

  void accumulate(const Tensor<Scalar>& delta) {
    if (grad.empty()) grad = delta;
    else grad.array() += delta.array();
  }
  void accumulate(Tensor<Scalar>&& delta) {
    if (grad.empty()) grad = std::move(delta);
    else grad.array() += delta.array();
  }
  Tensor<Scalar>& grad_buffer() {
    if (grad.empty()) grad = Tensor<Scalar>(value.shape());
    return grad;
  }
};

}  // namespace detail

/// Handle to a value, optionally recorded on a tape.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  /// Untracked constant.
  explicit Var(Tensor<Scalar> value) : node_(std::make_shared<detail::Node<Scalar>>()) {
    node_->value = std::move(value);
  }

  const Tensor<Scalar>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  Index dim(int axis) const { return node_->value.dim(axis); }
  const typename Tensor<Scalar>::Array& array() const { return node_->value.array(); }
  Tape<Scalar>* tape() const { return tape_; }
  int id() const { return node_->id; }
  bool requires_grad() const { return node_->requires_grad; }
  bool valid() const { return static_cast<bool>(node_); }

  const std::shared_ptr<detail::Node<Scalar>>& node() const { return node_; }

 private:
  friend class Tape<Scalar>;
  Var(std::shared_ptr<detail::Node<Scalar>> node, Tape<Scalar>* tape)
      : node_(std::move(node)), tape_(tape) {}

  std::shared_ptr<detail::Node<Scalar>> node_;
  Tape<Scalar>* tape_ = nullptr;
};

/// Gradients of a scalar loss keyed by node id.
template <typename Scalar>
class Gradients {
 public:
  const Tensor<Scalar>& operator[](const Var<Scalar>& v) const { return at(v.id()); }
  const Tensor<Scalar>& at(int id) const {
    auto it = grads_.find(id);
    if (it == grads_.end()) throw std::out_of_range("no gradient recorded for node " + std::to_string(id));
    return it->second;
  }
  bool contains(const Var<Scalar>& v) const { return grads_.count(v.id()) > 0; }
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Tape<Scalar>;
  std::unordered_map<int, Tensor<Scalar>> grads_;
};

/// Ordered record of operations for one forward pass.
template <typename Scalar>
class Tape {
 public:
  using NodePtr = std::shared_ptr<detail::Node<Scalar>>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers a leaf (parameter or input).
  Var<Scalar> leaf(Tensor<Scalar> value, bool requires_grad = true) {
    auto node = std::make_shared<detail::Node<Scalar>>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    return push(std::move(node));
  }

  /// Records the result of an operation whose inputs are `inputs`.
  Var<Scalar> record(Tensor<Scalar> value, std::initializer_list<const Var<Scalar>*> inputs,
                     std::function<void(detail::Node<Scalar>&)> backward) {
    auto node = std::make_shared<detail::Node<Scalar>>();
    node->value = std::move(value);
    node->requires_grad = false;
    for (const auto* in : inputs) node->requires_grad |= in->valid() && in->requires_grad();
    if (node->requires_grad) node->backward = std::move(backward);
    return push(std::move(node));
  }

  std::size_t size() const { return nodes_.size(); }
  bool stale() const { return stale_; }

  /// Propagates d(loss)/d(node) to every node in reverse recording order.
  Gradients<Scalar> backward(const Var<Scalar>& loss) {
    if (stale_) throw StaleTapeError();
    if (loss.tape() != this) throw std::invalid_argument("loss is not recorded on this tape");
    if (loss.value().size() != 1) throw DimensionError("backward needs a scalar loss, got " + to_string(loss.shape()));
    stale_ = true;
    Gradients<Scalar> out;
    if (!loss.requires_grad()) return out;
    loss.node()->grad = Tensor<Scalar>(loss.shape(), Scalar(1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      auto& node = **it;
      if (node.grad.empty()) continue;
      if (node.backward) {
        node.backward(node);
        node.backward = nullptr;
        node.grad = Tensor<Scalar>();
        // Every consumer has run; drop the activation unless a handle still refers to it.
        if (it->use_count() == 1) node.value = Tensor<Scalar>();
      } else if (node.requires_grad) {
        out.grads_.emplace(node.id, std::move(node.grad));
      }
    }
    return out;
  }

 private:
  Var<Scalar> push(NodePtr node) {
    node->id = static_cast<int>(nodes_.size());
    nodes_.push_back(node);
    return Var<Scalar>(std::move(node), this);
  }

  std::vector<NodePtr> nodes_;
  bool stale_ = false;
};

namespace detail {

template <typename Scalar>
Tape<Scalar>* common_tape(std::initializer_list<const Var<Scalar>*> inputs) {
  Tape<Scalar>* tape = nullptr;
  for (const auto* in : inputs) {
    if (!in->valid()) continue;
    if (in->tape() == nullptr) continue;
    if (tape != nullptr && tape != in->tape())
      throw std::invalid_argument("operands are recorded on different tapes");
    tape = in->tape();
  }
  return tape;
}

/// Records `value` if any input is tracked; otherwise returns an untracked Var.
/// `make_backward` is only invoked when recording.
template <typename Scalar, typename MakeBackward>
Var<Scalar> emit(Tensor<Scalar> value, std::initializer_list<const Var<Scalar>*> inputs,
                 MakeBackward&& make_backward) {
  Tape<Scalar>* tape = common_tape(inputs);
  bool needs = false;
  for (const auto* in : inputs) needs |= in->valid() && in->requires_grad();
  if (tape == nullptr || !needs) return Var<Scalar>(std::move(value));
  return tape->record(std::move(value), inputs, make_backward());
}

}  // namespace detail

}  // namespace intrack
