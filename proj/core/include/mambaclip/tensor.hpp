#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mambaclip/dual.hpp"

namespace mambaclip {

using Shape = std::vector<std::size_t>;

inline constexpr std::size_t kMaxRank = 5;

/// Raised when operand shapes violate a primitive's shape rule.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class DType : std::uint8_t { f32 = 1, f64 = 2, u8 = 3 };

template <class T>
struct dtype_of;
template <>
struct dtype_of<float> {
  static constexpr DType value = DType::f32;
};
template <>
struct dtype_of<double> {
  static constexpr DType value = DType::f64;
};
template <>
struct dtype_of<std::uint8_t> {
  static constexpr DType value = DType::u8;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <class T>
class Tape;

/// Dense row-major array. The buffer is immutable and shared between copies,
/// so copying a Tensor is cheap and tape-less tensors are plain values.
template <class T>
class Tensor {
 public:
  using value_type = T;

  /// Rank-0 zero.
  Tensor() : Tensor(Shape{}, std::vector<T>(1, T(0))) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)) {
    if (shape_.size() > kMaxRank) {
      throw ShapeError("tensor rank " + std::to_string(shape_.size()) + " exceeds " +
                       std::to_string(kMaxRank));
    }
    for (std::size_t d : shape_) {
      if (d == 0) throw ShapeError("zero-sized dimension in shape " + shape_str(shape_));
    }
    if (shape_numel(shape_) != data.size()) {
      throw ShapeError("shape " + shape_str(shape_) + " needs " +
                       std::to_string(shape_numel(shape_)) + " elements, got " +
                       std::to_string(data.size()));
    }
    data_ = std::make_shared<const std::vector<T>>(std::move(data));
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }
  static Tensor full(Shape shape, T value) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value));
  }
  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return data_->size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
      throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
    }
    return shape_[axis];
  }

  std::span<const T> data() const noexcept { return {data_->data(), data_->size()}; }
  const T& operator[](std::size_t i) const { return (*data_)[i]; }
  const T& item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape_));
    return (*data_)[0];
  }
  std::vector<T> to_vector() const { return *data_; }
  const std::shared_ptr<const std::vector<T>>& buffer() const noexcept { return data_; }

  Tape<T>* tape() const noexcept { return tape_; }
  std::optional<std::size_t> tape_id() const noexcept {
    if (tape_ == nullptr) return std::nullopt;
    return node_;
  }
  bool on_tape() const noexcept { return tape_ != nullptr; }

  /// Same value, no tape linkage.
  Tensor detached() const {
    Tensor t = *this;
    t.tape_ = nullptr;
    t.node_ = 0;
    return t;
  }

 private:
  friend class Tape<T>;
  Shape shape_;
  std::shared_ptr<const std::vector<T>> data_;
  Tape<T>* tape_ = nullptr;
  std::size_t node_ = 0;
};

enum class Primitive : std::uint8_t {
  leaf,
  matmul,
  add,
  mul,
  sub,
  div,
  exp,
  log,
  softplus,
  silu,
  tanh,
  power,
  sum,
  mean,
  max,
  reshape,
  transpose,
  concat,
  slice,
  softmax,
  layernorm,
  embedding,
  depthwise_conv1d,
  l2_normalize,
  cross_entropy,
  gather,
  space_to_depth,
  clamp_max,
  selective_scan,
};

std::string_view primitive_name(Primitive p);

/// Hands a backward rule the gradient buffers of its inputs. An empty span
/// means that input is not on the tape and needs no gradient.
template <class T>
class GradSink {
 public:
  GradSink(std::vector<std::vector<T>>& grads, std::span<const std::ptrdiff_t> inputs,
           std::span<const std::size_t> sizes)
      : grads_(grads), inputs_(inputs), sizes_(sizes) {}

  std::span<T> operator()(std::size_t input) {
    const std::ptrdiff_t id = inputs_[input];
    if (id < 0) return {};
    auto& g = grads_[static_cast<std::size_t>(id)];
    if (g.empty()) g.assign(sizes_[input], T(0));
    return {g.data(), g.size()};
  }

 private:
  std::vector<std::vector<T>>& grads_;
  std::span<const std::ptrdiff_t> inputs_;
  std::span<const std::size_t> sizes_;
};

/// Reverse-mode gradient tape. Nodes are appended in execution order, so
/// every node's inputs precede it. Single-threaded; tensors recorded on a
/// tape keep a pointer to it and must not outlive it.
template <class T>
class Tape {
 public:
  using Backward = std::function<void(std::span<const T> grad_out, GradSink<T>& sink)>;

  struct Node {
    Primitive op;
    std::vector<std::ptrdiff_t> inputs;
    std::vector<std::size_t> input_sizes;
    std::size_t size;
    Backward backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers `value` as a leaf and returns a tape-linked copy.
  Tensor<T> watch(const Tensor<T>& value) {
    nodes_.push_back(Node{Primitive::leaf, {}, {}, value.numel(), {}});
    Tensor<T> out = value;
    out.tape_ = this;
    out.node_ = nodes_.size() - 1;
    return out;
  }

  Tensor<T> record(Primitive op, std::span<const Tensor<T>* const> inputs, Tensor<T> output,
                   Backward backward) {
    Node node{op, {}, {}, output.numel(), std::move(backward)};
    node.inputs.reserve(inputs.size());
    for (const Tensor<T>* in : inputs) {
      node.inputs.push_back(in->tape_ == this ? static_cast<std::ptrdiff_t>(in->node_) : -1);
      node.input_sizes.push_back(in->numel());
    }
    nodes_.push_back(std::move(node));
    output.tape_ = this;
    output.node_ = nodes_.size() - 1;
    return output;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }

  /// Propagates d(loss)/d(node) for every node. Entries for nodes the loss
  /// does not depend on stay empty.
  std::vector<std::vector<T>> backward(const Tensor<T>& loss) const {
    if (loss.numel() != 1) {
      throw ShapeError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (loss.tape() != this) throw std::invalid_argument("loss is not recorded on this tape");
    std::vector<std::vector<T>> grads(nodes_.size());
    const std::size_t root = *loss.tape_id();
    grads[root].assign(1, T(1));
    for (std::size_t i = root + 1; i-- > 0;) {
      const Node& n = nodes_[i];
      if (grads[i].empty() || n.op == Primitive::leaf) continue;
      GradSink<T> sink(grads, n.inputs, n.input_sizes);
      n.backward(std::span<const T>(grads[i]), sink);
      std::vector<T>().swap(grads[i]);
    }
    return grads;
  }

 private:
  std::vector<Node> nodes_;
};

/// Records `output` on the common tape of `inputs`, if any input is taped.
/// Inputs on two different tapes are rejected.
template <class T>
Tensor<T> record_op(Primitive op, std::initializer_list<const Tensor<T>*> inputs, Tensor<T> output,
                    typename Tape<T>::Backward backward) {
  Tape<T>* tape = nullptr;
  for (const Tensor<T>* in : inputs) {
    if (in->tape() == nullptr) continue;
    if (tape != nullptr && tape != in->tape()) {
      throw std::invalid_argument(std::string(primitive_name(op)) + ": inputs on different tapes");
    }
    tape = in->tape();
  }
  if (tape == nullptr) return output;
  return tape->record(op, std::span<const Tensor<T>* const>(inputs.begin(), inputs.size()),
                      std::move(output), std::move(backward));
}

template <class T>
Tensor<T> record_op(Primitive op, std::span<const Tensor<T>* const> inputs, Tensor<T> output,
                    typename Tape<T>::Backward backward) {
  Tape<T>* tape = nullptr;
  for (const Tensor<T>* in : inputs) {
    if (in->tape() == nullptr) continue;
    if (tape != nullptr && tape != in->tape()) {
      throw std::invalid_argument(std::string(primitive_name(op)) + ": inputs on different tapes");
    }
    tape = in->tape();
  }
  if (tape == nullptr) return output;
  return tape->record(op, inputs, std::move(output), std::move(backward));
}

/// Converts element type; drops tape linkage.
template <class To, class From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  std::vector<To> out(t.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<To>(value_of(t[i]));
  return Tensor<To>(t.shape(), std::move(out));
}

}  // namespace mambaclip
