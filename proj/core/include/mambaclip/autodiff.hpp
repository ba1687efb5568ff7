#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "mambaclip/tensor.hpp"

namespace mambaclip {

/// Named parameter tensors, iterated in name order. Flattening concatenates
/// entries in that order.
template <class T>
class ParamSet {
 public:
  using Map = std::map<std::string, Tensor<T>, std::less<>>;

  void set(std::string name, Tensor<T> value) { entries_.insert_or_assign(std::move(name), std::move(value)); }
  void add(std::string name, Tensor<T> value) {
    if (entries_.contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    entries_.emplace(std::move(name), std::move(value));
  }

  bool contains(std::string_view name) const { return entries_.find(name) != entries_.end(); }
  const Tensor<T>& at(std::string_view name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::out_of_range("no parameter named '" + std::string(name) + "'");
    return it->second;
  }
  const Tensor<T>& operator[](std::string_view name) const { return at(name); }

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  std::size_t flat_dim() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.numel();
    return n;
  }

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::vector<T> flatten() const {
    std::vector<T> flat;
    flat.reserve(flat_dim());
    for (const auto& [_, t] : entries_) flat.insert(flat.end(), t.data().begin(), t.data().end());
    return flat;
  }

  /// Same names and shapes as `*this`, values taken from `flat`.
  ParamSet unflatten(std::span<const T> flat) const {
    if (flat.size() != flat_dim()) {
      throw ShapeError("unflatten: expected " + std::to_string(flat_dim()) + " values, got " +
                       std::to_string(flat.size()));
    }
    ParamSet out;
    std::size_t offset = 0;
    for (const auto& [name, t] : entries_) {
      out.entries_.emplace(name, Tensor<T>(t.shape(), std::vector<T>(flat.begin() + offset,
                                                                      flat.begin() + offset + t.numel())));
      offset += t.numel();
    }
    return out;
  }

 private:
  Map entries_;
};

/// Every entry of `params` registered as a leaf on `tape`.
template <class T>
ParamSet<T> watch(Tape<T>& tape, const ParamSet<T>& params) {
  ParamSet<T> out;
  for (const auto& [name, t] : params) out.add(name, tape.watch(t));
  return out;
}

/// d(loss)/d(param) for every entry of `params`. Entries that are not on the
/// loss's tape, or that the loss does not reach, get exact zeros.
template <class T>
ParamSet<T> gradients(const Tensor<T>& loss, const ParamSet<T>& params) {
  if (loss.numel() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  std::vector<std::vector<T>> grads;
  if (loss.on_tape()) grads = loss.tape()->backward(loss);
  ParamSet<T> out;
  for (const auto& [name, t] : params) {
    if (t.tape() == loss.tape() && t.on_tape() && !grads[*t.tape_id()].empty()) {
      out.add(name, Tensor<T>(t.shape(), grads[*t.tape_id()]));
    } else {
      out.add(name, Tensor<T>::zeros(t.shape()));
    }
  }
  return out;
}

template <class To, class From>
ParamSet<To> param_cast(const ParamSet<From>& params) {
  ParamSet<To> out;
  for (const auto& [name, t] : params) out.add(name, tensor_cast<To>(t));
  return out;
}

/// Loss value and flat gradient of `loss_fn` at `params`.
/// `loss_fn` is called with a tape-watched ParamSet<T> and returns a scalar.
template <class T, class LossFn>
std::pair<T, std::vector<T>> value_and_gradient(LossFn&& loss_fn, const ParamSet<T>& params) {
  Tape<T> tape;
  const ParamSet<T> watched = watch(tape, params);
  const Tensor<T> loss = loss_fn(watched);
  return {loss.item(), gradients(loss, watched).flatten()};
}

/// Hessian-vector product H·v of `loss_fn` at `params`.
///
/// Forward-over-reverse: parameters are lifted to dual numbers with tangent v
/// and the reverse sweep runs on the dual tape, so each gradient entry's
/// tangent is the directional derivative of the gradient along v. `loss_fn`
/// must be generic: it is called with a watched ParamSet<Dual>.
template <class LossFn>
std::vector<double> hvp(LossFn&& loss_fn, const ParamSet<double>& params, std::span<const double> v) {
  if (v.size() != params.flat_dim()) {
    throw ShapeError("hvp: direction has " + std::to_string(v.size()) + " entries, parameters have " +
                     std::to_string(params.flat_dim()));
  }
  ParamSet<Dual> lifted;
  std::size_t offset = 0;
  for (const auto& [name, t] : params) {
    std::vector<Dual> d(t.numel());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = Dual(t[i], v[offset + i]);
    offset += t.numel();
    lifted.add(name, Tensor<Dual>(t.shape(), std::move(d)));
  }
  Tape<Dual> tape;
  const ParamSet<Dual> watched = watch(tape, lifted);
  const Tensor<Dual> loss = loss_fn(watched);
  const std::vector<Dual> g = gradients(loss, watched).flatten();
  std::vector<double> hv(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) hv[i] = g[i].tangent;
  return hv;
}

}  // namespace mambaclip
