// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode differentiation. Every primitive records a forward
// and a backward closure; the tape can be replayed to recompute all values
// from the current parameter values.

#pragma once

#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "dctvae/tensor.hpp"

namespace dctvae {

template <class T>
class Parameter {
 public:
  Parameter(std::string name, Tensor<T> value)
      : name_(std::move(name)), value_(std::move(value)), grad_(value_.shape()) {}

  const std::string& name() const { return name_; }
  Tensor<T>& value() { return value_; }
  const Tensor<T>& value() const { return value_; }
  Tensor<T>& grad() { return grad_; }
  const Tensor<T>& grad() const { return grad_; }
  void zero_grad() { grad_.fill(T(0)); }

 private:
  std::string name_;
  Tensor<T> value_;
  Tensor<T> grad_;
};

// Owns parameters in insertion order; addresses stay stable.
template <class T>
class ParameterStore {
 public:
  Parameter<T>& add(std::string name, Tensor<T> init);
  Parameter<T>* find(std::string_view name);
  const Parameter<T>* find(std::string_view name) const;
  std::vector<Parameter<T>*> all();
  std::vector<const Parameter<T>*> all() const;
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
};

template <class T>
class Tape;

template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return tape->value(id).shape(); }
  int dim(int i) const { return shape().at(static_cast<std::size_t>(i)); }
};

template <class T>
class Tape {
 public:
  using Fn = std::function<void(Tape&, int)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  Var<T> parameter(Parameter<T>& p);

  // Appends a node, evaluates `forward` once and checks the result is finite.
  // `forward` must write the node value via mutable_value(self); `backward`
  // reads grad(self) and accumulates into grad(input) for inputs that need it.
  Var<T> record(const std::vector<int>& inputs, Fn forward, Fn backward);

  const Tensor<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  Tensor<T>& mutable_value(int id) { return nodes_[static_cast<std::size_t>(id)].value; }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  // Zero-initialised on first access.
  Tensor<T>& grad(int id);

  // Seeds d(out)/d(out) = 1 and accumulates into Parameter::grad().
  void backward(Var<T> out);

  // Recomputes every node value in recording order from current parameters.
  void replay();

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    Fn forward;
    Fn backward;
    Parameter<T>* param = nullptr;
    bool needs_grad = false;
  };
  void check_finite(int id) const;

  std::vector<Node> nodes_;
};

}  // namespace dctvae
