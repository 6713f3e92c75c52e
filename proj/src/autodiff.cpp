// SPDX-License-Identifier: Apache-2.0

#include "dctvae/autodiff.hpp"

#include <stdexcept>

namespace dctvae {

template <class T>
Parameter<T>& ParameterStore<T>::add(std::string name, Tensor<T> init) {
  if (find(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
  params_.push_back(std::make_unique<Parameter<T>>(std::move(name), std::move(init)));
  return *params_.back();
}

template <class T>
Parameter<T>* ParameterStore<T>::find(std::string_view name) {
  for (auto& p : params_)
    if (p->name() == name) return p.get();
  return nullptr;
}

template <class T>
const Parameter<T>* ParameterStore<T>::find(std::string_view name) const {
  for (const auto& p : params_)
    if (p->name() == name) return p.get();
  return nullptr;
}

template <class T>
std::vector<Parameter<T>*> ParameterStore<T>::all() {
  std::vector<Parameter<T>*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

template <class T>
std::vector<const Parameter<T>*> ParameterStore<T>::all() const {
  std::vector<const Parameter<T>*> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

template <class T>
std::size_t ParameterStore<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value().size();
  return n;
}

template <class T>
void ParameterStore<T>::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

template <class T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size()) - 1;
  check_finite(id);
  return {this, id};
}

template <class T>
Var<T> Tape<T>::parameter(Parameter<T>& p) {
  Node n;
  n.param = &p;
  n.needs_grad = true;
  n.forward = [&p](Tape& t, int self) { t.mutable_value(self) = p.value(); };
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size()) - 1;
  nodes_.back().forward(*this, id);
  check_finite(id);
  return {this, id};
}

template <class T>
Var<T> Tape<T>::record(const std::vector<int>& inputs, Fn forward, Fn backward) {
  Node n;
  for (int in : inputs) n.needs_grad = n.needs_grad || needs_grad(in);
  n.forward = std::move(forward);
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size()) - 1;
  nodes_.back().forward(*this, id);
  check_finite(id);
  return {this, id};
}

template <class T>
Tensor<T>& Tape<T>::grad(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape()) n.grad = Tensor<T>(n.value.shape());
  return n.grad;
}

template <class T>
void Tape<T>::backward(Var<T> out) {
  if (out.tape != this) throw std::invalid_argument("backward: variable belongs to another tape");
  if (value(out.id).size() != 1)
    throw std::invalid_argument("backward: output must be a scalar, got shape " + shape_str(value(out.id).shape()));
  for (auto& n : nodes_) n.grad = Tensor<T>();
  grad(out.id)[0] = T(1);
  for (int id = out.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.param) {
      T* dst = n.param->grad().data();
      const T* src = n.grad.data();
      for (std::size_t i = 0; i < n.grad.size(); ++i) dst[i] += src[i];
    } else if (n.backward) {
      n.backward(*this, id);
    }
  }
}

template <class T>
void Tape<T>::replay() {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].forward) {
      nodes_[i].forward(*this, static_cast<int>(i));
      check_finite(static_cast<int>(i));
    }
  }
}

template <class T>
void Tape<T>::check_finite(int id) const {
  if (!value(id).all_finite())
    throw NonFiniteError("non-finite value in node " + std::to_string(id) + " with shape " +
                         shape_str(value(id).shape()));
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace dctvae
