#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "tpn/autodiff.hpp"
#include "tpn/error.hpp"
#include "tpn/tensor.hpp"

namespace tpn {

template <std::floating_point T>
struct BasicNamedTensor {
  std::string name;
  BasicTensor<T> value;
};

/// Ordered, named trainable tensors (the embedding parameters theta).
template <std::floating_point T>
class BasicParameters {
 public:
  void add(std::string name, BasicTensor<T> value) {
    if (find(name)) throw ShapeError("parameters: duplicate name '" + name + "'");
    entries_.push_back({std::move(name), std::move(value)});
  }

  const BasicTensor<T>* find(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return &e.value;
    return nullptr;
  }

  const BasicTensor<T>& at(const std::string& name) const {
    if (auto* t = find(name)) return *t;
    throw ShapeError("parameters: unknown name '" + name + "'");
  }

  std::vector<BasicNamedTensor<T>>& entries() noexcept { return entries_; }
  const std::vector<BasicNamedTensor<T>>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  friend bool operator==(const BasicParameters& a, const BasicParameters& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i)
      if (a.entries_[i].name != b.entries_[i].name || !(a.entries_[i].value == b.entries_[i].value)) return false;
    return true;
  }

 private:
  std::vector<BasicNamedTensor<T>> entries_;
};

using Parameters = BasicParameters<double>;

struct AdamHyper {
  double lr = 0.0002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0005;
};

template <std::floating_point T>
struct BasicAdamState {
  std::map<std::string, BasicTensor<T>> first_moment;
  std::map<std::string, BasicTensor<T>> second_moment;
  long step = 0;
};

using AdamState = BasicAdamState<double>;

/// One bias-corrected Adam update with decoupled weight decay:
///   theta -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * theta
/// Parameters absent from `grads` are treated as having a zero gradient.
/// Nothing is modified if any gradient is non-finite.
template <std::floating_point T>
void adam_step(BasicParameters<T>& params, const BasicGradients<T>& grads, BasicAdamState<T>& state,
               const AdamHyper& hyper) {
  for (const auto& e : params.entries()) {
    const BasicTensor<T>* g = grads.find(e.name);
    if (!g) continue;
    if (g->shape() != e.value.shape()) {
      throw ShapeError("adam_step: gradient for '" + e.name + "' has shape " + shape_string(g->shape()));
    }
    if (!g->all_finite()) throw NumericalError("adam_step: non-finite gradient for '" + e.name + "'", e.name);
  }

  state.step += 1;
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(hyper.beta1), b2 = static_cast<T>(hyper.beta2);

  for (auto& e : params.entries()) {
    auto& m = state.first_moment.try_emplace(e.name, e.value.shape()).first->second;
    auto& v = state.second_moment.try_emplace(e.name, e.value.shape()).first->second;
    const BasicTensor<T>* g = grads.find(e.name);
    auto theta = e.value.data();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const T gi = g ? (*g)[i] : T{0};
      m[i] = b1 * m[i] + (T{1} - b1) * gi;
      v[i] = b2 * v[i] + (T{1} - b2) * gi * gi;
      const double m_hat = static_cast<double>(m[i]) / bc1;
      const double v_hat = static_cast<double>(v[i]) / bc2;
      const double update = hyper.lr * m_hat / (std::sqrt(v_hat) + hyper.eps) +
                            hyper.lr * hyper.weight_decay * static_cast<double>(theta[i]);
      theta[i] = static_cast<T>(static_cast<double>(theta[i]) - update);
    }
  }
}

}  // namespace tpn
