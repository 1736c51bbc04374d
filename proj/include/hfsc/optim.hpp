#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "hfsc/tensor.hpp"

namespace hfsc {

// Named trainable parameters in stable insertion order. Names are unique;
// the order defines checkpoint layout and optimizer state pairing.
template <typename T>
class ParamSet {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> t) {
    if (index_.count(name)) throw std::invalid_argument("ParamSet: duplicate parameter " + name);
    t.set_requires_grad(true);
    index_[name] = names_.size();
    names_.push_back(name);
    params_.push_back(std::move(t));
    return params_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("ParamSet: no parameter named " + name);
    return params_[it->second];
  }
  const Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("ParamSet: no parameter named " + name);
    return params_[it->second];
  }

  size_t size() const { return params_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  Tensor<T>& at(size_t i) { return params_[i]; }
  const Tensor<T>& at(size_t i) const { return params_[i]; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  int64_t count_values() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.numel();
    return n;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> params_;
  std::unordered_map<std::string, size_t> index_;
};

// Adam with bias-corrected moments.
template <typename T>
struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t step = 0;
  std::vector<std::vector<T>> m, v;  // parallel to the ParamSet

  void init(const ParamSet<T>& params) {
    m.assign(params.size(), {});
    v.assign(params.size(), {});
    for (size_t i = 0; i < params.size(); ++i) {
      m[i].assign(params.at(i).values().size(), T(0));
      v[i].assign(params.at(i).values().size(), T(0));
    }
    step = 0;
  }
};

template <typename T>
void adam_step(ParamSet<T>& params, AdamState<T>& st) {
  if (st.m.size() != params.size()) throw std::invalid_argument("adam_step: state not initialized");
  ++st.step;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = params.at(i);
    if (!p.has_grad())
      throw std::runtime_error("adam_step: parameter " + params.names()[i] +
                               " has no gradient; was it used in the forward pass?");
    auto& val = p.values();
    const auto& g = p.grad();
    auto& m = st.m[i];
    auto& v = st.v[i];
    for (size_t j = 0; j < val.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      m[j] = static_cast<T>(st.beta1 * m[j] + (1.0 - st.beta1) * gj);
      v[j] = static_cast<T>(st.beta2 * v[j] + (1.0 - st.beta2) * gj * gj);
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      val[j] -= static_cast<T>(st.lr * mhat / (std::sqrt(vhat) + st.eps));
    }
  }
}

}  // namespace hfsc
