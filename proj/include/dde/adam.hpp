#pragma once

#include <cmath>
#include <vector>

#include "dde/tensor.hpp"

namespace dde {

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long t = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

// Bias-corrected Adam. Non-finite gradients abort the step before any parameter changes.
inline void adam_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads, AdamState& st,
                      double lr) {
  if (params.size() != grads.size()) throw DimensionError("adam_step: params/grads count mismatch");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    require_same_shape(*params[i], grads[i], "adam_step");
    if (!grads[i].all_finite()) throw NumericError("adam_step: non-finite gradient for parameter " + std::to_string(i));
  }
  if (st.m.empty()) {
    for (auto* p : params) {
      st.m.emplace_back(p->shape(), 0.0);
      st.v.emplace_back(p->shape(), 0.0);
    }
  }
  if (st.m.size() != params.size()) throw ContractError("adam_step: optimizer state does not match parameters");
  ++st.t;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    Tensor& m = st.m[i];
    Tensor& v = st.v[i];
    const Tensor& g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * g[j];
      v[j] = st.beta2 * v[j] + (1.0 - st.beta2) * g[j] * g[j];
      p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + st.eps);
    }
  }
}

}  // namespace dde
