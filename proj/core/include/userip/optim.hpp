#pragma once

#include <cmath>
#include <unordered_map>
#include <vector>

#include "userip/tensor.hpp"

namespace userip {

// Adaptive-moment optimizer over leaf tensors. State is keyed by node
// identity, so the same instance can be reused across steps.
class Adam {
 public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

  // applies one update from the accumulated gradients, then clears them
  void step(std::vector<Tensor>& params) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, t_);
    double bc2 = 1.0 - std::pow(beta2_, t_);
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      auto& state = states_[p.node()];
      auto g = p.grad();
      if (state.m.size() != g.size()) {
        state.m.assign(g.size(), 0.0);
        state.v.assign(g.size(), 0.0);
      }
      auto vals = p.values_mut();
      for (size_t i = 0; i < g.size(); ++i) {
        state.m[i] = beta1_ * state.m[i] + (1.0 - beta1_) * g[i];
        state.v[i] = beta2_ * state.v[i] + (1.0 - beta2_) * g[i] * g[i];
        double mhat = state.m[i] / bc1;
        double vhat = state.v[i] / bc2;
        vals[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
      p.zero_grad();
    }
  }

 private:
  struct State {
    std::vector<double> m, v;
  };
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::unordered_map<detail::TensorNode*, State> states_;
};

}  // namespace userip
