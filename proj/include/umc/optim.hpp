#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "umc/nn.hpp"
#include "umc/tensor.hpp"

namespace umc::nn {

// Adam / AdamW over a ParamStore. weight_decay > 0 selects decoupled decay.
template <typename T>
class Adam {
 public:
  Adam() = default;
  Adam(ParamStore<T>& params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8, double weight_decay = 0.0)
      : params_(&params), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
    for (auto& [name, v] : params.entries) {
      m_.emplace_back(v->value.shape());
      v_.emplace_back(v->value.shape());
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  std::size_t step_count() const { return t_; }

  void step() {
    ++t_;
    const T bc1 = T(1) - static_cast<T>(std::pow(beta1_, t_));
    const T bc2 = T(1) - static_cast<T>(std::pow(beta2_, t_));
    for (std::size_t p = 0; p < params_->entries.size(); ++p) {
      auto& var = params_->entries[p].second;
      if (!var->grad.same_shape(var->value)) continue;  // never touched this step
      Tensor<T>& m = m_[p];
      Tensor<T>& v = v_[p];
      T* w = var->value.data();
      const T* g = var->grad.data();
      const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
      const T lr = static_cast<T>(lr_), eps = static_cast<T>(eps_), wd = static_cast<T>(wd_);
      for (std::size_t i = 0; i < var->value.size(); ++i) {
        m[i] = b1 * m[i] + (T(1) - b1) * g[i];
        v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
        const T mhat = m[i] / bc1;
        const T vhat = v[i] / bc2;
        w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        if (wd > T{}) w[i] -= lr * wd * w[i];
      }
    }
  }

  // moment tensors and step counter, for bit-deterministic resume
  std::vector<Tensor<T>>& moments_m() { return m_; }
  std::vector<Tensor<T>>& moments_v() { return v_; }
  std::size_t& step_counter() { return t_; }

 private:
  ParamStore<T>* params_ = nullptr;
  double lr_ = 1e-3, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8, wd_ = 0.0;
  std::size_t t_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

// Step-decay schedule: lr divided by `factor` every `every` epochs.
struct StepDecay {
  double base_lr = 5e-4;
  std::size_t every = 30;
  double factor = 10.0;

  double lr_at_epoch(std::size_t epoch) const {
    return base_lr / std::pow(factor, static_cast<double>(epoch / every));
  }
};

}  // namespace umc::nn
