#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "umc/autodiff.hpp"
#include "umc/rng.hpp"
#include "umc/tensor.hpp"

namespace umc::nn {

// Named parameter registry; models register their weights here so the
// optimizer and checkpoint code can walk them uniformly.
template <typename T>
struct ParamStore {
  std::vector<std::pair<std::string, ad::Var<T>>> entries;

  ad::Var<T> add(const std::string& name, Tensor<T> init) {
    for (const auto& [n, v] : entries)
      if (n == name) throw std::invalid_argument("param store: duplicate name " + name);
    auto v = ad::make_var(std::move(init), true);
    entries.push_back({name, v});
    return v;
  }

  ad::Var<T> find(const std::string& name) const {
    for (const auto& [n, v] : entries)
      if (n == name) return v;
    throw std::invalid_argument("param store: unknown name " + name);
  }

  void zero_grad() {
    for (auto& [n, v] : entries) v->zero_grad();
  }

  std::size_t total_size() const {
    std::size_t s = 0;
    for (const auto& [n, v] : entries) s += v->value.size();
    return s;
  }
};

// ---------------------------------------------------------------- init

template <typename T>
inline Tensor<T> normal_init(std::vector<std::size_t> shape, double stddev, Rng& rng) {
  Tensor<T> t(shape);
  for (auto& v : t.vec()) v = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

// He initialization for convolutions feeding ReLU-family activations
template <typename T>
inline Tensor<T> kaiming_init(std::vector<std::size_t> shape, std::size_t fan_in, Rng& rng) {
  return normal_init<T>(std::move(shape), std::sqrt(2.0 / static_cast<double>(fan_in)), rng);
}

// ---------------------------------------------------------------- layers

template <typename T>
struct Conv2d {
  ad::Var<T> w, b;
  std::size_t stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(ParamStore<T>& ps, const std::string& name, std::size_t cin, std::size_t cout,
         std::size_t k, std::size_t stride_, std::size_t pad_, Rng& rng, double init_std = -1) {
    stride = stride_;
    pad = pad_;
    const std::size_t fan_in = cin * k * k;
    Tensor<T> wi = init_std > 0 ? normal_init<T>({cout, cin, k, k}, init_std, rng)
                                : kaiming_init<T>({cout, cin, k, k}, fan_in, rng);
    w = ps.add(name + ".w", std::move(wi));
    b = ps.add(name + ".b", Tensor<T>({cout}));
  }

  ad::Var<T> operator()(const ad::Var<T>& x) const { return ad::conv2d(x, w, b, stride, pad); }
};

template <typename T>
struct ConvTranspose2d {
  ad::Var<T> w, b;
  std::size_t stride = 1, pad = 0, out_pad = 0;

  ConvTranspose2d() = default;
  ConvTranspose2d(ParamStore<T>& ps, const std::string& name, std::size_t cin, std::size_t cout,
                  std::size_t k, std::size_t stride_, std::size_t pad_, std::size_t out_pad_,
                  Rng& rng) {
    stride = stride_;
    pad = pad_;
    out_pad = out_pad_;
    const std::size_t fan_in = cin * k * k;
    w = ps.add(name + ".w", kaiming_init<T>({cin, cout, k, k}, fan_in, rng));
    b = ps.add(name + ".b", Tensor<T>({cout}));
  }

  ad::Var<T> operator()(const ad::Var<T>& x) const {
    return ad::conv_transpose2d(x, w, b, stride, pad, out_pad);
  }
};

template <typename T>
struct InstanceNorm {
  ad::Var<T> gamma, beta;

  InstanceNorm() = default;
  InstanceNorm(ParamStore<T>& ps, const std::string& name, std::size_t c) {
    gamma = ps.add(name + ".g", Tensor<T>({c}, T(1)));
    beta = ps.add(name + ".b", Tensor<T>({c}));
  }

  ad::Var<T> operator()(const ad::Var<T>& x) const { return ad::instance_norm(x, gamma, beta); }
};

template <typename T>
struct BatchNorm2d {
  ad::Var<T> gamma, beta;
  std::shared_ptr<Tensor<T>> running_mean, running_var;

  BatchNorm2d() = default;
  BatchNorm2d(ParamStore<T>& ps, const std::string& name, std::size_t c) {
    gamma = ps.add(name + ".g", Tensor<T>({c}, T(1)));
    beta = ps.add(name + ".b", Tensor<T>({c}));
    running_mean = std::make_shared<Tensor<T>>(std::vector<std::size_t>{c});
    running_var = std::make_shared<Tensor<T>>(std::vector<std::size_t>{c}, T(1));
  }

  ad::Var<T> operator()(const ad::Var<T>& x, bool training) const {
    return ad::batch_norm2d(x, gamma, beta, *running_mean, *running_var, training);
  }
};

template <typename T>
struct Linear {
  ad::Var<T> w, b;

  Linear() = default;
  Linear(ParamStore<T>& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
         bool zero_init = false) {
    Tensor<T> wi = zero_init ? Tensor<T>({out, in})
                             : normal_init<T>({out, in}, std::sqrt(1.0 / static_cast<double>(in)), rng);
    w = ps.add(name + ".w", std::move(wi));
    b = ps.add(name + ".b", Tensor<T>({out}));
  }

  ad::Var<T> operator()(const ad::Var<T>& x) const { return ad::linear(x, w, b); }
};

// 1-D convolution over (B, C, L) via the 2-D kernel machinery (1 x k kernels).
template <typename T>
struct Conv1d {
  ad::Var<T> w, b;
  std::size_t stride = 1, pad = 0;

  Conv1d() = default;
  Conv1d(ParamStore<T>& ps, const std::string& name, std::size_t cin, std::size_t cout,
         std::size_t k, std::size_t stride_, std::size_t pad_, Rng& rng) {
    stride = stride_;
    pad = pad_;
    w = ps.add(name + ".w", kaiming_init<T>({cout, cin, 1, k}, cin * k, rng));
    b = ps.add(name + ".b", Tensor<T>({cout}));
  }

  ad::Var<T> operator()(const ad::Var<T>& x) const {
    const auto& s = x->value.shape();
    if (s.size() != 3) throw std::invalid_argument("conv1d: rank-3 input expected");
    auto x4 = ad::reshape(x, {s[0], s[1], 1, s[2]});
    auto y = ad::conv2d(x4, w, b, stride, 0, pad);
    const auto& ys = y->value.shape();
    return ad::reshape(y, {ys[0], ys[1], ys[3]});
  }
};

}  // namespace umc::nn
