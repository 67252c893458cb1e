#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "umc/tensor.hpp"

namespace umc::ad {

// Tape-free reverse-mode autodiff: ops build a shared_ptr graph, backward()
// topologically sorts reachable nodes and runs their closures in reverse.

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (!grad.same_shape(value)) grad = Tensor<T>(value.shape());
  }
  void zero_grad() {
    if (grad.same_shape(value)) grad.fill(T{});
  }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
inline Var<T> make_var(Tensor<T> value, bool requires_grad = false) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

template <typename T>
inline Var<T> constant(Tensor<T> value) { return make_var(std::move(value), false); }

// Cuts the graph: same value, no parents.
template <typename T>
inline Var<T> detach(const Var<T>& v) { return make_var(v->value, false); }

template <typename T>
inline Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents,
                      std::function<void(Node<T>&)> backward_fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->backward_fn = std::move(backward_fn);
  return n;
}

template <typename T>
inline void backward(const Var<T>& root) {
  if (root->value.size() != 1)
    throw std::invalid_argument("backward: root must be scalar, got " + root->value.shape_str());

  // DFS postorder = reverse topological order when walked backwards
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node<T>* p = n->parents[i++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (Node<T>* n : order) n->ensure_grad();
  root->grad.fill(T{});
  root->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

// ---------------------------------------------------------------- elementwise

template <typename T>
inline Var<T> add(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a->value, b->value, "add");
  Tensor<T> out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b->value[i];
  return make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
    if (a->requires_grad) {
      a->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) a->grad[i] += n.grad[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) b->grad[i] += n.grad[i];
    }
  });
}

template <typename T>
inline Var<T> sub(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a->value, b->value, "sub");
  Tensor<T> out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b->value[i];
  return make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
    if (a->requires_grad) {
      a->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) a->grad[i] += n.grad[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) b->grad[i] -= n.grad[i];
    }
  });
}

template <typename T>
inline Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a->value;
  for (auto& v : out.vec()) v *= s;
  return make_op<T>(std::move(out), {a}, [a, s](Node<T>& n) {
    a->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) a->grad[i] += s * n.grad[i];
  });
}

template <typename T>
inline Var<T> add_const(const Var<T>& a, T c) {
  Tensor<T> out = a->value;
  for (auto& v : out.vec()) v += c;
  return make_op<T>(std::move(out), {a}, [a](Node<T>& n) {
    a->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) a->grad[i] += n.grad[i];
  });
}

// Keeps rows [0, h) x [0, w) of the spatial axes.
template <typename T>
inline Var<T> crop2d(const Var<T>& x, std::size_t h, std::size_t w) {
  const auto& s = x->value.shape();
  if (s.size() != 4) throw std::invalid_argument("crop2d: rank-4 input expected");
  const std::size_t B = s[0], C = s[1], H = s[2], W = s[3];
  if (h > H || w > W) throw std::invalid_argument("crop2d: crop larger than input");
  Tensor<T> out({B, C, h, w});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < h; ++i)
        std::copy_n(x->value.data() + ((b * C + c) * H + i) * W, w,
                    out.data() + ((b * C + c) * h + i) * w);
  return make_op<T>(std::move(out), {x}, [x, B, C, H, W, h, w](Node<T>& n) {
    x->ensure_grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < h; ++i) {
          const T* g = n.grad.data() + ((b * C + c) * h + i) * w;
          T* xg = x->grad.data() + ((b * C + c) * H + i) * W;
          for (std::size_t j = 0; j < w; ++j) xg[j] += g[j];
        }
  });
}

// Pads the spatial axes at the bottom/right by reflection.
template <typename T>
inline Var<T> reflect_pad_to(const Var<T>& x, std::size_t h, std::size_t w) {
  const auto& s = x->value.shape();
  if (s.size() != 4) throw std::invalid_argument("reflect_pad_to: rank-4 input expected");
  const std::size_t B = s[0], C = s[1], H = s[2], W = s[3];
  if (h < H || w < W) throw std::invalid_argument("reflect_pad_to: target smaller than input");
  if (h >= 2 * H || w >= 2 * W) throw std::invalid_argument("reflect_pad_to: pad too large");
  auto mirror = [](std::size_t i, std::size_t n) { return i < n ? i : 2 * n - 2 - i; };
  Tensor<T> out({B, C, h, w});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < h; ++i) {
        const std::size_t si = mirror(i, H);
        for (std::size_t j = 0; j < w; ++j)
          out(b, c, i, j) = x->value(b, c, si, mirror(j, W));
      }
  return make_op<T>(std::move(out), {x}, [x, B, C, H, W, h, w, mirror](Node<T>& n) {
    x->ensure_grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < h; ++i) {
          const std::size_t si = mirror(i, H);
          for (std::size_t j = 0; j < w; ++j)
            x->grad(b, c, si, mirror(j, W)) += n.grad(b, c, i, j);
        }
  });
}

template <typename T>
inline Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a->value;
  for (auto& v : out.vec()) v = v > T{} ? v : T{};
  return make_op<T>(std::move(out), {a}, [a](Node<T>& n) {
    a->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      if (a->value[i] > T{}) a->grad[i] += n.grad[i];
  });
}

template <typename T>
inline Var<T> leaky_relu(const Var<T>& a, T slope) {
  Tensor<T> out = a->value;
  for (auto& v : out.vec()) v = v > T{} ? v : slope * v;
  return make_op<T>(std::move(out), {a}, [a, slope](Node<T>& n) {
    a->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      a->grad[i] += (a->value[i] > T{} ? T(1) : slope) * n.grad[i];
  });
}

template <typename T>
inline Var<T> reshape(const Var<T>& a, std::vector<std::size_t> shape) {
  Tensor<T> out = a->value.reshaped(shape);
  return make_op<T>(std::move(out), {a}, [a](Node<T>& n) {
    a->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) a->grad[i] += n.grad[i];
  });
}

// ---------------------------------------------------------------- reductions

template <typename T>
inline Var<T> mean_all(const Var<T>& a) {
  Tensor<T> out({1});
  out[0] = a->value.mean();
  const T inv = T(1) / static_cast<T>(a->value.size());
  return make_op<T>(std::move(out), {a}, [a, inv](Node<T>& n) {
    a->ensure_grad();
    const T g = n.grad[0] * inv;
    for (std::size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += g;
  });
}

// mean((x - c)^2) against a scalar target; the LSGAN building block
template <typename T>
inline Var<T> mse_to_const(const Var<T>& a, T c) {
  Tensor<T> out({1});
  T acc{};
  for (std::size_t i = 0; i < a->value.size(); ++i) {
    const T d = a->value[i] - c;
    acc += d * d;
  }
  out[0] = acc / static_cast<T>(a->value.size());
  const T inv = T(2) / static_cast<T>(a->value.size());
  return make_op<T>(std::move(out), {a}, [a, c, inv](Node<T>& n) {
    a->ensure_grad();
    const T g = n.grad[0] * inv;
    for (std::size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += g * (a->value[i] - c);
  });
}

// mean |a - b|
template <typename T>
inline Var<T> l1_loss(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a->value, b->value, "l1_loss");
  Tensor<T> out({1});
  T acc{};
  for (std::size_t i = 0; i < a->value.size(); ++i) acc += std::abs(a->value[i] - b->value[i]);
  out[0] = acc / static_cast<T>(a->value.size());
  const T inv = T(1) / static_cast<T>(a->value.size());
  return make_op<T>(std::move(out), {a, b}, [a, b, inv](Node<T>& n) {
    const T g = n.grad[0] * inv;
    for (std::size_t i = 0; i < a->value.size(); ++i) {
      const T d = a->value[i] - b->value[i];
      const T s = d > T{} ? g : (d < T{} ? -g : T{});
      if (a->requires_grad) {
        a->ensure_grad();
        a->grad[i] += s;
      }
      if (b->requires_grad) {
        b->ensure_grad();
        b->grad[i] -= s;
      }
    }
  });
}

// ---------------------------------------------------------------- linear algebra

// x: (B, In), w: (Out, In), b: (Out)
template <typename T>
inline Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Map = Eigen::Map<Mat>;
  using CMap = Eigen::Map<const Mat>;
  const std::size_t B = x->value.dim(0), In = x->value.dim(1), Out = w->value.dim(0);
  if (w->value.dim(1) != In || b->value.size() != Out)
    throw std::invalid_argument("linear: shape mismatch");
  Tensor<T> out({B, Out});
  CMap X(x->value.data(), B, In), W(w->value.data(), Out, In);
  Map O(out.data(), B, Out);
  O.noalias() = X * W.transpose();
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < Out; ++j) out(i, j) += b->value[j];
  return make_op<T>(std::move(out), {x, w, b}, [x, w, b, B, In, Out](Node<T>& n) {
    CMap G(n.grad.data(), B, Out), X(x->value.data(), B, In), W(w->value.data(), Out, In);
    if (x->requires_grad) {
      x->ensure_grad();
      Map GX(x->grad.data(), B, In);
      GX.noalias() += G * W;
    }
    if (w->requires_grad) {
      w->ensure_grad();
      Map GW(w->grad.data(), Out, In);
      GW.noalias() += G.transpose() * X;
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (std::size_t i = 0; i < B; ++i)
        for (std::size_t j = 0; j < Out; ++j) b->grad[j] += n.grad(i, j);
    }
  });
}

// ---------------------------------------------------------------- padding

// Reflection padding on the two trailing axes of a (B, C, H, W) tensor.
template <typename T>
inline Var<T> reflect_pad2d(const Var<T>& x, std::size_t p) {
  const auto& s = x->value.shape();
  if (s.size() != 4) throw std::invalid_argument("reflect_pad2d: rank-4 input expected");
  const std::size_t B = s[0], C = s[1], H = s[2], W = s[3];
  if (H <= p || W <= p) throw std::invalid_argument("reflect_pad2d: padding too large");
  const std::size_t Ho = H + 2 * p, Wo = W + 2 * p;
  auto mirror = [](std::ptrdiff_t i, std::size_t n) {
    if (i < 0) i = -i;
    const auto ni = static_cast<std::ptrdiff_t>(n);
    if (i >= ni) i = 2 * ni - 2 - i;
    return static_cast<std::size_t>(i);
  };
  Tensor<T> out({B, C, Ho, Wo});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < Ho; ++i) {
        const std::size_t si = mirror(static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(p), H);
        for (std::size_t j = 0; j < Wo; ++j) {
          const std::size_t sj = mirror(static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(p), W);
          out(b, c, i, j) = x->value(b, c, si, sj);
        }
      }
  return make_op<T>(std::move(out), {x}, [x, p, B, C, H, W, Ho, Wo, mirror](Node<T>& n) {
    x->ensure_grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < Ho; ++i) {
          const std::size_t si = mirror(static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(p), H);
          for (std::size_t j = 0; j < Wo; ++j) {
            const std::size_t sj = mirror(static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(p), W);
            x->grad(b, c, si, sj) += n.grad(b, c, i, j);
          }
        }
  });
}

// ---------------------------------------------------------------- convolution

namespace detail {

// im2col for one sample: x (C, H, W) -> cols (C*kh*kw, Ho*Wo), zero padding
template <typename T>
inline void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
                   std::size_t kw, std::size_t stride, std::size_t pad_h, std::size_t pad_w,
                   std::size_t Ho, std::size_t Wo, T* cols) {
  const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(pad_h);
  const std::ptrdiff_t pw = static_cast<std::ptrdiff_t>(pad_w);
  std::size_t row = 0;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj, ++row) {
        T* dst = cols + row * Ho * Wo;
        for (std::size_t oi = 0; oi < Ho; ++oi) {
          const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(oi * stride + ki) - ph;
          if (si < 0 || si >= static_cast<std::ptrdiff_t>(H)) {
            for (std::size_t oj = 0; oj < Wo; ++oj) dst[oi * Wo + oj] = T{};
            continue;
          }
          const T* src = x + (c * H + static_cast<std::size_t>(si)) * W;
          for (std::size_t oj = 0; oj < Wo; ++oj) {
            const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(oj * stride + kj) - pw;
            dst[oi * Wo + oj] =
                (sj < 0 || sj >= static_cast<std::ptrdiff_t>(W)) ? T{} : src[static_cast<std::size_t>(sj)];
          }
        }
      }
}

// scatter-add inverse of im2col
template <typename T>
inline void col2im(const T* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
                   std::size_t kw, std::size_t stride, std::size_t pad_h, std::size_t pad_w,
                   std::size_t Ho, std::size_t Wo, T* x) {
  const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(pad_h);
  const std::ptrdiff_t pw = static_cast<std::ptrdiff_t>(pad_w);
  std::size_t row = 0;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj, ++row) {
        const T* src = cols + row * Ho * Wo;
        for (std::size_t oi = 0; oi < Ho; ++oi) {
          const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(oi * stride + ki) - ph;
          if (si < 0 || si >= static_cast<std::ptrdiff_t>(H)) continue;
          T* dst = x + (c * H + static_cast<std::size_t>(si)) * W;
          for (std::size_t oj = 0; oj < Wo; ++oj) {
            const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(oj * stride + kj) - pw;
            if (sj >= 0 && sj < static_cast<std::ptrdiff_t>(W))
              dst[static_cast<std::size_t>(sj)] += src[oi * Wo + oj];
          }
        }
      }
}

}  // namespace detail

// x: (B, Cin, H, W), w: (Cout, Cin, kh, kw), b: (Cout); zero padding
template <typename T>
inline Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t stride = 1,
                     std::size_t pad_h = 0, std::size_t pad_w = SIZE_MAX) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Map = Eigen::Map<Mat>;
  using CMap = Eigen::Map<const Mat>;
  if (pad_w == SIZE_MAX) pad_w = pad_h;
  const auto& xs = x->value.shape();
  const auto& ws = w->value.shape();
  if (xs.size() != 4 || ws.size() != 4) throw std::invalid_argument("conv2d: rank-4 tensors expected");
  const std::size_t B = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
  const std::size_t Cout = ws[0], kh = ws[2], kw = ws[3];
  if (ws[1] != Cin) throw std::invalid_argument("conv2d: channel mismatch");
  if (H + 2 * pad_h < kh || W + 2 * pad_w < kw)
    throw std::invalid_argument("conv2d: kernel larger than input");
  const std::size_t Ho = (H + 2 * pad_h - kh) / stride + 1;
  const std::size_t Wo = (W + 2 * pad_w - kw) / stride + 1;
  const std::size_t K = Cin * kh * kw, S = Ho * Wo;

  Tensor<T> out({B, Cout, Ho, Wo});
  {
    std::vector<T> cols(K * S);
    CMap Wm(w->value.data(), Cout, K);
    for (std::size_t bb = 0; bb < B; ++bb) {
      detail::im2col(x->value.data() + bb * Cin * H * W, Cin, H, W, kh, kw, stride, pad_h, pad_w,
                     Ho, Wo, cols.data());
      CMap Cm(cols.data(), K, S);
      Map Om(out.data() + bb * Cout * S, Cout, S);
      Om.noalias() = Wm * Cm;
      for (std::size_t co = 0; co < Cout; ++co)
        for (std::size_t s = 0; s < S; ++s) Om(co, s) += b->value[co];
    }
  }

  return make_op<T>(std::move(out), {x, w, b},
                    [x, w, b, B, Cin, H, W, Cout, kh, kw, stride, pad_h, pad_w, Ho, Wo, K, S](Node<T>& n) {
    std::vector<T> cols(K * S);
    CMap Wm(w->value.data(), Cout, K);
    if (w->requires_grad) w->ensure_grad();
    if (b->requires_grad) b->ensure_grad();
    if (x->requires_grad) x->ensure_grad();
    for (std::size_t bb = 0; bb < B; ++bb) {
      CMap Gm(n.grad.data() + bb * Cout * S, Cout, S);
      if (w->requires_grad) {
        detail::im2col(x->value.data() + bb * Cin * H * W, Cin, H, W, kh, kw, stride, pad_h, pad_w,
                       Ho, Wo, cols.data());
        CMap Cm(cols.data(), K, S);
        Map GW(w->grad.data(), Cout, K);
        GW.noalias() += Gm * Cm.transpose();
      }
      if (b->requires_grad)
        for (std::size_t co = 0; co < Cout; ++co)
          for (std::size_t s = 0; s < S; ++s) b->grad[co] += Gm(co, s);
      if (x->requires_grad) {
        Map Cm(cols.data(), K, S);
        Cm.noalias() = Wm.transpose() * Gm;
        detail::col2im(cols.data(), Cin, H, W, kh, kw, stride, pad_h, pad_w, Ho, Wo,
                       x->grad.data() + bb * Cin * H * W);
      }
    }
  });
}

// x: (B, Cin, H, W), w: (Cin, Cout, kh, kw), b: (Cout)
// out spatial: (H-1)*stride - 2*pad + kh + out_pad
template <typename T>
inline Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& b,
                               std::size_t stride = 1, std::size_t pad = 0,
                               std::size_t out_pad = 0) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Map = Eigen::Map<Mat>;
  using CMap = Eigen::Map<const Mat>;
  const auto& xs = x->value.shape();
  const auto& ws = w->value.shape();
  if (xs.size() != 4 || ws.size() != 4)
    throw std::invalid_argument("conv_transpose2d: rank-4 tensors expected");
  const std::size_t B = xs[0], Cin = xs[1], Hi = xs[2], Wi = xs[3];
  const std::size_t Cout = ws[1], kh = ws[2], kw = ws[3];
  if (ws[0] != Cin) throw std::invalid_argument("conv_transpose2d: channel mismatch");
  if (out_pad >= stride) throw std::invalid_argument("conv_transpose2d: out_pad must be < stride");
  const std::size_t Ho = (Hi - 1) * stride + kh + out_pad - 2 * pad;
  const std::size_t Wo = (Wi - 1) * stride + kw + out_pad - 2 * pad;
  const std::size_t K = Cout * kh * kw, S = Hi * Wi;

  // forward = col2im(W^T x); exactly the adjoint of conv2d with (Ho,Wo) input
  Tensor<T> out({B, Cout, Ho, Wo});
  {
    std::vector<T> cols(K * S);
    CMap Wm(w->value.data(), Cin, K);
    for (std::size_t bb = 0; bb < B; ++bb) {
      CMap Xm(x->value.data() + bb * Cin * S, Cin, S);
      Map Cm(cols.data(), K, S);
      Cm.noalias() = Wm.transpose() * Xm;
      T* o = out.data() + bb * Cout * Ho * Wo;
      detail::col2im(cols.data(), Cout, Ho, Wo, kh, kw, stride, pad, pad, Hi, Wi, o);
      for (std::size_t co = 0; co < Cout; ++co)
        for (std::size_t s = 0; s < Ho * Wo; ++s) o[co * Ho * Wo + s] += b->value[co];
    }
  }

  return make_op<T>(std::move(out), {x, w, b},
                    [x, w, b, B, Cin, Hi, Wi, Cout, kh, kw, stride, pad, Ho, Wo, K, S](Node<T>& n) {
    std::vector<T> cols(K * S);
    if (w->requires_grad) w->ensure_grad();
    if (b->requires_grad) b->ensure_grad();
    if (x->requires_grad) x->ensure_grad();
    for (std::size_t bb = 0; bb < B; ++bb) {
      // dcols = im2col(dout); dx = W dcols; dW += x dcols^T
      detail::im2col(n.grad.data() + bb * Cout * Ho * Wo, Cout, Ho, Wo, kh, kw, stride, pad, pad,
                     Hi, Wi, cols.data());
      CMap Cm(cols.data(), K, S);
      if (x->requires_grad) {
        CMap Wm(w->value.data(), Cin, K);
        Map GX(x->grad.data() + bb * Cin * S, Cin, S);
        GX.noalias() += Wm * Cm;
      }
      if (w->requires_grad) {
        CMap Xm(x->value.data() + bb * Cin * S, Cin, S);
        Map GW(w->grad.data(), Cin, K);
        GW.noalias() += Xm * Cm.transpose();
      }
      if (b->requires_grad) {
        const T* g = n.grad.data() + bb * Cout * Ho * Wo;
        for (std::size_t co = 0; co < Cout; ++co)
          for (std::size_t s = 0; s < Ho * Wo; ++s) b->grad[co] += g[co * Ho * Wo + s];
      }
    }
  });
}

// ---------------------------------------------------------------- normalization

// Per-sample, per-channel normalization over the trailing spatial axes with a
// per-channel affine. Accepts (B, C, H, W) or (B, C, L).
template <typename T>
inline Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                            T eps = T(1e-5)) {
  const auto& s = x->value.shape();
  if (s.size() != 3 && s.size() != 4)
    throw std::invalid_argument("instance_norm: rank-3/4 input expected");
  const std::size_t B = s[0], C = s[1];
  const std::size_t S = s.size() == 4 ? s[2] * s[3] : s[2];
  if (gamma->value.size() != C || beta->value.size() != C)
    throw std::invalid_argument("instance_norm: affine size mismatch");

  Tensor<T> out(s);
  Tensor<T> xhat(s);           // cached normalized values
  Tensor<T> inv_std({B, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const T* xp = x->value.data() + (b * C + c) * S;
      T mu{};
      for (std::size_t i = 0; i < S; ++i) mu += xp[i];
      mu /= static_cast<T>(S);
      T var{};
      for (std::size_t i = 0; i < S; ++i) {
        const T d = xp[i] - mu;
        var += d * d;
      }
      var /= static_cast<T>(S);
      const T is = T(1) / std::sqrt(var + eps);
      inv_std(b, c) = is;
      T* xh = xhat.data() + (b * C + c) * S;
      T* op = out.data() + (b * C + c) * S;
      const T g = gamma->value[c], be = beta->value[c];
      for (std::size_t i = 0; i < S; ++i) {
        xh[i] = (xp[i] - mu) * is;
        op[i] = g * xh[i] + be;
      }
    }

  auto xh_keep = std::make_shared<Tensor<T>>(std::move(xhat));
  auto is_keep = std::make_shared<Tensor<T>>(std::move(inv_std));
  return make_op<T>(std::move(out), {x, gamma, beta},
                    [x, gamma, beta, B, C, S, xh_keep, is_keep](Node<T>& n) {
    if (x->requires_grad) x->ensure_grad();
    if (gamma->requires_grad) gamma->ensure_grad();
    if (beta->requires_grad) beta->ensure_grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const T* gp = n.grad.data() + (b * C + c) * S;
        const T* xh = xh_keep->data() + (b * C + c) * S;
        if (gamma->requires_grad || beta->requires_grad) {
          T dg{}, db{};
          for (std::size_t i = 0; i < S; ++i) {
            dg += gp[i] * xh[i];
            db += gp[i];
          }
          if (gamma->requires_grad) gamma->grad[c] += dg;
          if (beta->requires_grad) beta->grad[c] += db;
        }
        if (x->requires_grad) {
          const T g = gamma->value[c];
          const T is = (*is_keep)(b, c);
          T sum_dy{}, sum_dy_xh{};
          for (std::size_t i = 0; i < S; ++i) {
            sum_dy += gp[i];
            sum_dy_xh += gp[i] * xh[i];
          }
          const T inv_s = T(1) / static_cast<T>(S);
          T* xg = x->grad.data() + (b * C + c) * S;
          for (std::size_t i = 0; i < S; ++i)
            xg[i] += g * is * (gp[i] - sum_dy * inv_s - xh[i] * sum_dy_xh * inv_s);
        }
      }
  });
}

// Batch normalization over (B, H, W) per channel. Training mode uses batch
// statistics and updates the caller-owned running stats in place.
template <typename T>
inline Var<T> batch_norm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                           Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                           T momentum = T(0.1), T eps = T(1e-5)) {
  const auto& s = x->value.shape();
  if (s.size() != 4) throw std::invalid_argument("batch_norm2d: rank-4 input expected");
  const std::size_t B = s[0], C = s[1], S = s[2] * s[3];
  const std::size_t N = B * S;

  Tensor<T> out(s);
  Tensor<T> xhat(s);
  Tensor<T> inv_std({C});
  for (std::size_t c = 0; c < C; ++c) {
    T mu{}, var{};
    if (training) {
      for (std::size_t b = 0; b < B; ++b) {
        const T* xp = x->value.data() + (b * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) mu += xp[i];
      }
      mu /= static_cast<T>(N);
      for (std::size_t b = 0; b < B; ++b) {
        const T* xp = x->value.data() + (b * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) {
          const T d = xp[i] - mu;
          var += d * d;
        }
      }
      var /= static_cast<T>(N);
      running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * mu;
      running_var[c] = (T(1) - momentum) * running_var[c] + momentum * var;
    } else {
      mu = running_mean[c];
      var = running_var[c];
    }
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[c] = is;
    const T g = gamma->value[c], be = beta->value[c];
    for (std::size_t b = 0; b < B; ++b) {
      const T* xp = x->value.data() + (b * C + c) * S;
      T* xh = xhat.data() + (b * C + c) * S;
      T* op = out.data() + (b * C + c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        xh[i] = (xp[i] - mu) * is;
        op[i] = g * xh[i] + be;
      }
    }
  }

  auto xh_keep = std::make_shared<Tensor<T>>(std::move(xhat));
  auto is_keep = std::make_shared<Tensor<T>>(std::move(inv_std));
  return make_op<T>(std::move(out), {x, gamma, beta},
                    [x, gamma, beta, B, C, S, N, xh_keep, is_keep, training](Node<T>& n) {
    if (x->requires_grad) x->ensure_grad();
    if (gamma->requires_grad) gamma->ensure_grad();
    if (beta->requires_grad) beta->ensure_grad();
    for (std::size_t c = 0; c < C; ++c) {
      T dg{}, db{};
      for (std::size_t b = 0; b < B; ++b) {
        const T* gp = n.grad.data() + (b * C + c) * S;
        const T* xh = xh_keep->data() + (b * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) {
          dg += gp[i] * xh[i];
          db += gp[i];
        }
      }
      if (gamma->requires_grad) gamma->grad[c] += dg;
      if (beta->requires_grad) beta->grad[c] += db;
      if (x->requires_grad) {
        const T g = gamma->value[c];
        const T is = (*is_keep)[c];
        if (training) {
          const T inv_n = T(1) / static_cast<T>(N);
          for (std::size_t b = 0; b < B; ++b) {
            const T* gp = n.grad.data() + (b * C + c) * S;
            const T* xh = xh_keep->data() + (b * C + c) * S;
            T* xg = x->grad.data() + (b * C + c) * S;
            for (std::size_t i = 0; i < S; ++i)
              xg[i] += g * is * (gp[i] - db * inv_n - xh[i] * dg * inv_n);
          }
        } else {
          for (std::size_t b = 0; b < B; ++b) {
            const T* gp = n.grad.data() + (b * C + c) * S;
            T* xg = x->grad.data() + (b * C + c) * S;
            for (std::size_t i = 0; i < S; ++i) xg[i] += g * is * gp[i];
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------- FiLM & misc

// out[b,c,s] = gamma[b,c] * x[b,c,s] + beta[b,c]
template <typename T>
inline Var<T> film(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta) {
  const auto& s = x->value.shape();
  if (s.size() != 4) throw std::invalid_argument("film: rank-4 input expected");
  const std::size_t B = s[0], C = s[1], S = s[2] * s[3];
  if (gamma->value.shape() != std::vector<std::size_t>{B, C} || !gamma->value.same_shape(beta->value))
    throw std::invalid_argument("film: modulation shape must be (batch, channels)");

  Tensor<T> out(s);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const T g = gamma->value(b, c), be = beta->value(b, c);
      const T* xp = x->value.data() + (b * C + c) * S;
      T* op = out.data() + (b * C + c) * S;
      for (std::size_t i = 0; i < S; ++i) op[i] = g * xp[i] + be;
    }
  return make_op<T>(std::move(out), {x, gamma, beta}, [x, gamma, beta, B, C, S](Node<T>& n) {
    if (x->requires_grad) x->ensure_grad();
    if (gamma->requires_grad) gamma->ensure_grad();
    if (beta->requires_grad) beta->ensure_grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const T* gp = n.grad.data() + (b * C + c) * S;
        const T* xp = x->value.data() + (b * C + c) * S;
        if (gamma->requires_grad || beta->requires_grad) {
          T dg{}, db{};
          for (std::size_t i = 0; i < S; ++i) {
            dg += gp[i] * xp[i];
            db += gp[i];
          }
          if (gamma->requires_grad) gamma->grad(b, c) += dg;
          if (beta->requires_grad) beta->grad(b, c) += db;
        }
        if (x->requires_grad) {
          const T g = gamma->value(b, c);
          T* xg = x->grad.data() + (b * C + c) * S;
          for (std::size_t i = 0; i < S; ++i) xg[i] += g * gp[i];
        }
      }
  });
}

// Splits (B, 2C) into two (B, C) halves; used for the FiLM head output.
template <typename T>
inline std::pair<Var<T>, Var<T>> split_half(const Var<T>& x) {
  const std::size_t B = x->value.dim(0), C2 = x->value.dim(1);
  const std::size_t C = C2 / 2;
  Tensor<T> a({B, C}), b({B, C});
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < C; ++j) {
      a(i, j) = x->value(i, j);
      b(i, j) = x->value(i, j + C);
    }
  auto left = make_op<T>(std::move(a), {x}, [x, B, C](Node<T>& n) {
    x->ensure_grad();
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = 0; j < C; ++j) x->grad(i, j) += n.grad(i, j);
  });
  auto right = make_op<T>(std::move(b), {x}, [x, B, C](Node<T>& n) {
    x->ensure_grad();
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = 0; j < C; ++j) x->grad(i, j + C) += n.grad(i, j);
  });
  return {left, right};
}

// Concats two rank-4 tensors along the channel axis.
template <typename T>
inline Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const auto& sa = a->value.shape();
  const auto& sb = b->value.shape();
  if (sa.size() != 4 || sb.size() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
    throw std::invalid_argument("concat_channels: incompatible shapes");
  const std::size_t B = sa[0], Ca = sa[1], Cb = sb[1], S = sa[2] * sa[3];
  Tensor<T> out({B, Ca + Cb, sa[2], sa[3]});
  for (std::size_t bb = 0; bb < B; ++bb) {
    std::copy_n(a->value.data() + bb * Ca * S, Ca * S, out.data() + bb * (Ca + Cb) * S);
    std::copy_n(b->value.data() + bb * Cb * S, Cb * S, out.data() + (bb * (Ca + Cb) + Ca) * S);
  }
  return make_op<T>(std::move(out), {a, b}, [a, b, B, Ca, Cb, S](Node<T>& n) {
    for (std::size_t bb = 0; bb < B; ++bb) {
      if (a->requires_grad) {
        a->ensure_grad();
        const T* g = n.grad.data() + bb * (Ca + Cb) * S;
        T* ag = a->grad.data() + bb * Ca * S;
        for (std::size_t i = 0; i < Ca * S; ++i) ag[i] += g[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        const T* g = n.grad.data() + (bb * (Ca + Cb) + Ca) * S;
        T* bg = b->grad.data() + bb * Cb * S;
        for (std::size_t i = 0; i < Cb * S; ++i) bg[i] += g[i];
      }
    }
  });
}

// ---------------------------------------------------------------- pooling

template <typename T>
inline Var<T> max_pool2d(const Var<T>& x, std::size_t k, std::size_t stride, std::size_t pad = 0) {
  const auto& s = x->value.shape();
  if (s.size() != 4) throw std::invalid_argument("max_pool2d: rank-4 input expected");
  const std::size_t B = s[0], C = s[1], H = s[2], W = s[3];
  const std::size_t Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  Tensor<T> out({B, C, Ho, Wo});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t oi = 0; oi < Ho; ++oi)
        for (std::size_t oj = 0; oj < Wo; ++oj) {
          T best = -std::numeric_limits<T>::infinity();
          std::size_t best_idx = 0;
          for (std::size_t ki = 0; ki < k; ++ki)
            for (std::size_t kj = 0; kj < k; ++kj) {
              const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(oi * stride + ki) - static_cast<std::ptrdiff_t>(pad);
              const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(oj * stride + kj) - static_cast<std::ptrdiff_t>(pad);
              if (si < 0 || sj < 0 || si >= static_cast<std::ptrdiff_t>(H) || sj >= static_cast<std::ptrdiff_t>(W)) continue;
              const std::size_t idx = ((b * C + c) * H + static_cast<std::size_t>(si)) * W + static_cast<std::size_t>(sj);
              if (x->value[idx] > best) {
                best = x->value[idx];
                best_idx = idx;
              }
            }
          const std::size_t o = ((b * C + c) * Ho + oi) * Wo + oj;
          out[o] = best;
          (*argmax)[o] = best_idx;
        }
  return make_op<T>(std::move(out), {x}, [x, argmax](Node<T>& n) {
    x->ensure_grad();
    for (std::size_t o = 0; o < n.grad.size(); ++o) x->grad[(*argmax)[o]] += n.grad[o];
  });
}

// (B, C, H, W) -> (B, C)
template <typename T>
inline Var<T> global_avg_pool(const Var<T>& x) {
  const auto& s = x->value.shape();
  if (s.size() != 4) throw std::invalid_argument("global_avg_pool: rank-4 input expected");
  const std::size_t B = s[0], C = s[1], S = s[2] * s[3];
  Tensor<T> out({B, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const T* xp = x->value.data() + (b * C + c) * S;
      T acc{};
      for (std::size_t i = 0; i < S; ++i) acc += xp[i];
      out(b, c) = acc / static_cast<T>(S);
    }
  return make_op<T>(std::move(out), {x}, [x, B, C, S](Node<T>& n) {
    x->ensure_grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const T g = n.grad(b, c) / static_cast<T>(S);
        T* xg = x->grad.data() + (b * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) xg[i] += g;
      }
  });
}

// ---------------------------------------------------------------- classification

// logits (B, K), labels in [0, K); returns mean cross entropy in nats.
template <typename T>
inline Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<std::size_t>& labels) {
  const std::size_t B = logits->value.dim(0), K = logits->value.dim(1);
  if (labels.size() != B) throw std::invalid_argument("softmax_cross_entropy: label count mismatch");
  Tensor<T> probs({B, K});
  T loss{};
  for (std::size_t b = 0; b < B; ++b) {
    const T* lp = logits->value.data() + b * K;
    T mx = lp[0];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, lp[k]);
    T z{};
    for (std::size_t k = 0; k < K; ++k) z += std::exp(lp[k] - mx);
    const T logz = std::log(z) + mx;
    for (std::size_t k = 0; k < K; ++k) probs(b, k) = std::exp(lp[k] - logz);
    loss -= lp[labels[b]] - logz;
  }
  Tensor<T> out({1});
  out[0] = loss / static_cast<T>(B);
  auto probs_keep = std::make_shared<Tensor<T>>(std::move(probs));
  return make_op<T>(std::move(out), {logits}, [logits, labels, probs_keep, B, K](Node<T>& n) {
    logits->ensure_grad();
    const T g = n.grad[0] / static_cast<T>(B);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < K; ++k)
        logits->grad(b, k) += g * ((*probs_keep)(b, k) - (k == labels[b] ? T(1) : T(0)));
  });
}

// Row-wise softmax probabilities without graph participation.
template <typename T>
inline Tensor<T> softmax_rows(const Tensor<T>& logits) {
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  Tensor<T> probs({B, K});
  for (std::size_t b = 0; b < B; ++b) {
    const T* lp = logits.data() + b * K;
    T mx = lp[0];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, lp[k]);
    T z{};
    for (std::size_t k = 0; k < K; ++k) z += std::exp(lp[k] - mx);
    for (std::size_t k = 0; k < K; ++k) probs(b, k) = std::exp(lp[k] - mx) / z;
  }
  return probs;
}

}  // namespace umc::ad
