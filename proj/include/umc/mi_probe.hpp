#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "umc/corpus.hpp"
#include "umc/device_bank.hpp"
#include "umc/network.hpp"
#include "umc/optim.hpp"

namespace umc {

enum class StatAxis { Channel, Frequency, Time };
enum class StatKind { Mean, Std, MeanStd };

inline const char* to_string(StatAxis a) {
  switch (a) {
    case StatAxis::Channel: return "channel";
    case StatAxis::Frequency: return "frequency";
    case StatAxis::Time: return "time";
  }
  return "?";
}

inline const char* to_string(StatKind k) {
  switch (k) {
    case StatKind::Mean: return "mean";
    case StatKind::Std: return "std";
    case StatKind::MeanStd: return "mean+std";
  }
  return "?";
}

inline StatAxis stat_axis_from_string(const std::string& s) {
  if (s == "channel") return StatAxis::Channel;
  if (s == "frequency") return StatAxis::Frequency;
  if (s == "time") return StatAxis::Time;
  throw std::invalid_argument("unknown statistics axis: " + s);
}

struct ProbeResult {
  std::string layer_tag;
  StatAxis axis = StatAxis::Channel;
  StatKind stat_kind = StatKind::MeanStd;
  double mi_estimate = 0.0;  // nats
  double accuracy = 0.0;
  double entropy_y = 0.0;    // nats
  std::size_t val_size = 0;
};

// Per-sample mean (and/or std) over all axes except the chosen one.
// activation: (B, C, F, T) -> (B, L) where L = axis size (x2 for mean+std).
template <typename T>
inline Tensor<T> extract_dim_statistics(const Tensor<T>& activation, StatAxis axis,
                                        StatKind kind) {
  const auto& s = activation.shape();
  if (s.size() != 4) throw std::invalid_argument("extract_dim_statistics: rank-4 input expected");
  if (!activation.all_finite())
    throw std::invalid_argument("extract_dim_statistics: non-finite activation");
  const std::size_t B = s[0], C = s[1], F = s[2], Tm = s[3];
  std::size_t L = 0;
  switch (axis) {
    case StatAxis::Channel: L = C; break;
    case StatAxis::Frequency: L = F; break;
    case StatAxis::Time: L = Tm; break;
  }
  const bool want_mean = kind != StatKind::Std;
  const bool want_std = kind != StatKind::Mean;
  const std::size_t cols = (want_mean && want_std) ? 2 * L : L;

  Tensor<T> out({B, cols});
  std::vector<T> sum(L), sq(L);
  const std::size_t n_other = (C * F * Tm) / L;
  for (std::size_t b = 0; b < B; ++b) {
    std::fill(sum.begin(), sum.end(), T{});
    std::fill(sq.begin(), sq.end(), T{});
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t f = 0; f < F; ++f)
        for (std::size_t t = 0; t < Tm; ++t) {
          const T v = activation(b, c, f, t);
          const std::size_t i = axis == StatAxis::Channel ? c : (axis == StatAxis::Frequency ? f : t);
          sum[i] += v;
          sq[i] += v * v;
        }
    for (std::size_t i = 0; i < L; ++i) {
      const T mu = sum[i] / static_cast<T>(n_other);
      const T var = std::max(T{}, sq[i] / static_cast<T>(n_other) - mu * mu);
      if (want_mean) out(b, i) = mu;
      if (want_std) out(b, want_mean ? L + i : i) = std::sqrt(var);
    }
  }
  return out;
}

// ---------------------------------------------------------------- classifier

struct AuxClassifierConfig {
  std::size_t hidden = 128;   // two hidden layers of this width
  double lr = 1e-3;
  std::size_t max_epochs = 500;
  std::size_t patience = 10;  // epochs without val-loss improvement
  double val_fraction = 0.2;  // early-stopping holdout carved from the train set
  std::uint64_t seed = 0;
};

// Small MLP probe over dimension-wise statistics.
template <typename T>
class AuxClassifier {
 public:
  AuxClassifier() = default;
  AuxClassifier(std::size_t in_dim, std::size_t n_classes, const AuxClassifierConfig& cfg)
      : in_dim_(in_dim), n_classes_(n_classes), cfg_(cfg) {
    Rng rng(Rng::splitmix64(cfg.seed ^ 0x50484921ULL));
    fc1_ = nn::Linear<T>(params, "fc1", in_dim, cfg.hidden, rng);
    fc2_ = nn::Linear<T>(params, "fc2", cfg.hidden, cfg.hidden, rng);
    head_ = nn::Linear<T>(params, "head", cfg.hidden, n_classes, rng);
    mu_.assign(in_dim, T{});
    sigma_.assign(in_dim, T(1));
  }

  ad::Var<T> logits(const ad::Var<T>& h) const {
    auto z = ad::relu(fc1_(h));
    z = ad::relu(fc2_(z));
    return head_(z);
  }

  Tensor<T> standardize(const Tensor<T>& h) const {
    Tensor<T> out = h;
    const std::size_t B = h.dim(0);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < in_dim_; ++i)
        out(b, i) = (h(b, i) - mu_[i]) / sigma_[i];
    return out;
  }

  // Trains to a val-loss plateau; features are standardized with train stats.
  void fit(const Tensor<T>& h_train, const std::vector<std::size_t>& y_train) {
    const std::size_t N = h_train.dim(0);
    if (N != y_train.size()) throw std::invalid_argument("aux classifier: label count mismatch");
    std::vector<bool> present(n_classes_, false);
    for (auto y : y_train) present.at(y) = true;
    if (std::count(present.begin(), present.end(), true) < 2)
      throw std::invalid_argument("aux classifier: need >= 2 classes present");

    for (std::size_t i = 0; i < in_dim_; ++i) {
      T m{}, s{};
      for (std::size_t b = 0; b < N; ++b) m += h_train(b, i);
      m /= static_cast<T>(N);
      for (std::size_t b = 0; b < N; ++b) {
        const T d = h_train(b, i) - m;
        s += d * d;
      }
      mu_[i] = m;
      sigma_[i] = std::sqrt(s / static_cast<T>(N)) + T(1e-8);
    }
    Tensor<T> hs = standardize(h_train);

    Rng rng(Rng::splitmix64(cfg_.seed ^ 0x464954ULL));
    std::vector<std::size_t> order(N);
    for (std::size_t i = 0; i < N; ++i) order[i] = i;
    rng.shuffle(order.begin(), order.end());
    const std::size_t n_val = std::max<std::size_t>(1, static_cast<std::size_t>(cfg_.val_fraction * N));
    const std::size_t n_fit = N - n_val;

    auto gather = [&](std::size_t lo, std::size_t hi) {
      Tensor<T> h({hi - lo, in_dim_});
      std::vector<std::size_t> y(hi - lo);
      for (std::size_t k = lo; k < hi; ++k) {
        std::copy_n(hs.data() + order[k] * in_dim_, in_dim_, h.data() + (k - lo) * in_dim_);
        y[k - lo] = y_train[order[k]];
      }
      return std::make_pair(h, y);
    };
    auto [h_fit, y_fit] = gather(0, n_fit);
    auto [h_es, y_es] = gather(n_fit, N);

    nn::Adam<T> opt(params, cfg_.lr);
    double best = std::numeric_limits<double>::max();
    std::size_t since_best = 0;
    std::vector<Tensor<T>> best_weights;
    for (std::size_t epoch = 0; epoch < cfg_.max_epochs; ++epoch) {
      params.zero_grad();
      auto loss = ad::softmax_cross_entropy(logits(ad::constant(h_fit)), y_fit);
      ad::backward(loss);
      opt.step();

      auto val_logits = logits(ad::constant(h_es));
      double val_loss = nll(val_logits->value, y_es);
      if (val_loss < best - 1e-6) {
        best = val_loss;
        since_best = 0;
        best_weights.clear();
        for (auto& [n, v] : params.entries) best_weights.push_back(v->value);
      } else if (++since_best >= cfg_.patience) {
        break;
      }
    }
    if (!best_weights.empty())
      for (std::size_t p = 0; p < params.entries.size(); ++p)
        params.entries[p].second->value = best_weights[p];
  }

  // predicted probabilities on raw (unstandardized) features
  Tensor<T> predict_probs(const Tensor<T>& h) const {
    auto lg = logits(ad::constant(standardize(h)));
    return ad::softmax_rows(lg->value);
  }

  static double nll(const Tensor<T>& logits, const std::vector<std::size_t>& y) {
    Tensor<T> p = ad::softmax_rows(logits);
    double acc = 0.0;
    for (std::size_t b = 0; b < y.size(); ++b)
      acc -= std::log(std::max(static_cast<double>(p(b, y[b])), 1e-300));
    return acc / static_cast<double>(y.size());
  }

  nn::ParamStore<T> params;

 private:
  std::size_t in_dim_ = 0, n_classes_ = 0;
  AuxClassifierConfig cfg_;
  nn::Linear<T> fc1_, fc2_, head_;
  std::vector<T> mu_, sigma_;
};

// train_aux_classifier: spec-level free function.
template <typename T>
inline std::shared_ptr<AuxClassifier<T>> train_aux_classifier(const Tensor<T>& h_train,
                                                              const std::vector<std::size_t>& y_train,
                                                              std::size_t n_classes,
                                                              const AuxClassifierConfig& cfg) {
  auto clf = std::make_shared<AuxClassifier<T>>(h_train.dim(1), n_classes, cfg);
  clf->fit(h_train, y_train);
  return clf;
}

// ---------------------------------------------------------------- estimator

// I(h,y) ~= H(y) - (1/M) sum -log q_phi(y_i | h_i), H(y) from the empirical
// label marginal on the validation set. Negative estimates are reported as-is.
inline ProbeResult estimate_mi_from_probs(const TensorD& probs, const std::vector<std::size_t>& y) {
  const std::size_t M = y.size();
  if (M == 0 || probs.dim(0) != M) throw std::invalid_argument("estimate_mi: bad validation set");
  const std::size_t K = probs.dim(1);

  std::vector<double> marginal(K, 0.0);
  for (auto yi : y) marginal.at(yi) += 1.0;
  double H_y = 0.0;
  for (double c : marginal)
    if (c > 0) {
      const double p = c / static_cast<double>(M);
      H_y -= p * std::log(p);
    }

  double nll = 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < M; ++i) {
    nll -= std::log(std::max(probs(i, y[i]), 1e-300));
    std::size_t am = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (probs(i, k) > probs(i, am)) am = k;
    if (am == y[i]) ++correct;
  }
  nll /= static_cast<double>(M);

  ProbeResult r;
  r.mi_estimate = H_y - nll;
  r.accuracy = static_cast<double>(correct) / static_cast<double>(M);
  r.entropy_y = H_y;
  r.val_size = M;
  return r;
}

template <typename T>
inline ProbeResult estimate_mi(const AuxClassifier<T>& clf, const Tensor<T>& h_val,
                               const std::vector<std::size_t>& y_val) {
  Tensor<T> probs = clf.predict_probs(h_val);
  TensorD pd({probs.dim(0), probs.dim(1)});
  for (std::size_t i = 0; i < probs.size(); ++i) pd[i] = static_cast<double>(probs[i]);
  return estimate_mi_from_probs(pd, y_val);
}

// ---------------------------------------------------------------- probing

struct ProbeNetworkConfig {
  std::vector<std::string> layers;      // empty = all generator taps
  std::vector<StatAxis> axes = {StatAxis::Channel, StatAxis::Frequency, StatAxis::Time};
  StatKind stat_kind = StatKind::MeanStd;
  double probe_train_fraction = 0.7;
  AuxClassifierConfig classifier;
  std::size_t batch = 16;
  std::uint64_t seed = 0;
};

// Runs conversions with random target devices over the corpus slice, collects
// tagged activations, and fits one probe per (layer, axis).
template <typename T>
inline std::vector<ProbeResult> probe_network(const Generator<T>& gen,
                                              const std::vector<DeviceProfile>& bank,
                                              const std::vector<Tensor<T>>& inputs,
                                              const std::vector<std::size_t>& source_devices,
                                              const ProbeNetworkConfig& cfg) {
  if (inputs.empty()) throw std::invalid_argument("probe_network: empty corpus slice");
  std::vector<std::string> layers = cfg.layers.empty() ? gen.tap_names() : cfg.layers;
  const auto known = gen.tap_names();
  for (const auto& l : layers)
    if (std::find(known.begin(), known.end(), l) == known.end()) {
      std::string avail;
      for (const auto& k : known) avail += (avail.empty() ? "" : ", ") + k;
      throw std::invalid_argument("probe_network: unknown layer tag '" + l + "' (available: " +
                                  avail + ")");
    }

  Rng rng(cfg.seed);
  std::vector<std::size_t> targets(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i)
    targets[i] = (source_devices[i] + 1 + rng.index(bank.size() - 1)) % bank.size();

  // collect tagged activations batch by batch
  std::map<std::string, std::vector<Tensor<T>>> taps_by_layer;
  for (std::size_t lo = 0; lo < inputs.size(); lo += cfg.batch) {
    const std::size_t hi = std::min(inputs.size(), lo + cfg.batch);
    const std::size_t B = hi - lo;
    const std::size_t Fb = inputs[0].dim(0), Tb = inputs[0].dim(1);
    Tensor<T> x({B, 1, Fb, Tb});
    Tensor<T> d({B, bank[0].fr.bands()});
    for (std::size_t k = 0; k < B; ++k) {
      std::copy_n(inputs[lo + k].data(), Fb * Tb, x.data() + k * Fb * Tb);
      auto diff = fr_difference(bank[source_devices[lo + k]], bank[targets[lo + k]]);
      for (std::size_t j = 0; j < diff.values.size(); ++j)
        d(k, j) = static_cast<T>(diff.values[j]);
    }
    typename Generator<T>::TapMap taps;
    gen.forward(ad::constant(x), ad::constant(d), &taps);
    for (const auto& l : layers) taps_by_layer[l].push_back(taps.at(l));
  }

  // probe split by sample
  std::vector<std::size_t> order(inputs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order.begin(), order.end());
  const auto n_train = static_cast<std::size_t>(cfg.probe_train_fraction * order.size());
  if (n_train == 0 || n_train == order.size())
    throw std::invalid_argument("probe_network: degenerate probe split");

  std::vector<ProbeResult> results;
  for (const auto& layer : layers) {
    // reassemble the full (N, ...) activation stack for this layer
    const auto& chunks = taps_by_layer[layer];
    std::vector<std::size_t> shape = chunks[0].shape();
    std::size_t per = chunks[0].size() / chunks[0].dim(0);
    std::size_t N = 0;
    for (const auto& c : chunks) N += c.dim(0);
    shape[0] = N;
    Tensor<T> all(shape);
    std::size_t off = 0;
    for (const auto& c : chunks) {
      std::copy_n(c.data(), c.size(), all.data() + off);
      off += c.size();
    }

    for (StatAxis axis : cfg.axes) {
      Tensor<T> h = extract_dim_statistics(all, axis, cfg.stat_kind);
      const std::size_t Ld = h.dim(1);
      Tensor<T> h_tr({n_train, Ld}), h_va({order.size() - n_train, Ld});
      std::vector<std::size_t> y_tr(n_train), y_va(order.size() - n_train);
      for (std::size_t k = 0; k < order.size(); ++k) {
        const std::size_t src = order[k];
        if (k < n_train) {
          std::copy_n(h.data() + src * Ld, Ld, h_tr.data() + k * Ld);
          y_tr[k] = targets[src];
        } else {
          std::copy_n(h.data() + src * Ld, Ld, h_va.data() + (k - n_train) * Ld);
          y_va[k - n_train] = targets[src];
        }
      }
      AuxClassifierConfig ccfg = cfg.classifier;
      ccfg.seed = Rng::splitmix64(cfg.seed ^ std::hash<std::string>{}(layer + to_string(axis)));
      auto clf = train_aux_classifier(h_tr, y_tr, bank.size(), ccfg);
      ProbeResult r = estimate_mi(*clf, h_va, y_va);
      r.layer_tag = layer;
      r.axis = axis;
      r.stat_kind = cfg.stat_kind;
      results.push_back(r);
      (void)per;
    }
  }
  return results;
}

}  // namespace umc
