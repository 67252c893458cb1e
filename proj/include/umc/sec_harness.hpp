#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "umc/corpus.hpp"
#include "umc/device_bank.hpp"
#include "umc/network.hpp"
#include "umc/optim.hpp"
#include "umc/tensor_io.hpp"

namespace umc {

enum class AugmentMode { None, UnifiedMcReal, UnifiedMcSynth, Oracle };

inline const char* to_string(AugmentMode m) {
  switch (m) {
    case AugmentMode::None: return "none";
    case AugmentMode::UnifiedMcReal: return "unified-mc-real";
    case AugmentMode::UnifiedMcSynth: return "unified-mc-synth";
    case AugmentMode::Oracle: return "oracle";
  }
  return "?";
}

inline AugmentMode augment_mode_from_string(const std::string& s) {
  if (s == "none") return AugmentMode::None;
  if (s == "unified-mc-real") return AugmentMode::UnifiedMcReal;
  if (s == "unified-mc-synth") return AugmentMode::UnifiedMcSynth;
  if (s == "oracle") return AugmentMode::Oracle;
  throw std::invalid_argument("unknown augmentation mode: " + s);
}

enum class SECBackbone { SmallCnn, ResNet50 };

struct SECConfig {
  SECBackbone backbone = SECBackbone::SmallCnn;
  double lr = 1e-3;
  double weight_decay = 1e-2;       // AdamW
  std::size_t epochs = 30;          // paper: 200
  std::size_t lr_decay_every = 12;  // paper: 25
  double lr_decay_factor = 10.0;
  std::size_t batch = 32;           // paper: 100
  AugmentMode augmentation = AugmentMode::None;
  double input_mean = -8.0;
  double input_std = 2.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (lr <= 0 || epochs < 1) throw std::invalid_argument("sec config: positive lr/epochs required");
  }
};

// ---------------------------------------------------------------- backbones

// Four conv blocks (conv-BN-ReLU-maxpool) + global average pooling + linear.
template <typename T>
class SmallCnn {
 public:
  SmallCnn() = default;
  SmallCnn(std::size_t n_classes, std::uint64_t seed, double input_mean, double input_std)
      : mean_(input_mean), std_(input_std) {
    Rng rng(Rng::splitmix64(seed ^ 0x534543ULL));
    const std::size_t chans[5] = {1, 16, 32, 64, 128};
    for (int i = 0; i < 4; ++i) {
      convs_[i] = nn::Conv2d<T>(params, "c" + std::to_string(i), chans[i], chans[i + 1], 3, 1, 1, rng);
      bns_[i] = nn::BatchNorm2d<T>(params, "bn" + std::to_string(i), chans[i + 1]);
    }
    head_ = nn::Linear<T>(params, "head", 128, n_classes, rng);
  }

  ad::Var<T> forward(const ad::Var<T>& x, bool training) const {
    auto h = ad::scale(ad::add_const(x, static_cast<T>(-mean_)), T(1) / static_cast<T>(std_));
    for (int i = 0; i < 4; ++i) {
      h = ad::relu(bns_[i](convs_[i](h), training));
      h = ad::max_pool2d(h, 2, 2);
    }
    return head_(ad::global_avg_pool(h));
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_state() const {
    std::vector<std::pair<std::string, Tensor<T>>> st;
    for (const auto& [n, v] : params.entries) st.emplace_back(n, v->value);
    for (int i = 0; i < 4; ++i) {
      st.emplace_back("bn" + std::to_string(i) + ".rm", *bns_[i].running_mean);
      st.emplace_back("bn" + std::to_string(i) + ".rv", *bns_[i].running_var);
    }
    return st;
  }

  void load_state(const std::vector<std::pair<std::string, Tensor<T>>>& st) {
    std::map<std::string, const Tensor<T>*> m;
    for (const auto& [n, t] : st) m[n] = &t;
    for (auto& [n, v] : params.entries) {
      auto it = m.find(n);
      if (it == m.end()) throw std::runtime_error("sec checkpoint missing " + n);
      v->value = *it->second;
    }
    for (int i = 0; i < 4; ++i) {
      *bns_[i].running_mean = *m.at("bn" + std::to_string(i) + ".rm");
      *bns_[i].running_var = *m.at("bn" + std::to_string(i) + ".rv");
    }
  }

  nn::ParamStore<T> params;

 private:
  double mean_ = -8.0, std_ = 2.5;
  nn::Conv2d<T> convs_[4];
  nn::BatchNorm2d<T> bns_[4];
  nn::Linear<T> head_;
};

// ResNet-50 (paper-scale backbone): stem + [3,4,6,3] bottleneck stages.
template <typename T>
class ResNet50 {
 public:
  ResNet50() = default;
  ResNet50(std::size_t n_classes, std::uint64_t seed, double input_mean, double input_std)
      : mean_(input_mean), std_(input_std) {
    Rng rng(Rng::splitmix64(seed ^ 0x524e3530ULL));
    stem_ = nn::Conv2d<T>(params, "stem", 1, 64, 7, 2, 3, rng);
    stem_bn_ = nn::BatchNorm2d<T>(params, "stem_bn", 64);
    const std::size_t blocks[4] = {3, 4, 6, 3};
    const std::size_t mids[4] = {64, 128, 256, 512};
    std::size_t cin = 64;
    for (int s = 0; s < 4; ++s) {
      for (std::size_t b = 0; b < blocks[s]; ++b) {
        Bottleneck bl;
        const std::size_t mid = mids[s], cout = mid * 4;
        const std::size_t stride = (b == 0 && s > 0) ? 2 : 1;
        const std::string p = "s" + std::to_string(s) + "b" + std::to_string(b);
        bl.c1 = nn::Conv2d<T>(params, p + ".c1", cin, mid, 1, 1, 0, rng);
        bl.n1 = nn::BatchNorm2d<T>(params, p + ".n1", mid);
        bl.c2 = nn::Conv2d<T>(params, p + ".c2", mid, mid, 3, stride, 1, rng);
        bl.n2 = nn::BatchNorm2d<T>(params, p + ".n2", mid);
        bl.c3 = nn::Conv2d<T>(params, p + ".c3", mid, cout, 1, 1, 0, rng);
        bl.n3 = nn::BatchNorm2d<T>(params, p + ".n3", cout);
        if (cin != cout || stride != 1) {
          bl.proj = nn::Conv2d<T>(params, p + ".proj", cin, cout, 1, stride, 0, rng);
          bl.proj_bn = nn::BatchNorm2d<T>(params, p + ".proj_bn", cout);
          bl.has_proj = true;
        }
        blocks_.push_back(std::move(bl));
        cin = cout;
      }
    }
    head_ = nn::Linear<T>(params, "head", 2048, n_classes, rng);
  }

  ad::Var<T> forward(const ad::Var<T>& x, bool training) const {
    auto h = ad::scale(ad::add_const(x, static_cast<T>(-mean_)), T(1) / static_cast<T>(std_));
    h = ad::relu(stem_bn_(stem_(h), training));
    h = ad::max_pool2d(h, 3, 2, 1);
    for (const auto& bl : blocks_) {
      auto r = ad::relu(bl.n1(bl.c1(h), training));
      r = ad::relu(bl.n2(bl.c2(r), training));
      r = bl.n3(bl.c3(r), training);
      auto skip = bl.has_proj ? bl.proj_bn(bl.proj(h), training) : h;
      h = ad::relu(ad::add(skip, r));
    }
    return head_(ad::global_avg_pool(h));
  }

  nn::ParamStore<T> params;

 private:
  struct Bottleneck {
    nn::Conv2d<T> c1, c2, c3, proj;
    nn::BatchNorm2d<T> n1, n2, n3, proj_bn;
    bool has_proj = false;
  };
  double mean_ = -8.0, std_ = 2.5;
  nn::Conv2d<T> stem_;
  nn::BatchNorm2d<T> stem_bn_;
  std::vector<Bottleneck> blocks_;
  nn::Linear<T> head_;
};

// ---------------------------------------------------------------- augmentation

// Everything augment_batch needs to convert spectrograms.
template <typename T>
struct ConversionBackend {
  const Generator<T>* generator = nullptr;           // real / synth modes
  const std::vector<DeviceProfile>* bank = nullptr;  // real / oracle modes
  SynthFRConfig synth_cfg;                           // synth mode
  double log_floor = 1e-5;                           // oracle clamp
};

// Per sample: one uniform draw over K options ({unaltered} u {each other
// device}); labels never change. Modes pick how the conversion is produced.
template <typename T>
inline Tensor<T> augment_batch(const Tensor<T>& batch, std::size_t source_device, AugmentMode mode,
                               const ConversionBackend<T>& backend, Rng& rng) {
  if (mode == AugmentMode::None) return batch;
  if (!backend.bank) throw std::invalid_argument("augment_batch: missing device bank");
  const auto& bank = *backend.bank;
  const std::size_t K = bank.size();
  const std::size_t B = batch.dim(0), Fb = batch.dim(2), Tb = batch.dim(3);
  const std::size_t n_fr = bank[0].fr.bands();

  if ((mode == AugmentMode::UnifiedMcReal || mode == AugmentMode::UnifiedMcSynth) &&
      !backend.generator)
    throw std::invalid_argument("augment_batch: missing conversion checkpoint");

  // decide per-sample targets first so rng usage is mode-independent
  std::vector<std::size_t> choice(B);
  for (auto& c : choice) c = rng.index(K);

  std::vector<std::size_t> convert_idx;
  for (std::size_t k = 0; k < B; ++k)
    if (choice[k] != source_device) convert_idx.push_back(k);

  Tensor<T> out = batch;
  if (convert_idx.empty()) return out;

  if (mode == AugmentMode::Oracle) {
    const double floor_log = std::log(backend.log_floor);
    for (std::size_t k : convert_idx) {
      auto diff = fr_difference(bank[source_device], bank[choice[k]]);
      const std::vector<double> d80 = project_fr(diff.values, Fb);
      for (std::size_t f = 0; f < Fb; ++f)
        for (std::size_t t = 0; t < Tb; ++t) {
          T& v = out(k, 0, f, t);
          v = static_cast<T>(std::max(static_cast<double>(batch(k, 0, f, t)) + d80[f], floor_log));
        }
    }
    return out;
  }

  // unified-mc modes: batch the generator over the converted subset
  Tensor<T> x({convert_idx.size(), 1, Fb, Tb});
  Tensor<T> d({convert_idx.size(), n_fr});
  for (std::size_t j = 0; j < convert_idx.size(); ++j) {
    const std::size_t k = convert_idx[j];
    std::copy_n(batch.data() + k * Fb * Tb, Fb * Tb, x.data() + j * Fb * Tb);
    if (mode == AugmentMode::UnifiedMcReal) {
      auto diff = fr_difference(bank[source_device], bank[choice[k]]);
      for (std::size_t i = 0; i < n_fr; ++i) d(j, i) = static_cast<T>(diff.values[i]);
    } else {
      SynthFRConfig scfg = backend.synth_cfg;
      scfg.n_bands = n_fr;
      FRDifference diff = sample_synthetic_fr_difference(scfg, rng);
      for (std::size_t i = 0; i < n_fr; ++i) d(j, i) = static_cast<T>(diff.values[i]);
    }
  }
  Tensor<T> conv = generator_forward(*backend.generator, x, d);
  for (std::size_t j = 0; j < convert_idx.size(); ++j)
    std::copy_n(conv.data() + j * Fb * Tb, Fb * Tb,
                out.data() + convert_idx[j] * Fb * Tb);
  return out;
}

// ---------------------------------------------------------------- metrics

// Unweighted mean of per-class F1; zero-denominator cases contribute 0.
inline double macro_f1(const std::vector<std::size_t>& y_true,
                       const std::vector<std::size_t>& y_pred, std::size_t n_classes) {
  if (y_true.empty() || y_true.size() != y_pred.size())
    throw std::invalid_argument("macro_f1: empty or mismatched label vectors");
  std::vector<double> tp(n_classes), fp(n_classes), fn(n_classes);
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    if (y_true[i] >= n_classes || y_pred[i] >= n_classes)
      throw std::invalid_argument("macro_f1: label out of range");
    if (y_true[i] == y_pred[i])
      tp[y_true[i]] += 1;
    else {
      fp[y_pred[i]] += 1;
      fn[y_true[i]] += 1;
    }
  }
  double acc = 0.0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    const double denom = 2 * tp[c] + fp[c] + fn[c];
    acc += denom > 0 ? 2 * tp[c] / denom : 0.0;
  }
  return acc / static_cast<double>(n_classes);
}

// two-sided 97.5% Student-t quantiles, df 1..30, then the normal limit
inline double t_quantile_975(std::size_t df) {
  static const double table[] = {12.7062, 4.3027, 3.1824, 2.7764, 2.5706, 2.4469, 2.3646,
                                 2.3060,  2.2622, 2.2281, 2.2010, 2.1788, 2.1604, 2.1448,
                                 2.1314,  2.1199, 2.1098, 2.1009, 2.0930, 2.0860, 2.0796,
                                 2.0739,  2.0687, 2.0639, 2.0595, 2.0555, 2.0518, 2.0484,
                                 2.0452,  2.0423};
  if (df == 0) return std::numeric_limits<double>::infinity();
  return df <= 30 ? table[df - 1] : 1.96;
}

struct F1Report {
  std::vector<std::string> device_ids;
  std::vector<std::vector<double>> matrix;  // [source][target]
  std::vector<double> overall_mean;         // per source, targets excluding source
  std::vector<double> overall_ci;           // 95% half-width

  static std::string format_overall(double mean, double ci) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3) << mean << " \xC2\xB1 " << ci;
    return os.str();
  }

  // mean +/- t * sigma / sqrt(n) over the targets excluding the source column
  static std::pair<double, double> overall_of_row(const std::vector<double>& row,
                                                  std::size_t source_col) {
    std::vector<double> vals;
    for (std::size_t t = 0; t < row.size(); ++t)
      if (t != source_col) vals.push_back(row[t]);
    const auto n = vals.size();
    double mean = 0;
    for (double v : vals) mean += v;
    mean /= static_cast<double>(n);
    double var = 0;
    for (double v : vals) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double ci = n > 1 ? t_quantile_975(n - 1) * std::sqrt(var / static_cast<double>(n)) : 0.0;
    return {mean, ci};
  }

  void finalize() {
    overall_mean.assign(matrix.size(), 0.0);
    overall_ci.assign(matrix.size(), 0.0);
    for (std::size_t s = 0; s < matrix.size(); ++s) {
      auto [m, c] = overall_of_row(matrix[s], s);
      overall_mean[s] = m;
      overall_ci[s] = c;
    }
  }

  std::string render_text() const {
    std::ostringstream os;
    os << std::left << std::setw(16) << "Source Device";
    for (const auto& d : device_ids) os << std::right << std::setw(12) << d;
    os << std::right << std::setw(18) << "Overall (- S)" << "\n";
    for (std::size_t s = 0; s < matrix.size(); ++s) {
      os << std::left << std::setw(16) << device_ids[s] << std::fixed << std::setprecision(3);
      for (double v : matrix[s]) os << std::right << std::setw(12) << v;
      os << std::right << std::setw(18) << format_overall(overall_mean[s], overall_ci[s]) << "\n";
    }
    return os.str();
  }
};

// ---------------------------------------------------------------- training

template <typename T>
struct SECDataset {
  std::vector<Tensor<T>> specs;       // (1, F, T)-shaped entries stacked on use
  std::vector<std::size_t> labels;
  std::size_t n_classes = 0;
  std::size_t bands = 0, frames = 0;
};

template <typename T>
inline SECDataset<T> load_sec_split(const CorpusManifest& m, const std::string& split,
                                    const std::string& device_id) {
  SECDataset<T> ds;
  ds.n_classes = m.class_ids.size();
  for (const auto& it : m.items) {
    if (it.split != split || it.device_id != device_id) continue;
    TensorF s32 = load_item_spec(m, it);
    Tensor<T> s(s32.shape());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = static_cast<T>(s32[i]);
    ds.specs.push_back(std::move(s));
    ds.labels.push_back(it.class_index);
  }
  if (ds.specs.empty())
    throw std::runtime_error("load_sec_split: no items for device " + device_id + " in " + split);
  ds.bands = ds.specs[0].dim(0);
  ds.frames = ds.specs[0].dim(1);
  return ds;
}

struct SECTrainLog {
  std::vector<double> epoch_loss;
  double first_epoch_loss = 0, last_epoch_loss = 0;
};

// Trains one SEC model on a single source device's train_sec split with
// per-batch augmentation (fresh draws every epoch).
template <typename T>
inline SECTrainLog train_sec(SmallCnn<T>& model, const SECDataset<T>& ds, const SECConfig& cfg,
                             std::size_t source_device, const ConversionBackend<T>& backend) {
  cfg.validate();
  Rng rng(Rng::splitmix64(cfg.seed ^ 0x544ECULL));
  nn::Adam<T> opt(model.params, cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay);

  const std::size_t N = ds.specs.size();
  std::vector<std::size_t> order(N);
  for (std::size_t i = 0; i < N; ++i) order[i] = i;

  SECTrainLog log;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.set_lr(cfg.lr / std::pow(cfg.lr_decay_factor, static_cast<double>(epoch / cfg.lr_decay_every)));
    rng.shuffle(order.begin(), order.end());
    double epoch_loss = 0;
    std::size_t n_batches = 0;
    for (std::size_t lo = 0; lo < N; lo += cfg.batch) {
      const std::size_t hi = std::min(N, lo + cfg.batch);
      Tensor<T> x({hi - lo, 1, ds.bands, ds.frames});
      std::vector<std::size_t> y(hi - lo);
      for (std::size_t k = lo; k < hi; ++k) {
        std::copy_n(ds.specs[order[k]].data(), ds.bands * ds.frames,
                    x.data() + (k - lo) * ds.bands * ds.frames);
        y[k - lo] = ds.labels[order[k]];
      }
      x = augment_batch(x, source_device, cfg.augmentation, backend, rng);
      model.params.zero_grad();
      auto loss = ad::softmax_cross_entropy(model.forward(ad::constant(x), true), y);
      ad::backward(loss);
      opt.step();
      epoch_loss += static_cast<double>(loss->value[0]);
      ++n_batches;
    }
    log.epoch_loss.push_back(epoch_loss / n_batches);
  }
  log.first_epoch_loss = log.epoch_loss.front();
  log.last_epoch_loss = log.epoch_loss.back();
  return log;
}

template <typename T>
inline std::vector<std::size_t> sec_predict(const SmallCnn<T>& model,
                                            const std::vector<Tensor<T>>& specs,
                                            std::size_t batch = 64) {
  std::vector<std::size_t> preds;
  for (std::size_t lo = 0; lo < specs.size(); lo += batch) {
    const std::size_t hi = std::min(specs.size(), lo + batch);
    Tensor<T> x({hi - lo, 1, specs[0].dim(0), specs[0].dim(1)});
    for (std::size_t k = lo; k < hi; ++k)
      std::copy_n(specs[k].data(), specs[k].size(), x.data() + (k - lo) * specs[k].size());
    auto logits = model.forward(ad::constant(x), false);
    for (std::size_t b = 0; b < hi - lo; ++b) {
      std::size_t am = 0;
      for (std::size_t k = 1; k < logits->value.dim(1); ++k)
        if (logits->value(b, k) > logits->value(b, am)) am = k;
      preds.push_back(am);
    }
  }
  return preds;
}

// Fills the source x target macro-F1 matrix from per-source models on the
// val split (complete across devices).
template <typename T>
inline F1Report evaluate_matrix(const std::vector<std::shared_ptr<SmallCnn<T>>>& models,
                                const CorpusManifest& m) {
  F1Report rep;
  rep.device_ids = m.device_ids;
  const std::size_t K = m.device_ids.size();
  if (models.size() != K)
    throw std::invalid_argument("evaluate_matrix: one model per source device required");

  for (std::size_t tgt = 0; tgt < K; ++tgt)
    if (m.select("val", m.device_ids[tgt]).empty())
      throw std::runtime_error("evaluate_matrix: no val items for device " + m.device_ids[tgt]);

  rep.matrix.assign(K, std::vector<double>(K, 0.0));
  for (std::size_t tgt = 0; tgt < K; ++tgt) {
    SECDataset<T> val = load_sec_split<T>(m, "val", m.device_ids[tgt]);
    for (std::size_t src = 0; src < K; ++src) {
      auto preds = sec_predict(*models[src], val.specs);
      rep.matrix[src][tgt] = macro_f1(val.labels, preds, val.n_classes);
    }
  }
  rep.finalize();
  return rep;
}

}  // namespace umc
