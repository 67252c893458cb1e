#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "umc/corpus.hpp"
#include "umc/device_bank.hpp"
#include "umc/network.hpp"
#include "umc/optim.hpp"
#include "umc/tensor_io.hpp"

namespace umc {

struct LossWeights {
  double lambda_cycle = 10.0;
  double lambda_identity = 0.0;

  void validate() const {
    if (lambda_cycle < 0 || lambda_identity < 0)
      throw std::invalid_argument("loss weights must be >= 0");
  }
};

struct TrainSchedule {
  double lr = 5e-4;
  double beta1 = 0.5, beta2 = 0.999;
  std::size_t epochs = 100;
  std::size_t lr_decay_every = 30;   // epochs; lr divided by lr_decay_factor
  double lr_decay_factor = 10.0;
  std::size_t batch_size = 16;       // paper uses 400
  std::size_t crop_frames = 64;      // random time crop; 0 = full length
  std::size_t cycle_warmup_steps = 0;  // adversarial-only steps before the cycle
                                       // weight ramps in (over warmup/3 steps)
  bool adv_reconstruction = false;     // CycleGAN-style second adversarial term:
                                       // the reconstruction must fool the source
                                       // device's discriminator

  void validate() const {
    if (lr <= 0) throw std::invalid_argument("schedule: lr must be > 0");
    if (epochs < 1) throw std::invalid_argument("schedule: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("schedule: batch_size must be >= 1");
  }

  double lr_at_epoch(std::size_t epoch) const {
    return lr / std::pow(lr_decay_factor, static_cast<double>(epoch / lr_decay_every));
  }
};

// Replay store of previously generated spectrograms, one per discriminator.
// Policy: below capacity, store and return the fresh sample; at capacity,
// with probability 1/2 swap the fresh sample against a stored one.
template <typename T>
class ImageBuffer {
 public:
  explicit ImageBuffer(std::size_t capacity = 50) : capacity_(capacity) {}

  Tensor<T> query(const Tensor<T>& fresh, Rng& rng) {
    if (capacity_ == 0) return fresh;
    if (store_.size() < capacity_) {
      store_.push_back(fresh);
      return fresh;
    }
    if (rng.bernoulli(0.5)) {
      const std::size_t j = rng.index(store_.size());
      Tensor<T> old = store_[j];
      store_[j] = fresh;
      return old;
    }
    return fresh;
  }

  std::size_t size() const { return store_.size(); }
  std::size_t capacity() const { return capacity_; }
  const std::vector<Tensor<T>>& contents() const { return store_; }
  std::vector<Tensor<T>>& contents() { return store_; }

 private:
  std::size_t capacity_;
  std::vector<Tensor<T>> store_;
};

// ---------------------------------------------------------------- losses

template <typename T>
inline ad::Var<T> lsgan_d_loss(const ad::Var<T>& real_scores, const ad::Var<T>& fake_scores) {
  return ad::add(ad::mse_to_const(real_scores, T(1)), ad::mse_to_const(fake_scores, T(0)));
}

template <typename T>
inline ad::Var<T> lsgan_g_loss(const ad::Var<T>& fake_scores) {
  return ad::mse_to_const(fake_scores, T(1));
}

template <typename T>
inline ad::Var<T> cycle_loss(const ad::Var<T>& x, const ad::Var<T>& x_rec) {
  return ad::l1_loss(x, x_rec);
}

// value-only forms for direct checks
template <typename T>
inline T lsgan_d_loss_value(const Tensor<T>& real, const Tensor<T>& fake) {
  T a{}, b{};
  for (std::size_t i = 0; i < real.size(); ++i) a += (real[i] - T(1)) * (real[i] - T(1));
  for (std::size_t i = 0; i < fake.size(); ++i) b += fake[i] * fake[i];
  return a / static_cast<T>(real.size()) + b / static_cast<T>(fake.size());
}

template <typename T>
inline T lsgan_g_loss_value(const Tensor<T>& fake) {
  T a{};
  for (std::size_t i = 0; i < fake.size(); ++i) a += (fake[i] - T(1)) * (fake[i] - T(1));
  return a / static_cast<T>(fake.size());
}

template <typename T>
inline T cycle_loss_value(const Tensor<T>& x, const Tensor<T>& x_rec) {
  return mean_abs_diff(x, x_rec);
}

// ---------------------------------------------------------------- trainer

// In-memory training set: complete (item x device) grid of spectrograms.
template <typename T>
struct TrainingSet {
  std::vector<std::vector<Tensor<T>>> specs;  // [device][item]
  std::size_t n_devices = 0, n_items = 0;
  std::size_t bands = 0, frames = 0;
};

template <typename T>
inline TrainingSet<T> load_training_set(const CorpusManifest& m, const std::string& split) {
  TrainingSet<T> ts;
  ts.n_devices = m.device_ids.size();
  ts.specs.resize(ts.n_devices);
  std::map<std::string, std::size_t> dev_index;
  for (std::size_t d = 0; d < ts.n_devices; ++d) dev_index[m.device_ids[d]] = d;
  std::map<std::string, std::size_t> item_index;
  for (const auto& it : m.items) {
    if (it.split != split) continue;
    if (!item_index.count(it.item_id)) {
      const std::size_t idx = item_index.size();
      item_index[it.item_id] = idx;
      for (auto& v : ts.specs) v.resize(idx + 1);
    }
    TensorF spec32 = load_item_spec(m, it);
    Tensor<T> spec(spec32.shape());
    for (std::size_t i = 0; i < spec.size(); ++i) spec[i] = static_cast<T>(spec32[i]);
    ts.specs[dev_index.at(it.device_id)][item_index.at(it.item_id)] = std::move(spec);
  }
  ts.n_items = item_index.size();
  if (ts.n_items == 0) throw std::runtime_error("load_training_set: split '" + split + "' is empty");
  ts.bands = ts.specs[0][0].dim(0);
  ts.frames = ts.specs[0][0].dim(1);
  return ts;
}

struct TrainingPair {
  std::vector<std::size_t> items;  // indices into the train_mc split
  std::size_t device_a = 0, device_b = 0;
  std::vector<double> d_ab;        // 128-band FR difference
};

// One (source, target) draw per step: items uniform from train_mc, source
// device uniform, target uniform over the remaining devices.
inline TrainingPair sample_training_pair(std::size_t n_items, const std::vector<DeviceProfile>& bank,
                                         std::size_t batch, Rng& rng) {
  if (bank.size() < 2) throw std::invalid_argument("sample_training_pair: need >= 2 devices");
  TrainingPair p;
  p.device_a = rng.index(bank.size());
  p.device_b = (p.device_a + 1 + rng.index(bank.size() - 1)) % bank.size();
  p.items.resize(batch);
  for (auto& i : p.items) i = rng.index(n_items);
  p.d_ab = fr_difference(bank[p.device_a], bank[p.device_b]).values;
  return p;
}

struct StepMetrics {
  double g_adv = 0, g_cycle = 0, g_identity = 0, g_total = 0, d_loss = 0;
  std::size_t device_a = 0, device_b = 0;
};

// Rebuilds a generator from a trainer checkpoint (G.* tensors + metadata).
template <typename T>
inline std::shared_ptr<Generator<T>> load_generator_checkpoint(const std::string& path) {
  std::ifstream mf(path + ".json");
  if (!mf) throw std::runtime_error("generator checkpoint metadata missing: " + path + ".json");
  nlohmann::json meta;
  mf >> meta;
  GeneratorConfig gcfg;
  const auto& g = meta.at("generator");
  gcfg.base_channels = g.at("base_channels").get<std::size_t>();
  gcfg.n_downsamples = g.at("n_downsamples").get<std::size_t>();
  gcfg.n_resblocks = g.at("n_resblocks").get<std::size_t>();
  gcfg.decoder_norm = g.at("decoder_norm").get<bool>();
  gcfg.global_skip = g.at("global_skip").get<bool>();
  gcfg.coord_feature = g.at("coord_feature").get<bool>();
  gcfg.input_mean = g.at("input_mean").get<double>();
  gcfg.input_std = g.at("input_std").get<double>();
  FiLMEncoderConfig fcfg;
  fcfg.input_bands = meta.at("film").at("input_bands").get<std::size_t>();
  fcfg.mlp_hidden = meta.at("film").at("mlp_hidden").get<std::size_t>();

  auto gen = std::make_shared<Generator<T>>(gcfg, fcfg, meta.value("seed", std::uint64_t{0}));
  auto entries = load_named_tensors<T>(path);
  std::map<std::string, Tensor<T>> loose;
  for (auto& [n, t] : entries) loose[n] = std::move(t);
  for (auto& [name, v] : gen->params.entries) {
    auto it = loose.find("G." + name);
    if (it == loose.end()) throw std::runtime_error("checkpoint missing tensor G." + name);
    v->value = it->second;
  }
  return gen;
}

template <typename T>
class GanTrainer {
 public:
  GanTrainer(const GeneratorConfig& gcfg, const FiLMEncoderConfig& fcfg,
             const DiscriminatorConfig& dcfg, const std::vector<DeviceProfile>& bank,
             const LossWeights& weights, const TrainSchedule& sched, std::uint64_t seed)
      : bank_(bank), weights_(weights), sched_(sched), rng_(seed), seed_(seed) {
    weights.validate();
    sched.validate();
    gen_ = std::make_shared<Generator<T>>(gcfg, fcfg, seed);
    opt_g_ = nn::Adam<T>(gen_->params, sched.lr, sched.beta1, sched.beta2);
    for (std::size_t i = 0; i < bank.size(); ++i) {
      discs_.push_back(std::make_shared<Discriminator<T>>(dcfg, Rng::splitmix64(seed) + i));
      opt_d_.emplace_back(discs_.back()->params, sched.lr, sched.beta1, sched.beta2);
      buffers_.emplace_back(50);
    }
  }

  Generator<T>& generator() { return *gen_; }
  std::vector<std::shared_ptr<Discriminator<T>>>& discriminators() { return discs_; }
  std::vector<ImageBuffer<T>>& buffers() { return buffers_; }
  Rng& rng() { return rng_; }
  std::size_t epoch() const { return epoch_; }
  std::size_t step() const { return global_step_; }

  // Assembles (B, 1, F, Tc) batch with a shared random time crop per sample.
  Tensor<T> make_batch(const TrainingSet<T>& ts, const std::vector<std::size_t>& items,
                       std::size_t device, const std::vector<std::size_t>& crops) const {
    const std::size_t Tc = sched_.crop_frames ? std::min(sched_.crop_frames, ts.frames) : ts.frames;
    Tensor<T> batch({items.size(), 1, ts.bands, Tc});
    for (std::size_t k = 0; k < items.size(); ++k) {
      const Tensor<T>& s = ts.specs[device][items[k]];
      for (std::size_t f = 0; f < ts.bands; ++f)
        std::copy_n(s.data() + f * ts.frames + crops[k], Tc,
                    batch.data() + ((k * 1 + 0) * ts.bands + f) * Tc);
    }
    return batch;
  }

  StepMetrics training_step(const TrainingSet<T>& ts, const std::string& run_dir = "") {
    const TrainingPair pair = sample_training_pair(ts.n_items, bank_, sched_.batch_size, rng_);
    const std::size_t Tc = sched_.crop_frames ? std::min(sched_.crop_frames, ts.frames) : ts.frames;
    std::vector<std::size_t> crops(pair.items.size(), 0);
    for (auto& c : crops) c = ts.frames > Tc ? rng_.index(ts.frames - Tc + 1) : 0;

    Tensor<T> x_a = make_batch(ts, pair.items, pair.device_a, crops);
    Tensor<T> d_ab({pair.items.size(), pair.d_ab.size()});
    Tensor<T> d_ba(d_ab.shape());
    for (std::size_t k = 0; k < pair.items.size(); ++k)
      for (std::size_t j = 0; j < pair.d_ab.size(); ++j) {
        d_ab(k, j) = static_cast<T>(pair.d_ab[j]);
        d_ba(k, j) = static_cast<T>(-pair.d_ab[j]);
      }

    // generator update
    gen_->params.zero_grad();
    discs_[pair.device_b]->params.zero_grad();
    auto x_var = ad::constant(x_a);
    auto fake_b = gen_->forward(x_var, ad::constant(d_ab));
    auto rec_a = gen_->forward(fake_b, ad::constant(d_ba));
    auto g_adv = lsgan_g_loss(discs_[pair.device_b]->forward(fake_b));
    if (sched_.adv_reconstruction)
      g_adv = ad::add(g_adv, lsgan_g_loss(discs_[pair.device_a]->forward(rec_a)));
    auto g_cyc = cycle_loss(x_var, rec_a);
    double lam = weights_.lambda_cycle;
    if (sched_.cycle_warmup_steps > 0) {
      if (global_step_ < sched_.cycle_warmup_steps)
        lam = 0.0;
      else {
        const double ramp = std::max<double>(1.0, sched_.cycle_warmup_steps / 3.0);
        lam *= std::min(1.0, (global_step_ - sched_.cycle_warmup_steps) / ramp);
      }
    }
    auto g_total = ad::add(g_adv, ad::scale(g_cyc, static_cast<T>(lam)));
    ad::Var<T> g_id;
    if (weights_.lambda_identity > 0) {
      Tensor<T> d_zero(d_ab.shape());
      auto same = gen_->forward(x_var, ad::constant(d_zero));
      g_id = cycle_loss(x_var, same);
      g_total = ad::add(g_total, ad::scale(g_id, static_cast<T>(weights_.lambda_identity)));
    }
    ad::backward(g_total);
    opt_g_.step();

    // discriminator-b update: fresh reals vs buffer-mixed fakes
    std::vector<std::size_t> real_items(sched_.batch_size);
    for (auto& i : real_items) i = rng_.index(ts.n_items);
    std::vector<std::size_t> real_crops(sched_.batch_size, 0);
    for (auto& c : real_crops) c = ts.frames > Tc ? rng_.index(ts.frames - Tc + 1) : 0;
    Tensor<T> real_b = make_batch(ts, real_items, pair.device_b, real_crops);

    Tensor<T> fake_mixed(fake_b->value.shape());
    const std::size_t sample_sz = fake_mixed.size() / sched_.batch_size;
    for (std::size_t k = 0; k < sched_.batch_size; ++k) {
      Tensor<T> one({1, 1, x_a.dim(2), x_a.dim(3)});
      std::copy_n(fake_b->value.data() + k * sample_sz, sample_sz, one.data());
      Tensor<T> mixed = buffers_[pair.device_b].query(one, rng_);
      std::copy_n(mixed.data(), sample_sz, fake_mixed.data() + k * sample_sz);
    }

    discs_[pair.device_b]->params.zero_grad();
    auto d_loss = lsgan_d_loss(discs_[pair.device_b]->forward(ad::constant(real_b)),
                               discs_[pair.device_b]->forward(ad::constant(fake_mixed)));
    ad::backward(d_loss);
    opt_d_[pair.device_b].step();

    StepMetrics m;
    m.g_adv = static_cast<double>(g_adv->value[0]);
    m.g_cycle = static_cast<double>(g_cyc->value[0]);
    m.g_identity = g_id ? static_cast<double>(g_id->value[0]) : 0.0;
    m.g_total = static_cast<double>(g_total->value[0]);
    m.d_loss = static_cast<double>(d_loss->value[0]);
    m.device_a = pair.device_a;
    m.device_b = pair.device_b;
    ++global_step_;

    if (!std::isfinite(m.g_total) || !std::isfinite(m.d_loss)) {
      if (!run_dir.empty()) save_checkpoint(run_dir + "/diagnostic_nan.ckpt");
      throw std::runtime_error("training_step: NaN loss at step " + std::to_string(global_step_) +
                               (run_dir.empty() ? "" : ", diagnostic checkpoint written"));
    }
    return m;
  }

  // ------------------------------------------------------------ checkpoints

  void save_checkpoint(const std::string& path) const {
    std::vector<std::pair<std::string, Tensor<T>>> entries;
    for (const auto& [name, v] : gen_->params.entries) entries.emplace_back("G." + name, v->value);
    for (std::size_t d = 0; d < discs_.size(); ++d)
      for (const auto& [name, v] : discs_[d]->params.entries)
        entries.emplace_back("D" + std::to_string(d) + "." + name, v->value);
    auto& og = const_cast<nn::Adam<T>&>(opt_g_);
    for (std::size_t p = 0; p < gen_->params.entries.size(); ++p) {
      entries.emplace_back("optG.m." + gen_->params.entries[p].first, og.moments_m()[p]);
      entries.emplace_back("optG.v." + gen_->params.entries[p].first, og.moments_v()[p]);
    }
    for (std::size_t d = 0; d < discs_.size(); ++d) {
      auto& od = const_cast<nn::Adam<T>&>(opt_d_[d]);
      for (std::size_t p = 0; p < discs_[d]->params.entries.size(); ++p) {
        entries.emplace_back("optD" + std::to_string(d) + ".m." + discs_[d]->params.entries[p].first,
                             od.moments_m()[p]);
        entries.emplace_back("optD" + std::to_string(d) + ".v." + discs_[d]->params.entries[p].first,
                             od.moments_v()[p]);
      }
    }
    for (std::size_t d = 0; d < buffers_.size(); ++d) {
      const auto& store = buffers_[d].contents();
      for (std::size_t j = 0; j < store.size(); ++j)
        entries.emplace_back("buffer" + std::to_string(d) + "." + std::to_string(j), store[j]);
    }
    save_named_tensors(path, entries);

    nlohmann::json meta;
    meta["epoch"] = epoch_;
    meta["step"] = global_step_;
    meta["rng"] = rng_.serialize();
    meta["seed"] = seed_;
    meta["opt_g_t"] = opt_g_.step_count();
    nlohmann::json dts = nlohmann::json::array();
    for (const auto& od : opt_d_) dts.push_back(od.step_count());
    meta["opt_d_t"] = dts;
    meta["generator"] = {{"base_channels", gen_->config().base_channels},
                         {"n_downsamples", gen_->config().n_downsamples},
                         {"n_resblocks", gen_->config().n_resblocks},
                         {"decoder_norm", gen_->config().decoder_norm},
                         {"global_skip", gen_->config().global_skip},
                         {"coord_feature", gen_->config().coord_feature},
                         {"input_mean", gen_->config().input_mean},
                         {"input_std", gen_->config().input_std}};
    meta["film"] = {{"input_bands", gen_->film_config().input_bands},
                    {"mlp_hidden", gen_->film_config().mlp_hidden},
                    {"out_channels", gen_->film_config().out_channels}};
    meta["n_devices"] = discs_.size();
    std::ofstream mf(path + ".json");
    mf << meta.dump(2) << "\n";
  }

  void load_checkpoint(const std::string& path) {
    auto entries = load_named_tensors<T>(path);
    std::map<std::string, Tensor<T>*> index;
    std::map<std::string, Tensor<T>> loose;
    for (auto& [name, t] : entries) loose[name] = std::move(t);

    auto fetch = [&](const std::string& name) -> Tensor<T>& {
      auto it = loose.find(name);
      if (it == loose.end()) throw std::runtime_error("checkpoint missing tensor: " + name);
      return it->second;
    };

    for (auto& [name, v] : gen_->params.entries) v->value = fetch("G." + name);
    for (std::size_t d = 0; d < discs_.size(); ++d)
      for (auto& [name, v] : discs_[d]->params.entries)
        v->value = fetch("D" + std::to_string(d) + "." + name);
    for (std::size_t p = 0; p < gen_->params.entries.size(); ++p) {
      opt_g_.moments_m()[p] = fetch("optG.m." + gen_->params.entries[p].first);
      opt_g_.moments_v()[p] = fetch("optG.v." + gen_->params.entries[p].first);
    }
    for (std::size_t d = 0; d < discs_.size(); ++d)
      for (std::size_t p = 0; p < discs_[d]->params.entries.size(); ++p) {
        opt_d_[d].moments_m()[p] =
            fetch("optD" + std::to_string(d) + ".m." + discs_[d]->params.entries[p].first);
        opt_d_[d].moments_v()[p] =
            fetch("optD" + std::to_string(d) + ".v." + discs_[d]->params.entries[p].first);
      }
    for (std::size_t d = 0; d < buffers_.size(); ++d) {
      buffers_[d].contents().clear();
      for (std::size_t j = 0;; ++j) {
        auto it = loose.find("buffer" + std::to_string(d) + "." + std::to_string(j));
        if (it == loose.end()) break;
        buffers_[d].contents().push_back(it->second);
      }
    }

    std::ifstream mf(path + ".json");
    if (!mf) throw std::runtime_error("checkpoint metadata missing: " + path + ".json");
    nlohmann::json meta;
    mf >> meta;
    epoch_ = meta.at("epoch").get<std::size_t>();
    global_step_ = meta.at("step").get<std::size_t>();
    rng_.deserialize(meta.at("rng").get<std::string>());
    opt_g_.step_counter() = meta.at("opt_g_t").get<std::size_t>();
    for (std::size_t d = 0; d < opt_d_.size(); ++d)
      opt_d_[d].step_counter() = meta.at("opt_d_t")[d].get<std::size_t>();
  }

  // ------------------------------------------------------------ full loop

  struct EpochMetrics {
    std::size_t epoch = 0;
    double lr = 0, g_adv = 0, g_cycle = 0, g_total = 0, d_loss = 0;
    std::size_t steps = 0;
  };

  // Runs remaining epochs; emits one metrics row per epoch via `on_epoch`.
  template <typename F>
  void train(const TrainingSet<T>& ts, std::size_t steps_per_epoch, const std::string& run_dir,
             F&& on_epoch) {
    namespace fs = std::filesystem;
    if (!run_dir.empty()) fs::create_directories(run_dir);
    double best = std::numeric_limits<double>::max();
    for (; epoch_ < sched_.epochs; ++epoch_) {
      const double lr = sched_.lr_at_epoch(epoch_);
      opt_g_.set_lr(lr);
      for (auto& od : opt_d_) od.set_lr(lr);
      EpochMetrics em;
      em.epoch = epoch_;
      em.lr = lr;
      em.steps = steps_per_epoch;
      for (std::size_t s = 0; s < steps_per_epoch; ++s) {
        StepMetrics m = training_step(ts, run_dir);
        em.g_adv += m.g_adv;
        em.g_cycle += m.g_cycle;
        em.g_total += m.g_total;
        em.d_loss += m.d_loss;
      }
      em.g_adv /= steps_per_epoch;
      em.g_cycle /= steps_per_epoch;
      em.g_total /= steps_per_epoch;
      em.d_loss /= steps_per_epoch;
      if (!run_dir.empty()) {
        save_checkpoint(run_dir + "/last.ckpt");
        if (em.g_cycle < best) {
          best = em.g_cycle;
          save_checkpoint(run_dir + "/best.ckpt");
        }
      }
      on_epoch(em);
    }
  }

 private:
  std::vector<DeviceProfile> bank_;
  LossWeights weights_;
  TrainSchedule sched_;
  Rng rng_;
  std::uint64_t seed_;
  std::shared_ptr<Generator<T>> gen_;
  std::vector<std::shared_ptr<Discriminator<T>>> discs_;
  nn::Adam<T> opt_g_;
  std::vector<nn::Adam<T>> opt_d_;
  std::vector<ImageBuffer<T>> buffers_;
  std::size_t epoch_ = 0;
  std::size_t global_step_ = 0;
};

}  // namespace umc
