#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "umc/device_bank.hpp"
#include "umc/frontend.hpp"
#include "umc/rng.hpp"
#include "umc/tensor_io.hpp"
#include "umc/wav.hpp"

namespace umc {

enum class EventKind { ToneComplex, Chirp, NoiseBurst, AmTone, ClickTrain };

inline const char* to_string(EventKind k) {
  switch (k) {
    case EventKind::ToneComplex: return "tone-complex";
    case EventKind::Chirp: return "chirp";
    case EventKind::NoiseBurst: return "noise-burst";
    case EventKind::AmTone: return "am-tone";
    case EventKind::ClickTrain: return "click-train";
  }
  return "?";
}

inline EventKind event_kind_from_string(const std::string& s) {
  if (s == "tone-complex") return EventKind::ToneComplex;
  if (s == "chirp") return EventKind::Chirp;
  if (s == "noise-burst") return EventKind::NoiseBurst;
  if (s == "am-tone") return EventKind::AmTone;
  if (s == "click-train") return EventKind::ClickTrain;
  throw std::invalid_argument("unknown event kind: " + s);
}

struct Range {
  double lo = 0.0, hi = 0.0;
  double sample(Rng& rng) const { return lo == hi ? lo : rng.uniform(lo, hi); }
};

struct EventClassSpec {
  std::string class_id;
  EventKind kind = EventKind::ToneComplex;
  Range f0{200, 400};          // fundamental / carrier / band center (Hz)
  Range f1{800, 1600};         // chirp end frequency (Hz)
  Range rolloff_db{2, 4};      // per-harmonic rolloff, tone complexes (dB)
  Range bandwidth{200, 400};   // noise-burst bandwidth (Hz)
  Range am_rate{3, 8};         // AM modulator (Hz)
  Range click_rate{8, 16};     // clicks per second
  Range duration{1.0, 1.0};    // seconds
  Range level{0.1, 0.3};       // peak amplitude
  double noise_bed = 0.02;     // broadband bed, relative to level; keeps every
                               // mel band informative about the device response

  void validate() const {
    if (duration.lo < 0.5) throw std::invalid_argument("event class: duration must be >= 0.5 s");
  }
};

// Ten desk classes. Three noise bands, two tone timbres, two chirp directions
// and three temporal patterns; spectral and temporal cues both present so
// device EQ hurts but does not destroy separability.
inline std::vector<EventClassSpec> default_class_specs(std::size_t n_classes) {
  std::vector<EventClassSpec> presets(10);
  auto& p = presets;
  p[0] = {"noise-low", EventKind::NoiseBurst, {250, 450}, {}, {}, {250, 500}, {}, {}, {1, 1}, {0.1, 0.3}};
  p[1] = {"noise-mid", EventKind::NoiseBurst, {1200, 1900}, {}, {}, {400, 800}, {}, {}, {1, 1}, {0.1, 0.3}};
  p[2] = {"noise-high", EventKind::NoiseBurst, {4500, 6500}, {}, {}, {800, 1600}, {}, {}, {1, 1}, {0.1, 0.3}};
  p[3] = {"tone-dark", EventKind::ToneComplex, {180, 320}, {}, {7, 10}, {}, {}, {}, {1, 1}, {0.1, 0.3}};
  p[4] = {"tone-bright", EventKind::ToneComplex, {180, 320}, {}, {0.5, 2}, {}, {}, {}, {1, 1}, {0.1, 0.3}};
  p[5] = {"chirp-up", EventKind::Chirp, {300, 600}, {3000, 6000}, {}, {}, {}, {}, {1, 1}, {0.1, 0.3}};
  p[6] = {"chirp-down", EventKind::Chirp, {3000, 6000}, {300, 600}, {}, {}, {}, {}, {1, 1}, {0.1, 0.3}};
  p[7] = {"am-tone", EventKind::AmTone, {700, 1400}, {}, {}, {}, {3, 9}, {}, {1, 1}, {0.1, 0.3}};
  p[8] = {"click-train", EventKind::ClickTrain, {}, {}, {}, {}, {}, {8, 20}, {1, 1}, {0.1, 0.3}};
  p[9] = {"tone-noise-mix", EventKind::ToneComplex, {900, 1500}, {}, {3, 5}, {600, 1200}, {}, {}, {1, 1}, {0.1, 0.3}};

  std::vector<EventClassSpec> out;
  for (std::size_t i = 0; i < n_classes; ++i) {
    EventClassSpec s = presets[i % 10];
    if (i >= 10) {  // shifted variants beyond the presets
      s.class_id += "-v" + std::to_string(i / 10);
      s.f0.lo *= 1.0 + 0.15 * (i / 10);
      s.f0.hi *= 1.0 + 0.15 * (i / 10);
    }
    out.push_back(s);
  }
  return out;
}

namespace detail {

inline void apply_envelope(std::vector<double>& s, double sr) {
  const auto ramp = static_cast<std::size_t>(0.02 * sr);  // 20 ms fade
  for (std::size_t i = 0; i < ramp && i < s.size(); ++i) {
    const double g = static_cast<double>(i) / ramp;
    s[i] *= g;
    s[s.size() - 1 - i] *= g;
  }
}

}  // namespace detail

// Deterministic parametric event synthesis.
inline WaveBuffer synth_event_wave(const EventClassSpec& spec, Rng& rng, double sample_rate) {
  spec.validate();
  const double dur = spec.duration.sample(rng);
  const double level = spec.level.sample(rng);
  const auto n = static_cast<std::size_t>(std::llround(dur * sample_rate));
  std::vector<double> s(n, 0.0);
  const double dt = 1.0 / sample_rate;

  switch (spec.kind) {
    case EventKind::ToneComplex: {
      const double f0 = spec.f0.sample(rng);
      const double roll = db_to_log(spec.rolloff_db.sample(rng));
      const int n_harm = 8;
      for (int h = 1; h <= n_harm; ++h) {
        const double f = f0 * h;
        if (f >= sample_rate / 2) break;
        const double a = std::exp(-roll * (h - 1));
        const double ph = rng.uniform(0, 2 * M_PI);
        for (std::size_t i = 0; i < n; ++i) s[i] += a * std::sin(2 * M_PI * f * i * dt + ph);
      }
      if (spec.bandwidth.hi > 0) {  // optional noise companion (tone-noise-mix)
        const double c = spec.f0.sample(rng) * 2.5;
        const double bw = spec.bandwidth.sample(rng);
        for (int j = 0; j < 24; ++j) {
          const double f = c - bw / 2 + bw * (j + 0.5) / 24.0;
          const double ph = rng.uniform(0, 2 * M_PI);
          for (std::size_t i = 0; i < n; ++i) s[i] += 0.15 * std::sin(2 * M_PI * f * i * dt + ph);
        }
      }
      break;
    }
    case EventKind::Chirp: {
      const double fa = spec.f0.sample(rng), fb = spec.f1.sample(rng);
      for (std::size_t i = 0; i < n; ++i) {
        const double t = i * dt;
        const double phase = 2 * M_PI * (fa * t + 0.5 * (fb - fa) / dur * t * t);
        s[i] = std::sin(phase);
      }
      break;
    }
    case EventKind::NoiseBurst: {
      const double c = spec.f0.sample(rng);
      const double bw = spec.bandwidth.sample(rng);
      const int n_comp = 48;  // random-phase sinusoid bed ~ bandlimited noise
      for (int j = 0; j < n_comp; ++j) {
        const double f = c - bw / 2 + bw * (j + 0.5) / n_comp;
        if (f <= 0 || f >= sample_rate / 2) continue;
        const double ph = rng.uniform(0, 2 * M_PI);
        const double a = 1.0 / std::sqrt(n_comp);
        for (std::size_t i = 0; i < n; ++i) s[i] += a * std::sin(2 * M_PI * f * i * dt + ph);
      }
      break;
    }
    case EventKind::AmTone: {
      const double f = spec.f0.sample(rng);
      const double r = spec.am_rate.sample(rng);
      const double ph = rng.uniform(0, 2 * M_PI);
      for (std::size_t i = 0; i < n; ++i) {
        const double t = i * dt;
        s[i] = (0.5 + 0.5 * std::sin(2 * M_PI * r * t)) * std::sin(2 * M_PI * f * t + ph);
      }
      break;
    }
    case EventKind::ClickTrain: {
      const double rate = spec.click_rate.sample(rng);
      const auto period = static_cast<std::size_t>(sample_rate / rate);
      const auto width = static_cast<std::size_t>(0.002 * sample_rate);
      for (std::size_t start = period / 2; start + width < n; start += period)
        for (std::size_t i = 0; i < width; ++i)
          s[start + i] += std::exp(-5.0 * i / width) * (i % 2 ? -1.0 : 1.0);
      break;
    }
  }

  double peak = 1e-12;
  for (double v : s) peak = std::max(peak, std::abs(v));
  for (auto& v : s) v *= level / peak;
  if (spec.noise_bed > 0)
    for (auto& v : s) v += rng.normal(0.0, level * spec.noise_bed);
  detail::apply_envelope(s, sample_rate);

  WaveBuffer w;
  w.sample_rate = sample_rate;
  w.samples = std::move(s);
  return w;
}

// ---------------------------------------------------------------- manifest

struct CorpusItem {
  std::string item_id;
  std::string class_id;
  std::size_t class_index = 0;
  std::string device_id;
  std::string split;      // train_mc | train_sec | val
  std::string wav_path;
  std::string spec_path;
  std::uint64_t seed = 0;  // per-item synthesis seed (shared across devices)
};

struct CorpusManifest {
  std::vector<CorpusItem> items;
  std::vector<std::string> device_ids;
  std::vector<std::string> class_ids;
  double sample_rate = 22050.0;
  std::uint64_t seed = 0;
  std::string root;

  std::vector<const CorpusItem*> select(const std::string& split,
                                        const std::string& device_id = "") const {
    std::vector<const CorpusItem*> out;
    for (const auto& it : items)
      if ((split.empty() || it.split == split) && (device_id.empty() || it.device_id == device_id))
        out.push_back(&it);
    return out;
  }
};

inline nlohmann::json manifest_to_json(const CorpusManifest& m) {
  nlohmann::json j;
  j["sample_rate"] = m.sample_rate;
  j["seed"] = m.seed;
  j["device_ids"] = m.device_ids;
  j["class_ids"] = m.class_ids;
  j["items"] = nlohmann::json::array();
  for (const auto& it : m.items)
    j["items"].push_back({{"item_id", it.item_id},
                          {"class_id", it.class_id},
                          {"class_index", it.class_index},
                          {"device_id", it.device_id},
                          {"split", it.split},
                          {"wav", it.wav_path},
                          {"spec", it.spec_path},
                          {"seed", it.seed}});
  return j;
}

inline CorpusManifest manifest_from_json(const nlohmann::json& j, const std::string& root) {
  CorpusManifest m;
  m.sample_rate = j.at("sample_rate").get<double>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.device_ids = j.at("device_ids").get<std::vector<std::string>>();
  m.class_ids = j.at("class_ids").get<std::vector<std::string>>();
  m.root = root;
  for (const auto& e : j.at("items")) {
    CorpusItem it;
    it.item_id = e.at("item_id").get<std::string>();
    it.class_id = e.at("class_id").get<std::string>();
    it.class_index = e.at("class_index").get<std::size_t>();
    it.device_id = e.at("device_id").get<std::string>();
    it.split = e.at("split").get<std::string>();
    it.wav_path = e.at("wav").get<std::string>();
    it.spec_path = e.at("spec").get<std::string>();
    it.seed = e.at("seed").get<std::uint64_t>();
    m.items.push_back(std::move(it));
  }
  return m;
}

inline void save_manifest(const CorpusManifest& m, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_manifest: cannot open " + path);
  f << manifest_to_json(m).dump(2) << "\n";
}

inline CorpusManifest load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_manifest: cannot open " + path);
  nlohmann::json j;
  f >> j;
  return manifest_from_json(j, std::filesystem::path(path).parent_path().string());
}

// ---------------------------------------------------------------- operations

struct SplitFractions {
  double train_mc = 0.4, train_sec = 0.4, val = 0.2;
};

// Assigns splits by underlying source signal so no signal leaks across splits.
inline void assign_splits(std::vector<std::string>& split_by_item, std::size_t n_items,
                          const SplitFractions& fr, Rng& rng) {
  if (std::abs(fr.train_mc + fr.train_sec + fr.val - 1.0) > 1e-9)
    throw std::invalid_argument("split fractions must sum to 1");
  std::vector<std::size_t> order(n_items);
  for (std::size_t i = 0; i < n_items; ++i) order[i] = i;
  rng.shuffle(order.begin(), order.end());
  const auto n_mc = static_cast<std::size_t>(std::llround(fr.train_mc * n_items));
  const auto n_sec = static_cast<std::size_t>(std::llround(fr.train_sec * n_items));
  if (n_mc == 0 || n_sec == 0 || n_mc + n_sec >= n_items)
    throw std::invalid_argument("split fractions give an empty split");
  split_by_item.assign(n_items, "val");
  for (std::size_t i = 0; i < n_mc; ++i) split_by_item[order[i]] = "train_mc";
  for (std::size_t i = n_mc; i < n_mc + n_sec; ++i) split_by_item[order[i]] = "train_sec";
}

// Generates the corpus: per item one clean waveform, recorded through every
// device; waveforms and precomputed spectrograms written under out_dir.
inline CorpusManifest synth_corpus(std::size_t n_classes, std::size_t n_items_per_class,
                                   const std::vector<EventClassSpec>& class_specs,
                                   const std::vector<DeviceProfile>& bank, std::uint64_t seed,
                                   const FrontendConfig& cfg, const std::string& out_dir,
                                   double sample_rate = 22050.0,
                                   const SplitFractions& fractions = {}) {
  if (n_classes < 2) throw std::invalid_argument("synth_corpus: need >= 2 classes");
  if (bank.empty()) throw std::invalid_argument("synth_corpus: empty device bank");
  if (class_specs.size() < n_classes)
    throw std::invalid_argument("synth_corpus: not enough class specs");

  namespace fs = std::filesystem;
  fs::create_directories(fs::path(out_dir) / "wav");
  fs::create_directories(fs::path(out_dir) / "spec");

  CorpusManifest m;
  m.sample_rate = sample_rate;
  m.seed = seed;
  m.root = out_dir;
  for (const auto& d : bank) m.device_ids.push_back(d.device_id);
  for (std::size_t c = 0; c < n_classes; ++c) m.class_ids.push_back(class_specs[c].class_id);

  Rng root(seed);
  const std::size_t n_items = n_classes * n_items_per_class;
  std::vector<std::string> split_by_item;
  Rng split_rng = root.derive(0xA5A5);
  assign_splits(split_by_item, n_items, fractions, split_rng);

  for (std::size_t c = 0; c < n_classes; ++c) {
    for (std::size_t k = 0; k < n_items_per_class; ++k) {
      const std::size_t item_index = c * n_items_per_class + k;
      const std::uint64_t item_seed = Rng::splitmix64(seed ^ Rng::splitmix64(item_index));
      Rng item_rng(item_seed);
      const WaveBuffer clean = synth_event_wave(class_specs[c], item_rng, sample_rate);
      const std::string item_id = "c" + std::to_string(c) + "_i" + std::to_string(k);

      for (const auto& dev : bank) {
        const WaveBuffer rec = simulate_recording(clean, dev);
        LogMelSpectrogram spec = wave_to_logmel(rec, cfg);

        CorpusItem it;
        it.item_id = item_id;
        it.class_id = class_specs[c].class_id;
        it.class_index = c;
        it.device_id = dev.device_id;
        it.split = split_by_item[item_index];
        it.seed = item_seed;
        it.wav_path = "wav/" + item_id + "_" + dev.device_id + ".wav";
        it.spec_path = "spec/" + item_id + "_" + dev.device_id + ".umt";
        write_wav((fs::path(out_dir) / it.wav_path).string(), rec, 32);

        TensorF specf(spec.values.shape());
        for (std::size_t i = 0; i < specf.size(); ++i)
          specf[i] = static_cast<float>(spec.values[i]);
        save_tensor((fs::path(out_dir) / it.spec_path).string(), specf);
        m.items.push_back(std::move(it));
      }
    }
  }
  return m;
}

// Re-partitions an existing manifest by source signal.
inline CorpusManifest split_corpus(const CorpusManifest& manifest, const SplitFractions& fractions,
                                   std::uint64_t seed) {
  std::vector<std::string> item_ids;
  std::map<std::string, std::size_t> index_of;
  for (const auto& it : manifest.items)
    if (!index_of.count(it.item_id)) {
      index_of[it.item_id] = item_ids.size();
      item_ids.push_back(it.item_id);
    }
  std::vector<std::string> split_by_item;
  Rng rng(seed);
  assign_splits(split_by_item, item_ids.size(), fractions, rng);

  CorpusManifest out = manifest;
  for (auto& it : out.items) it.split = split_by_item[index_of[it.item_id]];
  return out;
}

// Loads a precomputed spectrogram for a manifest entry.
inline TensorF load_item_spec(const CorpusManifest& m, const CorpusItem& it) {
  return load_tensor<float>((std::filesystem::path(m.root) / it.spec_path).string());
}

}  // namespace umc
