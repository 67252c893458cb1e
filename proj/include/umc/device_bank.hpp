#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "umc/fft.hpp"
#include "umc/frontend.hpp"
#include "umc/rng.hpp"
#include "umc/tensor.hpp"
#include "umc/tensor_io.hpp"

namespace umc {

// amplitude dB <-> natural-log amplitude
inline double db_to_log(double db) { return db * std::log(10.0) / 20.0; }
inline double log_to_db(double nat) { return nat * 20.0 / std::log(10.0); }

struct DeviceProfile {
  std::string device_id;
  FrequencyResponse fr;              // measured, 128 bands
  std::vector<double> fr_spec;       // fr re-projected onto the 80-band spectrogram axis
  std::optional<std::vector<double>> filter_taps;  // synthetic devices only
};

struct FRDifference {
  std::vector<double> values;  // target minus source, 128 bands

  std::size_t bands() const { return values.size(); }
};

struct SynthFRConfig {
  std::size_t n_bands = 128;
  std::size_t n_regions = 5;
  std::size_t n_anchors = 7;              // n_regions + 2
  double mid_lo = db_to_log(-3.0);        // interior anchors
  double mid_hi = db_to_log(3.0);
  double edge_lo = db_to_log(-9.0);       // the two end anchors
  double edge_hi = db_to_log(9.0);
  double noise_sigma = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_anchors != n_regions + 2)
      throw std::invalid_argument("synth_fr: n_anchors must equal n_regions + 2");
    if (mid_lo > mid_hi || edge_lo > edge_hi)
      throw std::invalid_argument("synth_fr: ranges must be ordered");
    if (noise_sigma < 0) throw std::invalid_argument("synth_fr: sigma must be >= 0");
    if (n_bands < 2) throw std::invalid_argument("synth_fr: need at least 2 bands");
  }
};

// ---------------------------------------------------------------- operations

inline FRDifference fr_difference(const DeviceProfile& source, const DeviceProfile& target) {
  if (source.fr.bands() != target.fr.bands())
    throw std::invalid_argument("fr_difference: band count mismatch (" +
                                std::to_string(source.fr.bands()) + " vs " +
                                std::to_string(target.fr.bands()) + ")");
  FRDifference d;
  d.values.resize(source.fr.bands());
  for (std::size_t i = 0; i < d.values.size(); ++i)
    d.values[i] = target.fr.values[i] - source.fr.values[i];
  return d;
}

// Piecewise-linear resampling between uniform mel grids. Both axes are uniform
// in mel, so normalized [0,1] positions preserve endpoints and constants.
inline std::vector<double> resample_linear(const std::vector<double>& src, std::size_t n_out) {
  if (src.size() < 2 || n_out < 2) throw std::invalid_argument("resample_linear: need >= 2 points");
  std::vector<double> out(n_out);
  const double scale = static_cast<double>(src.size() - 1) / static_cast<double>(n_out - 1);
  for (std::size_t i = 0; i < n_out; ++i) {
    const double x = i * scale;
    const auto j = static_cast<std::size_t>(x);
    if (j + 1 >= src.size()) {
      out[i] = src.back();
    } else {
      const double t = x - j;
      out[i] = src[j] * (1.0 - t) + src[j + 1] * t;
    }
  }
  return out;
}

// 128-band FR axis -> 80-band spectrogram axis.
inline std::vector<double> project_fr(const std::vector<double>& fr128, std::size_t n_out = 80) {
  return resample_linear(fr128, n_out);
}

// Adds the (projected) FR difference to every frame, then re-clamps at the floor.
inline LogMelSpectrogram oracle_convert(const LogMelSpectrogram& s, const FRDifference& d,
                                        double log_floor = 1e-5) {
  const std::size_t bands = s.mel_bands, frames = s.frames();
  const std::vector<double> dd =
      d.values.size() == bands ? d.values : project_fr(d.values, bands);
  const double floor_log = std::log(log_floor);
  LogMelSpectrogram out = s;
  for (std::size_t m = 0; m < bands; ++m)
    for (std::size_t t = 0; t < frames; ++t)
      out.values(m, t) = std::max(s.values(m, t) + dd[m], floor_log);
  return out;
}

// Synthetic FR difference (anchor interpolation + Gaussian noise).
// Seven anchors sit at normalized positions i/6: region boundaries plus ends.
// End anchors draw from edge_range, interior anchors from mid_range.
inline FRDifference sample_synthetic_fr_difference(const SynthFRConfig& cfg, Rng& rng) {
  cfg.validate();
  std::vector<double> anchors(cfg.n_anchors);
  for (std::size_t i = 0; i < cfg.n_anchors; ++i) {
    const bool edge = (i == 0 || i + 1 == cfg.n_anchors);
    anchors[i] = edge ? rng.uniform(cfg.edge_lo, cfg.edge_hi) : rng.uniform(cfg.mid_lo, cfg.mid_hi);
  }
  FRDifference d;
  d.values = resample_linear(anchors, cfg.n_bands);
  if (cfg.noise_sigma > 0)
    for (auto& v : d.values) v += rng.normal(0.0, cfg.noise_sigma);
  return d;
}

inline FRDifference sample_synthetic_fr_difference(const SynthFRConfig& cfg) {
  Rng rng(cfg.seed);
  return sample_synthetic_fr_difference(cfg, rng);
}

// Linear convolution with the device taps, output truncated to input length.
inline WaveBuffer simulate_recording(const WaveBuffer& w, const DeviceProfile& device) {
  if (!device.filter_taps)
    throw std::invalid_argument("simulate_recording: device '" + device.device_id +
                                "' has no filter taps");
  const auto& h = *device.filter_taps;
  WaveBuffer out;
  out.sample_rate = w.sample_rate;
  out.samples.assign(w.samples.size(), 0.0);
  const std::size_t n = w.samples.size(), nt = h.size();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t kmax = std::min(nt, i + 1);
    double acc = 0.0;
    for (std::size_t k = 0; k < kmax; ++k) acc += h[k] * w.samples[i - k];
    out.samples[i] = acc;
  }
  return out;
}

// ------------------------------------------------- synthetic filter design

// Analytic mel-projected log response of an FIR filter, evaluated by direct
// DTFT sums on the same grid the FR extractor uses.
inline std::vector<double> analytic_filter_response(const std::vector<double>& taps,
                                                    const FrontendConfig& cfg,
                                                    double sample_rate) {
  const auto seg = static_cast<std::size_t>(std::llround(sample_rate * cfg.fr_segment_sec));
  const std::size_t n_fft = next_pow2(seg);
  const std::size_t n_bins = n_fft / 2 + 1;
  TensorD mag({n_bins, 1});
  for (std::size_t k = 0; k < n_bins; ++k) {
    const double w = 2.0 * M_PI * k / static_cast<double>(n_fft);
    double re = 0.0, im = 0.0;
    for (std::size_t n = 0; n < taps.size(); ++n) {
      re += taps[n] * std::cos(w * n);
      im -= taps[n] * std::sin(w * n);
    }
    mag(k, 0) = std::hypot(re, im);
  }
  TensorD mel = mel_project(mag, cfg.mel_bands_fr, cfg, sample_rate);
  std::vector<double> out(cfg.mel_bands_fr);
  for (std::size_t m = 0; m < cfg.mel_bands_fr; ++m)
    out[m] = std::log(std::max(mel(m, 0), cfg.log_floor));
  return out;
}

namespace detail {

// Minimum-phase FIR with the given smooth log-amplitude response, via the real
// cepstrum. Minimum phase keeps the impulse-response peak at the front, which
// the argmax onset detector relies on.
inline std::vector<double> design_min_phase_fir(const std::vector<double>& log_amp_grid,
                                                std::size_t n_taps) {
  const std::size_t n = (log_amp_grid.size() - 1) * 2;  // full FFT size
  std::vector<std::complex<double>> spec(n);
  for (std::size_t k = 0; k < log_amp_grid.size(); ++k) spec[k] = {log_amp_grid[k], 0.0};
  for (std::size_t k = log_amp_grid.size(); k < n; ++k) spec[k] = spec[n - k];

  // IFFT(log|H|) -> real cepstrum (via conj-FFT-conj, scaled)
  for (auto& c : spec) c = std::conj(c);
  fft_inplace(spec);
  for (auto& c : spec) c = std::conj(c) / static_cast<double>(n);

  // fold to causal part
  std::vector<std::complex<double>> cep(n, {0.0, 0.0});
  cep[0] = spec[0].real();
  for (std::size_t i = 1; i < n / 2; ++i) cep[i] = 2.0 * spec[i].real();
  cep[n / 2] = spec[n / 2].real();

  fft_inplace(cep);
  for (auto& c : cep) c = std::exp(c);

  // IFFT back to the impulse response
  for (auto& c : cep) c = std::conj(c);
  fft_inplace(cep);
  std::vector<double> h(n_taps);
  for (std::size_t i = 0; i < n_taps; ++i) h[i] = cep[i].real() / static_cast<double>(n);

  // taper the tail so truncation does not ring
  for (std::size_t i = n_taps / 2; i < n_taps; ++i) {
    const double t = static_cast<double>(i - n_taps / 2) / static_cast<double>(n_taps - n_taps / 2);
    h[i] *= 0.5 + 0.5 * std::cos(M_PI * t);
  }
  return h;
}

}  // namespace detail

// Random smooth FIR device filter whose mel-band response stays within
// +/- max_dev_db of unity.
inline std::vector<double> random_device_filter(Rng& rng, const FrontendConfig& cfg,
                                                double sample_rate, std::size_t n_taps = 64,
                                                double max_dev_db = 12.0) {
  const std::size_t grid_fft = 1024;
  const std::size_t n_grid = grid_fft / 2 + 1;
  const std::size_t n_anchor = 7;

  double amp = db_to_log(max_dev_db) * 0.75;  // headroom for design error
  for (int attempt = 0; attempt < 16; ++attempt) {
    std::vector<double> anchors(n_anchor);
    for (auto& a : anchors) a = rng.uniform(-amp, amp);
    // smooth log-amplitude curve, uniform in mel
    std::vector<double> curve = resample_linear(anchors, n_grid);
    std::vector<double> h = detail::design_min_phase_fir(curve, n_taps);

    auto resp = analytic_filter_response(h, cfg, sample_rate);
    double worst = 0.0;
    // compare against the flat (delta) reference so filterbank gains cancel
    std::vector<double> delta(n_taps, 0.0);
    delta[0] = 1.0;
    auto flat = analytic_filter_response(delta, cfg, sample_rate);
    for (std::size_t m = 0; m < resp.size(); ++m)
      worst = std::max(worst, std::abs(resp[m] - flat[m]));
    std::size_t peak = 0;
    for (std::size_t i = 1; i < h.size(); ++i)
      if (std::abs(h[i]) > std::abs(h[peak])) peak = i;
    if (worst <= db_to_log(max_dev_db) && peak == 0) return h;
    amp *= 0.8;  // shrink and retry deterministically
  }
  throw std::runtime_error("random_device_filter: could not satisfy band constraint");
}

// JSON manifest (ids, tap counts) + binary tensors for taps and FRs.
inline void save_device_bank(const std::vector<DeviceProfile>& bank, const std::string& json_path,
                             const std::string& tensors_path) {
  nlohmann::json j;
  j["device_ids"] = nlohmann::json::array();
  j["tap_counts"] = nlohmann::json::array();
  for (const auto& d : bank) {
    j["device_ids"].push_back(d.device_id);
    j["tap_counts"].push_back(d.filter_taps ? d.filter_taps->size() : 0);
  }
  j["tensors"] = tensors_path;
  std::ofstream f(json_path);
  if (!f) throw std::runtime_error("save_device_bank: cannot open " + json_path);
  f << j.dump(2) << "\n";

  std::vector<std::pair<std::string, TensorD>> entries;
  for (std::size_t i = 0; i < bank.size(); ++i) {
    const auto& d = bank[i];
    entries.emplace_back("fr" + std::to_string(i), TensorD::from_vector(d.fr.values));
    entries.emplace_back("fr_spec" + std::to_string(i), TensorD::from_vector(d.fr_spec));
    if (d.filter_taps)
      entries.emplace_back("taps" + std::to_string(i), TensorD::from_vector(*d.filter_taps));
  }
  save_named_tensors(tensors_path, entries);
}

inline std::vector<DeviceProfile> load_device_bank(const std::string& json_path) {
  std::ifstream f(json_path);
  if (!f) throw std::runtime_error("load_device_bank: cannot open " + json_path);
  nlohmann::json j;
  f >> j;
  std::string tensors_path = j.at("tensors").get<std::string>();
  if (!std::filesystem::path(tensors_path).is_absolute())
    tensors_path = (std::filesystem::path(json_path).parent_path() / tensors_path).string();
  auto entries = load_named_tensors<double>(tensors_path);
  std::map<std::string, TensorD> m;
  for (auto& [n, t] : entries) m[n] = std::move(t);

  std::vector<DeviceProfile> bank;
  const auto ids = j.at("device_ids").get<std::vector<std::string>>();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    DeviceProfile p;
    p.device_id = ids[i];
    p.fr.values = m.at("fr" + std::to_string(i)).vec();
    p.fr_spec = m.at("fr_spec" + std::to_string(i)).vec();
    auto it = m.find("taps" + std::to_string(i));
    if (it != m.end()) p.filter_taps = it->second.vec();
    bank.push_back(std::move(p));
  }
  return bank;
}

// Synthetic stand-in bank: n devices with ground-truth taps, measured FR
// (impulse through simulate_recording + extract_frequency_response) and the
// 80-band projection.
inline std::vector<DeviceProfile> make_synthetic_device_bank(std::size_t n_devices,
                                                             std::uint64_t seed,
                                                             const FrontendConfig& cfg,
                                                             double sample_rate = 22050.0,
                                                             std::size_t n_taps = 64,
                                                             double max_dev_db = 12.0) {
  if (n_devices < 2) throw std::invalid_argument("make_synthetic_device_bank: need >= 2 devices");
  std::vector<DeviceProfile> bank;
  bank.reserve(n_devices);
  Rng root(seed);
  const WaveBuffer impulse = make_impulse(sample_rate, 1.0);
  for (std::size_t i = 0; i < n_devices; ++i) {
    Rng dev_rng = root.derive(i);
    DeviceProfile p;
    p.device_id = "dev" + std::to_string(i);
    p.filter_taps = random_device_filter(dev_rng, cfg, sample_rate, n_taps, max_dev_db);
    WaveBuffer rec = simulate_recording(impulse, p);
    p.fr = extract_frequency_response(rec, cfg);
    p.fr_spec = project_fr(p.fr.values, cfg.mel_bands_spec);
    bank.push_back(std::move(p));
  }
  return bank;
}

}  // namespace umc
