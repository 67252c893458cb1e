#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "umc/fft.hpp"
#include "umc/tensor.hpp"
#include "umc/wav.hpp"

namespace umc {

struct FrontendConfig {
  std::size_t fft_size = 1024;   // Hanning window length = FFT length
  std::size_t hop = 256;
  std::size_t mel_bands_spec = 80;
  std::size_t mel_bands_fr = 128;
  double log_floor = 1e-5;       // clamp on mel magnitudes before log
  double fmin = 0.0;
  double fmax = 0.0;             // 0 -> sample_rate / 2
  double fr_segment_sec = 0.2;   // impulse segment length for FR extraction

  void validate() const {
    if (hop == 0 || hop > fft_size) throw std::invalid_argument("frontend: hop must be in [1, fft_size]");
    if (mel_bands_spec < 1 || mel_bands_fr < 1) throw std::invalid_argument("frontend: mel band counts must be >= 1");
    if (log_floor <= 0) throw std::invalid_argument("frontend: log_floor must be > 0");
  }
};

struct LogMelSpectrogram {
  TensorD values;          // (mel_bands, frames)
  std::size_t mel_bands = 0;
  double frame_rate = 0.0;  // frames per second

  std::size_t frames() const { return values.ndim() == 2 ? values.dim(1) : 0; }
};

struct FrequencyResponse {
  std::vector<double> values;  // length mel_bands_fr, log-amplitude

  std::size_t bands() const { return values.size(); }
};

// ---------------------------------------------------------------- mel scale

inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

// Triangular, peak-normalized filterbank on the HTK mel scale.
// Rows index mel bands, columns index FFT bins 0..n_fft/2.
inline TensorD mel_filterbank(std::size_t n_mel, std::size_t n_fft, double sample_rate,
                              double fmin, double fmax) {
  if (fmax <= 0.0) fmax = sample_rate / 2.0;
  const std::size_t n_bins = n_fft / 2 + 1;

  std::size_t usable = 0;
  for (std::size_t k = 0; k < n_bins; ++k) {
    double fk = k * sample_rate / static_cast<double>(n_fft);
    if (fk >= fmin && fk <= fmax) ++usable;
  }
  if (n_mel > usable)
    throw std::invalid_argument("mel_filterbank: " + std::to_string(n_mel) +
                                " mel bands exceed " + std::to_string(usable) +
                                " usable FFT bins");

  const double mel_lo = hz_to_mel(fmin), mel_hi = hz_to_mel(fmax);
  std::vector<double> edges(n_mel + 2);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / static_cast<double>(n_mel + 1));

  TensorD fb({n_mel, n_bins});
  for (std::size_t m = 0; m < n_mel; ++m) {
    const double f_lo = edges[m], f_c = edges[m + 1], f_hi = edges[m + 2];
    for (std::size_t k = 0; k < n_bins; ++k) {
      const double fk = k * sample_rate / static_cast<double>(n_fft);
      double w = 0.0;
      if (fk > f_lo && fk < f_hi)
        w = fk <= f_c ? (fk - f_lo) / (f_c - f_lo) : (f_hi - fk) / (f_hi - f_c);
      fb(m, k) = w;
    }
  }
  return fb;
}

// Band center frequencies in mel units; shared axis for FR re-projection.
inline std::vector<double> mel_band_centers(std::size_t n_mel, double sample_rate, double fmin,
                                            double fmax) {
  if (fmax <= 0.0) fmax = sample_rate / 2.0;
  const double mel_lo = hz_to_mel(fmin), mel_hi = hz_to_mel(fmax);
  std::vector<double> centers(n_mel);
  for (std::size_t m = 0; m < n_mel; ++m)
    centers[m] = mel_lo + (mel_hi - mel_lo) * (m + 1) / static_cast<double>(n_mel + 1);
  return centers;
}

// ---------------------------------------------------------------- operations

inline std::vector<double> hanning_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / static_cast<double>(n));
  return w;
}

// Magnitude STFT, no padding: frames = floor((len - fft_size)/hop) + 1.
inline TensorD stft_magnitude(const WaveBuffer& w, const FrontendConfig& cfg) {
  cfg.validate();
  if (w.samples.empty()) throw std::invalid_argument("stft_magnitude: empty signal");
  if (w.samples.size() < cfg.fft_size) throw std::invalid_argument("stft_magnitude: signal too short");

  const std::size_t n_frames = (w.samples.size() - cfg.fft_size) / cfg.hop + 1;
  const std::size_t n_bins = cfg.fft_size / 2 + 1;
  const auto win = hanning_window(cfg.fft_size);

  TensorD mag({n_bins, n_frames});
  std::vector<double> frame(cfg.fft_size);
  for (std::size_t t = 0; t < n_frames; ++t) {
    const double* src = w.samples.data() + t * cfg.hop;
    for (std::size_t i = 0; i < cfg.fft_size; ++i) frame[i] = src[i] * win[i];
    auto m = rfft_magnitude(frame.data(), cfg.fft_size, cfg.fft_size);
    for (std::size_t k = 0; k < n_bins; ++k) mag(k, t) = m[k];
  }
  return mag;
}

// Projects a (bins, frames) nonnegative spectrogram onto n_mel mel bands.
inline TensorD mel_project(const TensorD& mag, std::size_t n_mel, const FrontendConfig& cfg,
                           double sample_rate) {
  if (mag.ndim() != 2) throw std::invalid_argument("mel_project: rank-2 input expected");
  const std::size_t n_bins = mag.dim(0), n_frames = mag.dim(1);
  const std::size_t n_fft = (n_bins - 1) * 2;
  const TensorD fb = mel_filterbank(n_mel, n_fft, sample_rate, cfg.fmin, cfg.fmax);

  TensorD out({n_mel, n_frames});
  for (std::size_t m = 0; m < n_mel; ++m)
    for (std::size_t t = 0; t < n_frames; ++t) {
      double acc = 0.0;
      for (std::size_t k = 0; k < n_bins; ++k) acc += fb(m, k) * mag(k, t);
      out(m, t) = acc;
    }
  return out;
}

inline LogMelSpectrogram log_compress(const TensorD& melspec, double log_floor,
                                      double frame_rate = 0.0) {
  if (log_floor <= 0) throw std::invalid_argument("log_compress: log_floor must be > 0");
  LogMelSpectrogram s;
  s.values = melspec;
  for (auto& v : s.values.vec()) v = std::log(std::max(v, log_floor));
  s.mel_bands = melspec.ndim() >= 1 ? melspec.dim(0) : 0;
  s.frame_rate = frame_rate;
  return s;
}

// Full waveform -> log-mel path as configured (80 bands by default).
inline LogMelSpectrogram wave_to_logmel(const WaveBuffer& w, const FrontendConfig& cfg) {
  TensorD mag = stft_magnitude(w, cfg);
  TensorD mel = mel_project(mag, cfg.mel_bands_spec, cfg, w.sample_rate);
  return log_compress(mel, cfg.log_floor, w.sample_rate / static_cast<double>(cfg.hop));
}

// Kronecker delta test signal. The unit sample sits 100 ms in when the buffer
// allows a full FR segment after it, else at the latest feasible offset.
inline WaveBuffer make_impulse(double sample_rate, double total_duration) {
  if (total_duration < 0.2) throw std::invalid_argument("make_impulse: duration must be >= 200 ms");
  WaveBuffer w;
  w.sample_rate = sample_rate;
  const auto n = static_cast<std::size_t>(std::llround(sample_rate * total_duration));
  w.samples.assign(n, 0.0);
  const double latest = total_duration - 0.2;
  const auto offset = static_cast<std::size_t>(std::llround(sample_rate * std::min(0.1, latest)));
  w.samples[std::min(offset, n - 1)] = 1.0;
  return w;
}

// Device FR from a recorded impulse: onset = argmax |sample|, one FFT over the
// 200-ms segment from the onset (zero-padded to the next power of two, which is
// exact for a time-limited response), 128-band mel projection, log compression.
// The segment is not windowed.
inline FrequencyResponse extract_frequency_response(const WaveBuffer& recorded,
                                                    const FrontendConfig& cfg) {
  cfg.validate();
  std::size_t onset = 0;
  double peak = 0.0;
  for (std::size_t i = 0; i < recorded.samples.size(); ++i) {
    double a = std::abs(recorded.samples[i]);
    if (a > peak) {
      peak = a;
      onset = i;
    }
  }
  if (peak == 0.0) throw std::runtime_error("extract_frequency_response: no impulse found");

  const auto seg_len = static_cast<std::size_t>(std::llround(recorded.sample_rate * cfg.fr_segment_sec));
  if (onset + seg_len > recorded.samples.size())
    throw std::runtime_error("extract_frequency_response: signal too short after onset");

  const std::size_t n_fft = next_pow2(seg_len);
  auto mag = rfft_magnitude(recorded.samples.data() + onset, seg_len, n_fft);

  TensorD col({mag.size(), 1});
  for (std::size_t k = 0; k < mag.size(); ++k) col(k, 0) = mag[k];
  TensorD mel = mel_project(col, cfg.mel_bands_fr, cfg, recorded.sample_rate);

  FrequencyResponse fr;
  fr.values.resize(cfg.mel_bands_fr);
  for (std::size_t m = 0; m < cfg.mel_bands_fr; ++m)
    fr.values[m] = std::log(std::max(mel(m, 0), cfg.log_floor));
  return fr;
}

}  // namespace umc
