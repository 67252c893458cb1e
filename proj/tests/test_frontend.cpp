#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "umc/device_bank.hpp"
#include "umc/frontend.hpp"
#include "umc/rng.hpp"

using namespace umc;

namespace {

// Reference O(n^2) DFT magnitude of one windowed frame; the independent oracle
// the FFT path is checked against.
std::vector<double> naive_frame_magnitude(const std::vector<double>& signal, std::size_t offset,
                                          std::size_t n_fft) {
  auto win = hanning_window(n_fft);
  std::vector<double> mag(n_fft / 2 + 1);
  for (std::size_t k = 0; k <= n_fft / 2; ++k) {
    double re = 0, im = 0;
    for (std::size_t i = 0; i < n_fft; ++i) {
      const double v = signal[offset + i] * win[i];
      re += v * std::cos(2 * M_PI * k * i / static_cast<double>(n_fft));
      im -= v * std::sin(2 * M_PI * k * i / static_cast<double>(n_fft));
    }
    mag[k] = std::hypot(re, im);
  }
  return mag;
}

// Independent triangular filterbank evaluation (same convention, separate code)
double naive_mel_weight(std::size_t m, std::size_t k, std::size_t n_mel, std::size_t n_fft,
                        double sr, double fmin, double fmax) {
  const double mel_lo = hz_to_mel(fmin), mel_hi = hz_to_mel(fmax);
  auto edge = [&](std::size_t i) {
    return mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / static_cast<double>(n_mel + 1));
  };
  const double f = k * sr / static_cast<double>(n_fft);
  const double lo = edge(m), c = edge(m + 1), hi = edge(m + 2);
  if (f <= lo || f >= hi) return 0.0;
  return f <= c ? (f - lo) / (c - lo) : (hi - f) / (hi - c);
}

WaveBuffer make_noise(std::size_t n, double sr, std::uint64_t seed) {
  Rng r(seed);
  WaveBuffer w;
  w.sample_rate = sr;
  w.samples.resize(n);
  for (auto& s : w.samples) s = 0.3 * r.normal();
  return w;
}

}  // namespace

TEST_CASE("stft: zero signal gives zero magnitudes") {
  FrontendConfig cfg;
  WaveBuffer w;
  w.sample_rate = 22050;
  w.samples.assign(22050, 0.0);
  TensorD mag = stft_magnitude(w, cfg);
  REQUIRE(mag.dim(0) == cfg.fft_size / 2 + 1);
  REQUIRE(mag.dim(1) == (22050 - 1024) / 256 + 1);
  REQUIRE(mag.max() == 0.0);
}

TEST_CASE("stft: frame count formula and too-short error") {
  FrontendConfig cfg;
  for (std::size_t n : {1024u, 1025u, 1279u, 1280u, 5000u}) {
    WaveBuffer w;
    w.sample_rate = 22050;
    w.samples.assign(n, 0.1);
    REQUIRE(stft_magnitude(w, cfg).dim(1) == (n - cfg.fft_size) / cfg.hop + 1);
  }
  WaveBuffer tiny;
  tiny.sample_rate = 22050;
  tiny.samples.assign(1023, 0.1);
  REQUIRE_THROWS_WITH(stft_magnitude(tiny, cfg), Catch::Matchers::ContainsSubstring("too short"));
  WaveBuffer empty;
  REQUIRE_THROWS(stft_magnitude(empty, cfg));
}

TEST_CASE("stft: impulse frames trace the Hanning window") {
  FrontendConfig cfg;
  WaveBuffer w;
  w.sample_rate = 22050;
  w.samples.assign(4096, 0.0);
  const std::size_t pos = 1536;  // center of frame 2 with hop 256: offset 1536-512=1024? frame fits
  w.samples[pos] = 1.0;
  TensorD mag = stft_magnitude(w, cfg);
  const auto win = hanning_window(cfg.fft_size);
  for (std::size_t t = 0; t < mag.dim(1); ++t) {
    const std::size_t start = t * cfg.hop;
    if (start > pos || pos >= start + cfg.fft_size) continue;
    const double expected = win[pos - start];  // flat spectrum of a lone sample
    for (std::size_t k = 0; k <= cfg.fft_size / 2; k += 97)
      REQUIRE(mag(k, t) == Catch::Approx(expected).margin(1e-9));
  }
}

TEST_CASE("stft: bin-centered sine concentrates energy; matches reference DFT") {
  FrontendConfig cfg;
  const double sr = 22050;
  const std::size_t k0 = 64;
  WaveBuffer w;
  w.sample_rate = sr;
  w.samples.resize(4096);
  for (std::size_t i = 0; i < w.samples.size(); ++i)
    w.samples[i] = std::sin(2 * M_PI * k0 * i / static_cast<double>(cfg.fft_size));
  TensorD mag = stft_magnitude(w, cfg);

  const std::size_t t = mag.dim(1) / 2;
  auto ref = naive_frame_magnitude(w.samples, t * cfg.hop, cfg.fft_size);
  for (std::size_t k = 0; k <= cfg.fft_size / 2; ++k)
    REQUIRE(mag(k, t) == Catch::Approx(ref[k]).margin(1e-7 + 1e-4 * ref[k]));

  // energy concentrated at k0 (Hann main lobe spans k0 +/- 1)
  double peak = mag(k0, t);
  for (std::size_t k = 0; k <= cfg.fft_size / 2; ++k)
    if (k + 2 < k0 || k > k0 + 2) REQUIRE(mag(k, t) < 0.01 * peak);
}

TEST_CASE("stft magnitudes match brute-force DFT on random signal") {
  FrontendConfig cfg;
  WaveBuffer w = make_noise(3000, 22050, 77);
  TensorD mag = stft_magnitude(w, cfg);
  for (std::size_t t = 0; t < mag.dim(1); ++t) {
    auto ref = naive_frame_magnitude(w.samples, t * cfg.hop, cfg.fft_size);
    for (std::size_t k = 0; k <= cfg.fft_size / 2; ++k)
      REQUIRE(mag(k, t) == Catch::Approx(ref[k]).margin(1e-7 + 1e-4 * std::abs(ref[k])));
  }
}

TEST_CASE("mel_project: zero, single-bin and white spectra") {
  FrontendConfig cfg;
  const double sr = 22050;
  const std::size_t n_bins = cfg.fft_size / 2 + 1;

  TensorD zero({n_bins, 2});
  REQUIRE(mel_project(zero, 80, cfg, sr).max() == 0.0);

  // single-bin impulse -> one filterbank column
  const std::size_t kk = 100;
  TensorD impulse({n_bins, 1});
  impulse(kk, 0) = 1.0;
  TensorD col = mel_project(impulse, 80, cfg, sr);
  for (std::size_t m = 0; m < 80; ++m)
    REQUIRE(col(m, 0) ==
            Catch::Approx(naive_mel_weight(m, kk, 80, cfg.fft_size, sr, 0, sr / 2)).margin(1e-12));

  // white spectrum -> row sums, computed with the independent evaluator
  TensorD white({n_bins, 1}, 1.0);
  TensorD rows = mel_project(white, 80, cfg, sr);
  for (std::size_t m = 0; m < 80; ++m) {
    double sum = 0;
    for (std::size_t k = 0; k < n_bins; ++k)
      sum += naive_mel_weight(m, k, 80, cfg.fft_size, sr, 0, sr / 2);
    REQUIRE(rows(m, 0) == Catch::Approx(sum).margin(1e-9));
  }
}

TEST_CASE("mel_project: linearity and band-count error") {
  FrontendConfig cfg;
  const double sr = 22050;
  Rng r(3);
  const std::size_t n_bins = cfg.fft_size / 2 + 1;
  TensorD a({n_bins, 3}), b({n_bins, 3});
  for (auto& v : a.vec()) v = std::abs(r.normal());
  for (auto& v : b.vec()) v = std::abs(r.normal());
  TensorD ab({n_bins, 3});
  for (std::size_t i = 0; i < ab.size(); ++i) ab[i] = 2.0 * a[i] + 3.0 * b[i];
  TensorD pa = mel_project(a, 80, cfg, sr), pb = mel_project(b, 80, cfg, sr);
  TensorD pab = mel_project(ab, 80, cfg, sr);
  for (std::size_t i = 0; i < pab.size(); ++i)
    REQUIRE(pab[i] == Catch::Approx(2.0 * pa[i] + 3.0 * pb[i]).margin(1e-9));

  REQUIRE_THROWS_AS(mel_project(a, 1000, cfg, sr), std::invalid_argument);
}

TEST_CASE("log_compress floors and maps") {
  FrontendConfig cfg;
  TensorD x({3, 1});
  x(0, 0) = cfg.log_floor;
  x(1, 0) = 0.0;
  x(2, 0) = 1.0;
  auto s = log_compress(x, cfg.log_floor);
  REQUIRE(s.values(0, 0) == Catch::Approx(std::log(cfg.log_floor)));
  REQUIRE(s.values(1, 0) == Catch::Approx(std::log(cfg.log_floor)));
  REQUIRE(s.values(2, 0) == Catch::Approx(0.0).margin(1e-12));
  REQUIRE_THROWS(log_compress(x, 0.0));
}

TEST_CASE("make_impulse: unit sample, sum and energy") {
  WaveBuffer w = make_impulse(22050, 1.0);
  REQUIRE(w.samples.size() == 22050);
  double sum = 0, energy = 0;
  std::size_t ones = 0;
  for (double v : w.samples) {
    sum += v;
    energy += v * v;
    if (v == 1.0) ++ones;
  }
  REQUIRE(ones == 1);
  REQUIRE(sum == 1.0);
  REQUIRE(energy == 1.0);
  REQUIRE_THROWS(make_impulse(22050, 0.1));
}

TEST_CASE("extract_frequency_response: identity device equals the delta's own FR") {
  FrontendConfig cfg;
  const double sr = 22050;
  WaveBuffer imp = make_impulse(sr, 1.0);
  FrequencyResponse fr = extract_frequency_response(imp, cfg);
  REQUIRE(fr.bands() == cfg.mel_bands_fr);

  // the delta's magnitude spectrum is flat 1 -> FR = log(max(rowsum, floor))
  const std::size_t n_fft = next_pow2(static_cast<std::size_t>(sr * 0.2));
  for (std::size_t m = 0; m < cfg.mel_bands_fr; m += 7) {
    double sum = 0;
    for (std::size_t k = 0; k <= n_fft / 2; ++k)
      sum += naive_mel_weight(m, k, cfg.mel_bands_fr, n_fft, sr, 0, sr / 2);
    REQUIRE(fr.values[m] == Catch::Approx(std::log(std::max(sum, cfg.log_floor))).margin(1e-9));
  }
}

TEST_CASE("extract_frequency_response: known FIR lowpass within 1 dB of analytic response") {
  FrontendConfig cfg;
  const double sr = 22050;
  // exponential-decay lowpass h[k] = (1-a) a^k: front-loaded like a measured
  // impulse response (the argmax onset rule needs the peak at the start), with
  // the closed form |H(w)| = (1-a)/|1 - a e^{-iw}| as an independent oracle
  const std::size_t L = 64;
  const double a = 0.7;
  std::vector<double> taps(L);
  for (std::size_t i = 0; i < L; ++i) taps[i] = (1.0 - a) * std::pow(a, static_cast<double>(i));

  WaveBuffer imp = make_impulse(sr, 1.0);
  WaveBuffer rec;
  rec.sample_rate = sr;
  rec.samples.assign(imp.samples.size(), 0.0);
  for (std::size_t i = 0; i < rec.samples.size(); ++i)
    for (std::size_t k = 0; k < L && k <= i; ++k) rec.samples[i] += taps[k] * imp.samples[i - k];

  FrequencyResponse fr = extract_frequency_response(rec, cfg);

  // analytic |H| on the same grid -> naive mel -> log
  const std::size_t n_fft = next_pow2(static_cast<std::size_t>(sr * 0.2));
  const double floor_log = std::log(cfg.log_floor);
  double mae = 0;
  std::size_t n_used = 0;
  for (std::size_t m = 0; m < cfg.mel_bands_fr; ++m) {
    double mel = 0;
    for (std::size_t k = 0; k <= n_fft / 2; ++k) {
      const double wgt = naive_mel_weight(m, k, cfg.mel_bands_fr, n_fft, sr, 0, sr / 2);
      if (wgt == 0) continue;
      const double w = 2 * M_PI * k / static_cast<double>(n_fft);
      mel += wgt * (1.0 - a) / std::hypot(1.0 - a * std::cos(w), a * std::sin(w));
    }
    const double expected = std::log(std::max(mel, cfg.log_floor));
    if (expected > floor_log + 0.5) {  // bands with energy above floor
      mae += std::abs(fr.values[m] - expected);
      ++n_used;
    }
  }
  mae /= n_used;
  REQUIRE(n_used > 40);
  REQUIRE(mae < db_to_log(1.0));
}

TEST_CASE("extract_frequency_response: gain-2 device shifts FR by log 2") {
  FrontendConfig cfg;
  WaveBuffer imp = make_impulse(22050, 1.0);
  FrequencyResponse base = extract_frequency_response(imp, cfg);
  WaveBuffer gained = imp;
  for (auto& s : gained.samples) s *= 2.0;
  FrequencyResponse fr2 = extract_frequency_response(gained, cfg);
  const double floor_log = std::log(cfg.log_floor);
  for (std::size_t m = 0; m < base.bands(); ++m)
    if (base.values[m] > floor_log + 1.0)
      REQUIRE(fr2.values[m] - base.values[m] == Catch::Approx(std::log(2.0)).margin(1e-9));
}

TEST_CASE("extract_frequency_response: gain equivariance property") {
  FrontendConfig cfg;
  Rng r(21);
  WaveBuffer rec = make_noise(22050, 22050, 31);
  rec.samples[5000] = 3.0;  // clear onset
  FrequencyResponse base = extract_frequency_response(rec, cfg);
  const double g = 3.7;
  WaveBuffer scaled = rec;
  for (auto& s : scaled.samples) s *= g;
  FrequencyResponse fr = extract_frequency_response(scaled, cfg);
  const double floor_log = std::log(cfg.log_floor);
  for (std::size_t m = 0; m < base.bands(); ++m)
    if (base.values[m] > floor_log + 1.5)
      REQUIRE(fr.values[m] - base.values[m] == Catch::Approx(std::log(g)).margin(1e-9));
}

TEST_CASE("extract_frequency_response: silent recording is an error") {
  FrontendConfig cfg;
  WaveBuffer w;
  w.sample_rate = 22050;
  w.samples.assign(22050, 0.0);
  REQUIRE_THROWS_WITH(extract_frequency_response(w, cfg),
                      Catch::Matchers::ContainsSubstring("no impulse"));
}

TEST_CASE("wave_to_logmel shapes follow the config across lengths") {
  FrontendConfig cfg;
  Rng r(4);
  for (int rep = 0; rep < 5; ++rep) {
    const auto n = static_cast<std::size_t>(r.uniform(1500, 30000));
    WaveBuffer w = make_noise(n, 22050, 100 + rep);
    auto s = wave_to_logmel(w, cfg);
    REQUIRE(s.mel_bands == cfg.mel_bands_spec);
    REQUIRE(s.values.dim(0) == cfg.mel_bands_spec);
    REQUIRE(s.values.dim(1) == (n - cfg.fft_size) / cfg.hop + 1);
    REQUIRE(s.values.min() >= std::log(cfg.log_floor) - 1e-12);
    REQUIRE(s.values.all_finite());
  }
}
