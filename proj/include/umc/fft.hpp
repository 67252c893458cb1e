#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace umc {

inline bool is_pow2(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

inline std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

// In-place iterative radix-2 FFT. n must be a power of two.
inline void fft_inplace(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  if (!is_pow2(n)) throw std::invalid_argument("fft: size must be a power of two");

  // bit reversal permutation
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }

  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * M_PI / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        std::complex<double> u = a[i + k];
        std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

// Magnitudes of the one-sided spectrum (bins 0 .. n/2) of a real frame.
// The frame is zero-padded to n_fft; n_fft must be a power of two.
inline std::vector<double> rfft_magnitude(const double* frame, std::size_t frame_len,
                                          std::size_t n_fft) {
  if (!is_pow2(n_fft)) throw std::invalid_argument("rfft_magnitude: n_fft must be a power of two");
  if (frame_len > n_fft) throw std::invalid_argument("rfft_magnitude: frame longer than n_fft");
  std::vector<std::complex<double>> buf(n_fft, {0.0, 0.0});
  for (std::size_t i = 0; i < frame_len; ++i) buf[i] = {frame[i], 0.0};
  fft_inplace(buf);
  std::vector<double> mag(n_fft / 2 + 1);
  for (std::size_t k = 0; k <= n_fft / 2; ++k) mag[k] = std::abs(buf[k]);
  return mag;
}

}  // namespace umc
