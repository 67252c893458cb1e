#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace umc {

struct WaveBuffer {
  std::vector<double> samples;
  double sample_rate = 22050.0;

  std::size_t size() const { return samples.size(); }
  double duration() const { return sample_rate > 0 ? samples.size() / sample_rate : 0.0; }
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  b.push_back(v & 0xff);
  b.push_back((v >> 8) & 0xff);
  b.push_back((v >> 16) & 0xff);
  b.push_back((v >> 24) & 0xff);
}

inline void put_u16(std::vector<std::uint8_t>& b, std::uint16_t v) {
  b.push_back(v & 0xff);
  b.push_back((v >> 8) & 0xff);
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
         std::uint32_t(p[3]) << 24;
}

inline std::uint16_t get_u16(const std::uint8_t* p) {
  return std::uint16_t(p[0]) | std::uint16_t(p[1]) << 8;
}

}  // namespace detail

// Writes mono WAV. format: 16 = PCM16, 32 = IEEE float32.
inline void write_wav(const std::string& path, const WaveBuffer& w, int bits = 32) {
  if (bits != 16 && bits != 32) throw std::invalid_argument("write_wav: bits must be 16 or 32");
  const std::uint16_t fmt = (bits == 32) ? 3 : 1;  // IEEE float / PCM
  const std::uint32_t sr = static_cast<std::uint32_t>(w.sample_rate);
  const std::uint16_t block = static_cast<std::uint16_t>(bits / 8);
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(w.samples.size() * block);

  std::vector<std::uint8_t> out;
  out.reserve(44 + data_bytes);
  auto tag = [&](const char* s) { out.insert(out.end(), s, s + 4); };
  tag("RIFF");
  detail::put_u32(out, 36 + data_bytes);
  tag("WAVE");
  tag("fmt ");
  detail::put_u32(out, 16);
  detail::put_u16(out, fmt);
  detail::put_u16(out, 1);  // mono
  detail::put_u32(out, sr);
  detail::put_u32(out, sr * block);
  detail::put_u16(out, block);
  detail::put_u16(out, static_cast<std::uint16_t>(bits));
  tag("data");
  detail::put_u32(out, data_bytes);

  for (double s : w.samples) {
    if (bits == 32) {
      float f = static_cast<float>(s);
      std::uint32_t u;
      std::memcpy(&u, &f, 4);
      detail::put_u32(out, u);
    } else {
      double c = s < -1.0 ? -1.0 : (s > 1.0 ? 1.0 : s);
      auto v = static_cast<std::int16_t>(std::lround(c * 32767.0));
      detail::put_u16(out, static_cast<std::uint16_t>(v));
    }
  }

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_wav: cannot open " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

// Reads 16-bit PCM or 32-bit float WAV; multichannel input is averaged to mono.
inline WaveBuffer read_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_wav: cannot open " + path);
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());
  if (buf.size() < 12 || std::memcmp(buf.data(), "RIFF", 4) != 0 ||
      std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
    throw std::runtime_error("read_wav: not a RIFF/WAVE file: " + path);

  std::uint16_t fmt = 0, channels = 0, bits = 0;
  std::uint32_t sr = 0;
  const std::uint8_t* data = nullptr;
  std::uint32_t data_len = 0;

  std::size_t pos = 12;
  while (pos + 8 <= buf.size()) {
    const char* id = reinterpret_cast<const char*>(buf.data() + pos);
    std::uint32_t len = detail::get_u32(buf.data() + pos + 4);
    const std::uint8_t* body = buf.data() + pos + 8;
    if (pos + 8 + len > buf.size()) break;
    if (std::memcmp(id, "fmt ", 4) == 0 && len >= 16) {
      fmt = detail::get_u16(body);
      channels = detail::get_u16(body + 2);
      sr = detail::get_u32(body + 4);
      bits = detail::get_u16(body + 14);
    } else if (std::memcmp(id, "data", 4) == 0) {
      data = body;
      data_len = len;
    }
    pos += 8 + len + (len & 1);
  }

  if (!data || channels == 0) throw std::runtime_error("read_wav: missing fmt/data chunk: " + path);
  const bool pcm16 = (fmt == 1 && bits == 16);
  const bool f32 = (fmt == 3 && bits == 32);
  if (!pcm16 && !f32)
    throw std::runtime_error("read_wav: unsupported format (need PCM16 or float32): " + path);

  const std::size_t bytes_per = bits / 8;
  const std::size_t n_frames = data_len / (bytes_per * channels);
  WaveBuffer w;
  w.sample_rate = sr;
  w.samples.resize(n_frames);
  for (std::size_t i = 0; i < n_frames; ++i) {
    double acc = 0.0;
    for (std::uint16_t c = 0; c < channels; ++c) {
      const std::uint8_t* p = data + (i * channels + c) * bytes_per;
      if (pcm16) {
        std::int16_t v = static_cast<std::int16_t>(detail::get_u16(p));
        acc += v / 32768.0;
      } else {
        std::uint32_t u = detail::get_u32(p);
        float fl;
        std::memcpy(&fl, &u, 4);
        acc += fl;
      }
    }
    w.samples[i] = acc / channels;
  }
  return w;
}

}  // namespace umc
