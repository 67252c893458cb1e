#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "umc/fft.hpp"
#include "umc/rng.hpp"
#include "umc/tensor.hpp"
#include "umc/tensor_io.hpp"
#include "umc/wav.hpp"

using namespace umc;

namespace {
std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}
}  // namespace

TEST_CASE("tensor basics") {
  TensorD t({2, 3}, 1.5);
  REQUIRE(t.size() == 6);
  REQUIRE(t(1, 2) == 1.5);
  t(0, 1) = -2.0;
  REQUIRE(t.min() == -2.0);
  REQUIRE(t.max() == 1.5);
  REQUIRE_THROWS_AS(t.reshaped({4, 2}), std::invalid_argument);
  REQUIRE(t.reshaped({3, 2}).dim(0) == 3);
}

TEST_CASE("rng determinism and serialization") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) REQUIRE(a.uniform() == b.uniform());

  Rng c(7);
  for (int i = 0; i < 13; ++i) c.normal();
  const std::string state = c.serialize();
  Rng d(0);
  d.deserialize(state);
  for (int i = 0; i < 50; ++i) REQUIRE(c.normal() == d.normal());

  // derived streams differ from the parent and from each other
  Rng root(1);
  Rng s0 = root.derive(0), s1 = root.derive(1);
  REQUIRE(s0.uniform() != s1.uniform());
}

TEST_CASE("rng distributions are sane") {
  Rng r(123);
  double acc = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) acc += r.normal();
  REQUIRE(std::abs(acc / n) < 0.05);

  int counts[5] = {0};
  for (int i = 0; i < n; ++i) ++counts[r.randint(0, 5)];
  for (int c : counts) REQUIRE(std::abs(c - n / 5.0) < 5 * std::sqrt(n / 5.0));
}

TEST_CASE("fft matches naive dft") {
  Rng r(5);
  const std::size_t n = 256;
  std::vector<double> x(n);
  for (auto& v : x) v = r.normal();
  auto mag = rfft_magnitude(x.data(), n, n);
  for (std::size_t k = 0; k <= n / 2; ++k) {
    double re = 0, im = 0;
    for (std::size_t i = 0; i < n; ++i) {
      re += x[i] * std::cos(2 * M_PI * k * i / n);
      im -= x[i] * std::sin(2 * M_PI * k * i / n);
    }
    REQUIRE(mag[k] == Catch::Approx(std::hypot(re, im)).margin(1e-9));
  }
}

TEST_CASE("wav roundtrip: float32 and pcm16") {
  Rng r(9);
  WaveBuffer w;
  w.sample_rate = 22050;
  w.samples.resize(2000);
  for (auto& s : w.samples) s = 0.8 * r.uniform(-1, 1);

  const std::string p32 = tmp_path("umc_t32.wav"), p16 = tmp_path("umc_t16.wav");
  write_wav(p32, w, 32);
  WaveBuffer r32 = read_wav(p32);
  REQUIRE(r32.sample_rate == w.sample_rate);
  REQUIRE(r32.samples.size() == w.samples.size());
  for (std::size_t i = 0; i < w.samples.size(); ++i)
    REQUIRE(r32.samples[i] == Catch::Approx(w.samples[i]).margin(1e-6));

  write_wav(p16, w, 16);
  WaveBuffer r16 = read_wav(p16);
  for (std::size_t i = 0; i < w.samples.size(); ++i)
    REQUIRE(r16.samples[i] == Catch::Approx(w.samples[i]).margin(1.0 / 16000));
}

TEST_CASE("tensor container roundtrip with sidecar") {
  TensorF t({3, 4, 5});
  Rng r(11);
  for (auto& v : t.vec()) v = static_cast<float>(r.normal());
  const std::string p = tmp_path("umc_t.umt");
  save_tensor(p, t, "deadbeef");
  TensorF back = load_tensor<float>(p);
  REQUIRE(back.shape() == t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) REQUIRE(back[i] == t[i]);

  // widening load
  TensorD wide = load_tensor<double>(p);
  REQUIRE(wide(1, 2, 3) == Catch::Approx(t(1, 2, 3)));

  std::ifstream side(p + ".json");
  REQUIRE(side.good());
  nlohmann::json j;
  side >> j;
  REQUIRE(j.at("config_hash") == "deadbeef");
  REQUIRE(j.at("shape").get<std::vector<std::size_t>>() == t.shape());
}

TEST_CASE("named tensor container roundtrip") {
  std::vector<std::pair<std::string, TensorF>> entries;
  entries.emplace_back("a.w", TensorF({2, 2}, 1.f));
  entries.emplace_back("b.v", TensorF({3}, -2.f));
  const std::string p = tmp_path("umc_named.umk");
  save_named_tensors(p, entries);
  auto back = load_named_tensors<float>(p);
  REQUIRE(back.size() == 2);
  REQUIRE(back[0].first == "a.w");
  REQUIRE(back[1].second[0] == -2.f);
}
