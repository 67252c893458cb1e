#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "umc/corpus.hpp"
#include "umc/device_bank.hpp"
#include "umc/frontend.hpp"

using namespace umc;

namespace {

DeviceProfile fake_profile(const std::string& id, const std::vector<double>& fr) {
  DeviceProfile p;
  p.device_id = id;
  p.fr.values = fr;
  p.fr_spec = project_fr(fr, 80);
  return p;
}

std::vector<double> const_fr(double v) { return std::vector<double>(128, v); }

}  // namespace

TEST_CASE("fr_difference: identity, antisymmetry, constant shift") {
  auto a = fake_profile("a", const_fr(0.5));
  std::vector<double> bv(128);
  for (std::size_t i = 0; i < 128; ++i) bv[i] = 0.5 + 3.0;
  auto b = fake_profile("b", bv);

  auto daa = fr_difference(a, a);
  for (double v : daa.values) REQUIRE(v == 0.0);

  auto dab = fr_difference(a, b), dba = fr_difference(b, a);
  for (std::size_t i = 0; i < 128; ++i) {
    REQUIRE(dab.values[i] == Catch::Approx(3.0));
    REQUIRE(dab.values[i] == Catch::Approx(-dba.values[i]));
  }

  DeviceProfile short_fr;
  short_fr.fr.values.assign(64, 0.0);
  REQUIRE_THROWS_WITH(fr_difference(a, short_fr), Catch::Matchers::ContainsSubstring("mismatch"));
}

TEST_CASE("fr_difference chains exactly") {
  Rng r(2);
  std::vector<double> av(128), bv(128), cv(128);
  for (std::size_t i = 0; i < 128; ++i) {
    av[i] = r.normal();
    bv[i] = r.normal();
    cv[i] = r.normal();
  }
  auto a = fake_profile("a", av), b = fake_profile("b", bv), c = fake_profile("c", cv);
  auto ab = fr_difference(a, b), bc = fr_difference(b, c), ac = fr_difference(a, c);
  for (std::size_t i = 0; i < 128; ++i)
    REQUIRE(ac.values[i] == Catch::Approx(ab.values[i] + bc.values[i]).margin(1e-12));
}

TEST_CASE("project_fr: constants, ramps, and the scalar interpolation oracle") {
  auto c = project_fr(const_fr(2.5), 80);
  REQUIRE(c.size() == 80);
  for (double v : c) REQUIRE(v == Catch::Approx(2.5));

  std::vector<double> ramp(128);
  for (std::size_t i = 0; i < 128; ++i) ramp[i] = static_cast<double>(i);
  auto pr = project_fr(ramp, 80);
  REQUIRE(pr.front() == Catch::Approx(0.0));
  REQUIRE(pr.back() == Catch::Approx(127.0));
  for (std::size_t i = 1; i < 80; ++i)
    REQUIRE(pr[i] - pr[i - 1] == Catch::Approx(127.0 / 79.0).margin(1e-9));

  Rng r(8);
  std::vector<double> rnd(128);
  for (auto& v : rnd) v = r.normal();
  auto p = project_fr(rnd, 80);
  for (std::size_t i = 0; i < 80; ++i) {
    // independent pointwise interpolation
    const double x = static_cast<double>(i) * 127.0 / 79.0;
    const auto j = static_cast<std::size_t>(std::floor(x));
    const double t = x - j;
    const double expect = j + 1 < 128 ? rnd[j] * (1 - t) + rnd[j + 1] * t : rnd[127];
    REQUIRE(p[i] == Catch::Approx(expect).margin(1e-6));
  }
}

TEST_CASE("oracle_convert: identity, inverse, broadcast") {
  FrontendConfig cfg;
  LogMelSpectrogram s;
  s.mel_bands = 80;
  s.values = TensorD({80, 12});
  Rng r(3);
  for (auto& v : s.values.vec()) v = r.uniform(-6, 1);

  FRDifference zero;
  zero.values.assign(128, 0.0);
  auto same = oracle_convert(s, zero, cfg.log_floor);
  REQUIRE(max_abs_diff(same.values, s.values) == 0.0);

  FRDifference d;
  d.values.assign(128, 0.0);
  for (std::size_t i = 0; i < 128; ++i) d.values[i] = 0.01 * i - 0.5;
  FRDifference dn;
  dn.values.assign(128, 0.0);
  for (std::size_t i = 0; i < 128; ++i) dn.values[i] = -d.values[i];

  auto fwd = oracle_convert(s, d, cfg.log_floor);
  auto back = oracle_convert(fwd, dn, cfg.log_floor);
  const double floor_log = std::log(cfg.log_floor);
  auto d80 = project_fr(d.values, 80);
  for (std::size_t m = 0; m < 80; ++m)
    for (std::size_t t = 0; t < 12; ++t) {
      if (s.values(m, t) + d80[m] > floor_log)  // no clamping on the way out
        REQUIRE(back.values(m, t) == Catch::Approx(s.values(m, t)).margin(1e-12));
      REQUIRE(fwd.values(m, t) >= floor_log);
    }
}

TEST_CASE("oracle_convert commutes with FR-difference chaining") {
  FrontendConfig cfg;
  LogMelSpectrogram s;
  s.mel_bands = 80;
  s.values = TensorD({80, 6}, 1.0);  // far above floor: no clamping
  Rng r(5);
  std::vector<double> av(128), bv(128), cv(128);
  for (std::size_t i = 0; i < 128; ++i) {
    av[i] = 0.3 * r.normal();
    bv[i] = 0.3 * r.normal();
    cv[i] = 0.3 * r.normal();
  }
  auto a = fake_profile("a", av), b = fake_profile("b", bv), c = fake_profile("c", cv);
  auto via_b = oracle_convert(oracle_convert(s, fr_difference(a, b)), fr_difference(b, c));
  auto direct = oracle_convert(s, fr_difference(a, c));
  REQUIRE(max_abs_diff(via_b.values, direct.values) < 1e-12);
}

TEST_CASE("synthetic FR sampler: collapsed anchors, determinism, length") {
  SynthFRConfig cfg;
  cfg.noise_sigma = 0.0;
  cfg.mid_lo = cfg.mid_hi = 0.7;
  cfg.edge_lo = cfg.edge_hi = 0.7;
  Rng r(1);
  auto d = sample_synthetic_fr_difference(cfg, r);
  REQUIRE(d.values.size() == 128);
  for (double v : d.values) REQUIRE(v == Catch::Approx(0.7).margin(1e-12));

  SynthFRConfig c2;
  c2.seed = 99;
  auto x = sample_synthetic_fr_difference(c2);
  auto y = sample_synthetic_fr_difference(c2);
  REQUIRE(x.values == y.values);

  SynthFRConfig bad;
  bad.n_anchors = 5;
  Rng rr(0);
  REQUIRE_THROWS(sample_synthetic_fr_difference(bad, rr));
}

TEST_CASE("synthetic FR sampler: edge bands swing harder than the middle") {
  SynthFRConfig cfg;
  Rng r(7);
  const int n = 10000;
  double edge_acc = 0, mid_acc = 0;
  std::size_t edge_n = 0, mid_n = 0;
  for (int i = 0; i < n; ++i) {
    auto d = sample_synthetic_fr_difference(cfg, r);
    for (std::size_t j = 0; j < 128; ++j) {
      const bool edge = j < 16 || j >= 112;      // outer eighths inside the edge quarters
      const bool mid = j >= 48 && j < 80;        // middle quarter
      if (edge) {
        edge_acc += std::abs(d.values[j]);
        ++edge_n;
      } else if (mid) {
        mid_acc += std::abs(d.values[j]);
        ++mid_n;
      }
    }
  }
  REQUIRE(edge_acc / edge_n > mid_acc / mid_n);
}

TEST_CASE("synthetic FR sampler: adjacent-band jumps bounded") {
  SynthFRConfig cfg;
  Rng r(13);
  // max anchor gap / bands-per-region + 6 sigma
  const double bands_per_region = 128.0 / 6.0;
  const double max_gap = (cfg.edge_hi - cfg.mid_lo);
  const double bound = max_gap / bands_per_region + 6.0 * cfg.noise_sigma;
  std::size_t violations = 0, total = 0;
  for (int i = 0; i < 10000; ++i) {
    auto d = sample_synthetic_fr_difference(cfg, r);
    for (std::size_t j = 1; j < d.values.size(); ++j, ++total)
      if (std::abs(d.values[j] - d.values[j - 1]) > bound) ++violations;
  }
  REQUIRE(static_cast<double>(violations) / total < 0.001);
}

TEST_CASE("simulate_recording: identity, gain, impulse") {
  DeviceProfile ident;
  ident.device_id = "i";
  ident.filter_taps = std::vector<double>{1.0, 0.0, 0.0};
  DeviceProfile gain2;
  gain2.device_id = "g";
  gain2.filter_taps = std::vector<double>{2.0, 0.0};

  WaveBuffer w;
  w.sample_rate = 22050;
  Rng r(6);
  w.samples.resize(500);
  for (auto& s : w.samples) s = r.normal();

  auto wi = simulate_recording(w, ident);
  REQUIRE(wi.samples == w.samples);
  auto wg = simulate_recording(w, gain2);
  for (std::size_t i = 0; i < w.samples.size(); ++i)
    REQUIRE(wg.samples[i] == Catch::Approx(2 * w.samples[i]));

  DeviceProfile taps;
  taps.device_id = "t";
  taps.filter_taps = std::vector<double>{0.5, -0.25, 0.125};
  WaveBuffer imp;
  imp.sample_rate = 22050;
  imp.samples.assign(10, 0.0);
  imp.samples[0] = 1.0;
  auto out = simulate_recording(imp, taps);
  REQUIRE(out.samples[0] == 0.5);
  REQUIRE(out.samples[1] == -0.25);
  REQUIRE(out.samples[2] == 0.125);
  REQUIRE(out.samples[3] == 0.0);

  DeviceProfile none;
  REQUIRE_THROWS_WITH(simulate_recording(w, none), Catch::Matchers::ContainsSubstring("taps"));
}

TEST_CASE("synthetic bank: distinct, accurate, bit-reproducible") {
  FrontendConfig cfg;
  auto bank = make_synthetic_device_bank(7, 2024, cfg);
  REQUIRE(bank.size() == 7);

  for (std::size_t i = 0; i < bank.size(); ++i)
    for (std::size_t j = i + 1; j < bank.size(); ++j) {
      double l2 = 0;
      for (std::size_t m = 0; m < 128; ++m) {
        const double d = bank[i].fr.values[m] - bank[j].fr.values[m];
        l2 += d * d;
      }
      REQUIRE(std::sqrt(l2) > 0.0);
    }

  for (const auto& dev : bank) {
    auto analytic = analytic_filter_response(*dev.filter_taps, cfg, 22050);
    double mae = 0;
    for (std::size_t m = 0; m < 128; ++m) mae += std::abs(dev.fr.values[m] - analytic[m]);
    mae /= 128;
    REQUIRE(mae < db_to_log(1.0));
  }

  auto bank2 = make_synthetic_device_bank(7, 2024, cfg);
  for (std::size_t i = 0; i < bank.size(); ++i) {
    REQUIRE(*bank[i].filter_taps == *bank2[i].filter_taps);
    REQUIRE(bank[i].fr.values == bank2[i].fr.values);
  }

  REQUIRE_THROWS(make_synthetic_device_bank(1, 0, cfg));
}

TEST_CASE("device model keystone: pipeline matches oracle conversion") {
  FrontendConfig cfg;
  auto bank = make_synthetic_device_bank(3, 11, cfg);
  auto classes = default_class_specs(3);
  Rng r(17);

  for (int rep = 0; rep < 4; ++rep) {
    Rng item_rng(100 + rep);
    WaveBuffer w = synth_event_wave(classes[rep % 3], item_rng, 22050);
    const std::size_t a = r.index(3);
    const std::size_t b = (a + 1 + r.index(2)) % 3;
    auto spec_a = wave_to_logmel(simulate_recording(w, bank[a]), cfg);
    auto spec_b = wave_to_logmel(simulate_recording(w, bank[b]), cfg);
    auto converted = oracle_convert(spec_a, fr_difference(bank[a], bank[b]), cfg.log_floor);
    REQUIRE(mean_abs_diff(converted.values, spec_b.values) < db_to_log(1.0));
  }
}

TEST_CASE("device bank serialization roundtrip") {
  FrontendConfig cfg;
  auto bank = make_synthetic_device_bank(3, 5, cfg);
  const auto dir = std::filesystem::temp_directory_path() / "umc_bank_test";
  std::filesystem::create_directories(dir);
  save_device_bank(bank, (dir / "bank.json").string(), (dir / "bank.umk").string());
  auto back = load_device_bank((dir / "bank.json").string());
  REQUIRE(back.size() == bank.size());
  for (std::size_t i = 0; i < bank.size(); ++i) {
    REQUIRE(back[i].device_id == bank[i].device_id);
    REQUIRE(back[i].fr.values == bank[i].fr.values);
    REQUIRE(back[i].fr_spec == bank[i].fr_spec);
    REQUIRE(*back[i].filter_taps == *bank[i].filter_taps);
  }
}
