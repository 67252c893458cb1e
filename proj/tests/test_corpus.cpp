#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <set>

#include "umc/corpus.hpp"

using namespace umc;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

CorpusManifest tiny_corpus(const std::string& dir, std::uint64_t seed, std::size_t n_classes = 5,
                           std::size_t items = 4, std::size_t devices = 4) {
  FrontendConfig cfg;
  auto bank = make_synthetic_device_bank(devices, 77, cfg);
  auto specs = default_class_specs(n_classes);
  for (auto& s : specs) s.duration = {0.6, 0.6};  // keep the test quick
  return synth_corpus(n_classes, items, specs, bank, seed, cfg, dir, 22050.0, {0.5, 0.25, 0.25});
}

}  // namespace

TEST_CASE("event synthesis is deterministic and respects duration bounds") {
  auto specs = default_class_specs(10);
  REQUIRE(specs.size() == 10);
  for (const auto& s : specs) {
    Rng r1(5), r2(5);
    WaveBuffer a = synth_event_wave(s, r1, 22050);
    WaveBuffer b = synth_event_wave(s, r2, 22050);
    REQUIRE(a.samples == b.samples);
    REQUIRE(a.duration() >= 0.5);
    for (double v : a.samples) REQUIRE(std::isfinite(v));
  }
  EventClassSpec bad;
  bad.duration = {0.2, 0.2};
  Rng r(0);
  REQUIRE_THROWS(synth_event_wave(bad, r, 22050));
}

TEST_CASE("corpus counts, determinism and file presence") {
  TempDir dir("umc_corpus_a");
  auto m = tiny_corpus(dir.path.string(), 42);
  REQUIRE(m.items.size() == 5 * 4 * 4);
  REQUIRE(m.device_ids.size() == 4);
  REQUIRE(m.class_ids.size() == 5);

  for (const auto& it : m.items) {
    REQUIRE(fs::exists(dir.path / it.wav_path));
    REQUIRE(fs::exists(dir.path / it.spec_path));
    TensorF s = load_item_spec(m, it);
    REQUIRE(s.ndim() == 2);
    REQUIRE(s.dim(0) == 80);
  }

  // same seed -> identical manifests (and identical audio bytes)
  TempDir dir2("umc_corpus_b");
  auto m2 = tiny_corpus(dir2.path.string(), 42);
  REQUIRE(manifest_to_json(m).dump() == manifest_to_json(m2).dump());
  for (std::size_t i = 0; i < m.items.size(); i += 7) {
    auto wa = read_wav((dir.path / m.items[i].wav_path).string());
    auto wb = read_wav((dir2.path / m2.items[i].wav_path).string());
    REQUIRE(wa.samples == wb.samples);
  }

  // different seed -> different content
  TempDir dir3("umc_corpus_c");
  auto m3 = tiny_corpus(dir3.path.string(), 43);
  auto wa = read_wav((dir.path / m.items[0].wav_path).string());
  auto wc = read_wav((dir3.path / m3.items[0].wav_path).string());
  REQUIRE(wa.samples != wc.samples);
}

TEST_CASE("classes are spectrally distinct on average") {
  TempDir dir("umc_corpus_d");
  auto m = tiny_corpus(dir.path.string(), 7, 5, 4, 2);
  // mean pairwise spectral L1: across classes vs within classes
  std::map<std::size_t, std::vector<TensorF>> by_class;
  for (const auto& it : m.items)
    if (it.device_id == m.device_ids[0]) by_class[it.class_index].push_back(load_item_spec(m, it));

  auto dist = [](const TensorF& a, const TensorF& b) {
    const std::size_t n = std::min(a.size(), b.size());
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += std::abs(a[i] - b[i]);
    return acc / n;
  };
  double within = 0, across = 0;
  std::size_t wn = 0, an = 0;
  for (auto& [ca, va] : by_class)
    for (auto& [cb, vb] : by_class)
      for (std::size_t i = 0; i < va.size(); ++i)
        for (std::size_t j = 0; j < vb.size(); ++j) {
          if (ca == cb && i < j) {
            within += dist(va[i], vb[j]);
            ++wn;
          } else if (ca < cb) {
            across += dist(va[i], vb[j]);
            ++an;
          }
        }
  REQUIRE(across / an > within / wn);
}

TEST_CASE("splits partition source signals without leaks") {
  TempDir dir("umc_corpus_e");
  auto m = tiny_corpus(dir.path.string(), 11);

  std::map<std::string, std::set<std::string>> split_items;
  for (const auto& it : m.items) split_items[it.split].insert(it.item_id);
  REQUIRE(split_items.count("train_mc"));
  REQUIRE(split_items.count("train_sec"));
  REQUIRE(split_items.count("val"));
  for (const auto& [sa, ia] : split_items)
    for (const auto& [sb, ib] : split_items) {
      if (sa >= sb) continue;
      for (const auto& id : ia) REQUIRE(!ib.count(id));
    }

  // every val item is present for every device
  std::map<std::string, std::set<std::string>> val_devices;
  for (const auto& it : m.items)
    if (it.split == "val") val_devices[it.item_id].insert(it.device_id);
  for (const auto& [id, devs] : val_devices) REQUIRE(devs.size() == m.device_ids.size());

  // exact fractions on a round count: 20 items at 0.5/0.25/0.25
  REQUIRE(split_items["train_mc"].size() == 10);
  REQUIRE(split_items["train_sec"].size() == 5);
  REQUIRE(split_items["val"].size() == 5);
}

TEST_CASE("split_corpus re-partitions deterministically and validates fractions") {
  TempDir dir("umc_corpus_f");
  auto m = tiny_corpus(dir.path.string(), 13);
  auto s1 = split_corpus(m, {0.4, 0.4, 0.2}, 5);
  auto s2 = split_corpus(m, {0.4, 0.4, 0.2}, 5);
  for (std::size_t i = 0; i < s1.items.size(); ++i)
    REQUIRE(s1.items[i].split == s2.items[i].split);

  REQUIRE_THROWS(split_corpus(m, {0.5, 0.4, 0.2}, 1));   // does not sum to 1
  REQUIRE_THROWS(split_corpus(m, {0.98, 0.01, 0.01}, 1));  // empty split
}

TEST_CASE("manifest JSON roundtrip") {
  TempDir dir("umc_corpus_g");
  auto m = tiny_corpus(dir.path.string(), 3);
  const std::string mp = (dir.path / "manifest.json").string();
  save_manifest(m, mp);
  auto back = load_manifest(mp);
  REQUIRE(back.items.size() == m.items.size());
  REQUIRE(back.device_ids == m.device_ids);
  REQUIRE(back.class_ids == m.class_ids);
  REQUIRE(back.items[5].item_id == m.items[5].item_id);
  REQUIRE(back.items[5].split == m.items[5].split);
}
