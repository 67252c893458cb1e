#pragma once

#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "umc/corpus.hpp"
#include "umc/frontend.hpp"
#include "umc/gan_training.hpp"
#include "umc/mi_probe.hpp"
#include "umc/network.hpp"
#include "umc/sec_harness.hpp"

namespace umc {

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                       const std::string& section) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        ok = true;
        break;
      }
    if (!ok)
      throw std::invalid_argument("config: unknown key '" + it.key() + "' in section '" + section +
                                  "'");
  }
}

template <typename T>
inline void get_if(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

struct BankConfig {
  std::size_t n_devices = 5;
  std::size_t n_taps = 64;
  double max_dev_db = 12.0;
};

struct CorpusConfig {
  std::size_t n_classes = 10;
  std::size_t n_items_per_class = 50;
  double sample_rate = 22050.0;
  SplitFractions fractions;
};

struct RunConfig {
  FrontendConfig frontend;
  BankConfig bank;
  CorpusConfig corpus;
  GeneratorConfig generator;
  FiLMEncoderConfig film;
  DiscriminatorConfig discriminator;
  LossWeights loss;
  TrainSchedule schedule;
  std::size_t steps_per_epoch = 0;  // 0 = one pass over train_mc items
  SECConfig sec;
  ProbeNetworkConfig probe;
  std::uint64_t seed = 0;
  std::string run_root;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["frontend"] = {{"fft_size", frontend.fft_size},
                     {"hop", frontend.hop},
                     {"mel_bands_spec", frontend.mel_bands_spec},
                     {"mel_bands_fr", frontend.mel_bands_fr},
                     {"log_floor", frontend.log_floor},
                     {"fmin", frontend.fmin},
                     {"fmax", frontend.fmax}};
    j["bank"] = {{"n_devices", bank.n_devices},
                 {"n_taps", bank.n_taps},
                 {"max_dev_db", bank.max_dev_db}};
    j["corpus"] = {{"n_classes", corpus.n_classes},
                   {"n_items_per_class", corpus.n_items_per_class},
                   {"sample_rate", corpus.sample_rate},
                   {"train_mc", corpus.fractions.train_mc},
                   {"train_sec", corpus.fractions.train_sec},
                   {"val", corpus.fractions.val}};
    j["generator"] = {{"base_channels", generator.base_channels},
                      {"n_downsamples", generator.n_downsamples},
                      {"n_resblocks", generator.n_resblocks},
                      {"decoder_norm", generator.decoder_norm},
                      {"global_skip", generator.global_skip},
                      {"coord_feature", generator.coord_feature},
                      {"input_mean", generator.input_mean},
                      {"input_std", generator.input_std}};
    j["film"] = {{"input_bands", film.input_bands},
                 {"conv_channels", film.conv_channels},
                 {"kernel", film.kernel},
                 {"mlp_hidden", film.mlp_hidden}};
    j["discriminator"] = {{"n_layers", discriminator.n_layers},
                          {"base_channels", discriminator.base_channels},
                          {"coord_feature", discriminator.coord_feature}};
    j["loss"] = {{"lambda_cycle", loss.lambda_cycle}, {"lambda_identity", loss.lambda_identity}};
    j["schedule"] = {{"lr", schedule.lr},
                     {"epochs", schedule.epochs},
                     {"lr_decay_every", schedule.lr_decay_every},
                     {"lr_decay_factor", schedule.lr_decay_factor},
                     {"batch_size", schedule.batch_size},
                     {"crop_frames", schedule.crop_frames},
                     {"cycle_warmup_steps", schedule.cycle_warmup_steps},
                     {"adv_reconstruction", schedule.adv_reconstruction},
                     {"steps_per_epoch", steps_per_epoch}};
    j["sec"] = {{"backbone", sec.backbone == SECBackbone::SmallCnn ? "small-cnn" : "resnet50"},
                {"lr", sec.lr},
                {"weight_decay", sec.weight_decay},
                {"epochs", sec.epochs},
                {"lr_decay_every", sec.lr_decay_every},
                {"batch", sec.batch},
                {"augmentation", std::string(to_string(sec.augmentation))}};
    nlohmann::json axes = nlohmann::json::array();
    for (auto a : probe.axes) axes.push_back(to_string(a));
    j["probe"] = {{"axes", axes},
                  {"train_fraction", probe.probe_train_fraction},
                  {"hidden", probe.classifier.hidden},
                  {"max_epochs", probe.classifier.max_epochs},
                  {"patience", probe.classifier.patience}};
    j["seed"] = seed;
    j["run_root"] = run_root;
    return j;
  }

  std::string config_hash() const { return hash_hex(fnv1a64(to_json().dump())); }

  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig c;
    detail::check_keys(j,
                       {"frontend", "bank", "corpus", "generator", "film", "discriminator", "loss",
                        "schedule", "sec", "probe", "seed", "run_root"},
                       "<root>");
    if (j.contains("frontend")) {
      const auto& s = j.at("frontend");
      detail::check_keys(s, {"fft_size", "hop", "mel_bands_spec", "mel_bands_fr", "log_floor",
                             "fmin", "fmax"},
                         "frontend");
      detail::get_if(s, "fft_size", c.frontend.fft_size);
      detail::get_if(s, "hop", c.frontend.hop);
      detail::get_if(s, "mel_bands_spec", c.frontend.mel_bands_spec);
      detail::get_if(s, "mel_bands_fr", c.frontend.mel_bands_fr);
      detail::get_if(s, "log_floor", c.frontend.log_floor);
      detail::get_if(s, "fmin", c.frontend.fmin);
      detail::get_if(s, "fmax", c.frontend.fmax);
    }
    if (j.contains("bank")) {
      const auto& s = j.at("bank");
      detail::check_keys(s, {"n_devices", "n_taps", "max_dev_db"}, "bank");
      detail::get_if(s, "n_devices", c.bank.n_devices);
      detail::get_if(s, "n_taps", c.bank.n_taps);
      detail::get_if(s, "max_dev_db", c.bank.max_dev_db);
    }
    if (j.contains("corpus")) {
      const auto& s = j.at("corpus");
      detail::check_keys(s, {"n_classes", "n_items_per_class", "sample_rate", "train_mc",
                             "train_sec", "val"},
                         "corpus");
      detail::get_if(s, "n_classes", c.corpus.n_classes);
      detail::get_if(s, "n_items_per_class", c.corpus.n_items_per_class);
      detail::get_if(s, "sample_rate", c.corpus.sample_rate);
      detail::get_if(s, "train_mc", c.corpus.fractions.train_mc);
      detail::get_if(s, "train_sec", c.corpus.fractions.train_sec);
      detail::get_if(s, "val", c.corpus.fractions.val);
    }
    if (j.contains("generator")) {
      const auto& s = j.at("generator");
      detail::check_keys(s, {"base_channels", "n_downsamples", "n_resblocks", "decoder_norm",
                             "global_skip", "coord_feature", "input_mean", "input_std"},
                         "generator");
      detail::get_if(s, "base_channels", c.generator.base_channels);
      detail::get_if(s, "n_downsamples", c.generator.n_downsamples);
      detail::get_if(s, "n_resblocks", c.generator.n_resblocks);
      detail::get_if(s, "decoder_norm", c.generator.decoder_norm);
      detail::get_if(s, "global_skip", c.generator.global_skip);
      detail::get_if(s, "coord_feature", c.generator.coord_feature);
      detail::get_if(s, "input_mean", c.generator.input_mean);
      detail::get_if(s, "input_std", c.generator.input_std);
    }
    if (j.contains("film")) {
      const auto& s = j.at("film");
      detail::check_keys(s, {"input_bands", "conv_channels", "kernel", "mlp_hidden"}, "film");
      detail::get_if(s, "input_bands", c.film.input_bands);
      detail::get_if(s, "conv_channels", c.film.conv_channels);
      detail::get_if(s, "kernel", c.film.kernel);
      detail::get_if(s, "mlp_hidden", c.film.mlp_hidden);
    }
    if (j.contains("discriminator")) {
      const auto& s = j.at("discriminator");
      detail::check_keys(s, {"n_layers", "base_channels", "coord_feature"}, "discriminator");
      detail::get_if(s, "n_layers", c.discriminator.n_layers);
      detail::get_if(s, "base_channels", c.discriminator.base_channels);
      detail::get_if(s, "coord_feature", c.discriminator.coord_feature);
    }
    if (j.contains("loss")) {
      const auto& s = j.at("loss");
      detail::check_keys(s, {"lambda_cycle", "lambda_identity"}, "loss");
      detail::get_if(s, "lambda_cycle", c.loss.lambda_cycle);
      detail::get_if(s, "lambda_identity", c.loss.lambda_identity);
    }
    if (j.contains("schedule")) {
      const auto& s = j.at("schedule");
      detail::check_keys(s, {"lr", "epochs", "lr_decay_every", "lr_decay_factor", "batch_size",
                             "crop_frames", "cycle_warmup_steps", "adv_reconstruction",
                             "steps_per_epoch"},
                         "schedule");
      detail::get_if(s, "lr", c.schedule.lr);
      detail::get_if(s, "epochs", c.schedule.epochs);
      detail::get_if(s, "lr_decay_every", c.schedule.lr_decay_every);
      detail::get_if(s, "lr_decay_factor", c.schedule.lr_decay_factor);
      detail::get_if(s, "batch_size", c.schedule.batch_size);
      detail::get_if(s, "crop_frames", c.schedule.crop_frames);
      detail::get_if(s, "cycle_warmup_steps", c.schedule.cycle_warmup_steps);
      detail::get_if(s, "adv_reconstruction", c.schedule.adv_reconstruction);
      detail::get_if(s, "steps_per_epoch", c.steps_per_epoch);
    }
    if (j.contains("sec")) {
      const auto& s = j.at("sec");
      detail::check_keys(s, {"backbone", "lr", "weight_decay", "epochs", "lr_decay_every", "batch",
                             "augmentation"},
                         "sec");
      std::string backbone = "small-cnn";
      detail::get_if(s, "backbone", backbone);
      if (backbone == "small-cnn")
        c.sec.backbone = SECBackbone::SmallCnn;
      else if (backbone == "resnet50")
        c.sec.backbone = SECBackbone::ResNet50;
      else
        throw std::invalid_argument("config: unknown sec backbone '" + backbone + "'");
      detail::get_if(s, "lr", c.sec.lr);
      detail::get_if(s, "weight_decay", c.sec.weight_decay);
      detail::get_if(s, "epochs", c.sec.epochs);
      detail::get_if(s, "lr_decay_every", c.sec.lr_decay_every);
      detail::get_if(s, "batch", c.sec.batch);
      std::string aug = "none";
      detail::get_if(s, "augmentation", aug);
      c.sec.augmentation = augment_mode_from_string(aug);
    }
    if (j.contains("probe")) {
      const auto& s = j.at("probe");
      detail::check_keys(s, {"axes", "train_fraction", "hidden", "max_epochs", "patience"},
                         "probe");
      if (s.contains("axes")) {
        c.probe.axes.clear();
        for (const auto& a : s.at("axes"))
          c.probe.axes.push_back(stat_axis_from_string(a.get<std::string>()));
      }
      detail::get_if(s, "train_fraction", c.probe.probe_train_fraction);
      detail::get_if(s, "hidden", c.probe.classifier.hidden);
      detail::get_if(s, "max_epochs", c.probe.classifier.max_epochs);
      detail::get_if(s, "patience", c.probe.classifier.patience);
    }
    detail::get_if(j, "seed", c.seed);
    detail::get_if(j, "run_root", c.run_root);
    return c;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open " + path);
    nlohmann::json j;
    f >> j;
    return from_json(j);
  }
};

// Run directory layout: manifests/, checkpoints/, metrics/, reports/, figures/.
struct RunDirectory {
  std::string root;

  explicit RunDirectory(std::string root_) : root(std::move(root_)) {
    namespace fs = std::filesystem;
    for (const char* d : {"manifests", "checkpoints", "metrics", "reports", "figures"})
      fs::create_directories(fs::path(root) / d);
  }

  std::string manifests(const std::string& f = "") const { return sub("manifests", f); }
  std::string checkpoints(const std::string& f = "") const { return sub("checkpoints", f); }
  std::string metrics(const std::string& f = "") const { return sub("metrics", f); }
  std::string reports(const std::string& f = "") const { return sub("reports", f); }
  std::string figures(const std::string& f = "") const { return sub("figures", f); }

 private:
  std::string sub(const char* d, const std::string& f) const {
    namespace fs = std::filesystem;
    return (f.empty() ? fs::path(root) / d : fs::path(root) / d / f).string();
  }
};

// Exclusive writer lock on a run directory (advisory, file-based).
class RunLock {
 public:
  explicit RunLock(const std::string& run_dir) : path_(run_dir + "/.lock") {
    std::filesystem::create_directories(run_dir);
    if (std::filesystem::exists(path_))
      throw std::runtime_error("run directory is locked by another writer: " + path_);
    std::ofstream f(path_);
    f << "locked\n";
    owned_ = true;
  }
  ~RunLock() {
    if (owned_) std::filesystem::remove(path_);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::string path_;
  bool owned_ = false;
};

}  // namespace umc
