// umc: corpus synthesis, microphone-conversion training, probing, SEC
// training/evaluation and report generation in one binary.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "umc/config.hpp"
#include "umc/corpus.hpp"
#include "umc/device_bank.hpp"
#include "umc/frontend.hpp"
#include "umc/gan_training.hpp"
#include "umc/mi_probe.hpp"
#include "umc/network.hpp"
#include "umc/plot.hpp"
#include "umc/sec_harness.hpp"
#include "umc/tensor_io.hpp"
#include "umc/wav.hpp"

namespace fs = std::filesystem;
using namespace umc;

namespace {

std::string default_run_root() {
  const char* env = std::getenv("UMC_RUN_ROOT");
  return env ? env : "runs/default";
}

RunConfig load_config_or_default(const std::string& path) {
  if (path.empty()) return RunConfig{};
  return RunConfig::load(path);
}

void write_text(const std::string& path, const std::string& body) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  f << body;
}

// ------------------------------------------------------------------ corpus

int cmd_corpus_synth(const std::string& run, const std::string& config_path,
                     std::optional<std::uint64_t> seed, std::optional<std::size_t> device_count,
                     std::optional<std::size_t> classes, std::optional<std::size_t> items) {
  RunConfig cfg = load_config_or_default(config_path);
  if (seed) cfg.seed = *seed;
  if (device_count) cfg.bank.n_devices = *device_count;
  if (classes) cfg.corpus.n_classes = *classes;
  if (items) cfg.corpus.n_items_per_class = *items;

  RunLock lock(run);
  RunDirectory dir(run);
  const std::string hash = cfg.config_hash();
  write_text(dir.manifests("config.json"), cfg.to_json().dump(2) + "\n");

  std::cout << "building device bank (" << cfg.bank.n_devices << " devices)...\n";
  auto bank = make_synthetic_device_bank(cfg.bank.n_devices, cfg.seed, cfg.frontend,
                                         cfg.corpus.sample_rate, cfg.bank.n_taps,
                                         cfg.bank.max_dev_db);
  save_device_bank(bank, dir.manifests("bank.json"), dir.manifests("bank.umk"));

  // FR curves as CSV and PNG
  {
    std::ostringstream csv;
    csv << "band";
    for (const auto& d : bank) csv << "," << d.device_id;
    csv << "\n";
    for (std::size_t m = 0; m < bank[0].fr.bands(); ++m) {
      csv << m;
      for (const auto& d : bank) csv << "," << d.fr.values[m];
      csv << "\n";
    }
    write_text(dir.reports("bank_fr.csv"), csv.str());
    std::vector<plot::Series> series;
    for (const auto& d : bank) series.push_back({d.device_id, d.fr.values});
    plot::write_png(dir.figures("bank_fr.png"),
                    plot::line_plot(series, "DEVICE FREQUENCY RESPONSES (LOG AMP)"));
  }

  std::cout << "synthesizing corpus (" << cfg.corpus.n_classes << " classes x "
            << cfg.corpus.n_items_per_class << " items x " << bank.size() << " devices)...\n";
  auto specs = default_class_specs(cfg.corpus.n_classes);
  auto manifest = synth_corpus(cfg.corpus.n_classes, cfg.corpus.n_items_per_class, specs, bank,
                               cfg.seed, cfg.frontend, (fs::path(run) / "data").string(),
                               cfg.corpus.sample_rate, cfg.corpus.fractions);
  save_manifest(manifest, dir.manifests("corpus.json"));
  std::cout << "corpus: " << manifest.items.size() << " recordings under " << run << "/data\n";
  return 0;
}

// ------------------------------------------------------------------ frontend

int cmd_extract_fr(const std::string& in, const std::string& out, const std::string& config_path) {
  RunConfig cfg = load_config_or_default(config_path);
  WaveBuffer w = read_wav(in);
  FrequencyResponse fr = extract_frequency_response(w, cfg.frontend);
  save_tensor(out, TensorD::from_vector(fr.values), cfg.config_hash());
  std::cout << "wrote " << out << " (" << fr.bands() << " bands)\n";
  return 0;
}

// ------------------------------------------------------------------ mc

int cmd_mc_train(const std::string& run, const std::string& config_path, bool resume) {
  RunConfig cfg = load_config_or_default(config_path);
  RunLock lock(run);
  RunDirectory dir(run);
  auto bank = load_device_bank(dir.manifests("bank.json"));
  auto manifest = load_manifest(dir.manifests("corpus.json"));

  cfg.film.out_channels = cfg.generator.bottleneck_channels();
  auto ts = load_training_set<float>(manifest, "train_mc");
  const std::size_t spe = cfg.steps_per_epoch
                              ? cfg.steps_per_epoch
                              : std::max<std::size_t>(1, ts.n_items * ts.n_devices /
                                                             cfg.schedule.batch_size);

  GanTrainer<float> trainer(cfg.generator, cfg.film, cfg.discriminator, bank, cfg.loss,
                            cfg.schedule, cfg.seed);
  if (resume) trainer.load_checkpoint(dir.checkpoints("last.ckpt"));

  std::ofstream csv(dir.metrics("mc_train.csv"), resume ? std::ios::app : std::ios::out);
  std::ofstream jsonl(dir.metrics("mc_train.jsonl"), resume ? std::ios::app : std::ios::out);
  if (!resume) csv << "epoch,lr,g_adv,g_cycle,g_total,d_loss\n";

  std::cout << "training: " << cfg.schedule.epochs << " epochs x " << spe << " steps, batch "
            << cfg.schedule.batch_size << "\n";
  trainer.train(ts, spe, dir.checkpoints(), [&](const GanTrainer<float>::EpochMetrics& em) {
    csv << em.epoch << "," << em.lr << "," << em.g_adv << "," << em.g_cycle << "," << em.g_total
        << "," << em.d_loss << "\n";
    csv.flush();
    nlohmann::json j{{"epoch", em.epoch}, {"lr", em.lr},           {"g_adv", em.g_adv},
                     {"g_cycle", em.g_cycle}, {"g_total", em.g_total}, {"d_loss", em.d_loss}};
    jsonl << j.dump() << "\n";
    jsonl.flush();
    std::cout << "epoch " << em.epoch << ": g_adv=" << em.g_adv << " g_cycle=" << em.g_cycle
              << " d=" << em.d_loss << " lr=" << em.lr << "\n";
  });
  std::cout << "checkpoints under " << dir.checkpoints() << "\n";
  return 0;
}

int cmd_mc_convert(const std::string& in, const std::string& fr_diff, const std::string& ckpt,
                   const std::string& out) {
  TensorF spec = load_tensor<float>(in);
  TensorF d = load_tensor<float>(fr_diff);
  auto gen = load_generator_checkpoint<float>(ckpt);
  if (spec.ndim() != 2) throw std::runtime_error("mc convert: input spectrogram must be rank-2");
  TensorF x({1, 1, spec.dim(0), spec.dim(1)});
  std::copy_n(spec.data(), spec.size(), x.data());
  TensorF dd({1, d.size()});
  std::copy_n(d.data(), d.size(), dd.data());
  TensorF y = generator_forward(*gen, x, dd);
  save_tensor(out, y.reshaped({spec.dim(0), spec.dim(1)}));
  std::cout << "wrote " << out << " " << spec.shape_str() << "\n";
  return 0;
}

// ------------------------------------------------------------------ probe

int cmd_probe_mi(const std::string& run, const std::string& ckpt, const std::string& layers_csv,
                 const std::string& axes_csv, std::size_t max_items, const std::string& config_path) {
  RunConfig cfg = load_config_or_default(config_path);
  RunDirectory dir(run);
  auto bank = load_device_bank(dir.manifests("bank.json"));
  auto manifest = load_manifest(dir.manifests("corpus.json"));
  auto gen = load_generator_checkpoint<float>(ckpt);

  ProbeNetworkConfig pcfg = cfg.probe;
  pcfg.seed = cfg.seed;
  if (!layers_csv.empty()) {
    pcfg.layers.clear();
    std::stringstream ss(layers_csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) pcfg.layers.push_back(tok);
  }
  if (!axes_csv.empty()) {
    pcfg.axes.clear();
    std::stringstream ss(axes_csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) pcfg.axes.push_back(stat_axis_from_string(tok));
  }

  std::vector<TensorF> inputs;
  std::vector<std::size_t> sources;
  std::map<std::string, std::size_t> dev_index;
  for (std::size_t d = 0; d < manifest.device_ids.size(); ++d)
    dev_index[manifest.device_ids[d]] = d;
  for (const auto* it : manifest.select("val")) {
    if (max_items && inputs.size() >= max_items) break;
    inputs.push_back(load_item_spec(manifest, *it));
    sources.push_back(dev_index.at(it->device_id));
  }
  std::cout << "probing " << inputs.size() << " conversions...\n";
  auto results = probe_network(*gen, bank, inputs, sources, pcfg);

  std::ostringstream csv;
  csv << "layer,axis,mi_nats,accuracy,H_y,M\n";
  for (const auto& r : results)
    csv << r.layer_tag << "," << to_string(r.axis) << "," << r.mi_estimate << "," << r.accuracy
        << "," << r.entropy_y << "," << r.val_size << "\n";
  write_text(dir.reports("probe_mi.csv"), csv.str());

  // Fig. 2 layout: left MI, right accuracy, x = layers
  std::vector<std::string> layer_names = pcfg.layers.empty() ? gen->tap_names() : pcfg.layers;
  std::vector<plot::Series> mi_series, acc_series;
  for (StatAxis ax : pcfg.axes) {
    plot::Series ms{std::string(to_string(ax)) + "-WISE", {}};
    plot::Series as{std::string(to_string(ax)) + "-WISE", {}};
    for (const auto& l : layer_names)
      for (const auto& r : results)
        if (r.layer_tag == l && r.axis == ax) {
          ms.y.push_back(r.mi_estimate);
          as.y.push_back(r.accuracy);
        }
    mi_series.push_back(ms);
    acc_series.push_back(as);
  }
  plot::write_png(dir.figures("probe_mi.png"),
                  plot::two_panel_plot(mi_series, "MI ESTIMATE (NATS)", acc_series,
                                       "TARGET DEVICE ACCURACY", layer_names));
  std::cout << "wrote " << dir.reports("probe_mi.csv") << " and " << dir.figures("probe_mi.png")
            << "\n";
  return 0;
}

// ------------------------------------------------------------------ sec

std::string sec_ckpt_name(const std::string& source, AugmentMode mode) {
  return "sec_" + source + "_" + to_string(mode) + ".ckpt";
}

int cmd_sec_train(const std::string& run, const std::string& source, const std::string& mode_str,
                  const std::string& mc_ckpt, const std::string& config_path,
                  std::optional<std::uint64_t> seed) {
  RunConfig cfg = load_config_or_default(config_path);
  if (seed) cfg.sec.seed = *seed;
  AugmentMode mode = augment_mode_from_string(mode_str);
  cfg.sec.augmentation = mode;

  RunDirectory dir(run);
  auto bank = load_device_bank(dir.manifests("bank.json"));
  auto manifest = load_manifest(dir.manifests("corpus.json"));

  std::shared_ptr<Generator<float>> gen;
  ConversionBackend<float> backend;
  backend.bank = &bank;
  backend.synth_cfg.n_bands = cfg.frontend.mel_bands_fr;
  backend.log_floor = cfg.frontend.log_floor;
  if (mode == AugmentMode::UnifiedMcReal || mode == AugmentMode::UnifiedMcSynth) {
    if (mc_ckpt.empty())
      throw std::runtime_error("sec train: --mc-ckpt required for mode " + mode_str);
    gen = load_generator_checkpoint<float>(mc_ckpt);
    backend.generator = gen.get();
  }

  std::size_t source_idx = bank.size();
  for (std::size_t i = 0; i < bank.size(); ++i)
    if (bank[i].device_id == source) source_idx = i;
  if (source_idx == bank.size())
    throw std::runtime_error("sec train: unknown source device " + source);

  auto ds = load_sec_split<float>(manifest, "train_sec", source);
  SmallCnn<float> model(ds.n_classes, cfg.sec.seed, cfg.sec.input_mean, cfg.sec.input_std);
  std::cout << "training SEC on " << ds.specs.size() << " items from " << source << " (mode "
            << mode_str << ")...\n";
  auto log = train_sec(model, ds, cfg.sec, source_idx, backend);
  std::cout << "loss " << log.first_epoch_loss << " -> " << log.last_epoch_loss << "\n";

  const std::string out = dir.checkpoints(sec_ckpt_name(source, mode));
  save_named_tensors(out, model.named_state());
  nlohmann::json meta{{"n_classes", ds.n_classes},
                      {"source", source},
                      {"mode", mode_str},
                      {"seed", cfg.sec.seed},
                      {"input_mean", cfg.sec.input_mean},
                      {"input_std", cfg.sec.input_std}};
  write_text(out + ".json", meta.dump(2) + "\n");
  std::cout << "wrote " << out << "\n";
  return 0;
}

std::shared_ptr<SmallCnn<float>> load_sec_checkpoint(const std::string& path) {
  std::ifstream mf(path + ".json");
  if (!mf) throw std::runtime_error("sec checkpoint metadata missing: " + path + ".json");
  nlohmann::json meta;
  mf >> meta;
  auto model = std::make_shared<SmallCnn<float>>(meta.at("n_classes").get<std::size_t>(),
                                                 meta.at("seed").get<std::uint64_t>(),
                                                 meta.at("input_mean").get<double>(),
                                                 meta.at("input_std").get<double>());
  model->load_state(load_named_tensors<float>(path));
  return model;
}

int cmd_sec_eval(const std::string& run, const std::string& mode_str, const std::string& mc_ckpt) {
  AugmentMode mode = augment_mode_from_string(mode_str);
  RunDirectory dir(run);
  auto bank = load_device_bank(dir.manifests("bank.json"));
  auto manifest = load_manifest(dir.manifests("corpus.json"));

  std::vector<std::shared_ptr<SmallCnn<float>>> models;
  for (const auto& dev : manifest.device_ids) {
    const std::string p = dir.checkpoints(sec_ckpt_name(dev, mode));
    if (!fs::exists(p)) throw std::runtime_error("sec eval: missing checkpoint " + p);
    models.push_back(load_sec_checkpoint(p));
  }
  F1Report rep = evaluate_matrix(models, manifest);

  std::ostringstream csv;
  csv << "source";
  for (const auto& d : rep.device_ids) csv << "," << d;
  csv << ",overall_mean,overall_ci\n";
  for (std::size_t s = 0; s < rep.matrix.size(); ++s) {
    csv << rep.device_ids[s];
    for (double v : rep.matrix[s]) csv << "," << v;
    csv << "," << rep.overall_mean[s] << "," << rep.overall_ci[s] << "\n";
  }
  write_text(dir.reports("f1_" + mode_str + ".csv"), csv.str());

  nlohmann::json j{{"mode", mode_str},
                   {"device_ids", rep.device_ids},
                   {"matrix", rep.matrix},
                   {"overall_mean", rep.overall_mean},
                   {"overall_ci", rep.overall_ci}};
  write_text(dir.reports("f1_" + mode_str + ".json"), j.dump(2) + "\n");
  write_text(dir.reports("f1_" + mode_str + ".txt"), rep.render_text());
  std::cout << rep.render_text();

  // Fig. 1-style panel: input / generated / oracle target / real target
  if (!mc_ckpt.empty()) {
    auto gen = load_generator_checkpoint<float>(mc_ckpt);
    auto val_a = manifest.select("val", manifest.device_ids[0]);
    auto val_b = manifest.select("val", manifest.device_ids[1]);
    const std::size_t n_cols = std::min<std::size_t>(3, val_a.size());
    std::vector<TensorD> cells;
    std::vector<std::string> labels;
    auto push = [&](const TensorF& s, const std::string& lab) {
      TensorD d(s.shape());
      for (std::size_t i = 0; i < s.size(); ++i) d[i] = s[i];
      cells.push_back(std::move(d));
      labels.push_back(lab);
    };
    auto diff = fr_difference(bank[0], bank[1]);
    for (std::size_t row = 0; row < 4; ++row)
      for (std::size_t c = 0; c < n_cols; ++c) {
        TensorF in_spec = load_item_spec(manifest, *val_a[c]);
        if (row == 0) push(in_spec, "INPUT " + val_a[c]->item_id);
        if (row == 1) {
          TensorF x({1, 1, in_spec.dim(0), in_spec.dim(1)});
          std::copy_n(in_spec.data(), in_spec.size(), x.data());
          TensorF dd({1, diff.values.size()});
          for (std::size_t i = 0; i < diff.values.size(); ++i)
            dd(0, i) = static_cast<float>(diff.values[i]);
          TensorF y = generator_forward(*gen, x, dd);
          push(y.reshaped(in_spec.shape()), "GENERATED");
        }
        if (row == 2) {
          LogMelSpectrogram s;
          s.values = TensorD(in_spec.shape());
          for (std::size_t i = 0; i < in_spec.size(); ++i) s.values[i] = in_spec[i];
          s.mel_bands = in_spec.dim(0);
          auto o = oracle_convert(s, diff);
          TensorF of(in_spec.shape());
          for (std::size_t i = 0; i < of.size(); ++i) of[i] = static_cast<float>(o.values[i]);
          push(of, "ORACLE TARGET");
        }
        if (row == 3) push(load_item_spec(manifest, *val_b[c]), "REAL TARGET");
      }
    plot::write_png(dir.figures("conversion_examples.png"),
                    plot::heatmap_grid(cells, labels, n_cols));
    std::cout << "wrote " << dir.figures("conversion_examples.png") << "\n";
  }
  return 0;
}

// ------------------------------------------------------------------ report

int cmd_report(const std::string& run) {
  RunDirectory dir(run);
  // metrics jsonl -> csv (pure regeneration)
  const std::string jl = dir.metrics("mc_train.jsonl");
  if (fs::exists(jl)) {
    std::ifstream f(jl);
    std::ostringstream csv;
    csv << "epoch,lr,g_adv,g_cycle,g_total,d_loss\n";
    std::string line;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      auto j = nlohmann::json::parse(line);
      csv << j.at("epoch") << "," << j.at("lr") << "," << j.at("g_adv") << "," << j.at("g_cycle")
          << "," << j.at("g_total") << "," << j.at("d_loss") << "\n";
    }
    write_text(dir.reports("mc_train.csv"), csv.str());
    std::cout << "regenerated " << dir.reports("mc_train.csv") << "\n";
  }
  for (const char* mode : {"none", "unified-mc-real", "unified-mc-synth", "oracle"}) {
    const std::string jp = dir.reports("f1_" + std::string(mode) + ".json");
    if (!fs::exists(jp)) continue;
    std::ifstream f(jp);
    nlohmann::json j;
    f >> j;
    F1Report rep;
    rep.device_ids = j.at("device_ids").get<std::vector<std::string>>();
    rep.matrix = j.at("matrix").get<std::vector<std::vector<double>>>();
    rep.finalize();
    std::ostringstream csv;
    csv << "source";
    for (const auto& d : rep.device_ids) csv << "," << d;
    csv << ",overall_mean,overall_ci\n";
    for (std::size_t s = 0; s < rep.matrix.size(); ++s) {
      csv << rep.device_ids[s];
      for (double v : rep.matrix[s]) csv << "," << v;
      csv << "," << rep.overall_mean[s] << "," << rep.overall_ci[s] << "\n";
    }
    write_text(dir.reports("f1_" + std::string(mode) + ".csv"), csv.str());
    write_text(dir.reports("f1_" + std::string(mode) + ".txt"), rep.render_text());
    std::cout << "regenerated f1_" << mode << " report\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unified microphone conversion toolkit"};
  app.require_subcommand(1);

  std::string run = default_run_root(), config_path;
  std::optional<std::uint64_t> seed;
  app.add_option("--run", run, "run directory (default $UMC_RUN_ROOT or runs/default)");
  app.add_option("--config", config_path, "JSON config file");
  app.add_option("--seed", seed, "seed override");

  // corpus synth
  auto* corpus = app.add_subcommand("corpus", "corpus commands")->require_subcommand(1);
  auto* synth = corpus->add_subcommand("synth", "build device bank and synthetic corpus");
  std::optional<std::size_t> device_count, classes, items;
  synth->add_option("--device-count", device_count, "number of synthetic devices");
  synth->add_option("--classes", classes, "number of event classes");
  synth->add_option("--items", items, "items per class");

  // frontend extract-fr
  auto* frontend = app.add_subcommand("frontend", "frontend commands")->require_subcommand(1);
  auto* xfr = frontend->add_subcommand("extract-fr", "extract a device frequency response");
  std::string xfr_in, xfr_out;
  xfr->add_option("--in", xfr_in, "recorded impulse WAV")->required();
  xfr->add_option("--out", xfr_out, "output FR tensor")->required();

  // mc train / convert
  auto* mc = app.add_subcommand("mc", "microphone conversion commands")->require_subcommand(1);
  auto* mtrain = mc->add_subcommand("train", "train the unified conversion network");
  bool resume = false;
  mtrain->add_flag("--resume", resume, "resume from last checkpoint");
  auto* mconv = mc->add_subcommand("convert", "convert one spectrogram");
  std::string cv_in, cv_diff, cv_ckpt, cv_out;
  mconv->add_option("--in", cv_in)->required();
  mconv->add_option("--fr-diff", cv_diff)->required();
  mconv->add_option("--ckpt", cv_ckpt)->required();
  mconv->add_option("--out", cv_out)->required();

  // probe mi
  auto* probe = app.add_subcommand("probe", "analysis probes")->require_subcommand(1);
  auto* pmi = probe->add_subcommand("mi", "mutual-information probe over generator layers");
  std::string pmi_ckpt, pmi_layers, pmi_axes;
  std::size_t pmi_max = 0;
  pmi->add_option("--ckpt", pmi_ckpt)->required();
  pmi->add_option("--layers", pmi_layers, "comma-separated layer tags (default: all)");
  pmi->add_option("--axes", pmi_axes, "comma-separated axes (channel,frequency,time)");
  pmi->add_option("--max-items", pmi_max, "cap probed conversions");

  // sec train / eval
  auto* sec = app.add_subcommand("sec", "sound event classification")->require_subcommand(1);
  auto* strain = sec->add_subcommand("train", "train one SEC model");
  std::string sec_source, sec_mode = "none", sec_mc_ckpt;
  strain->add_option("--source", sec_source, "source device id")->required();
  strain->add_option("--mode", sec_mode, "none|unified-mc-real|unified-mc-synth|oracle");
  strain->add_option("--mc-ckpt", sec_mc_ckpt, "conversion checkpoint (unified-mc modes)");
  auto* seval = sec->add_subcommand("eval", "evaluate the source x target F1 matrix");
  std::string eval_mode = "none", eval_mc_ckpt;
  seval->add_option("--mode", eval_mode, "augmentation mode of the checkpoints to evaluate");
  seval->add_option("--mc-ckpt", eval_mc_ckpt, "conversion checkpoint for example figures");

  // report
  auto* report = app.add_subcommand("report", "regenerate CSVs/tables from stored metrics");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  }

  try {
    if (synth->parsed()) return cmd_corpus_synth(run, config_path, seed, device_count, classes, items);
    if (xfr->parsed()) return cmd_extract_fr(xfr_in, xfr_out, config_path);
    if (mtrain->parsed()) return cmd_mc_train(run, config_path, resume);
    if (mconv->parsed()) return cmd_mc_convert(cv_in, cv_diff, cv_ckpt, cv_out);
    if (pmi->parsed()) return cmd_probe_mi(run, pmi_ckpt, pmi_layers, pmi_axes, pmi_max, config_path);
    if (strain->parsed()) return cmd_sec_train(run, sec_source, sec_mode, sec_mc_ckpt, config_path, seed);
    if (seval->parsed()) return cmd_sec_eval(run, eval_mode, eval_mc_ckpt);
    if (report->parsed()) return cmd_report(run);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
