#pragma once

// Command-line front end. Every verb writes its artifacts plus a
// manifest.json (resolved config, seeds, CRC-32 of inputs and outputs) into
// --out-dir. Exit codes: 0 ok, 1 domain error, 2 usage error.

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "echwr/echwr.hpp"

namespace echwr::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

inline std::string crc_hex(std::string_view bytes) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x", io::crc32(bytes));
  return buf;
}

struct GlobalFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
  std::string log_level;
};

/// Collects inputs read and artifacts written by one verb.
class Manifest {
 public:
  explicit Manifest(std::string verb) { doc_["verb"] = std::move(verb); }

  void input(const std::string& path) { inputs_[path] = crc_hex(io::read_file(path)); }
  void config(const std::string& key, const std::string& value) { doc_["config"][key] = value; }
  void seed(const std::string& key, std::uint64_t value) { doc_["seeds"][key] = value; }
  void note(const std::string& key, ordered_json value) { doc_["results"][key] = std::move(value); }

  void write_artifact(const fs::path& dir, const std::string& name, std::string_view bytes) {
    io::write_file((dir / name).string(), bytes);
    artifacts_[name] = crc_hex(bytes);
  }

  void finish(const fs::path& dir) {
    for (const auto& [k, v] : inputs_) doc_["inputs"][k] = v;
    for (const auto& [k, v] : artifacts_) doc_["artifacts"][k] = v;
    io::write_file((dir / "manifest.json").string(), doc_.dump(2) + "\n");
  }

 private:
  ordered_json doc_;
  std::map<std::string, std::string> inputs_, artifacts_;
};

inline void setup_logging(const std::string& flag_level) {
  if (!spdlog::get("echwr")) {
    auto logger = spdlog::stderr_color_mt("echwr");
    spdlog::set_default_logger(logger);
  }
  std::string level = "info";
  if (const char* env = std::getenv("ECHWR_LOG")) level = env;
  if (!flag_level.empty()) level = flag_level;
  const auto lv = spdlog::level::from_str(level);
  if (lv == spdlog::level::off && level != "off") throw ConfigError("unknown log level '" + level + "'");
  spdlog::set_level(lv);
}

/// Training flags map one-to-one onto TrainConfig keys; they override --config.
struct TrainFlags {
  std::map<std::string, std::string> overrides;

  void attach(CLI::App* sub) {
    static const std::vector<std::tuple<std::string, std::string, std::string>> table = {
        {"--epochs", "epochs", "Training epochs (default 300)"},
        {"--batch-size", "batch_size", "Batch size (default 64)"},
        {"--warmup-epochs", "warmup_epochs", "Linear warmup epochs (default 30)"},
        {"--lr-primary", "lr_primary", "Peak learning rate of the sensor model (default 1e-3)"},
        {"--lr-aux", "lr_aux", "Peak learning rate of the auxiliary branch (default 2.5e-4)"},
        {"--weight-decay", "weight_decay", "Decoupled weight decay (default 1e-2)"},
        {"--objectives", "objectives", "Enabled losses, e.g. ctc or ctc,bc,ec (default ctc,bc,ec)"},
        {"--error-sets", "error_sets", "Error sets S per sample for EC (default 2)"},
        {"--norm", "norm_kind", "Text encoder normalization: layer or rms (default layer)"},
        {"--gated", "gated", "Head-wise gated attention: true/false (default true)"},
        {"--registers", "num_registers", "Register tokens in the text encoder (default 4)"},
        {"--preset", "preset", "Sensor model size: S or B (default S)"},
        {"--ctc-smoothing", "ctc_smoothing", "CTC label smoothing weight (default 0.1)"},
        {"--grad-clip", "grad_clip", "Global gradient-norm clip (default 5)"},
        {"--aux-dim", "aux_dim", "Embedding width of the auxiliary branch (default 512)"},
        {"--aux-heads", "aux_heads", "Attention heads in the auxiliary branch (default 8)"},
        {"--text-layers", "text_layers", "Text encoder layers (default 3)"},
        {"--ffn-hidden", "ffn_hidden", "Text encoder feed-forward width (default 2048)"},
        {"--attn-dropout", "attn_dropout", "Text encoder attention dropout (default 0.1)"},
        {"--text-max-len", "text_max_len", "Maximum text tokens incl. CLS and registers (default 64)"},
        {"--tau-init", "tau_init", "Initial temperature (default 1/0.07)"},
        {"--tau-clamp", "tau_clamp", "Temperature ceiling (default 100)"},
        {"--freeze-negatives", "freeze_negatives", "Reuse epoch-independent negatives: true/false (default false)"},
        {"--precision", "precision", "float32 or float64 (default float32)"},
    };
    for (const auto& [flag, key, help] : table) {
      sub->add_option_function<std::string>(flag, [this, key = key](const std::string& v) { overrides[key] = v; }, help);
    }
  }

  TrainConfig resolve(const GlobalFlags& g) const {
    TrainConfig cfg;
    if (!g.config.empty()) cfg.apply_text(io::read_file(g.config));
    for (const auto& [k, v] : overrides) cfg.set(k, v);
    if (g.seed) cfg.seed = *g.seed;
    cfg.validate();
    return cfg;
  }
};

inline std::vector<std::string> read_lines(const std::string& path) {
  std::istringstream is(io::read_file(path));
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

inline void record_config(Manifest& m, const TrainConfig& cfg) {
  for (const auto& [k, v] : cfg.to_kv()) m.config(k, v);
  m.seed("seed", cfg.seed);
}

inline std::string eval_csv(const std::string& split, const EvalResult& r) {
  return "split,n_samples,CER,WER\n" + split + "," + std::to_string(r.n_samples) + "," +
         detail::fmt_real(r.rates.cer) + "," + detail::fmt_real(r.rates.wer) + "\n";
}

template <typename T>
void write_embeddings(const std::string& ckpt_path, const std::string& data_path, std::size_t sets, std::uint64_t seed,
                      std::ostream& out) {
  auto bundle = ModelBundle<T>::load_checkpoint(ckpt_path);
  if (!bundle->has_aux()) throw ConfigError("export-embeddings: checkpoint has no auxiliary branch");
  const Dataset ds = load_dataset(data_path);
  BatchOptions opt;
  opt.batch_size = 32;
  opt.shuffle = false;
  opt.freeze_negatives = true;
  opt.error_cfg.num_sets = sets;
  opt.error_cfg.seed = seed;
  opt.error_cfg.alphabet = bundle->vocab().ids();
  NoGradGuard ng;
  char buf[32];
  auto row = [&](const char* kind, const std::string& id, const std::string& text, std::span<const T> v) {
    out << kind << '\t' << id << '\t' << text;
    for (T x : v) {
      std::snprintf(buf, sizeof buf, "\t%.9g", static_cast<double>(x));
      out << buf;
    }
    out << '\n';
  };
  for (const auto& batch : make_batches(ds.records, ds.channels, bundle->vocab(), opt, 0)) {
    const auto so = bundle->sensor().forward(batch.template signal_tensor<T>(), batch.lengths, {});
    const auto al = align_batch(bundle->pool(), bundle->text(), so.features, so.out_lengths, batch.labels,
                                sets > 0 ? batch.negatives : std::vector<std::vector<LabelSeq>>{}, {});
    const std::size_t D = al.c_sig.dim(1), N = batch.size(), M = al.m;
    for (std::size_t i = 0; i < N; ++i) {
      row("sensor", batch.sample_ids[i], batch.transcripts[i], al.c_sig.data().subspan(i * D, D));
      row("text", batch.sample_ids[i], batch.transcripts[i], al.z_text.data().subspan(i * D, D));
      for (std::size_t k = 0; k < M; ++k) {
        row("negative", batch.sample_ids[i], bundle->vocab().decode(batch.negatives[i][k]),
            al.z_text.data().subspan((N + i * M + k) * D, D));
      }
    }
  }
}

/// Parses argv and runs one verb. Output streams are injectable for tests.
inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Sensor handwriting recognition toolkit with a training-only contrastive branch", "echwr"};
  app.require_subcommand(1);
  GlobalFlags g;
  auto add_globals = [&](CLI::App* sub) {
    sub->add_option("--config", g.config, "Config file of 'key = value' lines; flags override it");
    sub->add_option("--seed", g.seed, "Random seed");
    sub->add_option("--out-dir", g.out_dir, "Directory for artifacts and manifest.json (default .)");
    sub->add_option("--log-level", g.log_level, "trace, debug, info, warn, err or off (env ECHWR_LOG)");
  };

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic multi-writer dataset");
  std::size_t n_words = 5, n_writers = 2, n_samples = 200, channels = 13;
  double noise = 0.05;
  std::string word_file, synth_name = "dataset.echw";
  synth->add_option("--words", n_words, "Number of generated words (ignored with --word-file)");
  synth->add_option("--word-file", word_file, "File with one word per line");
  synth->add_option("--writers", n_writers, "Number of writers");
  synth->add_option("--samples", n_samples, "Number of samples");
  synth->add_option("--channels", channels, "Signal channels");
  synth->add_option("--noise", noise, "Per-sample noise standard deviation");
  synth->add_option("--output", synth_name, "Dataset file name inside --out-dir");
  add_globals(synth);

  // split
  auto* split = app.add_subcommand("split", "Writer-dependent or writer-independent train/val split");
  std::string data_path, split_kind = "wd";
  double holdout = 0.2;
  split->add_option("--data", data_path, "Dataset file")->required();
  split->add_option("--kind", split_kind, "wd (disjoint words) or wi (disjoint writers)");
  split->add_option("--holdout", holdout, "Held-out fraction of words or writers");
  add_globals(split);

  // stats
  auto* stats = app.add_subcommand("stats", "Per-split character frequencies as CSV");
  std::string train_path, val_path;
  stats->add_option("--train", train_path, "Training dataset file")->required();
  stats->add_option("--val", val_path, "Validation dataset file");
  add_globals(stats);

  // gen-negatives
  auto* gen = app.add_subcommand("gen-negatives", "Distance-one negatives for a transcript list");
  std::string input_path;
  std::size_t sets = 2;
  gen->add_option("--input", input_path, "Transcripts, one per line")->required();
  gen->add_option("--sets", sets, "Error sets S (3S negatives per transcript)");
  add_globals(gen);

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  TrainFlags tflags;
  train_cmd->add_option("--train", train_path, "Training dataset file")->required();
  train_cmd->add_option("--val", val_path, "Validation dataset file");
  tflags.attach(train_cmd);
  add_globals(train_cmd);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Greedy-decode a dataset and report CER/WER");
  std::string model_path, split_name = "eval";
  eval_cmd->add_option("--model", model_path, "Exported model or full checkpoint")->required();
  eval_cmd->add_option("--data", data_path, "Dataset file")->required();
  eval_cmd->add_option("--split", split_name, "Split label written to the CSV");
  add_globals(eval_cmd);

  // sweep
  auto* sweep = app.add_subcommand("sweep", "Architecture grid and error-set sweep");
  std::string grid = "both";
  sweep->add_option("--train", train_path, "Training dataset file")->required();
  sweep->add_option("--val", val_path, "Validation dataset file")->required();
  sweep->add_option("--grid", grid, "table2, fig2 or both");
  tflags.attach(sweep);
  add_globals(sweep);

  // export
  auto* exp = app.add_subcommand("export", "Write the inference model (primary parameters only)");
  std::string ckpt_path, export_name = "model.echwm";
  exp->add_option("--checkpoint", ckpt_path, "Full checkpoint")->required();
  exp->add_option("--output", export_name, "File name inside --out-dir");
  add_globals(exp);

  // export-embeddings
  auto* emb = app.add_subcommand("export-embeddings", "Sensor, text and negative embeddings as TSV");
  emb->add_option("--checkpoint", ckpt_path, "Full checkpoint with auxiliary branch")->required();
  emb->add_option("--data", data_path, "Dataset file")->required();
  emb->add_option("--sets", sets, "Error sets S of negatives per sample");
  add_globals(emb);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    // Show help for the subcommand that failed when there is one.
    const CLI::App* shown = &app;
    for (const auto* sub : app.get_subcommands()) shown = sub;
    err << shown->help();
    return 2;
  }

  try {
    setup_logging(g.log_level);
    const fs::path dir(g.out_dir);
    fs::create_directories(dir);
    const std::uint64_t seed = g.seed.value_or(0);

    if (*synth) {
      Manifest m("synth");
      SynthConfig sc;
      if (!word_file.empty()) {
        sc.words = read_lines(word_file);
        m.input(word_file);
      } else {
        sc.words = synth_words(n_words, seed);
      }
      sc.writers = n_writers;
      sc.samples = n_samples;
      sc.channels = channels;
      sc.seed = seed;
      sc.noise_sigma = noise;
      m.config("words", std::to_string(sc.words.size()));
      m.config("writers", std::to_string(n_writers));
      m.config("samples", std::to_string(n_samples));
      m.config("channels", std::to_string(channels));
      m.config("noise", detail::fmt_real(noise));
      m.seed("seed", seed);
      m.write_artifact(dir, synth_name, serialize_dataset(synth_generate(sc)));
      m.finish(dir);
      out << "wrote " << (dir / synth_name).string() << "\n";
    } else if (*split) {
      Manifest m("split");
      m.input(data_path);
      const Dataset ds = load_dataset(data_path);
      const SplitSpec spec{parse_split_kind(split_kind), holdout, seed};
      const Split s = make_split(ds.records, spec);
      m.config("kind", split_kind);
      m.config("holdout", detail::fmt_real(holdout));
      m.seed("seed", seed);
      m.write_artifact(dir, "train.echw", serialize_dataset(Dataset{ds.channels, s.train}));
      m.write_artifact(dir, "val.echw", serialize_dataset(Dataset{ds.channels, s.val}));
      m.finish(dir);
      out << "train " << s.train.size() << " records, val " << s.val.size() << " records\n";
    } else if (*stats) {
      Manifest m("stats");
      m.input(train_path);
      const Dataset tr = load_dataset(train_path);
      Dataset va;
      if (!val_path.empty()) {
        m.input(val_path);
        va = load_dataset(val_path);
      }
      const CharFrequency f = char_frequency(tr.records, va.records);
      m.write_artifact(dir, "char_frequency.csv", f.to_csv());
      m.note("missing_in_val", u32_to_utf8(f.missing_in_val()));
      m.finish(dir);
      out << f.to_csv();
    } else if (*gen) {
      Manifest m("gen-negatives");
      m.input(input_path);
      const auto truths = read_lines(input_path);
      const Vocabulary alphabet = Vocabulary::from_texts(truths);
      std::string tsv;
      for (const auto& t : truths) {
        ErrorSetConfig ec;
        ec.num_sets = sets;
        ec.alphabet = alphabet.ids();
        ec.seed = sample_seed(seed, t);
        for (const auto& n : generate_negatives(alphabet.encode(t), ec))
          tsv += t + "\t" + to_string(n.kind) + "\t" + alphabet.decode(n.text) + "\n";
      }
      m.config("sets", std::to_string(sets));
      m.seed("seed", seed);
      m.write_artifact(dir, "negatives.tsv", tsv);
      m.finish(dir);
      out << tsv;
    } else if (*train_cmd) {
      Manifest m("train");
      const TrainConfig cfg = tflags.resolve(g);
      if (!g.config.empty()) m.input(g.config);
      m.input(train_path);
      const Dataset tr = load_dataset(train_path);
      Dataset va;
      if (!val_path.empty()) {
        m.input(val_path);
        va = load_dataset(val_path);
        if (va.channels != tr.channels) throw FormatError("train: train and val channel counts differ");
      }
      record_config(m, cfg);
      const TrainResult r = cfg.precision == "float64" ? train<double>(tr.records, va.records, tr.channels, cfg)
                                                       : train<float>(tr.records, va.records, tr.channels, cfg);
      m.write_artifact(dir, "best.ckpt", r.best_checkpoint);
      m.write_artifact(dir, "last.ckpt", r.last_checkpoint);
      m.write_artifact(dir, "model.echwm", r.exported);
      m.write_artifact(dir, "steps.csv", r.steps_csv);
      m.write_artifact(dir, "epochs.csv", r.epochs_csv);
      m.note("best_epoch", r.best_epoch);
      m.note("best_cer", r.best_cer);
      m.note("best_wer", r.best_wer);
      m.note("skipped_infeasible", r.skipped_infeasible);
      m.finish(dir);
      out << "best epoch " << r.best_epoch << ": CER " << r.best_cer << " WER " << r.best_wer << "\n";
    } else if (*eval_cmd) {
      Manifest m("eval");
      m.input(model_path);
      m.input(data_path);
      const auto model = load_inference_model<float>(model_path);
      const Dataset ds = load_dataset(data_path);
      const EvalResult r = evaluate<float>(*model, ds.records, ds.channels);
      const std::string csv = eval_csv(split_name, r);
      m.write_artifact(dir, "eval.csv", csv);
      m.finish(dir);
      out << csv;
    } else if (*sweep) {
      Manifest m("sweep");
      const TrainConfig cfg = tflags.resolve(g);
      if (!g.config.empty()) m.input(g.config);
      m.input(train_path);
      m.input(val_path);
      const Dataset tr = load_dataset(train_path), va = load_dataset(val_path);
      record_config(m, cfg);
      m.config("grid", grid);
      if (grid != "table2" && grid != "fig2" && grid != "both") throw ConfigError("sweep: unknown grid '" + grid + "'");
      auto run = [&](const std::vector<SweepDelta>& deltas) {
        return sweep_csv(cfg.precision == "float64" ? ablation_sweep<double>(tr.records, va.records, tr.channels, cfg, deltas)
                                                    : ablation_sweep<float>(tr.records, va.records, tr.channels, cfg, deltas));
      };
      if (grid != "fig2") {
        const std::string csv = run(table2_grid(cfg.num_registers > 0 ? cfg.num_registers : 4, cfg.error_sets));
        m.write_artifact(dir, "sweep_table2.csv", csv);
        out << csv;
      }
      if (grid != "table2") {
        const std::string csv = run(error_set_grid(cfg.norm_kind, cfg.gated, cfg.num_registers));
        m.write_artifact(dir, "sweep_fig2.csv", csv);
        out << csv;
      }
      m.finish(dir);
    } else if (*exp) {
      Manifest m("export");
      m.input(ckpt_path);
      const auto bundle = ModelBundle<float>::load_checkpoint(ckpt_path);
      m.write_artifact(dir, export_name, bundle->inference_bytes());
      m.finish(dir);
      out << "wrote " << (dir / export_name).string() << "\n";
    } else if (*emb) {
      Manifest m("export-embeddings");
      m.input(ckpt_path);
      m.input(data_path);
      m.config("sets", std::to_string(sets));
      m.seed("seed", seed);
      std::ostringstream tsv;
      write_embeddings<float>(ckpt_path, data_path, sets, seed, tsv);
      m.write_artifact(dir, "embeddings.tsv", tsv.str());
      m.finish(dir);
      out << "wrote " << (dir / "embeddings.tsv").string() << "\n";
    }
    return 0;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace echwr::cli
