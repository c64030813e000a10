#pragma once

// Optimization loop: AdamW over two learning-rate groups, linear warmup then
// cosine annealing evaluated per step, global-norm clipping, best-by-CER
// checkpointing, inference export, and the ablation sweep driver.

#include <spdlog/spdlog.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "echwr/bundle.hpp"
#include "echwr/data.hpp"
#include "echwr/eval.hpp"
#include "echwr/negatives.hpp"
#include "echwr/objectives.hpp"

namespace echwr {

struct TrainConfig {
  std::size_t epochs = 300;
  std::size_t batch_size = 64;
  std::size_t warmup_epochs = 30;
  double lr_primary = 1e-3;
  double lr_aux = 2.5e-4;
  double weight_decay = 1e-2;
  ObjectiveFlags objectives;
  std::size_t error_sets = 2;
  std::uint64_t seed = 0;
  NormKind norm_kind = NormKind::layer;
  bool gated = true;
  std::size_t num_registers = 4;
  SizePreset preset = SizePreset::S;
  double ctc_smoothing = 0.1;
  double grad_clip = 5.0;
  std::size_t aux_dim = 512;
  std::size_t aux_heads = 8;
  std::size_t text_layers = 3;
  std::size_t ffn_hidden = 2048;
  double attn_dropout = 0.1;
  std::size_t text_max_len = 64;
  double tau_init = 1.0 / 0.07;
  double tau_clamp = 100.0;
  bool freeze_negatives = false;
  std::string precision = "float32";

  static bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw ConfigError("config: '" + key + "' expects a boolean, got '" + v + "'");
  }

  void set(const std::string& key, const std::string& value) {
    auto to_size = [&]() -> std::size_t {
      std::size_t used = 0;
      long long v = 0;
      try {
        v = std::stoll(value, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != value.size() || v < 0) throw ConfigError("config: '" + key + "' expects a non-negative integer, got '" + value + "'");
      return static_cast<std::size_t>(v);
    };
    auto to_real = [&]() -> double {
      std::size_t used = 0;
      double v = 0;
      try {
        v = std::stod(value, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != value.size() || !std::isfinite(v)) throw ConfigError("config: '" + key + "' expects a number, got '" + value + "'");
      return v;
    };
    if (key == "epochs") epochs = to_size();
    else if (key == "batch_size") batch_size = to_size();
    else if (key == "warmup_epochs") warmup_epochs = to_size();
    else if (key == "lr_primary") lr_primary = to_real();
    else if (key == "lr_aux") lr_aux = to_real();
    else if (key == "weight_decay") weight_decay = to_real();
    else if (key == "objectives") objectives = ObjectiveFlags::parse(value);
    else if (key == "error_sets") error_sets = to_size();
    else if (key == "seed") seed = std::stoull(value);
    else if (key == "norm_kind") norm_kind = parse_norm_kind(value);
    else if (key == "gated") gated = parse_bool(key, value);
    else if (key == "num_registers") num_registers = to_size();
    else if (key == "preset") preset = parse_size_preset(value);
    else if (key == "ctc_smoothing") ctc_smoothing = to_real();
    else if (key == "grad_clip") grad_clip = to_real();
    else if (key == "aux_dim") aux_dim = to_size();
    else if (key == "aux_heads") aux_heads = to_size();
    else if (key == "text_layers") text_layers = to_size();
    else if (key == "ffn_hidden") ffn_hidden = to_size();
    else if (key == "attn_dropout") attn_dropout = to_real();
    else if (key == "text_max_len") text_max_len = to_size();
    else if (key == "tau_init") tau_init = to_real();
    else if (key == "tau_clamp") tau_clamp = to_real();
    else if (key == "freeze_negatives") freeze_negatives = parse_bool(key, value);
    else if (key == "precision") precision = value;
    else throw ConfigError("config: unknown key '" + key + "'");
  }

  /// `key = value` lines; '#' starts a comment line.
  void apply_text(const std::string& text) {
    for (const auto& [k, v] : parse_metadata(text)) set(k, v);
  }

  std::vector<std::pair<std::string, std::string>> to_kv() const {
    // Shortest decimal form that parses back to the same double.
    auto real = [](double v) {
      char buf[40];
      for (int prec = 6; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::stod(buf) == v) break;
      }
      return std::string(buf);
    };
    return {{"epochs", std::to_string(epochs)},
            {"batch_size", std::to_string(batch_size)},
            {"warmup_epochs", std::to_string(warmup_epochs)},
            {"lr_primary", real(lr_primary)},
            {"lr_aux", real(lr_aux)},
            {"weight_decay", real(weight_decay)},
            {"objectives", objectives.to_string()},
            {"error_sets", std::to_string(error_sets)},
            {"seed", std::to_string(seed)},
            {"norm_kind", to_string(norm_kind)},
            {"gated", gated ? "true" : "false"},
            {"num_registers", std::to_string(num_registers)},
            {"preset", to_string(preset)},
            {"ctc_smoothing", real(ctc_smoothing)},
            {"grad_clip", real(grad_clip)},
            {"aux_dim", std::to_string(aux_dim)},
            {"aux_heads", std::to_string(aux_heads)},
            {"text_layers", std::to_string(text_layers)},
            {"ffn_hidden", std::to_string(ffn_hidden)},
            {"attn_dropout", real(attn_dropout)},
            {"text_max_len", std::to_string(text_max_len)},
            {"tau_init", real(tau_init)},
            {"tau_clamp", real(tau_clamp)},
            {"freeze_negatives", freeze_negatives ? "true" : "false"},
            {"precision", precision}};
  }

  std::string to_text() const {
    std::string out;
    for (const auto& [k, v] : to_kv()) out += k + " = " + v + "\n";
    return out;
  }

  void validate() const {
    if (epochs == 0) throw ConfigError("config: epochs must be positive");
    if (warmup_epochs >= epochs) throw ConfigError("config: warmup_epochs must be smaller than epochs");
    if (batch_size == 0) throw ConfigError("config: batch_size must be positive");
    if (!(lr_primary > 0.0) || !(lr_aux > 0.0)) throw ConfigError("config: learning rates must be positive");
    if (lr_aux > lr_primary) throw ConfigError("config: lr_aux must not exceed lr_primary");
    if (weight_decay < 0.0) throw ConfigError("config: weight_decay must be non-negative");
    if (ctc_smoothing < 0.0 || ctc_smoothing >= 1.0) throw ConfigError("config: ctc_smoothing must be in [0, 1)");
    if (!(grad_clip > 0.0)) throw ConfigError("config: grad_clip must be positive");
    if (attn_dropout < 0.0 || attn_dropout >= 1.0) throw ConfigError("config: attn_dropout must be in [0, 1)");
    if (precision != "float32" && precision != "float64") throw ConfigError("config: precision must be float32 or float64");
    if (!(tau_init > 0.0) || tau_init > tau_clamp) throw ConfigError("config: tau_init must be in (0, tau_clamp]");
    if (objectives.ec && error_sets == 0) throw ConfigError("config: EC objective needs error_sets >= 1");
  }
};

enum class LrGroup { primary, aux };

/// Linear warmup to the group's peak, then cosine annealing to zero at `epochs`.
inline double lr_at(double epoch, LrGroup group, const TrainConfig& cfg) {
  const double peak = group == LrGroup::primary ? cfg.lr_primary : cfg.lr_aux;
  const double E = static_cast<double>(cfg.epochs), W = static_cast<double>(cfg.warmup_epochs);
  epoch = std::clamp(epoch, 0.0, E);
  double lr;
  if (epoch < W) lr = peak * (epoch / W);
  else lr = peak * 0.5 * (1.0 + std::cos(std::numbers::pi * (epoch - W) / (E - W)));
  return std::max(lr, 0.0);
}

/// Bundle configuration implied by a training configuration.
inline BundleConfig bundle_config(const TrainConfig& cfg, std::size_t num_classes, std::size_t channels) {
  BundleConfig b;
  b.sensor = SensorBackboneConfig::from_preset(cfg.preset, num_classes, channels);
  b.has_aux = cfg.objectives.bc || cfg.objectives.ec;
  b.pool.d_out = cfg.aux_dim;
  b.pool.num_heads = cfg.aux_heads;
  b.pool.gated = cfg.gated;
  b.text.layers = cfg.text_layers;
  b.text.heads = cfg.aux_heads;
  b.text.dim = cfg.aux_dim;
  b.text.ffn_hidden = cfg.ffn_hidden;
  b.text.attn_dropout = cfg.attn_dropout;
  b.text.norm_kind = cfg.norm_kind;
  b.text.gated = cfg.gated;
  b.text.num_registers = cfg.num_registers;
  b.text.max_len = cfg.text_max_len;
  b.tau_init = cfg.tau_init;
  b.tau_clamp = cfg.tau_clamp;
  return b;
}

/// Decoupled-weight-decay Adam over a ParamStore, one learning rate per group.
template <typename T>
class AdamW {
 public:
  AdamW(ParamStore<T>& store, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : store_(store), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& p : store.all()) {
      m_.emplace_back(p.value.numel(), T(0));
      v_.emplace_back(p.value.numel(), T(0));
    }
  }

  /// p <- p (1 - lr wd), then the bias-corrected Adam step. A parameter with
  /// no gradient is treated as having a zero gradient.
  void step(double lr_primary, double lr_aux) {
    ++t_;
    const T c1 = static_cast<T>(1.0 - std::pow(b1_, static_cast<double>(t_)));
    const T c2 = static_cast<T>(1.0 - std::pow(b2_, static_cast<double>(t_)));
    const T b1 = static_cast<T>(b1_), b2 = static_cast<T>(b2_), eps = static_cast<T>(eps_);
    auto& params = store_.all();
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      const double lr_d = p.group == Group::primary ? lr_primary : lr_aux;
      const T lr = static_cast<T>(lr_d);
      const T decay = static_cast<T>(1.0 - lr_d * wd_);
      auto data = p.value.mutable_data();
      const auto grad = p.value.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < data.size(); ++k) {
        const T g = grad.empty() ? T(0) : grad[k];
        m[k] = b1 * m[k] + (T(1) - b1) * g;
        v[k] = b2 * v[k] + (T(1) - b2) * g * g;
        data[k] = data[k] * decay - lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  ParamStore<T>& store_;
  double wd_, b1_, b2_, eps_;
  std::vector<std::vector<T>> m_, v_;
  std::size_t t_ = 0;
};

/// Scales all gradients so their joint L2 norm is at most max_norm; returns the pre-clip norm.
template <typename T>
double clip_grad_norm(ParamStore<T>& store, double max_norm) {
  double sq = 0.0;
  for (const auto& p : store.all())
    for (T g : p.value.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("gradient norm is not finite");
  if (norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& p : store.all())
      for (T& g : p.value.node()->grad) g *= s;
  }
  return norm;
}

struct EvalResult {
  ErrorRates rates;
  std::size_t n_samples = 0;
  std::vector<std::pair<std::string, std::string>> pairs;  // (prediction, reference)
};

/// Greedy-decodes every record and scores against its transcript. Works with
/// anything exposing log_probs(signal, lengths) and vocab().
template <typename T, typename Model>
EvalResult evaluate(const Model& model, const std::vector<SampleRecord>& records, std::size_t channels,
                    std::size_t batch_size = 64) {
  EvalResult res;
  if (records.empty()) return res;
  BatchOptions opt;
  opt.batch_size = batch_size;
  opt.shuffle = false;
  opt.error_cfg.num_sets = 0;
  // References may contain characters the model never saw; only predictions are decoded.
  for (std::size_t start = 0; start < records.size(); start += batch_size) {
    const std::size_t end = std::min(records.size(), start + batch_size);
    std::size_t max_len = 0;
    for (std::size_t i = start; i < end; ++i) max_len = std::max(max_len, records[i].length);
    std::vector<T> sig((end - start) * max_len * channels, T(0));
    std::vector<std::size_t> lens;
    for (std::size_t i = start; i < end; ++i) {
      const auto& r = records[i];
      std::copy(r.signal.begin(), r.signal.end(), sig.begin() + static_cast<std::ptrdiff_t>((i - start) * max_len * channels));
      lens.push_back(r.length);
    }
    auto [lp, out_lens] = model.log_probs(Tensor<T>::from({end - start, max_len, channels}, std::move(sig)), lens);
    const std::size_t steps = lp.dim(1), C = lp.dim(2);
    for (std::size_t b = 0; b < end - start; ++b) {
      const auto row = lp.data().subspan(b * steps * C, steps * C);
      res.pairs.emplace_back(model.vocab().decode(greedy_decode<T>(row, C, out_lens[b])), records[start + b].transcript);
    }
  }
  res.n_samples = res.pairs.size();
  res.rates = corpus_error_rates(res.pairs);
  return res;
}

struct TrainOutputs {
  std::string out_dir;  // empty: nothing is written
  std::string checkpoint_name = "best.ckpt";
  std::string last_checkpoint_name = "last.ckpt";
  std::string export_name = "model.echwm";
  std::string steps_csv = "steps.csv";
  std::string epochs_csv = "epochs.csv";
};

struct EpochRow {
  std::size_t epoch = 0;
  LossReport mean;
  double tau = 0.0;
  double lr_primary = 0.0;
  double lr_aux = 0.0;
  double val_cer = 0.0;
  double val_wer = 0.0;
};

struct TrainResult {
  std::size_t steps = 0;
  std::size_t skipped_infeasible = 0;
  std::size_t best_epoch = 0;
  double best_cer = std::numeric_limits<double>::infinity();
  double best_wer = std::numeric_limits<double>::infinity();
  double tau_initial = 0.0;
  double tau_final = 0.0;
  bool all_finite = true;
  ErrorRates final_train;  // last-epoch parameters on the (feasible) training records
  std::vector<LossReport> step_reports;
  std::vector<EpochRow> epochs;
  std::string steps_csv;
  std::string epochs_csv;
  std::string best_checkpoint;  // bytes
  std::string last_checkpoint;  // bytes
  std::string exported;         // bytes
};

namespace detail {

inline std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline bool better(double cer, double wer, double best_cer, double best_wer) {
  return cer < best_cer || (cer == best_cer && wer < best_wer);
}

}  // namespace detail

/// Trains a fresh bundle. The vocabulary comes from the training records only.
/// Validation drives checkpoint selection; with no validation records the
/// training records are used instead.
template <typename T>
TrainResult train(const std::vector<SampleRecord>& train_records, const std::vector<SampleRecord>& val_records,
                  std::size_t channels, const TrainConfig& cfg, const TrainOutputs& outputs = {}) {
  cfg.validate();
  if (train_records.empty()) throw ConfigError("train: no training records");
  const Vocabulary vocab = Vocabulary::from_texts(transcripts_of(train_records));
  ModelBundle<T> bundle(vocab, bundle_config(cfg, vocab.num_classes(), channels), cfg.seed);
  const auto& scfg = bundle.config().sensor;

  // Samples whose downsampled length cannot carry their transcript are dropped up front.
  std::vector<SampleRecord> feasible;
  TrainResult res;
  for (const auto& r : train_records) {
    const std::size_t out_len = scfg.out_length(r.length);
    if (r.length < scfg.min_input_length() || out_len < ctc_required_length(vocab.encode(r.transcript))) {
      ++res.skipped_infeasible;
      continue;
    }
    feasible.push_back(r);
  }
  if (res.skipped_infeasible > 0) {
    spdlog::warn("train: skipping {} of {} samples whose output length is too short for CTC", res.skipped_infeasible,
                 train_records.size());
  }
  if (feasible.empty()) throw InfeasibleTargetError("train: no sample has a feasible CTC target");
  const std::vector<SampleRecord>& select_records = val_records.empty() ? feasible : val_records;

  BatchOptions bopt;
  bopt.batch_size = cfg.batch_size;
  bopt.seed = mix_seed(cfg.seed, 0xBA7C);
  bopt.freeze_negatives = cfg.freeze_negatives;
  bopt.error_cfg.num_sets = cfg.objectives.ec ? cfg.error_sets : 0;
  bopt.error_cfg.seed = mix_seed(cfg.seed, 0x4E47);
  bopt.error_cfg.alphabet = vocab.ids();

  AdamW<T> opt(bundle.store(), cfg.weight_decay);
  Rng dropout_rng(mix_seed(cfg.seed, 0xD50));
  const ForwardContext ctx{Mode::train, &dropout_rng};
  res.tau_initial = bundle.tau();
  res.steps_csv = "step,l_ctc,l_bc,l_ec,l_total,tau,lr_primary,lr_aux\n";
  res.epochs_csv = "epoch,l_ctc,l_bc,l_ec,l_total,tau,lr_primary,lr_aux,val_cer,val_wer\n";
  const std::size_t nb = (feasible.size() + cfg.batch_size - 1) / cfg.batch_size;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto batches = make_batches(feasible, channels, vocab, bopt, epoch);
    EpochRow row;
    row.epoch = epoch + 1;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const Batch& batch = batches[bi];
      // Rate for the step that completes fraction (bi+1)/nb of this epoch.
      const double frac_epoch = static_cast<double>(epoch) + static_cast<double>(bi + 1) / static_cast<double>(nb);
      const double lr_p = lr_at(frac_epoch, LrGroup::primary, cfg);
      const double lr_a = lr_at(frac_epoch, LrGroup::aux, cfg);
      TotalLoss<T> total;
      try {
        auto out = bundle.sensor().forward(batch.template signal_tensor<T>(), batch.lengths, ctx);
        const Tensor<T> ctc =
            mean_all(ctc_loss_batch(log_softmax(out.logits, 2), batch.labels, out.out_lengths, cfg.ctc_smoothing));
        std::optional<ContrastiveResult<T>> bc;
        std::optional<Tensor<T>> ec;
        if (bundle.has_aux()) {
          const auto aligned = align_batch(bundle.pool(), bundle.text(), out.features, out.out_lengths, batch.labels,
                                           cfg.objectives.ec ? batch.negatives : std::vector<std::vector<LabelSeq>>{}, ctx);
          const Tensor<T> tau = bundle.temperature().value();
          if (cfg.objectives.bc) bc = bc_loss(aligned.c_sig, aligned.z_pos(), tau, batch.labels);
          if (cfg.objectives.ec) ec = ec_loss(aligned.c_sig, aligned.z_pos(), aligned.z_neg(), tau);
        }
        total = total_loss(ctc, bc, ec, cfg.objectives);
      } catch (const NumericError& e) {
        res.all_finite = false;
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch + 1) + ", step " +
                           std::to_string(res.steps + 1) + ": " + e.what());
      }
      bundle.store().zero_grad();
      backward(total.loss);
      clip_grad_norm(bundle.store(), cfg.grad_clip);
      opt.step(lr_p, lr_a);
      ++res.steps;

      const LossReport& rep = total.report;
      const double tau_now = bundle.tau();
      res.step_reports.push_back(rep);
      res.steps_csv += std::to_string(res.steps) + "," + detail::fmt_real(rep.l_ctc) + "," + detail::fmt_real(rep.l_bc) +
                       "," + detail::fmt_real(rep.l_ec) + "," + detail::fmt_real(rep.l_total) + "," +
                       detail::fmt_real(tau_now) + "," + detail::fmt_real(lr_p) + "," + detail::fmt_real(lr_a) + "\n";
      const double w = static_cast<double>(batch.size()) / static_cast<double>(feasible.size());
      row.mean.l_ctc += w * rep.l_ctc;
      row.mean.l_bc += w * rep.l_bc;
      row.mean.l_ec += w * rep.l_ec;
      row.mean.l_total += w * rep.l_total;
      row.lr_primary = lr_p;
      row.lr_aux = lr_a;
    }
    row.tau = bundle.tau();
    const EvalResult ev = evaluate<T>(bundle, select_records, channels, cfg.batch_size);
    row.val_cer = ev.rates.cer;
    row.val_wer = ev.rates.wer;
    res.epochs.push_back(row);
    res.epochs_csv += std::to_string(row.epoch) + "," + detail::fmt_real(row.mean.l_ctc) + "," +
                      detail::fmt_real(row.mean.l_bc) + "," + detail::fmt_real(row.mean.l_ec) + "," +
                      detail::fmt_real(row.mean.l_total) + "," + detail::fmt_real(row.tau) + "," +
                      detail::fmt_real(row.lr_primary) + "," + detail::fmt_real(row.lr_aux) + "," +
                      detail::fmt_real(row.val_cer) + "," + detail::fmt_real(row.val_wer) + "\n";
    spdlog::info("epoch {}/{}: loss {:.4f} (ctc {:.4f} bc {:.4f} ec {:.4f}) tau {:.3f} val CER {:.4f} WER {:.4f}",
                 row.epoch, cfg.epochs, row.mean.l_total, row.mean.l_ctc, row.mean.l_bc, row.mean.l_ec, row.tau,
                 row.val_cer, row.val_wer);
    // Strict improvement only, so ties keep the earlier epoch.
    if (detail::better(row.val_cer, row.val_wer, res.best_cer, res.best_wer)) {
      res.best_cer = row.val_cer;
      res.best_wer = row.val_wer;
      res.best_epoch = row.epoch;
      res.best_checkpoint = bundle.checkpoint_bytes();
    }
  }

  res.tau_final = bundle.tau();
  res.last_checkpoint = bundle.checkpoint_bytes();
  res.final_train = evaluate<T>(bundle, feasible, channels, cfg.batch_size).rates;
  res.exported = ModelBundle<T>::from_checkpoint_bytes(res.best_checkpoint)->inference_bytes();

  if (!outputs.out_dir.empty()) {
    namespace fs = std::filesystem;
    fs::create_directories(outputs.out_dir);
    const fs::path dir(outputs.out_dir);
    io::write_file((dir / outputs.checkpoint_name).string(), res.best_checkpoint);
    io::write_file((dir / outputs.last_checkpoint_name).string(), res.last_checkpoint);
    io::write_file((dir / outputs.export_name).string(), res.exported);
    io::write_file((dir / outputs.steps_csv).string(), res.steps_csv);
    io::write_file((dir / outputs.epochs_csv).string(), res.epochs_csv);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Ablation sweep

struct SweepDelta {
  std::string variant;
  NormKind norm_kind = NormKind::layer;
  bool gated = false;
  std::size_t num_registers = 0;
  ObjectiveFlags objectives;
  std::size_t error_sets = 2;

  TrainConfig apply(TrainConfig base) const {
    base.norm_kind = norm_kind;
    base.gated = gated;
    base.num_registers = num_registers;
    base.objectives = objectives;
    base.error_sets = error_sets;
    return base;
  }
};

inline std::string variant_name(NormKind n, bool gated, std::size_t registers) {
  std::string s = n == NormKind::layer ? "LN" : "RMS";
  if (gated) s += "+GA";
  if (registers > 0) s += "+Reg";
  return s;
}

/// Two norms x {plain, GA, GA+Reg} x {BC, BC+EC}: 12 rows.
inline std::vector<SweepDelta> table2_grid(std::size_t registers = 4, std::size_t error_sets = 2) {
  std::vector<SweepDelta> grid;
  for (NormKind n : {NormKind::layer, NormKind::rms})
    for (int arch = 0; arch < 3; ++arch)
      for (bool with_ec : {false, true}) {
        SweepDelta d;
        d.norm_kind = n;
        d.gated = arch >= 1;
        d.num_registers = arch == 2 ? registers : 0;
        d.objectives = ObjectiveFlags{true, true, with_ec};
        d.error_sets = error_sets;
        d.variant = variant_name(n, d.gated, d.num_registers);
        grid.push_back(d);
      }
  return grid;
}

/// Error-set sweep S in {1, ..., max_sets} for one architecture with all objectives.
inline std::vector<SweepDelta> error_set_grid(NormKind n, bool gated, std::size_t registers, std::size_t max_sets = 3) {
  std::vector<SweepDelta> grid;
  for (std::size_t s = 1; s <= max_sets; ++s) {
    SweepDelta d;
    d.norm_kind = n;
    d.gated = gated;
    d.num_registers = registers;
    d.objectives = ObjectiveFlags{true, true, true};
    d.error_sets = s;
    d.variant = variant_name(n, gated, registers);
    grid.push_back(d);
  }
  return grid;
}

struct SweepRow {
  SweepDelta delta;
  double cer = 0.0;
  double wer = 0.0;
};

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "variant,norm,GA,Reg,objectives,S,CER,WER\n";
  for (const auto& r : rows) {
    const auto& d = r.delta;
    out += d.variant + "," + to_string(d.norm_kind) + "," + (d.gated ? "1" : "0") + "," +
           std::to_string(d.num_registers) + "," + d.objectives.to_string() + "," +
           (d.objectives.ec ? std::to_string(d.error_sets) : std::string("0")) + "," + detail::fmt_real(r.cer) + "," +
           detail::fmt_real(r.wer) + "\n";
  }
  return out;
}

/// Trains every delta on the same split and reports validation CER/WER of the best checkpoint.
template <typename T>
std::vector<SweepRow> ablation_sweep(const std::vector<SampleRecord>& train_records,
                                     const std::vector<SampleRecord>& val_records, std::size_t channels,
                                     const TrainConfig& base, const std::vector<SweepDelta>& grid) {
  for (const auto& d : grid) d.apply(base).validate();
  std::vector<SweepRow> rows;
  for (const auto& d : grid) {
    spdlog::info("sweep: {} {} S={}", d.variant, d.objectives.to_string(), d.error_sets);
    const TrainResult r = train<T>(train_records, val_records, channels, d.apply(base));
    rows.push_back({d, r.best_cer, r.best_wer});
  }
  return rows;
}

}  // namespace echwr
