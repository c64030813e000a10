// Train a small recognizer on synthetic pen signals, export the inference
// model, and decode a few validation samples with it.
//
//   ./quickstart [epochs]

#include <cstdio>
#include <cstdlib>

#include "echwr/echwr.hpp"

int main(int argc, char** argv) {
  using namespace echwr;
  const std::size_t epochs = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 40;

  SynthConfig sc;
  sc.words = {"pen", "ink", "note", "word", "line"};
  sc.writers = 3;
  sc.samples = 150;
  sc.seed = 11;
  const Dataset ds = synth_generate(sc);
  const Split split = make_split(ds.records, {SplitKind::writer_independent, 0.34, 3});

  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.warmup_epochs = epochs / 10;
  cfg.batch_size = 16;
  cfg.objectives = ObjectiveFlags::parse("ctc,bc,ec");
  cfg.aux_dim = 64;
  cfg.aux_heads = 4;
  cfg.ffn_hidden = 128;
  const TrainResult r = train<float>(split.train, split.val, ds.channels, cfg);
  std::printf("best epoch %zu: val CER %.4f WER %.4f, tau %.3f -> %.3f\n", r.best_epoch, r.best_cer, r.best_wer,
              r.tau_initial, r.tau_final);

  const auto model = load_inference_model_bytes<float>(r.exported);
  const EvalResult ev = evaluate<float>(*model, split.val, ds.channels);
  for (std::size_t i = 0; i < std::min<std::size_t>(5, ev.pairs.size()); ++i)
    std::printf("  %-8s -> %s\n", ev.pairs[i].second.c_str(), ev.pairs[i].first.c_str());
  std::printf("exported model: %zu bytes (full checkpoint %zu bytes)\n", r.exported.size(), r.best_checkpoint.size());
}
