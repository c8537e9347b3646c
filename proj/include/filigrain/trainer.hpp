#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "filigrain/checkpoint.hpp"
#include "filigrain/config.hpp"
#include "filigrain/encoder.hpp"
#include "filigrain/error.hpp"
#include "filigrain/eval.hpp"
#include "filigrain/image_io.hpp"
#include "filigrain/late_interaction.hpp"
#include "filigrain/objective.hpp"
#include "filigrain/optim.hpp"
#include "filigrain/prompt.hpp"
#include "filigrain/rng.hpp"
#include "filigrain/synth_data.hpp"
#include "filigrain/tokenizer.hpp"

namespace filigrain {

// ---------------------------------------------------------------------------
// Training driver: data sampling, per-sample forward/backward on private
// tapes, batch-level loss, deterministic gradient reduction in ascending
// sample order, LAMB updates. Results are bit-identical for any worker
// count because each sample's tape is self-contained and the reduction
// order is fixed.
// ---------------------------------------------------------------------------

inline int worker_count(int batch_size) {
  int n = static_cast<int>(std::thread::hardware_concurrency());
  if (const char* env = std::getenv("FILIGRAIN_THREADS")) {
    const int cap = std::atoi(env);
    if (cap > 0) n = cap;
  }
  return std::max(1, std::min(n, batch_size));
}

// Index-parallel loop with a fixed work assignment (worker w takes indices
// w, w+threads, ...). Worker count never changes the result, only the wall
// time.
template <typename Fn>
void parallel_for(int n, int threads, Fn&& fn) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads));
  for (int w = 0; w < threads; ++w) {
    pool.emplace_back([&, w]() {
      for (int i = w; i < n; i += threads) fn(i);
    });
  }
  for (std::thread& t : pool) t.join();
}

struct Model {
  TrainConfig config;
  Vocabulary vocab;
  ParamStore params;  // encoder weights + "temperature"

  Temperature temperature() const {
    Temperature t;
    t.value = params.at("temperature");
    t.floor = config.tau_floor;
    return t;
  }
};

inline Model build_model(const TrainConfig& cfg, const Vocabulary& vocab) {
  cfg.validate();
  Model model;
  model.config = cfg;
  model.vocab = vocab;
  Rng rng(mix_seed(cfg.seed, 0x9e1));
  init_image_params(model.params, cfg.image_config(), rng);
  init_text_params(model.params, cfg.text_config(vocab.size()), rng);
  model.params.add("temperature", Tensor::scalar(cfg.tau_init));
  return model;
}

inline Vocabulary vocab_from_dataset(
    const std::vector<std::pair<SyntheticScene, CaptionSet>>& data,
    int min_count) {
  std::vector<std::string> corpus;
  for (const auto& [scene, captions] : data)
    for (const std::string& c : captions.captions) corpus.push_back(c);
  return Vocabulary::build(corpus, min_count);
}

inline void save_model(const Model& model, const std::string& path) {
  std::vector<std::pair<std::string, Tensor>> tensors;
  for (std::size_t p = 0; p < model.params.size(); ++p)
    tensors.push_back(model.params.item(p));
  write_tensor_file(path, serialize_config(model.config), tensors);
  model.vocab.save(path + ".vocab");
}

inline Model load_model(const std::string& path) {
  TensorFile file = read_tensor_file(path);
  Model model;
  model.config = parse_config(file.config);
  model.vocab = Vocabulary::load(path + ".vocab");
  for (auto& [name, tensor] : file.tensors) model.params.add(name, tensor);
  check(model.params.has("temperature"), Error::Kind::io,
        "load_model: checkpoint lacks a temperature record");
  return model;
}

// --- feature extraction -----------------------------------------------------

inline EncodedFeatures encode_image_features(const Model& model,
                                             const Tensor& image) {
  Tape tape(false);
  return encode_image(tape, image, model.config.image_config(), model.params);
}

inline EncodedFeatures encode_text_features(const Model& model,
                                            const std::string& text) {
  Tape tape(false);
  TokenSequence seq =
      encode(text, model.vocab, model.config.text_max_len);
  return encode_text(tape, seq,
                     model.config.text_config(model.vocab.size()), model.params);
}

// --- training ---------------------------------------------------------------

struct TrainResult {
  int steps_completed = 0;
  double first_loss = 0.0;
  double final_loss = 0.0;
  bool aborted_nan = false;
  std::string log;  // TSV: step, lr, loss, tau
};

namespace detail {

struct SampleWork {
  Tape tape;
  EncodedFeatures img;
  EncodedFeatures txt;
  SampleWork() : tape(true) {}
};

}  // namespace detail

// Runs the full training loop over an in-memory dataset. `max_steps`
// truncates the schedule-defined run when positive (the schedule itself is
// unchanged). Checkpoints land in out_dir when non-empty.
inline TrainResult run_training(
    Model& model, const std::vector<std::pair<SyntheticScene, CaptionSet>>& data,
    const std::string& out_dir = "", int max_steps = -1) {
  const TrainConfig& cfg = model.config;
  cfg.validate();
  check(!data.empty(), Error::Kind::config, "run_training: empty dataset");

  const int b = cfg.batch_size;
  const int steps_per_epoch = cfg.steps_per_epoch();
  const int total = cfg.total_iters();
  const int run_steps = max_steps > 0 ? std::min(max_steps, total) : total;
  const int threads = worker_count(b);

  const ImageEncoderConfig icfg = cfg.image_config();
  const TextEncoderConfig tcfg = cfg.text_config(model.vocab.size());
  const InteractionConfig inter = cfg.interaction_config();
  const ScheduleConfig sched = cfg.schedule_config();

  LambConfig lamb_cfg;
  lamb_cfg.beta1 = cfg.lamb_beta1;
  lamb_cfg.beta2 = cfg.lamb_beta2;
  lamb_cfg.eps = cfg.lamb_eps;
  lamb_cfg.temperature_floor = cfg.tau_floor;
  DecayPolicy policy;
  policy.weight_decay = cfg.weight_decay;
  LambOptimizer optimizer(lamb_cfg, policy);

  Temperature tau = model.temperature();
  const TargetDistribution targets = one_hot_targets(b);

  std::vector<int> perm(data.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);

  // Last-good parameter snapshot for the NaN abort path.
  std::vector<std::vector<double>> snapshot;
  auto take_snapshot = [&]() {
    snapshot.clear();
    for (std::size_t p = 0; p < model.params.size(); ++p) {
      auto v = model.params.item(p).second.values();
      snapshot.emplace_back(v.begin(), v.end());
    }
  };
  auto restore_snapshot = [&]() {
    for (std::size_t p = 0; p < model.params.size(); ++p) {
      auto v = model.params.item(p).second.mutable_values();
      std::copy(snapshot[p].begin(), snapshot[p].end(), v.begin());
    }
  };

  std::ostringstream log;
  log << "step\tlr\tloss\ttau\n";
  TrainResult result;

  const std::string ckpt_path =
      out_dir.empty() ? "" : out_dir + "/checkpoint.bin";

  for (int step = 0; step < run_steps; ++step) {
    const int epoch = step / steps_per_epoch;
    const int slot0 = (step % steps_per_epoch) * b;
    // Per-epoch shuffle; batches read consecutive slices, wrapping at the end.
    if (step % steps_per_epoch == 0) {
      Rng shuffle_rng(mix_seed(cfg.seed, 0x5u, static_cast<std::uint64_t>(epoch)));
      for (std::size_t i = perm.size(); i > 1; --i) {
        const std::size_t j = shuffle_rng.uniform_index(i);
        std::swap(perm[i - 1], perm[j]);
      }
    }

    // Phase A: per-sample forward passes on private tapes.
    std::vector<detail::SampleWork> work(static_cast<std::size_t>(b));
    parallel_for(b, threads, [&](int slot) {
      const int idx = perm[static_cast<std::size_t>(slot0 + slot) % perm.size()];
      const auto& [scene, captions] = data[static_cast<std::size_t>(idx)];
      const std::uint64_t sample_seed =
          mix_seed(cfg.seed, static_cast<std::uint64_t>(step),
                   static_cast<std::uint64_t>(slot));
      detail::SampleWork& w = work[static_cast<std::size_t>(slot)];
      const SyntheticScene* view = &scene;
      SyntheticScene augmented;
      if (cfg.augment) {
        augmented = augment_image(scene, mix_seed(sample_seed, 1));
        view = &augmented;
      }
      const std::string& caption =
          sample_caption(captions, mix_seed(sample_seed, 2));
      TokenSequence seq = encode(caption, model.vocab, cfg.text_max_len);
      w.img = encode_image(w.tape, view->image, icfg, model.params);
      w.txt = encode_text(w.tape, seq, tcfg, model.params);
    });

    // Phase B: batch graph (similarities + loss) on its own tape.
    Tape batch_tape(true);
    std::vector<EncodedFeatures> imgs, txts;
    imgs.reserve(static_cast<std::size_t>(b));
    txts.reserve(static_cast<std::size_t>(b));
    for (const detail::SampleWork& w : work) {
      imgs.push_back(w.img);
      txts.push_back(w.txt);
    }
    SimilarityPair pair;
    if (cfg.mode == TrainMode::filip) {
      pair = batch_similarity(batch_tape, imgs, txts, inter);
    } else {
      Tensor g = batch_global_similarity(batch_tape, imgs, txts);
      pair.image_to_text = g;
      pair.text_to_image = g;
    }
    Tensor loss = total_loss(batch_tape, pair, tau, targets, targets);
    const double loss_value = loss.scalar_value();
    const double lr = lr_at(step, sched);

    log << step << '\t' << detail::format_double(lr) << '\t'
        << detail::format_double(loss_value) << '\t'
        << detail::format_double(tau.value.values()[0]) << '\n';
    if (step == 0) result.first_loss = loss_value;
    result.final_loss = loss_value;

    if (!std::isfinite(loss_value)) {
      // Abort: put the last good parameters back and checkpoint them.
      result.aborted_nan = true;
      if (!snapshot.empty()) restore_snapshot();
      if (!ckpt_path.empty()) save_model(model, ckpt_path);
      result.log = log.str();
      result.steps_completed = step;
      return result;
    }
    take_snapshot();

    const double seed_one = 1.0;
    batch_tape.seed_grad(loss, std::span<const double>(&seed_one, 1));
    batch_tape.backward_seeded();

    // Phase C: per-sample backward, seeded with the batch-level feature
    // gradients. Tapes are independent, so this parallelizes safely.
    parallel_for(b, threads, [&](int slot) {
      detail::SampleWork& w = work[static_cast<std::size_t>(slot)];
      const std::vector<double>* gi = batch_tape.grad_of(w.img.tokens);
      const std::vector<double>* gt = batch_tape.grad_of(w.txt.tokens);
      if (gi) w.tape.seed_grad(w.img.tokens, *gi);
      if (gt) w.tape.seed_grad(w.txt.tokens, *gt);
      w.tape.backward_seeded();
    });

    // Phase D: deterministic reduction (batch tape, then samples ascending),
    // then the optimizer step.
    model.params.zero_grads();
    batch_tape.flush_leaf_grads();
    for (detail::SampleWork& w : work) w.tape.flush_leaf_grads();
    optimizer.step(model.params, lr);

    result.steps_completed = step + 1;
    if (!ckpt_path.empty() && cfg.checkpoint_every > 0 &&
        (step + 1) % cfg.checkpoint_every == 0)
      save_model(model, ckpt_path);
  }

  if (!ckpt_path.empty()) save_model(model, ckpt_path);
  result.log = log.str();
  return result;
}

// --- evaluation wrappers -----------------------------------------------------

// Batched feature extraction for a dataset (images and canonical captions).
struct DatasetFeatures {
  std::vector<EncodedFeatures> images;
  std::vector<EncodedFeatures> texts;
};

inline DatasetFeatures encode_dataset(const Model& model,
                                      const std::vector<DatasetRecord>& records) {
  DatasetFeatures out;
  out.images.resize(records.size());
  out.texts.resize(records.size());
  const int threads = worker_count(static_cast<int>(records.size()));
  const ImageEncoderConfig icfg = model.config.image_config();
  const TextEncoderConfig tcfg = model.config.text_config(model.vocab.size());
  parallel_for(static_cast<int>(records.size()), threads, [&](int i) {
    Tape tape(false);
    const DatasetRecord& rec = records[static_cast<std::size_t>(i)];
    out.images[static_cast<std::size_t>(i)] =
        encode_image(tape, rec.image, icfg, model.params);
    TokenSequence seq =
        encode(rec.captions.captions[0], model.vocab, model.config.text_max_len);
    out.texts[static_cast<std::size_t>(i)] =
        encode_text(tape, seq, tcfg, model.params);
  });
  return out;
}

inline RetrievalReport eval_retrieval(const Model& model,
                                      const std::vector<DatasetRecord>& records,
                                      RetrievalDirection direction,
                                      RankScore rank_score = RankScore::directional) {
  DatasetFeatures feats = encode_dataset(model, records);
  // Scenes can repeat a caption verbatim (same objects, different layout);
  // any gallery item with the query's caption counts as a hit.
  std::vector<std::vector<int>> ground_truth(records.size());
  for (std::size_t i = 0; i < records.size(); ++i)
    for (std::size_t j = 0; j < records.size(); ++j)
      if (records[j].captions.captions[0] == records[i].captions.captions[0])
        ground_truth[i].push_back(static_cast<int>(j));
  return retrieval_eval(feats.images, feats.texts, ground_truth, direction,
                        model.config.include_special_tokens, rank_score);
}

struct ZeroShotReport {
  double accuracy = 0.0;
  int correct = 0;
  int total = 0;
};

inline std::string object_label(const DatasetRecord& rec) {
  check(!rec.objects.empty(), Error::Kind::config,
        "object_label: record without objects");
  return rec.objects[0].color + " " + rec.objects[0].shape;
}

// Zero-shot classification of single-object records against every label in
// the record set, with prompt-grid ensembling.
inline ZeroShotReport eval_zeroshot(const Model& model,
                                    const std::vector<DatasetRecord>& records,
                                    const PromptGrid& grid) {
  std::vector<std::string> labels;
  for (const DatasetRecord& rec : records) {
    const std::string lab = object_label(rec);
    if (std::find(labels.begin(), labels.end(), lab) == labels.end())
      labels.push_back(lab);
  }
  std::sort(labels.begin(), labels.end());

  std::vector<ZeroShotClass> classes;
  for (const std::string& lab : labels) {
    ZeroShotClass cls;
    cls.label = lab;
    for (const std::string& text : expand_grid(grid, lab)) {
      // Casing is normalized at the tokenizer boundary (lowercasing).
      cls.templates.push_back(encode_text_features(model, text));
    }
    classes.push_back(std::move(cls));
  }

  ZeroShotReport report;
  report.total = static_cast<int>(records.size());
  std::vector<int> correct_flags(records.size(), 0);
  const int threads = worker_count(static_cast<int>(records.size()));
  parallel_for(static_cast<int>(records.size()), threads, [&](int i) {
    const DatasetRecord& rec = records[static_cast<std::size_t>(i)];
    EncodedFeatures img = encode_image_features(model, rec.image);
    ZeroShotResult res = zero_shot_classify(
        img, classes, model.config.include_special_tokens);
    correct_flags[static_cast<std::size_t>(i)] =
        res.label == object_label(rec) ? 1 : 0;
  });
  for (int f : correct_flags) report.correct += f;
  report.accuracy =
      static_cast<double>(report.correct) / static_cast<double>(report.total);
  return report;
}

// Word-patch alignment over single-object records using a prompt template;
// the label span covers the object's "<color> <shape>" tokens.
struct AlignmentEvalResult {
  double hit_rate = 0.0;
  double chance_level = 0.0;  // |span| / valid_len, averaged over records
  std::vector<AlignmentMap> maps;
};

inline AlignmentEvalResult eval_alignment(const Model& model,
                                          const std::vector<DatasetRecord>& records,
                                          const std::string& prompt_prefix = "a photo of a") {
  AlignmentEvalResult out;
  out.maps.resize(records.size());
  std::vector<std::vector<std::uint8_t>> masks(records.size());
  std::vector<double> chances(records.size(), 0.0);
  const int threads = worker_count(static_cast<int>(records.size()));
  parallel_for(static_cast<int>(records.size()), threads, [&](int i) {
    const DatasetRecord& rec = records[static_cast<std::size_t>(i)];
    const std::string label = object_label(rec);
    const std::string prompt = render(PromptTemplate{prompt_prefix, "", ""}, label);
    const std::vector<int> span = token_spans(prompt, label);
    EncodedFeatures img = encode_image_features(model, rec.image);
    EncodedFeatures txt = encode_text_features(model, prompt);
    out.maps[static_cast<std::size_t>(i)] = alignment_export(
        img, txt, span, model.config.include_special_tokens);
    masks[static_cast<std::size_t>(i)] = rec.object_masks.at(0);
    chances[static_cast<std::size_t>(i)] =
        static_cast<double>(span.size()) / txt.valid_count();
  });
  out.hit_rate = alignment_hit_rate(out.maps, masks);
  double acc = 0.0;
  for (double c : chances) acc += c;
  out.chance_level = acc / static_cast<double>(chances.size());
  return out;
}

// --- dataset artifacts for train/eval runs ------------------------------------

// Held-out retrieval split: two-object scenes (when the config allows)
// probe attribute binding much more sharply than single-object ones, whose
// captions collide across scenes.
inline SynthConfig binding_test_config(const TrainConfig& cfg) {
  SynthConfig tc = cfg.synth_config(/*test_split=*/true);
  tc.objects_min = std::min(std::max(2, tc.objects_min), tc.objects_max);
  return tc;
}

// Writes the held-out evaluation sets next to the checkpoint: a binding
// test split and, when a holdout exists, a single-object split for
// alignment probes.
inline void write_eval_datasets(const TrainConfig& cfg, const std::string& out_dir,
                                int test_size = 200, bool export_ppm = false) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  if (cfg.holdout.empty()) return;
  auto test = generate_dataset(mix_seed(cfg.seed, 0x7e57), test_size,
                               binding_test_config(cfg));
  write_dataset(out_dir + "/test_manifest.tsv",
                out_dir + "/test_manifest.tsv.images.bin", test);
  SynthConfig single = cfg.synth_config(true);
  single.objects_min = 1;
  single.objects_max = 1;
  auto align = generate_dataset(mix_seed(cfg.seed, 0xa119), test_size, single);
  write_dataset(out_dir + "/align_manifest.tsv",
                out_dir + "/align_manifest.tsv.images.bin", align);
  if (export_ppm) {
    fs::create_directories(out_dir + "/ppm");
    for (std::size_t i = 0; i < test.size() && i < 32; ++i) {
      char name[64];
      std::snprintf(name, sizeof(name), "%s/ppm/test_%04zu.ppm", out_dir.c_str(), i);
      write_ppm(name, test[i].first.image);
    }
  }
}

inline std::vector<DatasetRecord> load_manifest(const std::string& manifest_path) {
  return load_dataset(manifest_path, manifest_path + ".images.bin");
}

}  // namespace filigrain
