#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "filigrain/encoder.hpp"
#include "filigrain/error.hpp"
#include "filigrain/late_interaction.hpp"
#include "filigrain/optim.hpp"
#include "filigrain/synth_data.hpp"

namespace filigrain {

// ---------------------------------------------------------------------------
// Line-oriented "key = value" training config with '#' comments. Unknown
// keys are hard errors; serialization is canonical, so parse-serialize-parse
// is a fixed point.
// ---------------------------------------------------------------------------

enum class TrainMode { filip, global_baseline };

struct TrainConfig {
  TrainMode mode = TrainMode::filip;
  std::uint64_t seed = 0;

  // encoders
  int image_size = 32;
  int patch_size = 8;
  int image_layers = 2;
  int image_width = 64;
  int image_heads = 4;
  int text_max_len = 16;
  int text_layers = 2;
  int text_width = 64;
  int text_heads = 4;
  int embed_dim = 32;

  // objective
  double tau_init = 0.07;
  double tau_floor = 0.01;

  // late interaction / efficiency
  bool include_special_tokens = false;
  double selection_ratio = 1.0;
  bool comm_half = false;  // comm_precision = full | half
  int shard_size = 1;

  // optimizer & schedule (paper-scale reference: base_lr 6e-3 at batch
  // 8192, warmup 3000, 30 epochs; desk defaults below run in minutes)
  double base_lr = 3.2e-2;
  double weight_decay = 1e-2;
  double lamb_beta1 = 0.9;
  double lamb_beta2 = 0.999;
  double lamb_eps = 1e-4;
  int warmup_iters = 100;
  int epochs = 8;
  int batch_size = 8;

  // data
  int data_size = 2000;
  std::vector<std::pair<std::string, std::string>> holdout = {
      {"red", "triangle"}, {"blue", "square"}};
  int objects_min = 1;
  int objects_max = 2;
  bool augment = true;
  int vocab_min_count = 1;

  // io
  int checkpoint_every = 0;  // 0 = only at the end

  int steps_per_epoch() const {
    return (data_size + batch_size - 1) / batch_size;
  }
  int total_iters() const { return epochs * steps_per_epoch(); }

  ImageEncoderConfig image_config() const {
    ImageEncoderConfig cfg;
    cfg.image_size = image_size;
    cfg.patch_size = patch_size;
    cfg.layers = image_layers;
    cfg.width = image_width;
    cfg.heads = image_heads;
    cfg.embed_dim = embed_dim;
    return cfg;
  }

  TextEncoderConfig text_config(int vocab_size) const {
    TextEncoderConfig cfg;
    cfg.max_len = text_max_len;
    cfg.vocab_size = vocab_size;
    cfg.layers = text_layers;
    cfg.width = text_width;
    cfg.heads = text_heads;
    cfg.embed_dim = embed_dim;
    return cfg;
  }

  InteractionConfig interaction_config() const {
    InteractionConfig cfg;
    cfg.selection_ratio = selection_ratio;
    cfg.half_precision = comm_half;
    cfg.shard_size = shard_size;
    cfg.include_special = include_special_tokens;
    return cfg;
  }

  ScheduleConfig schedule_config() const {
    ScheduleConfig cfg;
    cfg.base_lr = base_lr;
    cfg.total_batch_size = batch_size;
    cfg.warmup_iters = warmup_iters;
    cfg.total_iters = total_iters();
    return cfg;
  }

  SynthConfig synth_config(bool test_split) const {
    SynthConfig cfg;
    cfg.image_size = image_size;
    cfg.cell_size = patch_size;
    cfg.objects_min = objects_min;
    cfg.objects_max = objects_max;
    cfg.holdout = holdout;
    cfg.test_split = test_split;
    return cfg;
  }

  void validate() const {
    check(batch_size > 0 && epochs > 0 && data_size > 0, Error::Kind::config,
          "config: batch_size, epochs and data_size must be positive");
    check(selection_ratio > 0.0 && selection_ratio <= 1.0, Error::Kind::config,
          "config: selection_ratio must be in (0, 1]");
    check(tau_floor > 0.0 && tau_init >= tau_floor, Error::Kind::config,
          "config: need tau_init >= tau_floor > 0");
    check(warmup_iters < total_iters(), Error::Kind::config,
          "config: warmup_iters must be below total iterations");
    image_config().validate();
  }
};

namespace detail {

inline std::string format_double(double v) {
  char buf[40];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  check(ec == std::errc{}, Error::Kind::config, "config: cannot format value");
  return std::string(buf, ptr);
}

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::string format_holdout(
    const std::vector<std::pair<std::string, std::string>>& holdout) {
  std::string out;
  for (std::size_t i = 0; i < holdout.size(); ++i) {
    if (i > 0) out += ",";
    out += holdout[i].first + ":" + holdout[i].second;
  }
  return out;
}

inline std::vector<std::pair<std::string, std::string>> parse_holdout(
    const std::string& value) {
  std::vector<std::pair<std::string, std::string>> out;
  if (trim(value).empty()) return out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    check(colon != std::string::npos, Error::Kind::config,
          "config: holdout entries are color:shape");
    out.emplace_back(trim(item.substr(0, colon)), trim(item.substr(colon + 1)));
  }
  return out;
}

}  // namespace detail

inline std::string serialize_config(const TrainConfig& c) {
  std::ostringstream out;
  out << "mode = " << (c.mode == TrainMode::filip ? "filip" : "global-baseline") << '\n';
  out << "seed = " << c.seed << '\n';
  out << "image_size = " << c.image_size << '\n';
  out << "patch_size = " << c.patch_size << '\n';
  out << "image_layers = " << c.image_layers << '\n';
  out << "image_width = " << c.image_width << '\n';
  out << "image_heads = " << c.image_heads << '\n';
  out << "text_max_len = " << c.text_max_len << '\n';
  out << "text_layers = " << c.text_layers << '\n';
  out << "text_width = " << c.text_width << '\n';
  out << "text_heads = " << c.text_heads << '\n';
  out << "embed_dim = " << c.embed_dim << '\n';
  out << "tau_init = " << detail::format_double(c.tau_init) << '\n';
  out << "tau_floor = " << detail::format_double(c.tau_floor) << '\n';
  out << "include_special_tokens = " << (c.include_special_tokens ? "true" : "false") << '\n';
  out << "selection_ratio = " << detail::format_double(c.selection_ratio) << '\n';
  out << "comm_precision = " << (c.comm_half ? "half" : "full") << '\n';
  out << "shard_size = " << c.shard_size << '\n';
  out << "base_lr = " << detail::format_double(c.base_lr) << '\n';
  out << "weight_decay = " << detail::format_double(c.weight_decay) << '\n';
  out << "lamb_beta1 = " << detail::format_double(c.lamb_beta1) << '\n';
  out << "lamb_beta2 = " << detail::format_double(c.lamb_beta2) << '\n';
  out << "lamb_eps = " << detail::format_double(c.lamb_eps) << '\n';
  out << "warmup_iters = " << c.warmup_iters << '\n';
  out << "epochs = " << c.epochs << '\n';
  out << "batch_size = " << c.batch_size << '\n';
  out << "data_size = " << c.data_size << '\n';
  out << "holdout = " << detail::format_holdout(c.holdout) << '\n';
  out << "objects_min = " << c.objects_min << '\n';
  out << "objects_max = " << c.objects_max << '\n';
  out << "augment = " << (c.augment ? "true" : "false") << '\n';
  out << "vocab_min_count = " << c.vocab_min_count << '\n';
  out << "checkpoint_every = " << c.checkpoint_every << '\n';
  return out.str();
}

inline TrainConfig parse_config(const std::string& text) {
  TrainConfig c;
  std::unordered_set<std::string> seen;
  std::stringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    check(eq != std::string::npos, Error::Kind::config,
          "config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    check(!seen.count(key), Error::Kind::config,
          "config line " + std::to_string(line_no) + ": duplicate key " + key);
    seen.insert(key);

    auto as_int = [&]() {
      try {
        return std::stoi(value);
      } catch (const std::exception&) {
        throw Error(Error::Kind::config, "config: bad integer for " + key);
      }
    };
    auto as_double = [&]() {
      try {
        return std::stod(value);
      } catch (const std::exception&) {
        throw Error(Error::Kind::config, "config: bad number for " + key);
      }
    };
    auto as_bool = [&]() {
      if (value == "true") return true;
      if (value == "false") return false;
      throw Error(Error::Kind::config, "config: bad boolean for " + key);
    };

    if (key == "mode") {
      if (value == "filip")
        c.mode = TrainMode::filip;
      else if (value == "global-baseline")
        c.mode = TrainMode::global_baseline;
      else
        throw Error(Error::Kind::config, "config: unknown mode " + value);
    } else if (key == "seed") {
      c.seed = std::stoull(value);
    } else if (key == "image_size") {
      c.image_size = as_int();
    } else if (key == "patch_size") {
      c.patch_size = as_int();
    } else if (key == "image_layers") {
      c.image_layers = as_int();
    } else if (key == "image_width") {
      c.image_width = as_int();
    } else if (key == "image_heads") {
      c.image_heads = as_int();
    } else if (key == "text_max_len") {
      c.text_max_len = as_int();
    } else if (key == "text_layers") {
      c.text_layers = as_int();
    } else if (key == "text_width") {
      c.text_width = as_int();
    } else if (key == "text_heads") {
      c.text_heads = as_int();
    } else if (key == "embed_dim") {
      c.embed_dim = as_int();
    } else if (key == "tau_init") {
      c.tau_init = as_double();
    } else if (key == "tau_floor") {
      c.tau_floor = as_double();
    } else if (key == "include_special_tokens") {
      c.include_special_tokens = as_bool();
    } else if (key == "selection_ratio") {
      c.selection_ratio = as_double();
    } else if (key == "comm_precision") {
      if (value == "full")
        c.comm_half = false;
      else if (value == "half")
        c.comm_half = true;
      else
        throw Error(Error::Kind::config, "config: comm_precision is full or half");
    } else if (key == "shard_size") {
      c.shard_size = as_int();
    } else if (key == "base_lr") {
      c.base_lr = as_double();
    } else if (key == "weight_decay") {
      c.weight_decay = as_double();
    } else if (key == "lamb_beta1") {
      c.lamb_beta1 = as_double();
    } else if (key == "lamb_beta2") {
      c.lamb_beta2 = as_double();
    } else if (key == "lamb_eps") {
      c.lamb_eps = as_double();
    } else if (key == "warmup_iters") {
      c.warmup_iters = as_int();
    } else if (key == "epochs") {
      c.epochs = as_int();
    } else if (key == "batch_size") {
      c.batch_size = as_int();
    } else if (key == "data_size") {
      c.data_size = as_int();
    } else if (key == "holdout") {
      c.holdout = detail::parse_holdout(value);
    } else if (key == "objects_min") {
      c.objects_min = as_int();
    } else if (key == "objects_max") {
      c.objects_max = as_int();
    } else if (key == "augment") {
      c.augment = as_bool();
    } else if (key == "vocab_min_count") {
      c.vocab_min_count = as_int();
    } else if (key == "checkpoint_every") {
      c.checkpoint_every = as_int();
    } else {
      throw Error(Error::Kind::config, "config: unknown key " + key);
    }
  }
  return c;
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), Error::Kind::io, "config: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

}  // namespace filigrain
