// Command-line driver: train / eval / visualize over the toy image-text
// corpus. All paths are relative to the working directory; every command
// honors --seed and FILIGRAIN_THREADS.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "filigrain/config.hpp"
#include "filigrain/error.hpp"
#include "filigrain/eval.hpp"
#include "filigrain/image_io.hpp"
#include "filigrain/prompt.hpp"
#include "filigrain/trainer.hpp"

namespace {

using namespace filigrain;

struct Args {
  std::string command;
  std::map<std::string, std::string> options;
  std::vector<std::string> flags;

  bool has_flag(const std::string& name) const {
    for (const std::string& f : flags)
      if (f == name) return true;
    return false;
  }

  std::string get(const std::string& name, const std::string& fallback = "") const {
    auto it = options.find(name);
    return it == options.end() ? fallback : it->second;
  }

  std::string require(const std::string& name) const {
    auto it = options.find(name);
    check(it != options.end(), Error::Kind::config,
          "missing required option --" + name);
    return it->second;
  }
};

Args parse_args(int argc, char** argv) {
  Args args;
  check(argc >= 2, Error::Kind::config, "no command given");
  args.command = argv[1];
  for (int i = 2; i < argc; ++i) {
    std::string a = argv[i];
    check(a.rfind("--", 0) == 0, Error::Kind::config, "unexpected argument " + a);
    a = a.substr(2);
    const bool value_follows =
        i + 1 < argc && std::string(argv[i + 1]).rfind("--", 0) != 0;
    if (value_follows) {
      args.options[a] = argv[++i];
    } else {
      args.flags.push_back(a);
    }
  }
  return args;
}

void print_usage() {
  std::cout <<
      "usage:\n"
      "  filigrain train --config FILE [--out-dir DIR] [--seed N]\n"
      "                  [--max-steps N] [--export-ppm]\n"
      "  filigrain eval --ckpt FILE --task zeroshot|retrieval --data MANIFEST\n"
      "                 [--out FILE] [--rank-score directional|mean]\n"
      "                 [--prompts GRIDFILE] [--seed N]\n"
      "  filigrain visualize --ckpt FILE --image FILE.ppm --prompt TEXT\n"
      "                      --label TEXT [--out-prefix PREFIX]\n"
      "\n"
      "FILIGRAIN_THREADS caps worker threads (results are identical for any\n"
      "worker count).\n";
}

int cmd_train(const Args& args) {
  TrainConfig cfg = load_config(args.require("config"));
  if (args.options.count("seed")) cfg.seed = std::stoull(args.get("seed"));
  cfg.validate();
  const std::string out_dir = args.get("out-dir", ".");
  std::filesystem::create_directories(out_dir);

  auto data = generate_dataset(cfg.seed, cfg.data_size,
                               cfg.synth_config(/*test_split=*/false));
  Vocabulary vocab = vocab_from_dataset(data, cfg.vocab_min_count);
  Model model = build_model(cfg, vocab);
  write_eval_datasets(cfg, out_dir, 200, args.has_flag("export-ppm"));

  int max_steps = -1;
  if (args.options.count("max-steps")) max_steps = std::stoi(args.get("max-steps"));
  TrainResult result = run_training(model, data, out_dir, max_steps);

  std::ofstream log(out_dir + "/train_log.tsv", std::ios::binary);
  log << result.log;
  log.close();

  if (result.aborted_nan) {
    std::cerr << "train: aborted on non-finite loss at step "
              << result.steps_completed
              << "; last good checkpoint written to " << out_dir
              << "/checkpoint.bin\n";
    return 1;
  }
  std::cout << "trained " << result.steps_completed << " steps, final loss "
            << result.final_loss << ", checkpoint " << out_dir
            << "/checkpoint.bin\n";
  return 0;
}

int cmd_eval(const Args& args) {
  Model model = load_model(args.require("ckpt"));
  const std::string task = args.require("task");
  auto records = load_manifest(args.require("data"));
  const std::string out_path = args.get("out", "eval_report.tsv");

  std::string report;
  if (task == "retrieval") {
    RankScore rank_score = RankScore::directional;
    const std::string rs = args.get("rank-score", "directional");
    if (rs == "mean")
      rank_score = RankScore::mean;
    else
      check(rs == "directional", Error::Kind::config,
            "eval: --rank-score is directional or mean");
    RetrievalReport i2t = eval_retrieval(model, records,
                                         RetrievalDirection::image_to_text,
                                         rank_score);
    RetrievalReport t2i = eval_retrieval(model, records,
                                         RetrievalDirection::text_to_image,
                                         rank_score);
    report = i2t.to_text("image_to_text") + t2i.to_text("text_to_image");
  } else if (task == "zeroshot") {
    PromptGrid grid{{"a photo of a"}, {""}, {""}};
    if (args.options.count("prompts")) grid = load_prompt_grid(args.get("prompts"));
    ZeroShotReport zs = eval_zeroshot(model, records, grid);
    std::ostringstream out;
    out << "zeroshot_accuracy\t" << zs.accuracy << '\n'
        << "zeroshot_correct\t" << zs.correct << '\n'
        << "zeroshot_total\t" << zs.total << '\n';
    report = out.str();
  } else {
    throw Error(Error::Kind::config, "eval: task must be zeroshot or retrieval");
  }

  std::ofstream out(out_path, std::ios::binary);
  check(out.good(), Error::Kind::io, "eval: cannot open " + out_path);
  out << report;
  std::cout << report;
  return 0;
}

int cmd_visualize(const Args& args) {
  Model model = load_model(args.require("ckpt"));
  Tensor image = read_ppm(args.require("image"));
  const std::string prompt = args.require("prompt");
  const std::string label = args.require("label");
  const std::string prefix = args.get("out-prefix", "alignment");

  const std::vector<int> span = token_spans(prompt, label);
  EncodedFeatures img = encode_image_features(model, image);
  EncodedFeatures txt = encode_text_features(model, prompt);
  AlignmentMap map =
      alignment_export(img, txt, span, model.config.include_special_tokens);

  std::ofstream grid(prefix + "_grid.txt", std::ios::binary);
  grid << render_alignment_grid(map, /*ansi=*/false);
  grid.close();
  write_ppm(prefix + "_overlay.ppm", alignment_overlay(image, map));

  std::cout << render_alignment_grid(map, /*ansi=*/true);
  std::cout << "wrote " << prefix << "_grid.txt and " << prefix
            << "_overlay.ppm\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    Args args = parse_args(argc, argv);
    if (args.command == "train") return cmd_train(args);
    if (args.command == "eval") return cmd_eval(args);
    if (args.command == "visualize") return cmd_visualize(args);
    if (args.command == "help" || args.command == "--help") {
      print_usage();
      return 0;
    }
    std::cerr << "unknown command: " << args.command << "\n";
    print_usage();
    return 2;
  } catch (const filigrain::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
