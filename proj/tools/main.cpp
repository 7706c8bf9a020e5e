// pulseformer command-line front end. Every command resolves its config
// (defaults < --config file < flags), validates it, runs in its own run
// directory and leaves manifest.json there.
//
// Exit codes: 0 success, 2 usage or config error, 3 data error, 4 numeric
// failure.

#include <functional>
#include <iostream>
#include <memory>

#include <CLI11.hpp>

#include "commands.hpp"
#include "pulseformer/error.hpp"

namespace {

using nlohmann::json;
using namespace pulseformer;
using namespace pulseformer::cli;

/// Flags bound to config locations (JSON pointers). Only flags the user
/// actually passed are written, so they override the file without
/// clobbering it with defaults.
class Flags {
 public:
  template <typename T>
  CLI::Option* add(CLI::App* app, const std::string& name, std::vector<std::string> pointers,
                   const std::string& help) {
    auto value = std::make_shared<T>();
    CLI::Option* opt = app->add_option(name, *value, help);
    bindings_.push_back([opt, value, pointers](json& cfg) {
      if (opt->count() == 0) return;
      for (const auto& p : pointers) cfg[json::json_pointer(p)] = *value;
    });
    return opt;
  }

  /// Boolean switch writing `value` when present.
  void flag(CLI::App* app, const std::string& name, const std::string& pointer, json value, const std::string& help) {
    CLI::Option* opt = app->add_flag(name, help);
    bindings_.push_back([opt, pointer, value](json& cfg) {
      if (opt->count() > 0) cfg[json::json_pointer(pointer)] = value;
    });
  }

  void apply(json& cfg) const {
    for (const auto& b : bindings_) b(cfg);
  }

 private:
  std::vector<std::function<void(json&)>> bindings_;
};

struct Command {
  std::string name;
  CLI::App* app = nullptr;
  Flags flags;
  std::string config_file;
  std::string out_dir;
  bool print_config = false;
  std::function<void(Run&)> body;
};

void synth_flags(Command& c) {
  auto* a = c.app;
  c.flags.add<int>(a, "--subjects", {"/synth/subjects"}, "number of synthetic subjects");
  c.flags.add<std::string>(a, "--modality", {"/synth/modality"}, "ppg or ecg")
      ->check(CLI::IsMember({"ppg", "ecg"}));
  c.flags.add<std::string>(a, "--rhythm", {"/synth/rhythm"}, "regular, af or mixed (alternating, regular first)")
      ->check(CLI::IsMember({"regular", "af", "mixed"}));
  c.flags.add<double>(a, "--duration", {"/synth/duration"}, "seconds per subject");
  c.flags.add<double>(a, "--synth-fs", {"/synth/fs"}, "synthetic sample rate (Hz)");
}

void data_flags(Command& c) {
  auto* a = c.app;
  c.flags.add<std::string>(a, "--data", {"/data/path"}, "dataset.json, a directory holding one, or a signal file");
  c.flags.add<double>(a, "--fs", {"/data/target_fs"}, "resampling rate (Hz); default 50 for PPG, 100 for ECG");
  c.flags.add<int>(a, "--window", {"/data/window_len"}, "window length (samples)");
  c.flags.add<int>(a, "--shift", {"/data/window_shift"}, "window shift (samples)");
  c.flags.add<double>(a, "--split", {"/data/split_fraction"}, "share of records used for training");
  c.flags.add<std::vector<double>>(a, "--bandpass", {"/data/bandpass"}, "pass band LOW HIGH (Hz)")->expected(2);
  c.flags.flag(a, "--no-bandpass", "/data/bandpass", json::array(), "skip band-pass filtering");
  synth_flags(c);
}

void model_flags(Command& c) {
  auto* a = c.app;
  c.flags.add<int>(a, "--d-model", {"/model/d_model"}, "embedding width");
  c.flags.add<int>(a, "--blocks", {"/model/n_blocks"}, "transformer blocks");
  c.flags.add<int>(a, "--heads", {"/model/n_heads"}, "attention heads per block");
  c.flags.add<int>(a, "--context", {"/model/max_context"}, "context length (tokens)");
  c.flags.add<double>(a, "--dropout", {"/model/dropout"}, "dropout probability");
}

void train_flags(Command& c, bool finetune) {
  auto* a = c.app;
  std::vector<std::string> iters = {"/train/max_iters"};
  if (finetune) iters.push_back("/train/eval_interval");
  c.flags.add<int>(a, "--iters", iters, "training iterations");
  c.flags.add<double>(a, "--lr", {"/train/learning_rate"}, "learning rate");
  c.flags.add<int>(a, "--batch", {"/train/batch_size"}, "batch size");
  c.flags.add<double>(a, "--weight-decay", {"/train/adamw/weight_decay"}, "decoupled weight decay");
  c.flags.add<double>(a, "--clip-norm", {"/train/adamw/clip_norm"}, "global gradient-norm clip");
  if (finetune) {
    c.flags.flag(a, "--train-final-norm", "/train/train_final_norm", true, "also train the final layer norm");
  } else {
    c.flags.add<int>(a, "--eval-interval", {"/train/eval_interval"}, "iterations between evaluations");
    c.flags.add<int>(a, "--eval-iters", {"/train/eval_iters"}, "batches per evaluation");
  }
}

void attention_flags(Command& c) {
  c.flags.add<std::string>(c.app, "--checkpoint", {"/attention/checkpoint"}, "language-model checkpoint stem");
  c.flags.add<long>(c.app, "--record", {"/attention/record"}, "record index in the dataset");
  c.flags.add<long>(c.app, "--start", {"/attention/start"}, "first sample of the window (after preprocessing)");
  data_flags(c);
}

void add_command(CLI::App& root, std::vector<std::unique_ptr<Command>>& all, const std::string& name,
                 const std::string& help, std::function<void(Run&)> body, const std::function<void(Command&)>& flags) {
  auto c = std::make_unique<Command>();
  c->name = name;
  c->app = root.add_subcommand(name, help);
  c->body = std::move(body);
  c->app->add_option("--config", c->config_file, "JSON config (or a run manifest to replay)")
      ->check(CLI::ExistingFile);
  c->app->add_option("--out", c->out_dir, "run directory (default: $PULSEFORMER_RUNS or ./runs, timestamped)");
  c->app->add_flag("--print-config", c->print_config, "print the resolved config and exit");
  c->flags.add<std::uint64_t>(c->app, "--seed", {"/seed"}, "seed for every random stream");
  flags(*c);
  all.push_back(std::move(c));
}

int run_command(Command& c, const std::vector<std::string>& argv) {
  json cfg = default_config(c.name);
  if (!c.config_file.empty()) cfg = merge_config_file(cfg, c.config_file);
  c.flags.apply(cfg);
  validate_config(c.name, cfg);
  if (c.print_config) {
    std::cout << cfg.dump(2) << '\n';
    return 0;
  }
  std::optional<std::filesystem::path> out;
  if (!c.out_dir.empty()) out = c.out_dir;
  Run run(c.name, cfg, argv, out);
  std::cerr << "run directory: " << run.dir().string() << std::endl;
  try {
    c.body(run);
  } catch (const std::exception& e) {
    run.results()["error"] = e.what();
    run.finish();
    throw;
  }
  run.finish();
  std::cout << run.dir().string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decoder-only transformer for PPG/ECG token sequences"};
  app.require_subcommand(1);
  std::vector<std::unique_ptr<Command>> commands;

  add_command(app, commands, "synth", "write a synthetic cohort and its dataset.json", run_synth, [](Command& c) {
    synth_flags(c);
    c.flags.add<std::string>(c.app, "--format", {"/synth/format"}, "csv or f32")->check(CLI::IsMember({"csv", "f32"}));
  });
  add_command(app, commands, "tokenize", "preprocess and tokenize sliding windows to windows.csv", run_tokenize,
              data_flags);
  add_command(app, commands, "pretrain", "next-token pre-training", run_pretrain, [](Command& c) {
    data_flags(c);
    model_flags(c);
    train_flags(c, false);
    c.flags.add<std::string>(c.app, "--init", {"/pretrain/init"}, "start from this checkpoint stem");
  });
  add_command(app, commands, "generate", "autoregressive continuation of one window", run_generate, [](Command& c) {
    data_flags(c);
    c.flags.add<std::string>(c.app, "--checkpoint", {"/generate/checkpoint"}, "language-model checkpoint stem");
    c.flags.add<long>(c.app, "--record", {"/generate/record"}, "record index in the dataset");
    c.flags.add<long>(c.app, "--start", {"/generate/start"}, "first context sample (after preprocessing)");
    c.flags.add<int>(c.app, "--steps", {"/generate/steps"}, "tokens to generate");
    c.flags.add<double>(c.app, "--temperature", {"/generate/temperature"}, "sampling temperature (0 = argmax)");
  });
  add_command(app, commands, "eval-horizon", "prediction error against horizon", run_eval_horizon, [](Command& c) {
    data_flags(c);
    c.flags.add<std::string>(c.app, "--checkpoint", {"/horizon/checkpoint"}, "language-model checkpoint stem");
    c.flags.add<int>(c.app, "--context", {"/horizon/context"}, "context samples (default: model context)");
    c.flags.add<int>(c.app, "--horizon", {"/horizon/horizon"}, "predicted samples per window");
    c.flags.add<int>(c.app, "--horizon-shift", {"/horizon/shift"}, "samples between windows");
    c.flags.add<int>(c.app, "--rollouts", {"/horizon/rollouts"}, "rollouts per window");
    c.flags.add<double>(c.app, "--temperature", {"/horizon/temperature"}, "sampling temperature (0 = argmax)");
    c.flags.add<int>(c.app, "--batch", {"/horizon/batch"}, "windows generated together");
    c.flags.add<int>(c.app, "--max-windows", {"/horizon/max_windows"}, "cap on windows (0 = all)");
  });
  add_command(app, commands, "finetune", "AF classifier from a pre-trained model", run_finetune, [](Command& c) {
    data_flags(c);
    model_flags(c);
    train_flags(c, true);
    c.flags.add<std::string>(c.app, "--checkpoint", {"/finetune/checkpoint"}, "base language-model checkpoint stem");
    c.flags.add<std::string>(c.app, "--hold-out", {"/finetune/hold_out"}, "subject excluded from training and scored");
  });
  add_command(app, commands, "loso", "leave-one-subject-out AF evaluation", run_loso, [](Command& c) {
    data_flags(c);
    model_flags(c);
    train_flags(c, true);
    c.flags.add<std::string>(c.app, "--checkpoint", {"/loso/checkpoint"}, "base language-model checkpoint stem");
  });
  add_command(app, commands, "attn-aggregate", "head-summed final-row attention per layer", run_attn_aggregate,
              [](Command& c) {
                attention_flags(c);
                c.flags.add<std::vector<int>>(c.app, "--layers", {"/attention/layers"}, "layers (1-based; default all)");
              });
  add_command(app, commands, "attn-lookback", "mean look-back distance per layer", run_attn_lookback,
              [](Command& c) {
                attention_flags(c);
                c.flags.add<int>(c.app, "--max-windows", {"/attention/max_windows"}, "cap on windows (0 = all)");
              });
  add_command(app, commands, "attn-similarity", "residual similarity of slope tokens to a rising reference",
              run_attn_similarity, [](Command& c) {
                attention_flags(c);
                c.flags.add<long>(c.app, "--reference", {"/attention/reference"}, "reference position");
                c.flags.add<int>(c.app, "--tolerance", {"/attention/tolerance"}, "token tolerance around the reference");
              });
  add_command(app, commands, "attn-heads", "shift-and-add final-block head maps and peaks", run_attn_heads,
              [](Command& c) {
                attention_flags(c);
                c.flags.add<std::vector<int>>(c.app, "--heads", {"/attention/heads"}, "heads to draw (1-based)");
                c.flags.add<int>(c.app, "--min-distance", {"/attention/min_distance"}, "minimum peak spacing");
                c.flags.add<double>(c.app, "--rel-height", {"/attention/rel_height"}, "peak height relative to max");
              });
  add_command(app, commands, "attn-delta", "fine-tuned minus base final-layer attention", run_attn_delta,
              [](Command& c) {
                attention_flags(c);
                c.flags.add<std::string>(c.app, "--tuned", {"/attention/tuned"}, "classifier checkpoint stem");
                c.flags.add<double>(c.app, "--irregular-tolerance", {"/attention/irregular_tolerance"},
                                    "relative RR deviation marking an irregular interval");
              });
  add_command(app, commands, "export-figure", "re-render a figure from its CSV", run_export_figure,
              [](Command& c) {
                c.flags.add<std::string>(c.app, "--csv", {"/export/csv"}, "CSV written by another command");
                c.flags.add<std::string>(c.app, "--kind", {"/export/kind"}, "figure kind (default: from header)");
              });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  const std::vector<std::string> args(argv, argv + argc);
  for (auto& c : commands) {
    if (!c->app->parsed()) continue;
    try {
      return run_command(*c, args);
    } catch (const UsageError& e) {
      std::cerr << "usage error: " << e.what() << '\n';
      return 2;
    } catch (const ConfigError& e) {
      std::cerr << "config error: " << e.what() << '\n';
      return 2;
    } catch (const ContractError& e) {
      std::cerr << "contract error: " << e.what() << '\n';
      return 2;
    } catch (const nlohmann::json::exception& e) {
      std::cerr << "config error: " << e.what() << '\n';
      return 2;
    } catch (const NumericError& e) {
      std::cerr << "numeric error: " << e.what() << '\n';
      return 4;
    } catch (const std::exception& e) {
      std::cerr << "data error: " << e.what() << '\n';
      return 3;
    }
  }
  return 2;
}
