// Command-line front end: every experiment stage as one subcommand, all
// behavior driven by a key=value config file plus targeted overrides.

#include <exception>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "avp/harness.hpp"

namespace {

using avp::harness::ExperimentConfig;

// Config file (optional; defaults otherwise) plus repeatable `--set k=v`
// overrides applied on top, reusing the config parser line by line.
ExperimentConfig resolve_config(const std::string& path, const std::vector<std::string>& sets) {
  std::string text;
  if (!path.empty()) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw avp::harness::ConfigError("config file not found: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    text = ss.str();
    if (!text.empty() && text.back() != '\n') text += "\n";
  }
  for (const std::string& s : sets) text += s + "\n";
  return avp::harness::parse_config_text(text);
}

void add_config_opts(CLI::App* cmd, std::string* path, std::vector<std::string>* sets) {
  cmd->add_option("--config", *path, "config file (key = value lines)");
  cmd->add_option("--set", *sets, "override, e.g. --set train.seed=2")->allow_extra_args(false);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pick-and-place experiments with visual action prompts"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> sets;

  auto* gen = app.add_subcommand("gen-data", "generate expert episodes, logs and observations");
  add_config_opts(gen, &config_path, &sets);

  auto* sup = app.add_subcommand("make-supervision",
                                 "label episodes and write the training shard");
  add_config_opts(sup, &config_path, &sets);
  std::string prompt;
  double alpha = -1.0;
  int memory = -1;
  sup->add_option("--prompt", prompt, "prompt style: none|point|box|boxmask")
      ->check(CLI::IsMember({"none", "point", "box", "boxmask"}));
  sup->add_option("--alpha", alpha, "mask opacity in [0,1]");
  sup->add_option("--memory", memory, "history primitives kept in the render");

  auto* train = app.add_subcommand("train", "train one policy from the shard");
  add_config_opts(train, &config_path, &sets);
  std::string mode;
  std::uint64_t seed = 0;
  bool seed_set = false;
  train->add_option("--mode", mode, "conditioning: noprim|primgt|primpred")
      ->check(CLI::IsMember({"noprim", "primgt", "primpred"}));
  train->add_option("--seed", seed, "training seed")->each([&seed_set](const std::string&) {
    seed_set = true;
  });

  auto* eval = app.add_subcommand("eval", "roll out a checkpoint on an evaluation task set");
  add_config_opts(eval, &config_path, &sets);
  std::string ckpt, eval_mode;
  bool oracle = false;
  eval->add_option("--ckpt", ckpt, "checkpoint path");
  eval->add_option("--mode", eval_mode, "task set: seen|unseen-direct")
      ->check(CLI::IsMember({"seen", "unseen-direct"}))
      ->required();
  eval->add_flag("--oracle", oracle, "run the scripted expert instead of a checkpoint");

  auto* ablate = app.add_subcommand("ablate", "prompt-design grid study");
  add_config_opts(ablate, &config_path, &sets);

  auto* rp = app.add_subcommand("render-prompts", "dump shard samples as PPM images");
  std::string dataset, out_dir;
  int limit = 8;
  rp->add_option("--dataset", dataset, "shard path")->required();
  rp->add_option("--out", out_dir, "output directory")->required();
  rp->add_option("--limit", limit, "number of samples to dump");

  auto* st = app.add_subcommand("selftest", "run the invariant suite");
  bool inject = false;
  st->add_flag("--inject-gradient-fault", inject,
               "corrupt one analytic gradient to exercise the failure path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      avp::harness::cmd_gen_data(resolve_config(config_path, sets), std::cout);
    } else if (sup->parsed()) {
      if (!prompt.empty()) sets.push_back("render.prompt=" + prompt);
      if (alpha >= 0.0) sets.push_back("render.alpha=" + std::to_string(alpha));
      if (memory >= 0) sets.push_back("render.memory_depth=" + std::to_string(memory));
      avp::harness::cmd_make_supervision(resolve_config(config_path, sets), std::cout);
    } else if (train->parsed()) {
      if (!mode.empty()) sets.push_back("train.mode=" + mode);
      if (seed_set) sets.push_back("train.seed=" + std::to_string(seed));
      avp::harness::cmd_train(resolve_config(config_path, sets), std::cout);
    } else if (eval->parsed()) {
      avp::harness::EvalMode m = eval_mode == "seen" ? avp::harness::EvalMode::Seen
                                                     : avp::harness::EvalMode::UnseenDirect;
      if (oracle) {
        avp::harness::cmd_eval_oracle(resolve_config(config_path, sets), m, std::cout);
      } else {
        if (ckpt.empty()) throw avp::harness::ConfigError("eval: --ckpt is required");
        ExperimentConfig cfg;
        if (config_path.empty() && sets.empty()) {
          // No config given: adopt the one embedded in the checkpoint.
          std::ifstream in(ckpt, std::ios::binary);
          if (!in) throw avp::harness::ConfigError("checkpoint missing: " + ckpt);
          cfg = avp::harness::parse_config_text(avp::learn::load_checkpoint(in).config_echo);
        } else {
          cfg = resolve_config(config_path, sets);
        }
        avp::harness::cmd_eval(cfg, ckpt, m, std::cout);
      }
    } else if (ablate->parsed()) {
      avp::harness::cmd_ablate(resolve_config(config_path, sets), std::cout);
    } else if (rp->parsed()) {
      avp::harness::cmd_render_prompts(dataset, out_dir, limit, std::cout);
    } else if (st->parsed()) {
      return avp::harness::cmd_selftest(std::cout, inject) == 0 ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
