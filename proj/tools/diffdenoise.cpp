#include <cstdio>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "diffdenoise/config.hpp"
#include "diffdenoise/error.hpp"
#include "diffdenoise/pipeline.hpp"

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> steps;
  std::optional<std::string> mode;
};

int run(const std::string& command, const Options& opts) {
  using namespace diffdenoise;
  std::string stage = "config";
  try {
    auto config = load_config(opts.config);
    if (opts.seed) config.seed = *opts.seed;
    if (opts.steps) config.srds.steps = *opts.steps;
    if (opts.mode) config.srds.mode = parse_sample_mode(*opts.mode);
    config.validate();
    stage = command;
    const auto stop = command == "run" ? PipelineStage::report : parse_stage(command);
    const auto ledger = run_pipeline(config, stop);
    std::printf("%s: %zu stages recorded in %s/%s\n", command.c_str(), ledger.records.size(),
                config.output_dir.c_str(), kLedgerFile);
    return 0;
  } catch (const StageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: stage '%s': %s\n", stage.c_str(), e.what());
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-supervised denoising pipeline: BSN conditioning, residual diffusion, SRDS, distillation"};
  app.require_subcommand(1, 1);
  Options opts;

  const std::pair<const char*, const char*> commands[] = {
      {"synth", "generate clean patches and noisy datasets"},
      {"train-bsn", "train the blind-spot networks and write conditions"},
      {"train-diffusion", "train the conditional residual diffusion models"},
      {"sample", "sample diffusion outputs for every patch"},
      {"distill", "train the distilled denoisers"},
      {"iterate", "run every configured iteration"},
      {"eval", "score iterations and run ablation and stability experiments"},
      {"report", "write tables and plot data"},
      {"run", "run the whole pipeline"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", opts.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", opts.seed, "override the experiment seed");
    if (std::string(name) == "sample") {
      sub->add_option("--steps", opts.steps, "reverse diffusion steps")->check(CLI::PositiveNumber);
      sub->add_option("--mode", opts.mode, "sampler")->check(CLI::IsMember({"srds", "single", "random-pair"}));
    }
  }

  CLI11_PARSE(app, argc, argv);
  return run(app.get_subcommands().front()->get_name(), opts);
}
