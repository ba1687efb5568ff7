#include <CLI11.hpp>
#include <cstdint>
#include <iostream>
#include <optional>

#include "commands.hpp"

using namespace mambaclip::cli;

int main(int argc, char** argv) {
  CLI::App app{"Mamba CLIP training, zero-shot/OOD evaluation and Hessian spectra"};
  app.require_subcommand(1);

  std::string config_path, checkpoint, manifest, out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  for (const auto& info : commands()) {
    CLI::App* sub = app.add_subcommand(info.name, info.description);
    sub->add_option("--config", config_path, "INI config file")->check(CLI::ExistingFile);
    sub->add_option("--checkpoint", checkpoint, "Checkpoint to load (run.checkpoint)");
    sub->add_option("--manifest", manifest, "Input manifest (run.manifest)");
    sub->add_option("--out", out, "Output directory (run.out)");
    sub->add_option("--seed", seed, "Root seed (run.seed)");
    sub->add_option("--set", overrides, "Override: section.key=value (repeatable)");
  }
  CLI11_PARSE(app, argc, argv);

  try {
    RunConfig cfg;
    if (!config_path.empty()) apply_ini_file(cfg, config_path);
    for (const auto& o : overrides) apply_override(cfg, o);
    if (!checkpoint.empty()) set_value(cfg, "run", "checkpoint", checkpoint);
    if (!manifest.empty()) set_value(cfg, "run", "manifest", manifest);
    if (!out.empty()) set_value(cfg, "run", "out", out);
    if (seed) set_value(cfg, "run", "seed", std::to_string(*seed));
    cfg.command = app.get_subcommands().front()->get_name();
    return run_command(std::move(cfg), std::cout);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
