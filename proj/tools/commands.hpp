#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "run_config.hpp"

namespace mambaclip::cli {

struct CommandInfo {
  std::string name;
  std::string description;
};

const std::vector<CommandInfo>& commands();

/// Runs cfg.command with outputs under cfg.out, starting with the resolved
/// config echo (config.ini). Returns the process exit status; configuration
/// problems throw ConfigError.
int run_command(RunConfig cfg, std::ostream& log);

}  // namespace mambaclip::cli
