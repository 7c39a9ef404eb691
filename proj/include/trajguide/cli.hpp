#pragma once

// Command-line front end: synth, train, simulate, guide, eval, render.

#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "trajguide/scene.hpp"

namespace trajguide::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitGuidanceFailed = 3;

// args excludes the program name. Never throws; errors go to `err` and the
// exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Flat "key = value" lines; '#' starts a comment. Throws
// std::invalid_argument naming the line on malformed or duplicate keys.
std::map<std::string, std::string> parse_flat_config(std::string_view text);

// Config values from `--config file` are inserted after the subcommand for
// every key not given as a flag, so flags win over the file and the file over
// defaults. Returns args unchanged when there is no --config.
std::vector<std::string> apply_config_file(const std::vector<std::string>& args);

// FNV-1a 64 of the canonical dump, 16 hex digits.
std::string config_hash(const nlohmann::json& config);

// {tool, command, config_hash, config}; output paths are left out of
// `config` by the callers so reruns into other files share a hash.
nlohmann::json metadata(std::string_view command, const nlohmann::json& config);

struct RenderOptions {
  double scale = 4.0;    // px per metre
  double margin = 20.0;  // px
  bool trajectories = true;
};

// SVG 1.1: lanes, road edges, agent boxes at t_now, history and fading
// future trajectories. `comment` goes into an XML comment after the prolog.
std::string render_svg(const Scenario& scenario, const RenderOptions& options = {}, const std::string& comment = "");

}  // namespace trajguide::cli
