#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "vqvae/nets.h"
#include "vqvae/prior.h"
#include "vqvae/trainer.h"

namespace vqvae {

using KeyValues = std::map<std::string, std::string>;

// Every tunable of a run. The CLI fills it from a flat key=value file.
struct RunConfig {
  ModelSpec model;
  PriorSpec prior;
  TrainConfig train;

  bool operator==(const RunConfig&) const = default;
};

enum class ConfigGroup { kModel, kPrior, kTrain };

struct ConfigKey {
  std::string_view name;
  ConfigGroup group;
  std::string_view help;
};

// All recognized keys in documentation order.
const std::vector<ConfigKey>& ConfigKeys();

// Applies |values| on top of |base|. Unknown keys and unparsable values throw
// ConfigError naming the key.
RunConfig ApplyConfig(RunConfig base, const KeyValues& values);

// Parses "key = value" lines; '#' starts a comment, blank lines are ignored.
// Duplicate keys are an error.
KeyValues ParseKeyValues(std::string_view text, std::string_view origin = "config");
RunConfig LoadConfigFile(const std::filesystem::path& path);

// Values of every key in |groups|, formatted so that ApplyConfig restores
// them exactly (floats use the shortest round-trip form).
KeyValues FormatConfig(const RunConfig& config, const std::vector<ConfigGroup>& groups);

// One "key (default value): help" line per key, for --help.
std::string ConfigHelp();

// Shortest decimal text that parses back to exactly |v|.
std::string FormatFloat(float v);

}  // namespace vqvae
