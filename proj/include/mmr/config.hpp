#pragma once

// Layered run configuration: profile defaults <- config file (JSON) <- MMR_*
// environment variables <- command-line flags. Keys are dotted paths into the
// resolved JSON tree, e.g. "train.epochs" or "train.model.dim". The
// environment spells them with '__' for '.', so MMR_TRAIN__MODEL__DIM=64.

#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mmr/eval.hpp"
#include "mmr/trainer.hpp"

namespace mmr {

using Json = nlohmann::ordered_json;

/// "full" (C = 512, batch 64, 200 epochs) or "desk" (C = 32, batch 16, 100 epochs, lr 1e-3 to 1e-4).
Json default_run_config(std::string_view profile);

struct ConfigLayers {
  std::optional<std::filesystem::path> file;
  std::map<std::string, std::string> env;               // raw MMR_* variables
  std::vector<std::pair<std::string, std::string>> flags;  // dotted key, value
  /// Used when no layer names a profile.
  std::string default_profile = "full";
};

/// Collects MMR_* variables from a null-terminated environment block.
std::map<std::string, std::string> mmr_environment(char** envp);

/// Applies the layers in order and validates the result; unknown keys are errors.
Json resolve_run_config(const ConfigLayers& layers);

/// Sets an existing dotted key; the value is parsed as JSON, falling back to a string.
void set_config_value(Json& cfg, const std::string& dotted, const std::string& value);

TrainConfig train_config_of(const Json& cfg);
ProtocolConfig protocol_config_of(const Json& cfg);

/// Writes `<dir>/resolved_config.json`.
void echo_config(const std::filesystem::path& dir, const Json& cfg);

}  // namespace mmr
