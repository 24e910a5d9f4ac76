#include "mmr/config.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cctype>

#include "mmr/tensor_file.hpp"

namespace mmr {

namespace {

Json protocol_json(const ProtocolConfig& p) {
  return Json{{"protocol", std::string(to_string(p.protocol))},
              {"threshold", p.threshold},
              {"batch", p.batch},
              {"ks", p.ks},
              {"seed", p.seed}};
}

Json* find_key(Json& cfg, const std::string& dotted) {
  Json* node = &cfg;
  std::size_t pos = 0;
  while (true) {
    const std::size_t dot = dotted.find('.', pos);
    const std::string part = dotted.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (!node->is_object() || !node->contains(part)) return nullptr;
    node = &(*node)[part];
    if (dot == std::string::npos) return node;
    pos = dot + 1;
  }
}

std::string env_to_key(std::string name) {
  name = name.substr(4);  // MMR_
  std::string key;
  for (std::size_t i = 0; i < name.size(); ++i) {
    if (name.compare(i, 2, "__") == 0) {
      key += '.';
      ++i;
    } else {
      key += char(std::tolower(static_cast<unsigned char>(name[i])));
    }
  }
  return key;
}

void merge(Json& base, const Json& over, const std::string& where) {
  for (auto it = over.begin(); it != over.end(); ++it) {
    if (!base.contains(it.key())) throw ConfigError(fmt::format("{}: unknown config key '{}'", where, it.key()));
    auto& slot = base[it.key()];
    if (slot.is_object() && it.value().is_object() && it.key() != "partition") {
      merge(slot, it.value(), where);
    } else {
      slot = it.value();
    }
  }
}

}  // namespace

Json default_run_config(std::string_view profile) {
  TrainConfig t;
  if (profile == "desk") {
    t = TrainConfig::desk();
  } else if (profile == "full") {
    t.model.dim = 512;
    t.model.heads = 8;
  } else {
    throw ConfigError("unknown profile: " + std::string(profile));
  }
  Json j;
  j["profile"] = std::string(profile);
  j["train"] = Json::parse(train_config_json(t));
  j["eval"] = protocol_json(ProtocolConfig{});
  return j;
}

std::map<std::string, std::string> mmr_environment(char** envp) {
  std::map<std::string, std::string> out;
  for (char** e = envp; e && *e; ++e) {
    std::string_view kv(*e);
    if (kv.substr(0, 4) != "MMR_") continue;
    const auto eq = kv.find('=');
    if (eq == std::string_view::npos) continue;
    out.emplace(std::string(kv.substr(0, eq)), std::string(kv.substr(eq + 1)));
  }
  return out;
}

void set_config_value(Json& cfg, const std::string& dotted, const std::string& value) {
  Json* slot = find_key(cfg, dotted);
  if (!slot) throw ConfigError("unknown config key: " + dotted);
  Json parsed = Json::parse(value, nullptr, false);
  if (parsed.is_discarded()) parsed = value;
  if (slot->is_number() && !parsed.is_number()) {
    throw ConfigError(fmt::format("config key {} expects a number, got '{}'", dotted, value));
  }
  *slot = parsed;
}

Json resolve_run_config(const ConfigLayers& layers) {
  // The profile picks the defaults, so it is resolved first with the same precedence.
  std::string profile = layers.default_profile;
  Json file_cfg;
  if (layers.file) {
    file_cfg = Json::parse(read_file(*layers.file), nullptr, false);
    if (file_cfg.is_discarded() || !file_cfg.is_object()) {
      throw ConfigError("config file is not a JSON object: " + layers.file->string());
    }
    if (file_cfg.contains("profile")) profile = file_cfg["profile"].get<std::string>();
  }
  if (auto it = layers.env.find("MMR_PROFILE"); it != layers.env.end()) profile = it->second;
  for (const auto& [k, v] : layers.flags)
    if (k == "profile") profile = v;

  Json cfg = default_run_config(profile);
  if (layers.file) merge(cfg, file_cfg, layers.file->string());
  for (const auto& [name, value] : layers.env) {
    if (name == "MMR_PROFILE" || name == "MMR_THREADS") continue;
    set_config_value(cfg, env_to_key(name), value);
  }
  for (const auto& [k, v] : layers.flags) {
    if (k == "profile") continue;
    set_config_value(cfg, k, v);
  }
  cfg["profile"] = profile;
  train_config_of(cfg).validate();
  protocol_config_of(cfg).validate();
  return cfg;
}

TrainConfig train_config_of(const Json& cfg) { return train_config_from_json(cfg.at("train").dump()); }

ProtocolConfig protocol_config_of(const Json& cfg) {
  const auto& e = cfg.at("eval");
  ProtocolConfig p;
  p.protocol = parse_protocol(e.at("protocol").get<std::string>());
  p.threshold = e.at("threshold").get<double>();
  p.batch = e.at("batch").get<std::size_t>();
  p.ks = e.at("ks").get<std::vector<std::size_t>>();
  p.seed = e.at("seed").get<std::uint64_t>();
  return p;
}

void echo_config(const std::filesystem::path& dir, const Json& cfg) {
  write_file_atomic(dir / "resolved_config.json", cfg.dump(2) + "\n");
}

}  // namespace mmr
