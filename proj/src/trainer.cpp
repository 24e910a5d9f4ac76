#include "mmr/trainer.hpp"

#include <fmt/format.h>
#include <openssl/evp.h>

#include <cmath>
#include <nlohmann/json.hpp>

#include "mmr/tensor_file.hpp"

namespace mmr {

using nlohmann::ordered_json;

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.epochs = 100;
  c.batch = 16;
  c.lr_start = 1e-3;
  c.lr_end = 1e-4;
  c.model.dim = 32;
  return c;
}

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (batch < 2) throw ConfigError("batch size must be at least 2");
  if (!(lr_end > 0 && lr_start >= lr_end)) throw ConfigError("need lr_start >= lr_end > 0");
  if (decay_start && *decay_start >= epochs) throw ConfigError("decay_start must be smaller than epochs");
  model.validate();
}

std::string train_config_json(const TrainConfig& c) {
  ordered_json j;
  j["epochs"] = c.epochs;
  j["batch"] = c.batch;
  j["lr_start"] = c.lr_start;
  j["lr_end"] = c.lr_end;
  j["decay_start"] = c.decay_start ? ordered_json(*c.decay_start) : ordered_json(nullptr);
  j["beta1"] = c.adamw.beta1;
  j["beta2"] = c.adamw.beta2;
  j["eps"] = c.adamw.eps;
  j["weight_decay"] = c.adamw.weight_decay;
  j["seed"] = c.seed;
  j["model"] = ordered_json::parse(model_config_json(c.model));
  return j.dump();
}

TrainConfig train_config_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch = j.value("batch", c.batch);
  c.lr_start = j.value("lr_start", c.lr_start);
  c.lr_end = j.value("lr_end", c.lr_end);
  if (j.contains("decay_start") && !j.at("decay_start").is_null()) c.decay_start = j.at("decay_start").get<std::size_t>();
  c.adamw.beta1 = j.value("beta1", c.adamw.beta1);
  c.adamw.beta2 = j.value("beta2", c.adamw.beta2);
  c.adamw.eps = j.value("eps", c.adamw.eps);
  c.adamw.weight_decay = j.value("weight_decay", c.adamw.weight_decay);
  c.seed = j.value("seed", c.seed);
  if (j.contains("model")) c.model = model_config_from_json(j.at("model").dump());
  return c;
}

std::string config_hash(const TrainConfig& cfg) {
  const std::string text = train_config_json(cfg);
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 digest failed");
  }
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", md[i]);
  return hex;
}

double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  const std::size_t start = cfg.decay_start_epoch();
  const std::size_t last = cfg.epochs - 1;
  if (epoch < start || last <= start) return cfg.lr_start;
  const double t = double(std::min(epoch, last) - start) / double(last - start);
  return cfg.lr_start + t * (cfg.lr_end - cfg.lr_start);
}

void adamw_step(ParamStore<float>& params, const std::map<std::string, Tensorf>& grads, AdamState& state, double lr,
                const AdamWConfig& cfg) {
  for (const auto& [name, g] : grads) {
    if (!g.all_finite()) throw NumericError("non-finite gradient for parameter " + name);
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  for (const auto& name : params.names()) {
    auto it = grads.find(name);
    if (it == grads.end()) continue;
    auto& p = params.get(name);
    const auto& g = it->second;
    if (g.dims() != p.dims()) throw ShapeError("gradient dims differ for parameter " + name);
    auto& m = state.m.try_emplace(name, Tensorf(p.dims())).first->second;
    auto& v = state.v.try_emplace(name, Tensorf(p.dims())).first->second;
    const double decay = params.decays(name) ? lr * cfg.weight_decay : 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = float(cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i]);
      v[i] = float(cfg.beta2 * v[i] + (1.0 - cfg.beta2) * double(g[i]) * g[i]);
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] = float(p[i] * (1.0 - decay) - lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

Trainer::Trainer(TrainConfig cfg, const std::vector<PairedSample>& samples) : cfg_(std::move(cfg)), model_(cfg_.model) {
  cfg_.validate();
  for (const auto& s : samples) {
    if (s.split != Split::Train) continue;
    for (auto m : cfg_.model.modalities)
      if (!s.has(m)) throw DataError(fmt::format("sample {} has no {} features", s.id, to_string(m)));
    train_.push_back(&s);
  }
  if (train_.size() < cfg_.batch) {
    throw DataError(fmt::format("{} training samples, fewer than batch size {}", train_.size(), cfg_.batch));
  }
}

TrainState Trainer::initial_state() const {
  TrainState s;
  s.params = model_.init(cfg_.seed);
  s.rng = Rng(cfg_.seed ^ 0x5A17ED5EEDULL);
  return s;
}

EpochStats Trainer::run_epoch(TrainState& state) const {
  const std::size_t epoch = state.epoch;
  const double lr = lr_at(epoch, cfg_);
  const auto order = state.rng.permutation(train_.size());
  const std::size_t steps = train_.size() / cfg_.batch;
  EpochStats st;
  st.epoch = epoch;
  st.lr = lr;
  for (std::size_t k = 0; k < steps; ++k) {
    std::vector<const PairedSample*> members;
    for (std::size_t i = 0; i < cfg_.batch; ++i) members.push_back(train_[order[k * cfg_.batch + i]]);
    const auto inputs = gather_inputs(members, cfg_.model.modalities);
    Tape<float> tape;
    Bound<float> p(tape, state.params, true);
    const std::uint64_t step_seed = cfg_.seed * 0x9E3779B97F4A7C15ULL + epoch * 0x100000001B3ULL + k;
    auto loss = model_.loss(p, inputs, step_seed);
    tape.backward(loss.total);
    st.total += loss.total.value().item();
    st.align += loss.align.total.value().item();
    if (loss.recon.valid()) st.recon += loss.recon.value().item();
    adamw_step(state.params, p.gradients(), state.adam, lr, cfg_.adamw);
    model_.clamp(state.params);
  }
  st.total /= double(steps);
  st.align /= double(steps);
  st.recon /= double(steps);
  st.tau = state.params.get("tau").item();
  state.history.push_back(st);
  ++state.epoch;
  return st;
}

void Trainer::run(TrainState& state, std::optional<std::size_t> until,
                  const std::function<void(const TrainState&)>& on_epoch) const {
  const std::size_t last = std::min(until.value_or(cfg_.epochs), cfg_.epochs);
  while (state.epoch < last) {
    run_epoch(state);
    if (on_epoch) on_epoch(state);
  }
}

namespace {

std::string file_name(const std::string& param) { return param + ".mmrt"; }

ordered_json stats_json(const EpochStats& s) {
  return {{"epoch", s.epoch}, {"total", s.total}, {"align", s.align}, {"recon", s.recon}, {"tau", s.tau}, {"lr", s.lr}};
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const TrainConfig& cfg, const TrainState& state) {
  namespace fs = std::filesystem;
  const fs::path tmp = dir.string() + ".partial";
  fs::remove_all(tmp);
  fs::create_directories(tmp / "params");
  fs::create_directories(tmp / "moments");
  ordered_json params = ordered_json::array();
  for (const auto& name : state.params.names()) {
    write_tensor_file(tmp / "params" / file_name(name), state.params.get(name));
    auto it = state.adam.m.find(name);
    if (it != state.adam.m.end()) {
      write_tensor_file(tmp / "moments" / file_name(name + ".m"), it->second);
      write_tensor_file(tmp / "moments" / file_name(name + ".v"), state.adam.v.at(name));
    }
    params.push_back({{"name", name}, {"decay", state.params.decays(name)}, {"moments", it != state.adam.m.end()}});
  }
  ordered_json j;
  j["epoch"] = state.epoch;
  j["adam_step"] = state.adam.step;
  j["rng_state"] = state.rng.state();
  j["config_hash"] = config_hash(cfg);
  j["config"] = ordered_json::parse(train_config_json(cfg));
  j["params"] = params;
  j["history"] = ordered_json::array();
  for (const auto& s : state.history) j["history"].push_back(stats_json(s));
  write_file_atomic(tmp / "checkpoint.json", j.dump(2) + "\n");
  const fs::path old = dir.string() + ".old";
  fs::remove_all(old);
  if (fs::exists(dir)) fs::rename(dir, old);
  fs::rename(tmp, dir);
  fs::remove_all(old);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto j = nlohmann::json::parse(read_file(dir / "checkpoint.json"));
  LoadedCheckpoint out;
  out.config = train_config_from_json(j.at("config").dump());
  if (config_hash(out.config) != j.at("config_hash").get<std::string>()) {
    throw ConfigError("checkpoint config hash does not match its config: " + dir.string());
  }
  auto& st = out.state;
  st.epoch = j.at("epoch").get<std::size_t>();
  st.adam.step = j.at("adam_step").get<std::uint64_t>();
  st.rng.set_state(j.at("rng_state").get<std::string>());
  for (const auto& p : j.at("params")) {
    const auto name = p.at("name").get<std::string>();
    st.params.add(name, read_tensor_file(dir / "params" / file_name(name)), p.at("decay").get<bool>());
    if (p.at("moments").get<bool>()) {
      st.adam.m[name] = read_tensor_file(dir / "moments" / file_name(name + ".m"));
      st.adam.v[name] = read_tensor_file(dir / "moments" / file_name(name + ".v"));
    }
  }
  for (const auto& h : j.at("history")) {
    EpochStats s;
    s.epoch = h.at("epoch").get<std::size_t>();
    s.total = h.at("total").get<double>();
    s.align = h.at("align").get<double>();
    s.recon = h.at("recon").get<double>();
    s.tau = h.at("tau").get<double>();
    s.lr = h.at("lr").get<double>();
    st.history.push_back(s);
  }
  return out;
}

}  // namespace mmr
