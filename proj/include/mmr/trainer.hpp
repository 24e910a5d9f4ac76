#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mmr/model.hpp"

namespace mmr {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch = 64;
  double lr_start = 1e-4;
  double lr_end = 1e-5;
  /// Defaults to epochs / 2.
  std::optional<std::size_t> decay_start;
  AdamWConfig adamw;
  std::uint64_t seed = 0;
  ModelConfig model;

  /// C = 32, batch 16, 100 epochs, lr 1e-3 decaying to 1e-4.
  static TrainConfig desk();
  std::size_t decay_start_epoch() const { return decay_start.value_or(epochs / 2); }
  void validate() const;
};

std::string train_config_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& json);
/// Hex SHA-256 of the canonical config JSON.
std::string config_hash(const TrainConfig& cfg);

/// lr_start until decay_start, then linear to lr_end at the final epoch.
double lr_at(std::size_t epoch, const TrainConfig& cfg);

struct AdamState {
  std::map<std::string, Tensorf> m;
  std::map<std::string, Tensorf> v;
  std::uint64_t step = 0;
};

/// One decoupled-weight-decay Adam update with bias correction. Parameters
/// registered without decay are only moved by the gradient term.
void adamw_step(ParamStore<float>& params, const std::map<std::string, Tensorf>& grads, AdamState& state, double lr,
                const AdamWConfig& cfg);

struct EpochStats {
  std::size_t epoch = 0;
  double total = 0;
  double align = 0;
  double recon = 0;
  double tau = 0;
  double lr = 0;
};

struct TrainState {
  ParamStore<float> params;
  AdamState adam;
  /// Number of completed epochs.
  std::size_t epoch = 0;
  Rng rng;
  std::vector<EpochStats> history;
};

class Trainer {
 public:
  /// Uses the train-split samples; fails before any work if one lacks a configured modality.
  Trainer(TrainConfig cfg, const std::vector<PairedSample>& samples);

  TrainState initial_state() const;
  EpochStats run_epoch(TrainState& state) const;
  /// Runs until `state.epoch == until` (default: cfg.epochs), calling `on_epoch` after each.
  void run(TrainState& state, std::optional<std::size_t> until = std::nullopt,
           const std::function<void(const TrainState&)>& on_epoch = {}) const;

  const TrainConfig& config() const noexcept { return cfg_; }
  const MultiModalModel& model() const noexcept { return model_; }

 private:
  TrainConfig cfg_;
  MultiModalModel model_;
  std::vector<const PairedSample*> train_;
};

/// Writes `<dir>/checkpoint.json` plus parameter and moment TensorFiles. The
/// directory is assembled under `<dir>.partial` and swapped in at the end.
void save_checkpoint(const std::filesystem::path& dir, const TrainConfig& cfg, const TrainState& state);

struct LoadedCheckpoint {
  TrainConfig config;
  TrainState state;
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace mmr
