#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "xmodseg/losses.hpp"
#include "xmodseg/networks.hpp"
#include "json.hpp"

namespace xmodseg::trainer {

struct OptimSettings {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
};

struct TrainSettings {
  int64_t image_size = 64;
  int64_t batch_size = 1;
  int64_t total_steps = 1000;
  int64_t checkpoint_every = 1000;  // 0 disables periodic checkpoints
  int64_t eval_every = 0;           // 0 disables periodic evaluation
  uint64_t seed = 0;
  int64_t samples_per_layer = 256;
  int threads = 1;
};

// Ablation switches; each only zeroes the corresponding weight.
struct Toggles {
  bool pct_off = false;
  bool mind_off = false;
  bool cc_off = false;
};

struct TrainConfig {
  losses::LossWeights weights;
  networks::ArchPlan model;
  OptimSettings optim;
  TrainSettings train;
  Toggles toggles;
  losses::AdvVariant adv_variant = losses::AdvVariant::Log;

  // Weights with the ablation toggles applied.
  losses::LossWeights effective_weights() const;
};

// Parse and validate; unknown keys are rejected with their dotted path,
// missing keys fall back to defaults.
TrainConfig config_from_json(const nlohmann::json& j);
TrainConfig load_config(const std::filesystem::path& path);

// Fully materialized round-trippable form (every field present).
nlohmann::json config_to_json(const TrainConfig& config);

// Stable fingerprint of the materialized config, as a hex string.
std::string config_hash(const TrainConfig& config);

}  // namespace xmodseg::trainer
