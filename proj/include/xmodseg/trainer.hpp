#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>

#include "xmodseg/config.hpp"
#include "xmodseg/dataio.hpp"
#include "xmodseg/metrics.hpp"
#include "xmodseg/networks.hpp"

namespace xmodseg::trainer {

// One optimization step's outcome: the five objective terms plus bookkeeping.
struct StepRecord {
  int64_t step = 0;
  double adv = 0.0;
  double idt = 0.0;
  double seg = 0.0;
  double pct = 0.0;
  double ac = 0.0;
  double d_loss = 0.0;
  double total = 0.0;
  double ac_cc = 0.0;
  double ac_mind = 0.0;
  double lr = 0.0;
  uint64_t rng = 0;  // per-step stream key, for resume audits
  double t_ms = 0.0;
};
nlohmann::json step_to_json(const StepRecord& record);

struct Batch {
  torch::Tensor image_a;  // 1 x 1 x H x W, in [-1, 1]
  torch::Tensor mask_a;   // 1 x 1 x H x W, float {0, 1}
  torch::Tensor image_b;  // 1 x 1 x H x W
  std::string id_a;
  std::string id_b;
};

class Trainer {
 public:
  // Fresh run writing into out_dir (log, resolved config, checkpoints, eval).
  Trainer(const TrainConfig& config, const dataio::DatasetManifest& manifest,
          std::filesystem::path out_dir);

  // Continue from a checkpoint directory. A config override must hash-match
  // the stored one unless force is set (then the override wins).
  static Trainer resume(const std::filesystem::path& checkpoint_dir,
                        const dataio::DatasetManifest& manifest,
                        std::filesystem::path out_dir,
                        const std::optional<TrainConfig>& override_config = std::nullopt,
                        bool force = false);

  // The batch used at a given step; a pure function of (seed, step).
  Batch sample_batch(int64_t step);

  // One D-then-G update at the current step counter.
  StepRecord train_step();

  // Steps until total_steps, appending JSON-lines log records and honoring the
  // checkpoint / eval cadences.
  void run();

  // Current segmenter on the labeled domain-B entries.
  metrics::MetricsReport evaluate();

  void save_checkpoint(const std::filesystem::path& dir);

  int64_t next_step() const { return next_step_; }
  const TrainConfig& config() const { return config_; }
  networks::ModelBundle& bundle() { return bundle_; }
  double lr_at(int64_t step) const;

 private:
  Trainer(const TrainConfig& config, const dataio::DatasetManifest& manifest,
          std::filesystem::path out_dir, bool fresh_init);
  void build_optimizers();
  void set_lr(double lr);
  const dataio::ImageSample& cached_image(const std::filesystem::path& path);
  const dataio::MaskSample& cached_mask(const std::filesystem::path& path);

  TrainConfig config_;
  dataio::DatasetManifest manifest_;
  std::vector<const dataio::ManifestEntry*> b_train_;
  std::filesystem::path out_dir_;
  networks::ModelBundle bundle_;
  std::unique_ptr<torch::optim::Adam> opt_g_;
  std::unique_ptr<torch::optim::Adam> opt_d_;
  int64_t next_step_ = 0;
  std::unordered_map<std::string, dataio::ImageSample> image_cache_;
  std::unordered_map<std::string, dataio::MaskSample> mask_cache_;
};

// Inference over a directory of .img files: translator only.
void adapt_images(networks::ModelBundle& bundle, const std::filesystem::path& input_dir,
                  const std::filesystem::path& output_dir, bool png_previews = false);

// Inference over a directory of .img files: segmenter only, thresholded at 0.5.
void segment_images(networks::ModelBundle& bundle, const std::filesystem::path& input_dir,
                    const std::filesystem::path& output_dir, bool png_previews = false);

}  // namespace xmodseg::trainer
