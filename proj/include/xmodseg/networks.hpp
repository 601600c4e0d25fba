#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "xmodseg/common.hpp"
#include "json.hpp"

namespace xmodseg::networks {

// Architecture hyperparameters, stored alongside checkpoints so a saved model
// can be rebuilt exactly and mismatches are caught on load.
struct ArchPlan {
  int64_t gen_width = 64;
  int64_t disc_width = 64;
  int64_t seg_width = 32;
  int64_t head_dim = 256;
  int64_t residual_blocks = 9;
  std::vector<int> taps = {0, 1, 2, 3, 8};
  std::string scse_combine = "sum";  // "sum" or "max"
  bool seg_scse = true;              // false gives the plain U-Net variant

  bool operator==(const ArchPlan&) const = default;
};
nlohmann::json plan_to_json(const ArchPlan& plan);
ArchPlan plan_from_json(const nlohmann::json& j);

// Residual block: two 3x3 convs with reflection padding and instance norm,
// added back onto the input.
struct ResBlockImpl : torch::nn::Module {
  explicit ResBlockImpl(int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);
  torch::nn::Sequential body{nullptr};
};
TORCH_MODULE(ResBlock);

struct TapResult {
  torch::Tensor output;
  std::vector<torch::Tensor> taps;
};

// Image-to-image translator: 7x7 stem, two stride-2 downsampling stages, nine
// residual blocks, two upsampling stages, 7x7 output conv with tanh. The stem,
// the downsampling stages, and the first five residual blocks form the encoder;
// intermediate activations there can be tapped by id:
//   0 = network input, 1 = stem, 2 = down1, 3 = down2, 4..8 = res1..res5.
struct GeneratorImpl : torch::nn::Module {
  explicit GeneratorImpl(int64_t width = 64, int64_t n_res = 9);

  torch::Tensor forward(const torch::Tensor& x);
  TapResult forward_with_taps(const torch::Tensor& x, const std::vector<int>& tap_ids);
  std::vector<torch::Tensor> encoder_features(const torch::Tensor& x,
                                              const std::vector<int>& tap_ids);

  static int tap_count() { return 9; }
  // Channel count of each tappable activation.
  static std::vector<int64_t> tap_channels(int64_t width);

  int64_t width;
  int64_t n_res;
  torch::nn::Sequential stem{nullptr}, down1{nullptr}, down2{nullptr};
  torch::nn::ModuleList res_blocks{nullptr};
  torch::nn::Sequential up1{nullptr}, up2{nullptr}, out_stage{nullptr};
};
TORCH_MODULE(Generator);

// Patch discriminator: three stride-2 conv stages then a 1x1 projection to a
// spatial logit map (strictly smaller than the input).
struct DiscriminatorImpl : torch::nn::Module {
  explicit DiscriminatorImpl(int64_t width = 64);
  torch::Tensor forward(const torch::Tensor& x);
  int64_t width;
  torch::nn::Sequential stages{nullptr};
};
TORCH_MODULE(Discriminator);

// Concurrent spatial and channel squeeze-excitation. The channel gate pools
// globally and passes through a 2-layer bottleneck MLP; the spatial gate is a
// 1x1 conv. Branches combine by elementwise sum (default) or max.
struct SCSEBlockImpl : torch::nn::Module {
  enum class Combine { Sum, Max };
  SCSEBlockImpl(int64_t channels, Combine combine = Combine::Sum);
  torch::Tensor forward(const torch::Tensor& x);
  // Test hook: substitute one or both gates with fixed tensors.
  torch::Tensor forward_with_gates(const torch::Tensor& x,
                                   const std::optional<torch::Tensor>& channel_gate,
                                   const std::optional<torch::Tensor>& spatial_gate);
  int64_t channels;
  Combine combine;
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
  torch::nn::Conv2d spatial{nullptr};
};
TORCH_MODULE(SCSEBlock);

// 5-level U-shaped segmenter with skip connections; each level's output passes
// through an scSE block (unless disabled), final 1x1 conv + sigmoid gives a
// single-channel probability map the same size as the input.
struct SegmenterImpl : torch::nn::Module {
  SegmenterImpl(int64_t width = 32, bool use_scse = true,
                SCSEBlockImpl::Combine combine = SCSEBlockImpl::Combine::Sum);
  torch::Tensor forward(const torch::Tensor& x);
  int64_t width;
  bool use_scse;
  torch::nn::ModuleList enc{nullptr};      // 5 double-conv levels
  torch::nn::ModuleList enc_scse{nullptr};
  torch::nn::ModuleList ups{nullptr};      // 4 transpose convs
  torch::nn::ModuleList dec{nullptr};      // 4 double-conv levels
  torch::nn::ModuleList dec_scse{nullptr};
  torch::nn::Conv2d head{nullptr};
};
TORCH_MODULE(Segmenter);

// One 2-layer MLP per tapped encoder layer, mapping per-location feature
// vectors to a fixed dimension and normalizing them to unit length.
struct ProjectionHeadsImpl : torch::nn::Module {
  ProjectionHeadsImpl(const std::vector<int64_t>& input_channels, int64_t out_dim = 256);
  // features: 1 x C x H x W; locations: flat spatial indices into H*W.
  // Returns |locations| x out_dim with unit rows.
  torch::Tensor project(size_t layer_index, const torch::Tensor& features,
                        const torch::Tensor& locations);
  size_t layer_count() const { return mlps->size(); }
  int64_t out_dim;
  std::vector<int64_t> input_channels;
  torch::nn::ModuleList mlps{nullptr};
};
TORCH_MODULE(ProjectionHeads);

// Per-layer unit feature vectors at the given spatial locations.
std::vector<torch::Tensor> sample_patch_features(
    ProjectionHeads& heads, const std::vector<torch::Tensor>& feature_stack,
    const std::vector<torch::Tensor>& locations);

struct ModelBundle {
  ArchPlan plan;
  uint64_t seed = 0;
  int64_t iteration = 0;
  Generator generator{nullptr};
  Discriminator discriminator{nullptr};
  Segmenter segmenter{nullptr};
  ProjectionHeads heads{nullptr};
};

// Fresh bundle with seeded normal(0, 0.02) weight initialization.
ModelBundle init_bundle(const ArchPlan& plan, uint64_t seed);

// dir/manifest.json + dir/params.bin; parameters round-trip bit-exactly.
void save_bundle(const ModelBundle& bundle, const std::filesystem::path& dir);
ModelBundle load_bundle(const std::filesystem::path& dir);

// Raw named-tensor blob used inside checkpoints.
void save_param_blob(const std::vector<std::pair<std::string, torch::Tensor>>& tensors,
                     const std::filesystem::path& path);
std::vector<std::pair<std::string, torch::Tensor>> load_param_blob(
    const std::filesystem::path& path);

std::vector<std::pair<std::string, torch::Tensor>> named_bundle_tensors(
    const ModelBundle& bundle);

// Machine-checkable structure summary: block counts, tap shapes on a probe
// input, parameter counts. Runs a probe forward pass, hence non-const.
nlohmann::json architecture_audit(ModelBundle& bundle, int64_t probe_size = 64);

}  // namespace xmodseg::networks
