#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>

#include "xmodseg/common.hpp"
#include "xmodseg/dataio.hpp"

namespace xmodseg::phantom {

// Appearance shift applied to domain B on top of the shared anatomy model.
enum class Gap { GammaTexture, BiasField, InvertContrast };

std::string gap_to_string(Gap gap);
Gap gap_from_string(const std::string& name);

struct PhantomSpec {
  int64_t image_size = 64;
  int64_t n_train_a = 16;
  int64_t n_train_b = 16;
  int64_t n_test_b = 8;
  uint64_t seed = 0;
  Gap gap = Gap::GammaTexture;
  bool artifact_streaks = false;
};

// Tissue label map: 0 background, 1 body, 2 organ, 3 vessel.
struct TissueMap {
  torch::Tensor labels;  // H x W, uint8
};

// Random anatomy: an elliptical body, a lobulated organ strictly inside it,
// and up to 3 thin vessel curves inside the organ. Resamples internally until
// the containment and size constraints hold (bounded retries).
TissueMap sample_anatomy(Rng& rng, int64_t size);

// The segmentation target: organ plus vessels as one binary mask.
torch::Tensor organ_mask(const TissueMap& tissues);

struct RenderParams {
  double noise_sigma = 0.02;  // additive Gaussian, as a fraction of the range
  double blur_sigma = 0.5;    // 0 disables smoothing
};

dataio::ImageSample render_domain_a(const TissueMap& tissues, Rng& rng,
                                    const RenderParams& params = {});
dataio::ImageSample render_domain_b(const TissueMap& tissues, Rng& rng, Gap gap,
                                    bool artifact_streaks = false,
                                    const RenderParams& params = {});

// Writes the full unpaired dataset tree (atomically: assembled in a temp
// directory, renamed into place) and returns a scan of the result. Domain A
// carries masks; domain-B training images are unlabeled; domain-B test masks
// land in domainB/labels and are used for evaluation only.
dataio::DatasetManifest generate_dataset(const PhantomSpec& spec,
                                         const std::filesystem::path& out_dir);

}  // namespace xmodseg::phantom
