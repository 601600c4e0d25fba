#pragma once

#include <torch/torch.h>

#include <utility>
#include <vector>

#include "xmodseg/common.hpp"

namespace xmodseg::anatomy {

// Parameters for the modality-independent neighborhood descriptor.
struct MindParams {
  int radius = 1;  // patch half-size, 1 means 3x3 patches
  std::vector<std::pair<int, int>> offsets = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}};
  double eps_rel = 1e-8;   // scaled by the mean patch-variance estimate
  double eps_abs = 1e-12;

  static MindParams four_neighborhood();
  static MindParams eight_neighborhood();
};

// Per-pixel descriptor for a single 2D image, shape H x W x |offsets|,
// values in (0, 1] with max over the offset axis equal to 1 at every pixel.
torch::Tensor mind_descriptor(const torch::Tensor& image, const MindParams& params = {});

// Batched core: input N x 1 x H x W, output N x |offsets| x H x W.
torch::Tensor mind_field(const torch::Tensor& images, const MindParams& params = {});

// Mean absolute difference between the descriptor fields of two images.
// Accepts matching 2D (H x W) or 4D (N x 1 x H x W) tensors.
torch::Tensor mind_loss(const torch::Tensor& image1, const torch::Tensor& image2,
                        const MindParams& params = {});

// Pearson correlation over all pixels. Constant input gives 0 with a warning.
torch::Tensor cc(const torch::Tensor& image1, const torch::Tensor& image2);

struct AnatomyWeights {
  double cc = 1.0;
  double mind = 1.0;
};

struct AnatomyParts {
  torch::Tensor total;     // cc_weight * (1 - cc) + mind_weight * mind_loss
  torch::Tensor cc_term;   // 1 - cc, unweighted
  torch::Tensor mind_term; // mind_loss, unweighted
};

// Structure-preservation penalty between an adapted image and its source.
// Minimizing it pushes the correlation toward +1 and the descriptor fields
// together, so the mapping may restyle intensities but not anatomy.
AnatomyParts anatomy_loss_parts(const torch::Tensor& adapted, const torch::Tensor& source,
                                const AnatomyWeights& weights = {},
                                const MindParams& params = {});
torch::Tensor anatomy_loss(const torch::Tensor& adapted, const torch::Tensor& source,
                           const AnatomyWeights& weights = {},
                           const MindParams& params = {});

}  // namespace xmodseg::anatomy
