#pragma once

#include <torch/torch.h>

#include <vector>

#include "xmodseg/anatomy.hpp"
#include "xmodseg/common.hpp"
#include "xmodseg/networks.hpp"

namespace xmodseg::losses {

// Weighted combination settings for the full objective. Toggling a weight to
// zero removes that term from the gradient.
struct LossWeights {
  double adv = 1.0;
  double idt = 1.0;
  double seg = 1.0;
  double pct = 1.0;
  double ac = 1.0;
  double alpha = 0.07;  // contrastive temperature
  double cc = 1.0;      // sub-weights inside the anatomy term
  double mind = 1.0;
};

enum class AdvVariant { Log, LeastSquares };

// Discriminator objective: push real logits up, fake logits down. The log form
// uses softplus for numerically safe -log(sigmoid(.)).
torch::Tensor adv_loss_d(const torch::Tensor& logits_real, const torch::Tensor& logits_fake,
                         AdvVariant variant = AdvVariant::Log);
// Non-saturating generator objective: push fake logits up.
torch::Tensor adv_loss_g(const torch::Tensor& logits_fake,
                         AdvVariant variant = AdvVariant::Log);

// Mean squared deviation of the translator's output on a target-domain image
// from that image itself.
torch::Tensor identity_loss(const torch::Tensor& translated_b, const torch::Tensor& image_b);

// Soft overlap loss: 1 - (2*sum(p*s) + eps) / (sum(p) + sum(s) + eps).
torch::Tensor dice_seg_loss(const torch::Tensor& prob_map, const torch::Tensor& gt_mask,
                            double eps = 1.0);

// One InfoNCE term: -log of the softmax probability that the anchor picks its
// positive out of {positive} + negatives, at temperature alpha.
torch::Tensor nce_term(const torch::Tensor& anchor, const torch::Tensor& positive,
                       const torch::Tensor& negatives, double alpha = 0.07);

// Draw `count` distinct flat indices from [0, capacity); capped (with a
// warning) when count exceeds capacity.
torch::Tensor sample_patch_locations(Rng& rng, int64_t capacity, int64_t count);

// Multilayer patch-contrastive loss: tap encoder features of the source image
// and of its adapted output at shared random locations, project both through
// the per-layer heads, and ask each adapted-patch vector to match the source
// vector from the same spot against the other spots of the same layer.
// Gradients flow through both encoder passes and the heads.
torch::Tensor pct_loss(networks::Generator& generator, networks::ProjectionHeads& heads,
                       const torch::Tensor& image_a, const torch::Tensor& adapted,
                       const std::vector<int>& tap_ids, int64_t samples_per_layer,
                       double alpha, Rng& rng);

// Deterministic core with caller-chosen locations (one index tensor per tap).
torch::Tensor pct_loss_at(networks::Generator& generator, networks::ProjectionHeads& heads,
                          const torch::Tensor& image_a, const torch::Tensor& adapted,
                          const std::vector<int>& tap_ids,
                          const std::vector<torch::Tensor>& locations, double alpha);

struct LossParts {
  torch::Tensor adv;
  torch::Tensor idt;
  torch::Tensor seg;
  torch::Tensor pct;
  torch::Tensor ac;
};

struct LossBreakdown {
  torch::Tensor total;
  double adv = 0.0;
  double idt = 0.0;
  double seg = 0.0;
  double pct = 0.0;
  double ac = 0.0;
};

// Weighted sum of the five parts. Any non-finite part aborts with an error
// naming the term.
LossBreakdown total_loss(const LossParts& parts, const LossWeights& weights);

}  // namespace xmodseg::losses
