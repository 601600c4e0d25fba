#include "xmodseg/losses.hpp"

#include <cmath>
#include <numeric>

namespace xmodseg::losses {

namespace F = torch::nn::functional;

torch::Tensor adv_loss_d(const torch::Tensor& logits_real, const torch::Tensor& logits_fake,
                         AdvVariant variant) {
  if (variant == AdvVariant::LeastSquares) {
    return 0.5 * ((logits_real - 1).pow(2).mean() + logits_fake.pow(2).mean());
  }
  // softplus(-x) = -log(sigmoid(x)); softplus(x) = -log(1 - sigmoid(x))
  return torch::softplus(-logits_real).mean() + torch::softplus(logits_fake).mean();
}

torch::Tensor adv_loss_g(const torch::Tensor& logits_fake, AdvVariant variant) {
  if (variant == AdvVariant::LeastSquares) {
    return (logits_fake - 1).pow(2).mean();
  }
  return torch::softplus(-logits_fake).mean();
}

torch::Tensor identity_loss(const torch::Tensor& translated_b, const torch::Tensor& image_b) {
  if (translated_b.sizes() != image_b.sizes()) {
    throw ValidationError("identity_loss: shape mismatch");
  }
  return (translated_b - image_b).pow(2).mean();
}

torch::Tensor dice_seg_loss(const torch::Tensor& prob_map, const torch::Tensor& gt_mask,
                            double eps) {
  if (prob_map.sizes() != gt_mask.sizes()) {
    throw ValidationError("dice_seg_loss: shape mismatch");
  }
  auto p = prob_map.flatten();
  auto s = gt_mask.to(p.scalar_type()).flatten();
  auto inter = (p * s).sum();
  return 1.0 - (2.0 * inter + eps) / (p.sum() + s.sum() + eps);
}

torch::Tensor nce_term(const torch::Tensor& anchor, const torch::Tensor& positive,
                       const torch::Tensor& negatives, double alpha) {
  if (anchor.dim() != 1 || positive.dim() != 1 || negatives.dim() != 2) {
    throw ValidationError("nce_term: expected anchor/positive vectors and a negatives matrix");
  }
  if (anchor.size(0) != positive.size(0) || anchor.size(0) != negatives.size(1)) {
    throw ValidationError("nce_term: dimension mismatch");
  }
  if (negatives.size(0) < 1) {
    throw ValidationError("nce_term: need at least one negative");
  }
  if (!(alpha > 0)) {
    throw ValidationError("nce_term: temperature must be positive");
  }
  auto pos_logit = (anchor * positive).sum().unsqueeze(0);
  auto neg_logits = negatives.matmul(anchor);
  auto logits = torch::cat({pos_logit, neg_logits}) / alpha;
  return torch::logsumexp(logits, 0) - logits[0];
}

torch::Tensor sample_patch_locations(Rng& rng, int64_t capacity, int64_t count) {
  if (capacity < 1) {
    throw ValidationError("sample_patch_locations: empty sampling domain");
  }
  if (count < 1) {
    throw ValidationError("sample_patch_locations: count must be positive");
  }
  if (count > capacity) {
    warn("sample_patch_locations: requested " + std::to_string(count) +
         " locations from a map with " + std::to_string(capacity) +
         ", capping at capacity");
    count = capacity;
  }
  // Partial Fisher-Yates; plain modulo keeps the draw identical across
  // standard-library implementations.
  std::vector<int64_t> pool(capacity);
  std::iota(pool.begin(), pool.end(), 0);
  auto out = torch::empty({count}, torch::kInt64);
  auto acc = out.accessor<int64_t, 1>();
  for (int64_t i = 0; i < count; ++i) {
    const uint64_t j = i + rng() % static_cast<uint64_t>(capacity - i);
    std::swap(pool[i], pool[j]);
    acc[i] = pool[i];
  }
  return out;
}

torch::Tensor pct_loss_at(networks::Generator& generator, networks::ProjectionHeads& heads,
                          const torch::Tensor& image_a, const torch::Tensor& adapted,
                          const std::vector<int>& tap_ids,
                          const std::vector<torch::Tensor>& locations, double alpha) {
  if (locations.size() != tap_ids.size()) {
    throw ValidationError("pct_loss: one location set per tapped layer required");
  }
  if (!(alpha > 0)) {
    throw ValidationError("pct_loss: temperature must be positive");
  }
  auto source_feats = generator->encoder_features(image_a, tap_ids);
  auto adapted_feats = generator->encoder_features(adapted, tap_ids);

  torch::Tensor weighted_sum = torch::zeros({}, source_feats[0].options());
  int64_t total_samples = 0;
  for (size_t l = 0; l < tap_ids.size(); ++l) {
    const int64_t s = locations[l].numel();
    if (s == 1) {
      warn("pct_loss: a single sampled location leaves no negatives for layer tap " +
           std::to_string(tap_ids[l]));
    }
    auto queries = heads->project(l, adapted_feats[l], locations[l]);  // S x D
    auto keys = heads->project(l, source_feats[l], locations[l]);      // S x D
    auto logits = queries.matmul(keys.t()) / alpha;                    // S x S
    auto target = torch::arange(s, torch::kInt64);
    auto layer_loss = F::cross_entropy(logits, target);
    weighted_sum = weighted_sum + layer_loss * static_cast<double>(s);
    total_samples += s;
  }
  return weighted_sum / static_cast<double>(total_samples);
}

torch::Tensor pct_loss(networks::Generator& generator, networks::ProjectionHeads& heads,
                       const torch::Tensor& image_a, const torch::Tensor& adapted,
                       const std::vector<int>& tap_ids, int64_t samples_per_layer,
                       double alpha, Rng& rng) {
  // Tap shapes are needed to bound the draw; a cheap no-grad pass gives them
  // without building graphs.
  std::vector<int64_t> capacities;
  {
    torch::NoGradGuard no_grad;
    auto probe = generator->encoder_features(image_a, tap_ids);
    for (const auto& f : probe) capacities.push_back(f.size(2) * f.size(3));
  }
  std::vector<torch::Tensor> locations;
  locations.reserve(tap_ids.size());
  for (size_t l = 0; l < tap_ids.size(); ++l) {
    locations.push_back(sample_patch_locations(rng, capacities[l], samples_per_layer));
  }
  return pct_loss_at(generator, heads, image_a, adapted, tap_ids, locations, alpha);
}

LossBreakdown total_loss(const LossParts& parts, const LossWeights& weights) {
  auto check = [](const torch::Tensor& t, const char* name) -> double {
    if (!t.defined()) {
      throw ValidationError(std::string("total_loss: missing part ") + name);
    }
    const double v = t.item<double>();
    if (!std::isfinite(v)) {
      throw NonFiniteLossError(name);
    }
    return v;
  };
  LossBreakdown breakdown;
  breakdown.adv = check(parts.adv, "adv");
  breakdown.idt = check(parts.idt, "idt");
  breakdown.seg = check(parts.seg, "seg");
  breakdown.pct = check(parts.pct, "pct");
  breakdown.ac = check(parts.ac, "ac");
  breakdown.total = weights.adv * parts.adv + weights.idt * parts.idt +
                    weights.seg * parts.seg + weights.pct * parts.pct +
                    weights.ac * parts.ac;
  return breakdown;
}

}  // namespace xmodseg::losses
