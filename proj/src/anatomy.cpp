#include "xmodseg/anatomy.hpp"

#include <algorithm>
#include <cmath>

namespace xmodseg::anatomy {

namespace F = torch::nn::functional;
using torch::indexing::Slice;

MindParams MindParams::four_neighborhood() { return MindParams{}; }

MindParams MindParams::eight_neighborhood() {
  MindParams p;
  p.offsets = {{-1, -1}, {-1, 0}, {-1, 1}, {0, -1}, {0, 1}, {1, -1}, {1, 0}, {1, 1}};
  return p;
}

namespace {

void validate_params(const MindParams& params) {
  if (params.radius < 1) {
    throw ValidationError("mind: patch radius must be >= 1");
  }
  if (params.offsets.size() < 2) {
    throw ValidationError("mind: need at least 2 neighborhood offsets");
  }
}

torch::Tensor to_nchw(const torch::Tensor& image, const char* what) {
  if (image.dim() == 2) return image.unsqueeze(0).unsqueeze(0);
  if (image.dim() == 4 && image.size(1) == 1) return image;
  throw ValidationError(std::string(what) + ": expected H x W or N x 1 x H x W input");
}

}  // namespace

torch::Tensor mind_field(const torch::Tensor& images, const MindParams& params) {
  validate_params(params);
  if (images.dim() != 4 || images.size(1) != 1) {
    throw ValidationError("mind_field: expected N x 1 x H x W input");
  }
  const int64_t h = images.size(2);
  const int64_t w = images.size(3);
  int max_off = 0;
  for (const auto& [dr, dc] : params.offsets) {
    max_off = std::max({max_off, std::abs(dr), std::abs(dc)});
  }
  const int64_t min_side = 2 * params.radius + 1 + 2 * max_off;
  if (h < min_side || w < min_side) {
    throw ValidationError("mind: image smaller than " + std::to_string(min_side) +
                          " on a side");
  }

  const int64_t r = params.radius;
  const int64_t pad = r + max_off;
  auto padded = F::pad(images, F::PadFuncOptions({pad, pad, pad, pad})
                                   .mode(torch::kReplicate));

  // Patch SSD per offset: squared pointwise differences of the shifted image,
  // box-summed over the (2r+1)^2 patch window.
  auto box = torch::ones({1, 1, 2 * r + 1, 2 * r + 1}, images.options());
  std::vector<torch::Tensor> ssd;
  ssd.reserve(params.offsets.size());
  // Window covering the original image plus the patch apron.
  auto base = padded.index(
      {Slice(), Slice(), Slice(pad - r, pad + h + r), Slice(pad - r, pad + w + r)});
  for (const auto& [dr, dc] : params.offsets) {
    auto shifted = padded.index({Slice(), Slice(),
                                 Slice(pad - r + dr, pad + h + r + dr),
                                 Slice(pad - r + dc, pad + w + r + dc)});
    auto diff2 = (base - shifted).pow(2);
    ssd.push_back(F::conv2d(diff2, box));  // valid conv -> N x 1 x H x W
  }
  auto k = torch::cat(ssd, 1);  // N x |R| x H x W

  // Per-pixel variance estimate with a relative floor, so constant regions and
  // affine rescales both behave: K and V scale together and the ratio is stable.
  auto v0 = k.mean(1, /*keepdim=*/true);
  auto v = v0 + params.eps_rel * v0.mean({1, 2, 3}, /*keepdim=*/true) + params.eps_abs;

  // exp(-K/V) normalized by its per-pixel max; shifting by the min exponent
  // keeps it stable and makes the max exactly 1.
  auto expo = k / v;
  auto shifted_expo = expo - std::get<0>(expo.min(1, /*keepdim=*/true));
  return torch::exp(-shifted_expo);
}

torch::Tensor mind_descriptor(const torch::Tensor& image, const MindParams& params) {
  if (image.dim() != 2) {
    throw ValidationError("mind_descriptor: expected a 2D image");
  }
  auto field = mind_field(image.unsqueeze(0).unsqueeze(0), params);
  return field.squeeze(0).permute({1, 2, 0}).contiguous();  // H x W x |R|
}

torch::Tensor mind_loss(const torch::Tensor& image1, const torch::Tensor& image2,
                        const MindParams& params) {
  auto a = to_nchw(image1, "mind_loss");
  auto b = to_nchw(image2, "mind_loss");
  if (a.sizes() != b.sizes()) {
    throw ValidationError("mind_loss: shape mismatch");
  }
  return (mind_field(a, params) - mind_field(b, params)).abs().mean();
}

torch::Tensor cc(const torch::Tensor& image1, const torch::Tensor& image2) {
  if (image1.sizes() != image2.sizes()) {
    throw ValidationError("cc: shape mismatch");
  }
  auto x = image1.flatten();
  auto y = image2.flatten();
  auto xc = x - x.mean();
  auto yc = y - y.mean();
  auto var_x = xc.pow(2).mean();
  auto var_y = yc.pow(2).mean();
  if (var_x.item<double>() < 1e-12 || var_y.item<double>() < 1e-12) {
    warn("cc: constant input, correlation undefined, returning 0");
    return torch::zeros({}, x.options());
  }
  return (xc * yc).mean() / (var_x.sqrt() * var_y.sqrt());
}

AnatomyParts anatomy_loss_parts(const torch::Tensor& adapted, const torch::Tensor& source,
                                const AnatomyWeights& weights, const MindParams& params) {
  AnatomyParts parts;
  parts.cc_term = 1.0 - cc(adapted, source);
  parts.mind_term = mind_loss(adapted, source, params);
  parts.total = weights.cc * parts.cc_term + weights.mind * parts.mind_term;
  return parts;
}

torch::Tensor anatomy_loss(const torch::Tensor& adapted, const torch::Tensor& source,
                           const AnatomyWeights& weights, const MindParams& params) {
  return anatomy_loss_parts(adapted, source, weights, params).total;
}

}  // namespace xmodseg::anatomy
