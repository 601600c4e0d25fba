#include "xmodseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <vector>

#include "json.hpp"

namespace xmodseg::phantom {

namespace F = torch::nn::functional;
namespace fs = std::filesystem;

namespace {

constexpr double kPi = std::numbers::pi;
constexpr int kMaxAnatomyAttempts = 200;

// Tissue intensity lookup in [0, 1]: background, body, organ, vessel.
constexpr float kTissueLut[4] = {0.08f, 0.35f, 0.62f, 0.85f};

double uniform(Rng& rng, double lo, double hi) {
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;  // [0, 1)
  return lo + u * (hi - lo);
}

// Box-Muller from the raw engine, so draws do not depend on the standard
// library's distribution implementations.
double gaussian(Rng& rng) {
  const double u1 = (static_cast<double>(rng() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
  const double u2 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
}

torch::Tensor noise_field(Rng& rng, int64_t size) {
  auto t = torch::empty({size, size}, torch::kFloat32);
  auto acc = t.accessor<float, 2>();
  for (int64_t r = 0; r < size; ++r) {
    for (int64_t c = 0; c < size; ++c) {
      acc[r][c] = static_cast<float>(gaussian(rng));
    }
  }
  return t;
}

torch::Tensor gaussian_blur(const torch::Tensor& image, double sigma) {
  if (sigma <= 0) return image;
  const int64_t radius = static_cast<int64_t>(std::ceil(3.0 * sigma));
  auto xs = torch::arange(-radius, radius + 1, torch::kFloat32);
  auto kernel = torch::exp(-(xs * xs) / static_cast<float>(2.0 * sigma * sigma));
  kernel = kernel / kernel.sum();
  auto nchw = image.view({1, 1, image.size(0), image.size(1)});
  auto padded = F::pad(nchw, F::PadFuncOptions({radius, radius, 0, 0}).mode(torch::kReplicate));
  auto h = F::conv2d(padded, kernel.view({1, 1, 1, 2 * radius + 1}));
  padded = F::pad(h, F::PadFuncOptions({0, 0, radius, radius}).mode(torch::kReplicate));
  auto v = F::conv2d(padded, kernel.view({1, 1, 2 * radius + 1, 1}));
  return v.view({image.size(0), image.size(1)});
}

struct Ellipse {
  double cx, cy, a, b, theta;
  bool contains(double x, double y, double margin = 0.0) const {
    const double dx = x - cx;
    const double dy = y - cy;
    const double u = dx * std::cos(theta) + dy * std::sin(theta);
    const double v = -dx * std::sin(theta) + dy * std::cos(theta);
    const double ea = a - margin;
    const double eb = b - margin;
    if (ea <= 0 || eb <= 0) return false;
    return (u * u) / (ea * ea) + (v * v) / (eb * eb) <= 1.0;
  }
};

struct StarBlob {
  double cx, cy, r0;
  double amp[4];    // harmonics k = 2..5
  double phase[4];
  double radius_at(double phi) const {
    double r = 1.0;
    for (int k = 0; k < 4; ++k) {
      r += amp[k] * std::cos((k + 2) * phi + phase[k]);
    }
    return r0 * r;
  }
  bool contains(double x, double y) const {
    const double dx = x - cx;
    const double dy = y - cy;
    const double d = std::hypot(dx, dy);
    if (d < 1e-9) return true;
    return d <= radius_at(std::atan2(dy, dx));
  }
};

}  // namespace

std::string gap_to_string(Gap gap) {
  switch (gap) {
    case Gap::GammaTexture: return "gamma-texture";
    case Gap::BiasField: return "bias-field";
    case Gap::InvertContrast: return "invert-contrast";
  }
  throw ValidationError("unknown gap value");
}

Gap gap_from_string(const std::string& name) {
  if (name == "gamma-texture") return Gap::GammaTexture;
  if (name == "bias-field") return Gap::BiasField;
  if (name == "invert-contrast") return Gap::InvertContrast;
  throw ValidationError("unknown gap '" + name +
                        "'; expected gamma-texture, bias-field, or invert-contrast");
}

TissueMap sample_anatomy(Rng& rng, int64_t size) {
  if (size < 32) {
    throw ValidationError("sample_anatomy: image size must be at least 32");
  }
  const double s = static_cast<double>(size);

  for (int attempt = 0; attempt < kMaxAnatomyAttempts; ++attempt) {
    Ellipse body;
    body.cx = (0.5 + uniform(rng, -0.03, 0.03)) * s;
    body.cy = (0.5 + uniform(rng, -0.03, 0.03)) * s;
    body.a = uniform(rng, 0.36, 0.46) * s;
    body.b = uniform(rng, 0.36, 0.46) * s;
    body.theta = uniform(rng, 0.0, kPi);

    StarBlob organ;
    organ.cx = body.cx + uniform(rng, -0.08, 0.08) * s;
    organ.cy = body.cy + uniform(rng, -0.08, 0.08) * s;
    organ.r0 = uniform(rng, 0.16, 0.26) * s;
    for (int k = 0; k < 4; ++k) {
      organ.amp[k] = uniform(rng, -0.04, 0.04);
      organ.phase[k] = uniform(rng, 0.0, 2.0 * kPi);
    }

    const int n_vessels = static_cast<int>(rng() % 4);  // 0..3
    struct Bezier {
      double x0, y0, x1, y1, x2, y2;
    };
    std::vector<Bezier> vessels;
    for (int v = 0; v < n_vessels; ++v) {
      // Control points near the organ center, scaled by its radius.
      Bezier bz;
      const double r = organ.r0 * 0.8;
      bz.x0 = organ.cx + uniform(rng, -r, r);
      bz.y0 = organ.cy + uniform(rng, -r, r);
      bz.x1 = organ.cx + uniform(rng, -r, r);
      bz.y1 = organ.cy + uniform(rng, -r, r);
      bz.x2 = organ.cx + uniform(rng, -r, r);
      bz.y2 = organ.cy + uniform(rng, -r, r);
      vessels.push_back(bz);
    }

    auto labels = torch::zeros({size, size}, torch::kUInt8);
    auto acc = labels.accessor<uint8_t, 2>();
    bool body_touches_border = false;
    bool organ_ok = true;
    int64_t organ_pixels = 0;
    for (int64_t r = 0; r < size && organ_ok; ++r) {
      for (int64_t c = 0; c < size; ++c) {
        const double y = r + 0.5;
        const double x = c + 0.5;
        if (!body.contains(x, y)) continue;
        if (r == 0 || c == 0 || r == size - 1 || c == size - 1) {
          body_touches_border = true;
        }
        acc[r][c] = 1;
        if (organ.contains(x, y)) {
          // Strict containment: the organ needs a body-pixel margin around it.
          if (!body.contains(x, y, 2.0)) {
            organ_ok = false;
            break;
          }
          acc[r][c] = 2;
          ++organ_pixels;
        }
      }
    }
    if (body_touches_border || !organ_ok) continue;
    const double fraction = static_cast<double>(organ_pixels) / (s * s);
    if (fraction < 0.05 || fraction > 0.35) continue;

    // Vessels: thin curves rasterized only where the organ already is.
    for (const auto& bz : vessels) {
      const int steps = static_cast<int>(4 * s);
      for (int i = 0; i <= steps; ++i) {
        const double t = static_cast<double>(i) / steps;
        const double mt = 1.0 - t;
        const double x = mt * mt * bz.x0 + 2 * mt * t * bz.x1 + t * t * bz.x2;
        const double y = mt * mt * bz.y0 + 2 * mt * t * bz.y1 + t * t * bz.y2;
        const int64_t r = static_cast<int64_t>(std::floor(y));
        const int64_t c = static_cast<int64_t>(std::floor(x));
        if (r < 0 || c < 0 || r >= size || c >= size) continue;
        if (acc[r][c] == 2) acc[r][c] = 3;
      }
    }

    return TissueMap{labels};
  }
  throw std::runtime_error("sample_anatomy: constraints not met after " +
                           std::to_string(kMaxAnatomyAttempts) + " attempts");
}

torch::Tensor organ_mask(const TissueMap& tissues) {
  return (tissues.labels >= 2).to(torch::kUInt8);
}

namespace {

torch::Tensor base_render(const TissueMap& tissues, Rng& rng, const RenderParams& params) {
  auto lut = torch::from_blob(const_cast<float*>(kTissueLut), {4}, torch::kFloat32).clone();
  auto u = lut.index_select(0, tissues.labels.to(torch::kInt64).flatten())
               .view(tissues.labels.sizes());
  if (params.noise_sigma > 0) {
    u = u + static_cast<float>(params.noise_sigma) * noise_field(rng, tissues.labels.size(0));
  }
  u = gaussian_blur(u, params.blur_sigma);
  return u;
}

dataio::ImageSample finalize(torch::Tensor u, const std::string& id_hint) {
  dataio::ImageSample sample;
  sample.pixels = (2.0f * torch::clamp(u, 0.0f, 1.0f) - 1.0f).contiguous();
  sample.spacing = {1.0f, 1.0f};
  sample.id = id_hint;
  return sample;
}

void add_streaks(torch::Tensor& u, Rng& rng) {
  const int64_t size = u.size(0);
  const double s = static_cast<double>(size);
  const int n = 2 + static_cast<int>(rng() % 4);  // 2..5 lines
  auto acc = u.accessor<float, 2>();
  for (int i = 0; i < n; ++i) {
    const double theta = uniform(rng, 0.0, kPi);
    const double offset = uniform(rng, -0.45, 0.45) * s;
    const double amp = uniform(rng, 0.05, 0.12) * (rng() % 2 == 0 ? 1.0 : -1.0);
    const double nx = std::cos(theta);
    const double ny = std::sin(theta);
    for (int64_t r = 0; r < size; ++r) {
      for (int64_t c = 0; c < size; ++c) {
        const double d = (c + 0.5 - s / 2) * nx + (r + 0.5 - s / 2) * ny - offset;
        if (std::abs(d) < 0.75) {
          acc[r][c] += static_cast<float>(amp);
        }
      }
    }
  }
}

}  // namespace

dataio::ImageSample render_domain_a(const TissueMap& tissues, Rng& rng,
                                    const RenderParams& params) {
  return finalize(base_render(tissues, rng, params), "a");
}

dataio::ImageSample render_domain_b(const TissueMap& tissues, Rng& rng, Gap gap,
                                    bool artifact_streaks, const RenderParams& params) {
  auto u = base_render(tissues, rng, params);
  switch (gap) {
    case Gap::GammaTexture: {
      const double gamma = uniform(rng, 0.6, 1.6);
      u = torch::pow(torch::clamp(u, 0.0f, 1.0f), static_cast<float>(gamma));
      auto speckle = gaussian_blur(noise_field(rng, u.size(0)), 1.0);
      u = u * (1.0f + 0.12f * speckle);
      break;
    }
    case Gap::BiasField: {
      const double amp = uniform(rng, 0.15, 0.30);
      const double fx = uniform(rng, 0.5, 1.5);
      const double fy = uniform(rng, 0.5, 1.5);
      const double px = uniform(rng, 0.0, 2.0 * kPi);
      const double py = uniform(rng, 0.0, 2.0 * kPi);
      const int64_t size = u.size(0);
      auto ys = torch::arange(size, torch::kFloat32) / static_cast<float>(size);
      auto xs = torch::arange(size, torch::kFloat32) / static_cast<float>(size);
      auto field = 1.0 + amp * torch::cos(kPi * fy * ys + py).unsqueeze(1) *
                             torch::cos(kPi * fx * xs + px).unsqueeze(0);
      u = u * field.to(torch::kFloat32);
      break;
    }
    case Gap::InvertContrast: {
      u = 1.0f - torch::clamp(u, 0.0f, 1.0f);
      break;
    }
  }
  if (artifact_streaks) add_streaks(u, rng);
  return finalize(u, "b");
}

dataio::DatasetManifest generate_dataset(const PhantomSpec& spec, const fs::path& out_dir) {
  if (spec.image_size < 32) {
    throw ValidationError("generate_dataset: image_size must be at least 32");
  }
  if (spec.n_train_a < 1 || spec.n_train_b < 1 || spec.n_test_b < 1) {
    throw ValidationError("generate_dataset: all sample counts must be at least 1");
  }
  if (fs::exists(out_dir)) {
    throw ValidationError("generate_dataset: output directory already exists: " +
                          out_dir.string());
  }

  const fs::path tmp = out_dir.string() + ".tmp";
  fs::remove_all(tmp);
  auto id_of = [](const char* prefix, int64_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s_%04lld", prefix, static_cast<long long>(i));
    return std::string(buf);
  };

  try {
    fs::create_directories(tmp / "domainA" / "images");
    fs::create_directories(tmp / "domainA" / "labels");
    fs::create_directories(tmp / "domainB" / "images");
    fs::create_directories(tmp / "domainB" / "labels");

    for (int64_t i = 0; i < spec.n_train_a; ++i) {
      auto rng = make_rng(spec.seed, {1, static_cast<uint64_t>(i)});
      auto tissues = sample_anatomy(rng, spec.image_size);
      auto image = render_domain_a(tissues, rng);
      image.id = id_of("a", i);
      dataio::save_image(image, tmp / "domainA" / "images" / (image.id + ".img"));
      dataio::MaskSample mask{organ_mask(tissues), image.spacing, image.id};
      dataio::save_mask(mask, tmp / "domainA" / "labels" / (mask.id + ".msk"));
    }
    for (int64_t i = 0; i < spec.n_train_b; ++i) {
      auto rng = make_rng(spec.seed, {2, static_cast<uint64_t>(i)});
      auto tissues = sample_anatomy(rng, spec.image_size);
      auto image = render_domain_b(tissues, rng, spec.gap, spec.artifact_streaks);
      image.id = id_of("b", i);
      dataio::save_image(image, tmp / "domainB" / "images" / (image.id + ".img"));
    }
    for (int64_t i = 0; i < spec.n_test_b; ++i) {
      auto rng = make_rng(spec.seed, {3, static_cast<uint64_t>(i)});
      auto tissues = sample_anatomy(rng, spec.image_size);
      auto image = render_domain_b(tissues, rng, spec.gap, spec.artifact_streaks);
      image.id = id_of("t", i);
      dataio::save_image(image, tmp / "domainB" / "images" / (image.id + ".img"));
      dataio::MaskSample mask{organ_mask(tissues), image.spacing, image.id};
      dataio::save_mask(mask, tmp / "domainB" / "labels" / (mask.id + ".msk"));
    }

    nlohmann::json provenance;
    provenance["generator"] = "xmodseg phantom";
    provenance["format_version"] = 1;
    provenance["spec"] = {{"image_size", spec.image_size},
                          {"n_train_a", spec.n_train_a},
                          {"n_train_b", spec.n_train_b},
                          {"n_test_b", spec.n_test_b},
                          {"seed", spec.seed},
                          {"gap", gap_to_string(spec.gap)},
                          {"artifact_streaks", spec.artifact_streaks}};
    std::ofstream pf(tmp / "provenance.json", std::ios::trunc);
    pf << provenance.dump(2) << "\n";
    if (!pf) throw std::runtime_error("generate_dataset: cannot write provenance.json");

    fs::rename(tmp, out_dir);
  } catch (...) {
    fs::remove_all(tmp);
    throw;
  }
  return dataio::scan_dataset(out_dir);
}

}  // namespace xmodseg::phantom
