#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "xmodseg/common.hpp"

namespace xmodseg::dataio {

// Spacing is stored as 32-bit reals on disk; kept as float so that
// save/load round-trips exactly.
struct Spacing {
  float row_mm = 1.0f;
  float col_mm = 1.0f;
  bool operator==(const Spacing&) const = default;
};

struct ImageSample {
  torch::Tensor pixels;  // H x W, float32
  Spacing spacing;
  std::string id;
};

struct MaskSample {
  torch::Tensor labels;  // H x W, uint8, values in {0, 1}
  Spacing spacing;
  std::string id;
};

struct ManifestEntry {
  std::string id;
  std::filesystem::path image;
  std::optional<std::filesystem::path> mask;
};

struct DatasetManifest {
  std::filesystem::path root;
  int format_version = 1;
  std::vector<ManifestEntry> domain_a;  // every entry carries a mask
  std::vector<ManifestEntry> domain_b;  // masks optional, evaluation-only

  // Unlabeled domain-B entries: the only ones exposed to training.
  std::vector<const ManifestEntry*> domain_b_train() const;
  // Labeled domain-B entries, used for held-out evaluation.
  std::vector<const ManifestEntry*> domain_b_eval() const;
};

void save_image(const ImageSample& sample, const std::filesystem::path& path);
ImageSample load_image(const std::filesystem::path& path);

void save_mask(const MaskSample& mask, const std::filesystem::path& path);
MaskSample load_mask(const std::filesystem::path& path);

// Maps the input's [p1, p99] percentile window to [-1, 1] (clamped), then
// resizes bilinearly to target_size x target_size, rescaling the spacing.
// A constant image maps to all zeros with a warning.
ImageSample resize_normalize(const ImageSample& sample, int64_t target_size);

// Nearest-neighbor companion for label maps.
MaskSample resize_mask(const MaskSample& mask, int64_t target_size);

DatasetManifest scan_dataset(const std::filesystem::path& root);
nlohmann::json manifest_to_json(const DatasetManifest& manifest);

// Convenience converter: 8/16-bit grayscale PNG -> ImageSample (raw counts).
ImageSample import_png(const std::filesystem::path& path);
// 8-bit grayscale preview of a [-1, 1] image.
void write_png_preview(const torch::Tensor& pixels, const std::filesystem::path& path);

}  // namespace xmodseg::dataio
