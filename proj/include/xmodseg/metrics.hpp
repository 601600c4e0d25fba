#pragma once

#include <torch/torch.h>

#include <string>
#include <vector>

#include "xmodseg/common.hpp"
#include "xmodseg/dataio.hpp"
#include "json.hpp"

namespace xmodseg::metrics {

// Dice overlap of two binary masks. Two empty masks count as perfect agreement.
double dice_score(const torch::Tensor& pred, const torch::Tensor& gt);

// Boundary pixels: foreground with at least one 4-neighbor that is background,
// where anything outside the image also counts as background. Returns uint8 H x W.
torch::Tensor boundary_pixels(const torch::Tensor& mask);

// Exact Euclidean distance (in mm) from every pixel center to the nearest "on"
// pixel of `mask`, honouring anisotropic pixel spacing. All-zero mask is an error.
torch::Tensor distance_field_mm(const torch::Tensor& mask, const dataio::Spacing& spacing);

// Average symmetric surface distance between boundaries of pred and gt, in mm.
// Pools both directed sums over the union of boundary sizes so the result is
// bitwise identical when the arguments are swapped.
double average_surface_distance(const torch::Tensor& pred, const torch::Tensor& gt,
                                const dataio::Spacing& spacing);

struct CaseMetrics {
  std::string id;
  double dice = 0.0;
  double asd_mm = 0.0;
  bool asd_defined = true;  // false when either boundary is empty
};

struct SummaryRow {
  std::string label;
  std::string value;  // preformatted, e.g. "0.812" or "0.805(0.031)"
};

struct MetricsReport {
  std::vector<CaseMetrics> cases;
  double median_dice = 0.0;
  double mean_dice = 0.0;
  double std_dice = 0.0;
  double median_asd = 0.0;
  double mean_asd = 0.0;
  double std_asd = 0.0;
  int asd_skipped = 0;  // cases where ASD was undefined
  std::vector<SummaryRow> table() const;
};

// Median uses the mean of the two middle values for even counts; std is the
// population standard deviation.
double median(std::vector<double> values);
double mean(const std::vector<double>& values);
double population_std(const std::vector<double>& values);

MetricsReport aggregate_report(const std::vector<CaseMetrics>& cases);

nlohmann::json report_to_json(const MetricsReport& report);
std::string report_to_text(const MetricsReport& report);
std::string report_to_csv(const MetricsReport& report);

}  // namespace xmodseg::metrics
