#include "xmodseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

namespace xmodseg::metrics {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

torch::Tensor as_bool(const torch::Tensor& mask) {
  if (mask.dim() != 2) {
    throw ValidationError("metrics: expected a 2D binary mask");
  }
  return mask.to(torch::kBool);
}

// 1D squared-distance transform d[i] = min_j (w * (i - j)^2 + f[j]), computed
// via the lower envelope of parabolas. Entries with f[j] = inf never win, so
// they are dropped before building the envelope.
void dt1d(const double* f, double* d, int64_t n, double w, std::vector<int64_t>& sites,
          std::vector<double>& z) {
  sites.clear();
  for (int64_t j = 0; j < n; ++j) {
    if (std::isfinite(f[j])) sites.push_back(j);
  }
  if (sites.empty()) {
    std::fill(d, d + n, kInf);
    return;
  }

  // v[k] indexes into sites; z[k] is the left edge of parabola k's dominance.
  std::vector<int64_t> v(sites.size());
  z.assign(sites.size() + 1, 0.0);
  int64_t k = 0;
  v[0] = 0;
  z[0] = -kInf;
  z[1] = kInf;
  for (size_t qi = 1; qi < sites.size(); ++qi) {
    const int64_t q = sites[qi];
    double s;
    for (;;) {
      const int64_t p = sites[v[k]];
      s = ((f[q] + w * q * q) - (f[p] + w * p * p)) / (2.0 * w * (q - p));
      if (s > z[k]) break;
      --k;
    }
    ++k;
    v[k] = static_cast<int64_t>(qi);
    z[k] = s;
    z[k + 1] = kInf;
  }

  k = 0;
  for (int64_t i = 0; i < n; ++i) {
    while (z[k + 1] < static_cast<double>(i)) ++k;
    const int64_t j = sites[v[k]];
    d[i] = w * (i - j) * (i - j) + f[j];
  }
}

}  // namespace

double dice_score(const torch::Tensor& pred, const torch::Tensor& gt) {
  auto p = as_bool(pred);
  auto g = as_bool(gt);
  if (p.sizes() != g.sizes()) {
    throw ValidationError("dice_score: mask shapes differ");
  }
  const double np = p.sum().item<double>();
  const double ng = g.sum().item<double>();
  if (np == 0.0 && ng == 0.0) return 1.0;
  const double inter = (p & g).sum().item<double>();
  return 2.0 * inter / (np + ng);
}

torch::Tensor boundary_pixels(const torch::Tensor& mask) {
  auto m = as_bool(mask);
  const int64_t h = m.size(0);
  const int64_t w = m.size(1);
  // Zero-pad so off-image neighbors read as background.
  auto padded = torch::zeros({h + 2, w + 2}, torch::kBool);
  padded.index_put_({torch::indexing::Slice(1, h + 1), torch::indexing::Slice(1, w + 1)}, m);
  using torch::indexing::Slice;
  auto up = padded.index({Slice(0, h), Slice(1, w + 1)});
  auto down = padded.index({Slice(2, h + 2), Slice(1, w + 1)});
  auto left = padded.index({Slice(1, h + 1), Slice(0, w)});
  auto right = padded.index({Slice(1, h + 1), Slice(2, w + 2)});
  auto touches_bg = ~up | ~down | ~left | ~right;
  return (m & touches_bg).to(torch::kUInt8);
}

torch::Tensor distance_field_mm(const torch::Tensor& mask, const dataio::Spacing& spacing) {
  auto m = as_bool(mask);
  if (!m.any().item<bool>()) {
    throw ValidationError("distance_field_mm: mask has no on pixels");
  }
  const int64_t h = m.size(0);
  const int64_t w = m.size(1);
  auto d = torch::where(m, torch::zeros({h, w}, torch::kFloat64),
                        torch::full({h, w}, kInf, torch::kFloat64))
               .contiguous();
  auto acc = d.data_ptr<double>();
  std::vector<double> line(std::max(h, w));
  std::vector<double> out(std::max(h, w));
  std::vector<int64_t> sites;
  std::vector<double> z;

  const double w_row = static_cast<double>(spacing.row_mm) * spacing.row_mm;
  const double w_col = static_cast<double>(spacing.col_mm) * spacing.col_mm;

  // Pass 1: down each column (varying row index).
  for (int64_t c = 0; c < w; ++c) {
    for (int64_t r = 0; r < h; ++r) line[r] = acc[r * w + c];
    dt1d(line.data(), out.data(), h, w_row, sites, z);
    for (int64_t r = 0; r < h; ++r) acc[r * w + c] = out[r];
  }
  // Pass 2: along each row (varying column index).
  for (int64_t r = 0; r < h; ++r) {
    dt1d(acc + r * w, out.data(), w, w_col, sites, z);
    std::copy(out.begin(), out.begin() + w, acc + r * w);
  }
  return d.sqrt();
}

double average_surface_distance(const torch::Tensor& pred, const torch::Tensor& gt,
                                const dataio::Spacing& spacing) {
  auto bp = boundary_pixels(pred);
  auto bg = boundary_pixels(gt);
  const int64_t np = bp.sum().item<int64_t>();
  const int64_t ng = bg.sum().item<int64_t>();
  if (np == 0 || ng == 0) {
    throw ValidationError("average_surface_distance: empty boundary");
  }
  auto dist_to_g = distance_field_mm(bg, spacing);
  auto dist_to_p = distance_field_mm(bp, spacing);
  const double sum_p = dist_to_g.masked_select(bp.to(torch::kBool)).sum().item<double>();
  const double sum_g = dist_to_p.masked_select(bg.to(torch::kBool)).sum().item<double>();
  return (sum_p + sum_g) / static_cast<double>(np + ng);
}

double median(std::vector<double> values) {
  if (values.empty()) throw ValidationError("median: empty input");
  std::sort(values.begin(), values.end());
  const size_t n = values.size();
  if (n % 2 == 1) return values[n / 2];
  return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double mean(const std::vector<double>& values) {
  if (values.empty()) throw ValidationError("mean: empty input");
  return std::accumulate(values.begin(), values.end(), 0.0) /
         static_cast<double>(values.size());
}

double population_std(const std::vector<double>& values) {
  const double mu = mean(values);
  double acc = 0.0;
  for (double v : values) acc += (v - mu) * (v - mu);
  return std::sqrt(acc / static_cast<double>(values.size()));
}

MetricsReport aggregate_report(const std::vector<CaseMetrics>& cases) {
  if (cases.empty()) throw ValidationError("aggregate_report: no cases");
  MetricsReport report;
  report.cases = cases;
  std::vector<double> dsc;
  std::vector<double> asd;
  for (const auto& c : cases) {
    dsc.push_back(c.dice);
    if (c.asd_defined) {
      asd.push_back(c.asd_mm);
    } else {
      ++report.asd_skipped;
    }
  }
  report.median_dice = median(dsc);
  report.mean_dice = mean(dsc);
  report.std_dice = population_std(dsc);
  if (!asd.empty()) {
    report.median_asd = median(asd);
    report.mean_asd = mean(asd);
    report.std_asd = population_std(asd);
  } else {
    report.median_asd = report.mean_asd = report.std_asd =
        std::numeric_limits<double>::quiet_NaN();
  }
  return report;
}

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3f", v);
  return buf;
}

std::string fmt_mean_std(double m, double s) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%.3f(%.3f)", m, s);
  return buf;
}

}  // namespace

std::vector<SummaryRow> MetricsReport::table() const {
  return {
      {"Median DSC", fmt(median_dice)},
      {"Mean(Std) DSC", fmt_mean_std(mean_dice, std_dice)},
      {"Median ASD", fmt(median_asd)},
      {"Mean(Std) ASD", fmt_mean_std(mean_asd, std_asd)},
  };
}

nlohmann::json report_to_json(const MetricsReport& report) {
  nlohmann::json j;
  j["cases"] = nlohmann::json::array();
  for (const auto& c : report.cases) {
    nlohmann::json jc;
    jc["id"] = c.id;
    jc["dice"] = c.dice;
    if (c.asd_defined) {
      jc["asd_mm"] = c.asd_mm;
    } else {
      jc["asd_mm"] = nullptr;
    }
    j["cases"].push_back(jc);
  }
  j["summary"] = {{"median_dice", report.median_dice},
                  {"mean_dice", report.mean_dice},
                  {"std_dice", report.std_dice},
                  {"asd_skipped", report.asd_skipped}};
  if (report.asd_skipped < static_cast<int>(report.cases.size())) {
    j["summary"]["median_asd_mm"] = report.median_asd;
    j["summary"]["mean_asd_mm"] = report.mean_asd;
    j["summary"]["std_asd_mm"] = report.std_asd;
  }
  j["table"] = nlohmann::json::array();
  for (const auto& row : report.table()) {
    j["table"].push_back({{"label", row.label}, {"value", row.value}});
  }
  return j;
}

std::string report_to_text(const MetricsReport& report) {
  std::ostringstream out;
  size_t width = 0;
  for (const auto& row : report.table()) width = std::max(width, row.label.size());
  for (const auto& row : report.table()) {
    out << row.label << std::string(width - row.label.size() + 2, ' ') << row.value << "\n";
  }
  if (report.asd_skipped > 0) {
    out << "(ASD undefined for " << report.asd_skipped << " case"
        << (report.asd_skipped == 1 ? "" : "s") << " with an empty boundary)\n";
  }
  return out.str();
}

std::string report_to_csv(const MetricsReport& report) {
  std::ostringstream out;
  out << "id,dice,asd_mm\n";
  for (const auto& c : report.cases) {
    out << c.id << "," << fmt(c.dice) << ",";
    if (c.asd_defined) out << fmt(c.asd_mm);
    out << "\n";
  }
  return out.str();
}

}  // namespace xmodseg::metrics
