#include "xmodseg/dataio.hpp"

#include <png.h>

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <vector>

namespace xmodseg::dataio {

namespace fs = std::filesystem;
namespace F = torch::nn::functional;

namespace {

constexpr char kImageMagic[4] = {'A', 'C', 'S', '1'};
constexpr char kMaskMagic[4] = {'A', 'C', 'M', '1'};
constexpr int64_t kMinSide = 8;

void check_geometry(int64_t h, int64_t w, const fs::path& path) {
  if (h < kMinSide || w < kMinSide) {
    throw FormatError(path.string() + ": image side below minimum of 8 (" +
                      std::to_string(h) + "x" + std::to_string(w) + ")");
  }
}

void check_spacing(const Spacing& s, const fs::path& path) {
  if (!(s.row_mm > 0.0f) || !(s.col_mm > 0.0f)) {
    throw FormatError(path.string() + ": spacing components must be positive");
  }
}

std::vector<char> read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw FormatError(path.string() + ": cannot open file");
  }
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
  return bytes;
}

struct Header {
  uint32_t height = 0;
  uint32_t width = 0;
  float row_mm = 0;
  float col_mm = 0;
};
constexpr size_t kHeaderBytes = 4 + 4 + 4 + 4 + 4;

Header parse_header(const std::vector<char>& bytes, const char magic[4],
                    const fs::path& path) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), magic, 4) != 0) {
    throw FormatError(path.string() + ": bad magic bytes");
  }
  if (bytes.size() < kHeaderBytes) {
    throw FormatError(path.string() + ": truncated header");
  }
  Header h;
  std::memcpy(&h.height, bytes.data() + 4, 4);
  std::memcpy(&h.width, bytes.data() + 8, 4);
  std::memcpy(&h.row_mm, bytes.data() + 12, 4);
  std::memcpy(&h.col_mm, bytes.data() + 16, 4);
  return h;
}

void write_header(std::ofstream& out, const char magic[4], uint32_t h, uint32_t w,
                  const Spacing& spacing) {
  out.write(magic, 4);
  out.write(reinterpret_cast<const char*>(&h), 4);
  out.write(reinterpret_cast<const char*>(&w), 4);
  out.write(reinterpret_cast<const char*>(&spacing.row_mm), 4);
  out.write(reinterpret_cast<const char*>(&spacing.col_mm), 4);
}

}  // namespace

std::vector<const ManifestEntry*> DatasetManifest::domain_b_train() const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : domain_b) {
    if (!e.mask) out.push_back(&e);
  }
  return out;
}

std::vector<const ManifestEntry*> DatasetManifest::domain_b_eval() const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : domain_b) {
    if (e.mask) out.push_back(&e);
  }
  return out;
}

void save_image(const ImageSample& sample, const fs::path& path) {
  if (!sample.pixels.defined() || sample.pixels.dim() != 2) {
    throw FormatError(path.string() + ": image pixels must be a 2D array");
  }
  const int64_t h = sample.pixels.size(0);
  const int64_t w = sample.pixels.size(1);
  check_geometry(h, w, path);
  check_spacing(sample.spacing, path);
  auto pix = sample.pixels.to(torch::kFloat32).contiguous();
  if (!torch::isfinite(pix).all().item<bool>()) {
    throw FormatError(path.string() + ": non-finite pixels");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw FormatError(path.string() + ": cannot open for writing");
  }
  write_header(out, kImageMagic, static_cast<uint32_t>(h), static_cast<uint32_t>(w),
               sample.spacing);
  out.write(reinterpret_cast<const char*>(pix.data_ptr<float>()),
            static_cast<std::streamsize>(h * w * sizeof(float)));
  if (!out) {
    throw FormatError(path.string() + ": write failed");
  }
}

ImageSample load_image(const fs::path& path) {
  auto bytes = read_all(path);
  Header h = parse_header(bytes, kImageMagic, path);
  check_geometry(h.height, h.width, path);
  const size_t payload = static_cast<size_t>(h.height) * h.width * sizeof(float);
  if (bytes.size() != kHeaderBytes + payload) {
    throw FormatError(path.string() + ": truncated payload");
  }
  ImageSample sample;
  sample.pixels = torch::empty({static_cast<int64_t>(h.height), static_cast<int64_t>(h.width)},
                               torch::kFloat32);
  std::memcpy(sample.pixels.data_ptr<float>(), bytes.data() + kHeaderBytes, payload);
  if (!torch::isfinite(sample.pixels).all().item<bool>()) {
    throw FormatError(path.string() + ": non-finite pixels");
  }
  sample.spacing = {h.row_mm, h.col_mm};
  check_spacing(sample.spacing, path);
  sample.id = path.stem().string();
  return sample;
}

void save_mask(const MaskSample& mask, const fs::path& path) {
  if (!mask.labels.defined() || mask.labels.dim() != 2) {
    throw FormatError(path.string() + ": mask labels must be a 2D array");
  }
  const int64_t h = mask.labels.size(0);
  const int64_t w = mask.labels.size(1);
  check_geometry(h, w, path);
  check_spacing(mask.spacing, path);
  auto lab = mask.labels.to(torch::kUInt8).contiguous();
  const int64_t max_label = lab.max().item<int64_t>();
  if (max_label > 1) {
    throw FormatError(path.string() + ": label value " + std::to_string(max_label) +
                      " out of range {0, 1}");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw FormatError(path.string() + ": cannot open for writing");
  }
  write_header(out, kMaskMagic, static_cast<uint32_t>(h), static_cast<uint32_t>(w),
               mask.spacing);
  out.write(reinterpret_cast<const char*>(lab.data_ptr<uint8_t>()),
            static_cast<std::streamsize>(h * w));
  if (!out) {
    throw FormatError(path.string() + ": write failed");
  }
}

MaskSample load_mask(const fs::path& path) {
  auto bytes = read_all(path);
  Header h = parse_header(bytes, kMaskMagic, path);
  check_geometry(h.height, h.width, path);
  const size_t payload = static_cast<size_t>(h.height) * h.width;
  if (bytes.size() != kHeaderBytes + payload) {
    throw FormatError(path.string() + ": truncated payload");
  }
  MaskSample mask;
  mask.labels = torch::empty({static_cast<int64_t>(h.height), static_cast<int64_t>(h.width)},
                             torch::kUInt8);
  std::memcpy(mask.labels.data_ptr<uint8_t>(), bytes.data() + kHeaderBytes, payload);
  const int64_t max_label = mask.labels.max().item<int64_t>();
  if (max_label > 1) {
    throw FormatError(path.string() + ": label value " + std::to_string(max_label) +
                      " out of range {0, 1}");
  }
  mask.spacing = {h.row_mm, h.col_mm};
  check_spacing(mask.spacing, path);
  mask.id = path.stem().string();
  return mask;
}

ImageSample resize_normalize(const ImageSample& sample, int64_t target_size) {
  if (target_size < kMinSide) {
    throw ValidationError("resize_normalize: target_size must be >= 8, got " +
                          std::to_string(target_size));
  }
  const int64_t h = sample.pixels.size(0);
  const int64_t w = sample.pixels.size(1);

  ImageSample out;
  out.id = sample.id;
  out.spacing.row_mm =
      static_cast<float>(sample.spacing.row_mm * (static_cast<double>(h) / target_size));
  out.spacing.col_mm =
      static_cast<float>(sample.spacing.col_mm * (static_cast<double>(w) / target_size));

  auto flat = sample.pixels.to(torch::kFloat64).flatten();
  const double p1 = torch::quantile(flat, 0.01).item<double>();
  const double p99 = torch::quantile(flat, 0.99).item<double>();

  torch::Tensor pix;
  if (p99 - p1 < 1e-12) {
    warn("resize_normalize: constant intensity window for '" + sample.id +
         "', output set to all zeros");
    out.pixels = torch::zeros({target_size, target_size}, torch::kFloat32);
    return out;
  }
  const double lo = flat.min().item<double>();
  const double hi = flat.max().item<double>();
  if (lo >= -1.0 - 1e-6 && hi <= 1.0 + 1e-6) {
    // Already in the target range: identity, so repeat application is stable.
    pix = sample.pixels.clone();
  } else if (std::abs(p1 + 1.0) < 1e-6 && std::abs(p99 - 1.0) < 1e-6) {
    // Window already matches the target range; remap would be identity.
    pix = sample.pixels.clone();
  } else {
    pix = 2.0f * (sample.pixels - static_cast<float>(p1)) /
              static_cast<float>(p99 - p1) -
          1.0f;
  }
  pix = torch::clamp(pix, -1.0f, 1.0f);

  if (h != target_size || w != target_size) {
    auto nchw = pix.view({1, 1, h, w});
    nchw = F::interpolate(nchw, F::InterpolateFuncOptions()
                                    .size(std::vector<int64_t>{target_size, target_size})
                                    .mode(torch::kBilinear)
                                    .align_corners(false));
    pix = torch::clamp(nchw.view({target_size, target_size}), -1.0f, 1.0f);
  }
  out.pixels = pix.contiguous();
  return out;
}

MaskSample resize_mask(const MaskSample& mask, int64_t target_size) {
  const int64_t h = mask.labels.size(0);
  const int64_t w = mask.labels.size(1);
  MaskSample out;
  out.id = mask.id;
  out.spacing.row_mm =
      static_cast<float>(mask.spacing.row_mm * (static_cast<double>(h) / target_size));
  out.spacing.col_mm =
      static_cast<float>(mask.spacing.col_mm * (static_cast<double>(w) / target_size));
  if (h == target_size && w == target_size) {
    out.labels = mask.labels.clone();
    return out;
  }
  auto nchw = mask.labels.to(torch::kFloat32).view({1, 1, h, w});
  nchw = F::interpolate(nchw, F::InterpolateFuncOptions()
                                  .size(std::vector<int64_t>{target_size, target_size})
                                  .mode(torch::kNearest));
  out.labels = nchw.view({target_size, target_size}).to(torch::kUInt8).contiguous();
  return out;
}

namespace {

std::map<std::string, fs::path> list_by_stem(const fs::path& dir,
                                             const std::string& extension) {
  std::map<std::string, fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    if (entry.path().extension() != extension) continue;
    out[entry.path().stem().string()] = entry.path();
  }
  return out;
}

}  // namespace

DatasetManifest scan_dataset(const fs::path& root) {
  const fs::path a_images = root / "domainA" / "images";
  const fs::path a_labels = root / "domainA" / "labels";
  const fs::path b_images = root / "domainB" / "images";
  const fs::path b_labels = root / "domainB" / "labels";
  for (const auto& required : {a_images, a_labels, b_images}) {
    if (!fs::is_directory(required)) {
      throw ValidationError("scan_dataset: missing directory " + required.string());
    }
  }

  DatasetManifest manifest;
  manifest.root = root;

  auto a_imgs = list_by_stem(a_images, ".img");
  auto a_msks = list_by_stem(a_labels, ".msk");
  auto b_imgs = list_by_stem(b_images, ".img");
  auto b_msks = list_by_stem(b_labels, ".msk");

  if (a_imgs.empty()) throw ValidationError("scan_dataset: domain A is empty");
  if (b_imgs.empty()) throw ValidationError("scan_dataset: domain B is empty");

  for (const auto& [stem, img] : a_imgs) {  // std::map iterates sorted by stem
    auto it = a_msks.find(stem);
    if (it == a_msks.end()) {
      throw ValidationError("scan_dataset: domain-A image without mask: " + stem);
    }
    manifest.domain_a.push_back({stem, img, it->second});
  }
  for (const auto& [stem, img] : b_imgs) {
    auto it = b_msks.find(stem);
    std::optional<fs::path> mask;
    if (it != b_msks.end()) mask = it->second;
    manifest.domain_b.push_back({stem, img, mask});
  }
  return manifest;
}

nlohmann::json manifest_to_json(const DatasetManifest& manifest) {
  nlohmann::json j;
  j["root"] = manifest.root.string();
  j["format_version"] = manifest.format_version;
  j["counts"] = {{"domain_a", manifest.domain_a.size()},
                 {"domain_b_train", manifest.domain_b_train().size()},
                 {"domain_b_eval", manifest.domain_b_eval().size()}};
  auto entry_json = [](const ManifestEntry& e, bool eval_only_flag) {
    nlohmann::json je;
    je["id"] = e.id;
    je["image"] = e.image.string();
    if (e.mask) {
      je["mask"] = e.mask->string();
      if (eval_only_flag) je["evaluation_only"] = true;
    } else {
      je["mask"] = nullptr;
    }
    return je;
  };
  j["domain_a"] = nlohmann::json::array();
  for (const auto& e : manifest.domain_a) j["domain_a"].push_back(entry_json(e, false));
  j["domain_b"] = nlohmann::json::array();
  for (const auto& e : manifest.domain_b) j["domain_b"].push_back(entry_json(e, true));
  return j;
}

ImageSample import_png(const fs::path& path) {
  FILE* fp = std::fopen(path.string().c_str(), "rb");
  if (!fp) throw FormatError(path.string() + ": cannot open file");

  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    std::fclose(fp);
    throw FormatError(path.string() + ": not a PNG file");
  }

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw FormatError(path.string() + ": libpng init failed");
  }

  std::vector<std::vector<png_byte>> rows;
  png_uint_32 width = 0, height = 0;
  int bit_depth = 0, color_type = 0;

  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw FormatError(path.string() + ": corrupt PNG data");
  }

  png_init_io(png, fp);
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  png_get_IHDR(png, info, &width, &height, &bit_depth, &color_type, nullptr, nullptr, nullptr);

  if (color_type != PNG_COLOR_TYPE_GRAY) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw FormatError(path.string() + ": only grayscale PNG is supported");
  }
  if (bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (bit_depth == 16) png_set_swap(png);  // stored big-endian
  png_read_update_info(png, info);

  const size_t rowbytes = png_get_rowbytes(png, info);
  rows.assign(height, std::vector<png_byte>(rowbytes));
  std::vector<png_bytep> row_ptrs(height);
  for (png_uint_32 r = 0; r < height; ++r) row_ptrs[r] = rows[r].data();
  png_read_image(png, row_ptrs.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);

  check_geometry(height, width, path);

  ImageSample sample;
  sample.pixels = torch::empty({static_cast<int64_t>(height), static_cast<int64_t>(width)},
                               torch::kFloat32);
  auto acc = sample.pixels.accessor<float, 2>();
  const bool wide = bit_depth == 16;
  for (png_uint_32 r = 0; r < height; ++r) {
    for (png_uint_32 c = 0; c < width; ++c) {
      if (wide) {
        uint16_t v;
        std::memcpy(&v, rows[r].data() + 2 * c, 2);
        acc[r][c] = static_cast<float>(v);
      } else {
        acc[r][c] = static_cast<float>(rows[r][c]);
      }
    }
  }
  sample.spacing = {1.0f, 1.0f};
  sample.id = path.stem().string();
  return sample;
}

void write_png_preview(const torch::Tensor& pixels, const fs::path& path) {
  if (pixels.dim() != 2) {
    throw ValidationError("write_png_preview: expected a 2D array");
  }
  auto scaled = ((pixels.to(torch::kFloat32).clamp(-1.0f, 1.0f) + 1.0f) * 127.5f)
                    .round()
                    .clamp(0.0f, 255.0f)
                    .to(torch::kUInt8)
                    .contiguous();
  const int64_t h = scaled.size(0);
  const int64_t w = scaled.size(1);

  FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw FormatError(path.string() + ": cannot open for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw FormatError(path.string() + ": libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw FormatError(path.string() + ": PNG write failed");
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const uint8_t* data = scaled.data_ptr<uint8_t>();
  for (int64_t r = 0; r < h; ++r) {
    png_write_row(png, const_cast<png_bytep>(data + r * w));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

}  // namespace xmodseg::dataio
