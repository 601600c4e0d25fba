#include <torch/torch.h>

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "test_util.hpp"
#include "xmodseg/dataio.hpp"

using namespace xmodseg;
using testutil::TempDir;
using testutil::WarnCapture;

namespace {

dataio::ImageSample make_image(int64_t h, int64_t w, uint64_t seed = 1) {
  torch::manual_seed(seed);
  dataio::ImageSample s;
  s.pixels = torch::rand({h, w}) * 2.0f - 1.0f;
  s.spacing = {0.7f, 1.3f};
  s.id = "probe";
  return s;
}

std::vector<char> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& p, const std::vector<char>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_SUITE("dataio") {
  TEST_CASE("image save/load round trip is bitwise exact") {
    TempDir dir;
    auto sample = make_image(16, 12);
    const auto path = dir / "probe.img";
    dataio::save_image(sample, path);
    auto back = dataio::load_image(path);
    CHECK(back.pixels.sizes() == sample.pixels.sizes());
    CHECK(torch::equal(back.pixels, sample.pixels));
    CHECK(back.spacing == sample.spacing);
    CHECK(back.id == "probe");
  }

  TEST_CASE("mask save/load round trip") {
    TempDir dir;
    torch::manual_seed(2);
    dataio::MaskSample m;
    m.labels = (torch::rand({9, 14}) > 0.5).to(torch::kUInt8);
    m.spacing = {2.0f, 0.5f};
    m.id = "m";
    const auto path = dir / "m.msk";
    dataio::save_mask(m, path);
    auto back = dataio::load_mask(path);
    CHECK(torch::equal(back.labels, m.labels));
    CHECK(back.spacing == m.spacing);
  }

  TEST_CASE("bad magic is rejected with the path in the message") {
    TempDir dir;
    auto sample = make_image(8, 8);
    const auto path = dir / "x.img";
    dataio::save_image(sample, path);
    auto bytes = read_bytes(path);
    bytes[0] = 'Z';
    write_bytes(path, bytes);
    CHECK_THROWS_WITH_AS(dataio::load_image(path),
                         doctest::Contains(path.string().c_str()), FormatError);
  }

  TEST_CASE("truncated payload is rejected") {
    TempDir dir;
    auto sample = make_image(8, 8);
    const auto path = dir / "t.img";
    dataio::save_image(sample, path);
    auto bytes = read_bytes(path);
    bytes.resize(bytes.size() - 17);
    write_bytes(path, bytes);
    CHECK_THROWS_AS(dataio::load_image(path), FormatError);
  }

  TEST_CASE("image headers reject geometry below the minimum side") {
    TempDir dir;
    auto sample = make_image(7, 16);
    CHECK_THROWS_AS(dataio::save_image(sample, dir / "small.img"), ValidationError);
  }

  TEST_CASE("non-finite pixels are rejected on save and load") {
    TempDir dir;
    auto sample = make_image(8, 8);
    sample.pixels[3][4] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(dataio::save_image(sample, dir / "nan.img"), FormatError);

    auto good = make_image(8, 8);
    const auto path = dir / "inf.img";
    dataio::save_image(good, path);
    auto bytes = read_bytes(path);
    const float inf = std::numeric_limits<float>::infinity();
    std::memcpy(bytes.data() + bytes.size() - 4, &inf, 4);
    write_bytes(path, bytes);
    CHECK_THROWS_AS(dataio::load_image(path), FormatError);
  }

  TEST_CASE("mask labels outside {0,1} are rejected") {
    TempDir dir;
    dataio::MaskSample m;
    m.labels = torch::full({8, 8}, 2, torch::kUInt8);
    m.spacing = {1.0f, 1.0f};
    CHECK_THROWS_AS(dataio::save_mask(m, dir / "bad.msk"), FormatError);

    m.labels = torch::ones({8, 8}, torch::kUInt8);
    const auto path = dir / "ok.msk";
    dataio::save_mask(m, path);
    auto bytes = read_bytes(path);
    bytes.back() = 7;
    write_bytes(path, bytes);
    CHECK_THROWS_AS(dataio::load_mask(path), FormatError);
  }

  TEST_CASE("non-positive spacing is rejected") {
    TempDir dir;
    auto sample = make_image(8, 8);
    sample.spacing.row_mm = 0.0f;
    CHECK_THROWS_AS(dataio::save_image(sample, dir / "sp.img"), FormatError);
    sample.spacing = {1.0f, -2.0f};
    CHECK_THROWS_AS(dataio::save_image(sample, dir / "sp.img"), FormatError);
  }

  TEST_CASE("resize_normalize windows percentiles into [-1, 1]") {
    dataio::ImageSample s;
    s.pixels = torch::linspace(0.0f, 400.0f, 64 * 64).reshape({64, 64});
    s.spacing = {1.0f, 1.0f};
    auto out = dataio::resize_normalize(s, 64);
    CHECK(out.pixels.min().item<float>() >= -1.0f);
    CHECK(out.pixels.max().item<float>() <= 1.0f);
    CHECK(out.pixels.min().item<float>() == -1.0f);  // clamped tail below p1
    CHECK(out.pixels.max().item<float>() == 1.0f);
    CHECK(out.spacing == s.spacing);
  }

  TEST_CASE("resize_normalize is idempotent on already-normalized data") {
    auto s = make_image(32, 32, 5);  // uniform in [-1, 1]: p1/p99 inside the window
    s.pixels = s.pixels * 0.999f;
    s.pixels[0][0] = -1.0f;          // pin the window to exactly [-1, 1]
    s.pixels[0][1] = 1.0f;
    auto once = dataio::resize_normalize(s, 32);
    auto twice = dataio::resize_normalize(once, 32);
    CHECK(torch::equal(once.pixels, s.pixels));  // in-range input is untouched
    CHECK(torch::equal(once.pixels, twice.pixels));

    // Raw intensities: one application normalizes, a second is then a no-op.
    auto raw = make_image(32, 32, 6);
    raw.pixels = raw.pixels * 700.0f + 100.0f;
    auto n1 = dataio::resize_normalize(raw, 32);
    auto n2 = dataio::resize_normalize(n1, 32);
    CHECK(torch::equal(n1.pixels, n2.pixels));
  }

  TEST_CASE("resize_normalize maps a constant image to zeros with a warning") {
    WarnCapture capture;
    dataio::ImageSample s;
    s.pixels = torch::full({16, 16}, 3.25f);
    s.spacing = {1.0f, 1.0f};
    auto out = dataio::resize_normalize(s, 16);
    CHECK(torch::equal(out.pixels, torch::zeros({16, 16})));
    CHECK(capture.contains("constant"));
  }

  TEST_CASE("resize_normalize rescales spacing with the geometry") {
    auto s = make_image(32, 32);
    s.spacing = {1.0f, 1.0f};
    auto out = dataio::resize_normalize(s, 64);
    CHECK(out.pixels.sizes() == torch::IntArrayRef({64, 64}));
    CHECK(out.spacing.row_mm == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(out.spacing.col_mm == doctest::Approx(0.5).epsilon(1e-6));
  }

  TEST_CASE("resize_mask keeps labels binary under nearest resampling") {
    torch::manual_seed(3);
    dataio::MaskSample m;
    m.labels = (torch::rand({32, 32}) > 0.7).to(torch::kUInt8);
    m.spacing = {1.0f, 1.0f};
    auto up = dataio::resize_mask(m, 48);
    CHECK(up.labels.sizes() == torch::IntArrayRef({48, 48}));
    auto unique = std::get<0>(torch::_unique(up.labels));
    CHECK(unique.numel() <= 2);
    CHECK(up.labels.max().item<uint8_t>() <= 1);

    auto same = dataio::resize_mask(m, 32);
    CHECK(torch::equal(same.labels, m.labels));
  }

  TEST_CASE("scan_dataset orders entries and classifies domain B") {
    TempDir dir;
    namespace fs = std::filesystem;
    for (const char* sub : {"domainA/images", "domainA/labels", "domainB/images",
                            "domainB/labels"}) {
      fs::create_directories(dir.path() / sub);
    }
    auto img = make_image(8, 8);
    dataio::MaskSample msk;
    msk.labels = torch::zeros({8, 8}, torch::kUInt8);
    msk.labels[4][4] = 1;
    msk.spacing = img.spacing;

    for (const char* stem : {"a_0002", "a_0000", "a_0001"}) {
      dataio::save_image(img, dir.path() / "domainA/images" / (std::string(stem) + ".img"));
      dataio::save_mask(msk, dir.path() / "domainA/labels" / (std::string(stem) + ".msk"));
    }
    for (const char* stem : {"b_0001", "b_0000"}) {
      dataio::save_image(img, dir.path() / "domainB/images" / (std::string(stem) + ".img"));
    }
    dataio::save_image(img, dir.path() / "domainB/images/t_0000.img");
    dataio::save_mask(msk, dir.path() / "domainB/labels/t_0000.msk");

    auto manifest = dataio::scan_dataset(dir.path());
    REQUIRE(manifest.domain_a.size() == 3);
    CHECK(manifest.domain_a[0].id == "a_0000");
    CHECK(manifest.domain_a[2].id == "a_0002");
    CHECK(manifest.domain_a[0].mask.has_value());
    REQUIRE(manifest.domain_b.size() == 3);
    CHECK(manifest.domain_b_train().size() == 2);
    CHECK(manifest.domain_b_eval().size() == 1);
    CHECK(manifest.domain_b_eval()[0]->id == "t_0000");

    auto j = dataio::manifest_to_json(manifest);
    CHECK(j["counts"]["domain_a"] == 3);
    CHECK(j["counts"]["domain_b_train"] == 2);
    CHECK(j["counts"]["domain_b_eval"] == 1);
  }

  TEST_CASE("scan_dataset rejects a labeled domain-A image without its mask") {
    TempDir dir;
    namespace fs = std::filesystem;
    for (const char* sub : {"domainA/images", "domainA/labels", "domainB/images"}) {
      fs::create_directories(dir.path() / sub);
    }
    auto img = make_image(8, 8);
    dataio::save_image(img, dir.path() / "domainA/images/a_0000.img");
    dataio::save_image(img, dir.path() / "domainB/images/b_0000.img");
    CHECK_THROWS_WITH_AS(dataio::scan_dataset(dir.path()), doctest::Contains("a_0000"),
                         ValidationError);
  }

  TEST_CASE("scan_dataset rejects an empty domain") {
    TempDir dir;
    namespace fs = std::filesystem;
    for (const char* sub : {"domainA/images", "domainA/labels", "domainB/images"}) {
      fs::create_directories(dir.path() / sub);
    }
    auto img = make_image(8, 8);
    dataio::MaskSample msk;
    msk.labels = torch::zeros({8, 8}, torch::kUInt8);
    msk.spacing = img.spacing;
    dataio::save_image(img, dir.path() / "domainA/images/a_0000.img");
    dataio::save_mask(msk, dir.path() / "domainA/labels/a_0000.msk");
    CHECK_THROWS_AS(dataio::scan_dataset(dir.path()), ValidationError);
  }

  TEST_CASE("png preview export and import round trip through 8-bit counts") {
    TempDir dir;
    torch::manual_seed(4);
    auto pixels = torch::rand({16, 16}) * 2.0f - 1.0f;
    const auto path = dir / "p.png";
    dataio::write_png_preview(pixels, path);
    auto sample = dataio::import_png(path);
    CHECK(sample.pixels.sizes() == torch::IntArrayRef({16, 16}));
    CHECK(sample.spacing == dataio::Spacing{1.0f, 1.0f});
    auto expected = ((pixels.clamp(-1.0f, 1.0f) + 1.0f) * 127.5f).round().clamp(0.0f, 255.0f);
    CHECK(torch::equal(sample.pixels, expected));
  }

  TEST_CASE("import_png rejects a non-PNG file") {
    TempDir dir;
    const auto path = dir / "junk.png";
    write_bytes(path, {'n', 'o', 't', ' ', 'a', ' ', 'p', 'n', 'g'});
    CHECK_THROWS_AS(dataio::import_png(path), FormatError);
  }
}
