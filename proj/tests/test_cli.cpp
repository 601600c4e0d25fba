#include <torch/torch.h>

#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "json.hpp"
#include "test_util.hpp"
#include "xmodseg/dataio.hpp"
#include "xmodseg/networks.hpp"
#include "xmodseg/phantom.hpp"

using namespace xmodseg;
using testutil::run_cli;
using testutil::TempDir;
namespace fs = std::filesystem;

TEST_SUITE("cli") {
  TEST_CASE("bare invocation and usage errors exit 1, help exits 0") {
    CHECK(run_cli({}).exit_code == 1);
    CHECK(run_cli({"--help"}).exit_code == 0);
    CHECK(run_cli({"synth-data"}).exit_code == 1);  // missing --out
    CHECK(run_cli({"no-such-command"}).exit_code == 1);
  }

  TEST_CASE("synth-data generates, refuses overwrites, honours --force") {
    TempDir dir;
    const auto out = (dir / "set").string();
    auto first = run_cli({"synth-data", "--out", out, "--n-train-a", "2", "--n-train-b",
                          "2", "--n-test-b", "1", "--seed", "7"});
    CHECK(first.exit_code == 0);
    CHECK(first.output.find("\"domain_a\":2") != std::string::npos);
    CHECK(fs::exists(dir / "set/provenance.json"));

    auto repeat = run_cli({"synth-data", "--out", out, "--n-train-a", "2", "--n-train-b",
                           "2", "--n-test-b", "1", "--seed", "7"});
    CHECK(repeat.exit_code == 1);
    CHECK(repeat.output.find("--force") != std::string::npos);

    auto forced = run_cli({"synth-data", "--out", out, "--n-train-a", "2", "--n-train-b",
                           "2", "--n-test-b", "1", "--seed", "7", "--force"});
    CHECK(forced.exit_code == 0);
  }

  TEST_CASE("synth-data validates the gap name") {
    TempDir dir;
    auto r = run_cli({"synth-data", "--out", (dir / "x").string(), "--gap", "sepia"});
    CHECK(r.exit_code == 1);
    CHECK(r.output.find("sepia") != std::string::npos);
  }

  TEST_CASE("train rejects unknown config keys by name") {
    TempDir dir;
    phantom::PhantomSpec spec;
    spec.image_size = 32;
    spec.n_train_a = 1;
    spec.n_train_b = 1;
    spec.n_test_b = 1;
    phantom::generate_dataset(spec, dir / "data");
    const auto cfg_path = dir / "bad.json";
    {
      std::ofstream f(cfg_path);
      f << R"({"lamda1": 0.5})";
    }
    auto r = run_cli({"train", "--config", cfg_path.string(), "--data",
                      (dir / "data").string(), "--out", (dir / "run").string()});
    CHECK(r.exit_code == 1);
    CHECK(r.output.find("lamda1") != std::string::npos);
  }

  TEST_CASE("train echoes the fully resolved config into the run directory") {
    TempDir dir;
    phantom::PhantomSpec spec;
    spec.image_size = 32;
    spec.n_train_a = 2;
    spec.n_train_b = 2;
    spec.n_test_b = 1;
    phantom::generate_dataset(spec, dir / "data");
    const auto cfg_path = dir / "cfg.json";
    {
      std::ofstream f(cfg_path);
      f << R"({"model": {"gen_width": 8, "disc_width": 8, "seg_width": 4, "head_dim": 16},
               "train": {"image_size": 32, "total_steps": 2, "checkpoint_every": 0,
                         "eval_every": 0, "samples_per_layer": 8}})";
    }
    auto r = run_cli({"train", "--config", cfg_path.string(), "--data",
                      (dir / "data").string(), "--out", (dir / "run").string(),
                      "--no-mind"});
    CHECK(r.exit_code == 0);

    std::ifstream ef(dir / "run/config.json");
    REQUIRE(ef.good());
    nlohmann::json echoed;
    ef >> echoed;
    CHECK(echoed.at("model").at("gen_width") == 8);
    CHECK(echoed.at("train").at("total_steps") == 2);
    CHECK(echoed.at("toggles").at("mind_off") == true);   // CLI flag override
    CHECK(echoed.at("weights").at("adv") == 1.0);          // defaults materialized
    CHECK(echoed.at("optim").at("lr") == 0.0002);
  }

  TEST_CASE("eval scores a prediction directory and writes all three reports") {
    TempDir dir;
    fs::create_directories(dir / "gt");
    fs::create_directories(dir / "pred");
    dataio::MaskSample m;
    m.spacing = {1.0f, 1.0f};
    for (const char* stem : {"s0", "s1"}) {
      m.labels = torch::zeros({16, 16}, torch::kUInt8);
      m.labels.index_put_({torch::indexing::Slice(4, 9), torch::indexing::Slice(4, 9)}, 1);
      m.id = stem;
      dataio::save_mask(m, dir / "gt" / (std::string(stem) + ".msk"));
      dataio::save_mask(m, dir / "pred" / (std::string(stem) + ".msk"));
    }
    const auto report = (dir / "report").string();
    auto r = run_cli({"eval", "--pred", (dir / "pred").string(), "--gt",
                      (dir / "gt").string(), "--report", report});
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("Median DSC") != std::string::npos);
    CHECK(r.output.find("1.000") != std::string::npos);
    CHECK(r.output.find("Mean(Std) ASD") != std::string::npos);
    CHECK(fs::exists(report + ".json"));
    CHECK(fs::exists(report + ".txt"));
    CHECK(fs::exists(report + ".csv"));

    nlohmann::json j;
    std::ifstream jf(report + ".json");
    jf >> j;
    CHECK(j.at("summary").at("mean_dice").get<double>() == doctest::Approx(1.0));
    CHECK(j.at("summary").at("mean_asd_mm").get<double>() == doctest::Approx(0.0));
  }

  TEST_CASE("eval lists unmatched stems and exits 1") {
    TempDir dir;
    fs::create_directories(dir / "gt");
    fs::create_directories(dir / "pred");
    dataio::MaskSample m;
    m.spacing = {1.0f, 1.0f};
    m.labels = torch::ones({8, 8}, torch::kUInt8);
    dataio::save_mask(m, dir / "gt/only_gt.msk");
    dataio::save_mask(m, dir / "pred/only_pred.msk");
    auto r = run_cli({"eval", "--pred", (dir / "pred").string(), "--gt",
                      (dir / "gt").string(), "--report", (dir / "rep").string()});
    CHECK(r.exit_code == 1);
    CHECK(r.output.find("only_pred") != std::string::npos);
    CHECK(r.output.find("only_gt") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "rep.json"));  // no partial artifacts
  }

  TEST_CASE("gradcheck single loss passes and the negative controls fail") {
    auto ok = run_cli({"gradcheck", "--loss", "dice"});
    CHECK(ok.exit_code == 0);
    CHECK(ok.output.find("dice") != std::string::npos);
    CHECK(ok.output.find("ok") != std::string::npos);

    auto corrupt = run_cli({"gradcheck", "--loss", "dice", "--corrupt"});
    CHECK(corrupt.exit_code == 2);
    CHECK(corrupt.output.find("FAIL") != std::string::npos);

    auto strict = run_cli({"gradcheck", "--loss", "dice", "--tol", "0"});
    CHECK(strict.exit_code == 2);

    auto unknown = run_cli({"gradcheck", "--loss", "bogus"});
    CHECK(unknown.exit_code == 1);
    CHECK(unknown.output.find("bogus") != std::string::npos);
  }

  TEST_CASE("segment and adapt run from a bare bundle checkpoint") {
    TempDir dir;
    networks::ArchPlan plan;
    plan.gen_width = 8;
    plan.disc_width = 8;
    plan.seg_width = 4;
    plan.head_dim = 16;
    auto bundle = networks::init_bundle(plan, 2);
    networks::save_bundle(bundle, dir / "ckpt");

    fs::create_directories(dir / "in");
    dataio::ImageSample s;
    torch::manual_seed(3);
    s.pixels = torch::rand({32, 32}) * 2.0f - 1.0f;
    s.spacing = {1.0f, 1.0f};
    dataio::save_image(s, dir / "in/x.img");

    auto seg = run_cli({"segment", "--ckpt", (dir / "ckpt").string(), "--input",
                        (dir / "in").string(), "--output", (dir / "seg").string()});
    CHECK(seg.exit_code == 0);
    CHECK(fs::exists(dir / "seg/x.msk"));

    auto adapt = run_cli({"adapt", "--ckpt", (dir / "ckpt").string(), "--input",
                          (dir / "in").string(), "--output", (dir / "ad").string(),
                          "--png-previews"});
    CHECK(adapt.exit_code == 0);
    CHECK(fs::exists(dir / "ad/x.img"));
    CHECK(fs::exists(dir / "ad/previews/x.png"));

    auto empty = run_cli({"segment", "--ckpt", (dir / "ckpt").string(), "--input",
                          (dir / "nowhere").string(), "--output", (dir / "y").string()});
    CHECK(empty.exit_code == 1);

    auto badckpt = run_cli({"segment", "--ckpt", (dir / "missing").string(), "--input",
                            (dir / "in").string(), "--output", (dir / "z").string()});
    CHECK(badckpt.exit_code != 0);
  }
}
