#include <torch/torch.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "xmodseg/config.hpp"
#include "xmodseg/dataio.hpp"
#include "xmodseg/gradcheck.hpp"
#include "xmodseg/metrics.hpp"
#include "xmodseg/networks.hpp"
#include "xmodseg/phantom.hpp"
#include "xmodseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace xmodseg;

namespace {

int cmd_synth_data(const std::string& out, int64_t n_a, int64_t n_b, int64_t n_t,
                   int64_t size, uint64_t seed, const std::string& gap_name, bool streaks,
                   bool force) {
  phantom::PhantomSpec spec;
  spec.image_size = size;
  spec.n_train_a = n_a;
  spec.n_train_b = n_b;
  spec.n_test_b = n_t;
  spec.seed = seed;
  spec.gap = phantom::gap_from_string(gap_name);
  spec.artifact_streaks = streaks;

  const fs::path out_dir(out);
  if (fs::exists(out_dir)) {
    if (!force && !fs::is_empty(out_dir)) {
      throw ValidationError("output directory exists and is not empty: " + out +
                            " (use --force to replace)");
    }
    fs::remove_all(out_dir);
  }
  auto manifest = phantom::generate_dataset(spec, out_dir);
  auto j = dataio::manifest_to_json(manifest);
  std::cout << j["counts"].dump() << "\n";
  return 0;
}

trainer::TrainConfig resolve_train_config(const CLI::App* cmd, const std::string& config_path,
                                          bool no_pct, bool no_mind, bool no_cc,
                                          uint64_t seed, int64_t steps, int threads) {
  trainer::TrainConfig cfg;
  if (!config_path.empty()) {
    cfg = trainer::load_config(config_path);
  }
  if (cmd->count("--no-pct")) cfg.toggles.pct_off = no_pct;
  if (cmd->count("--no-mind")) cfg.toggles.mind_off = no_mind;
  if (cmd->count("--no-cc")) cfg.toggles.cc_off = no_cc;
  if (cmd->count("--seed")) cfg.train.seed = seed;
  if (cmd->count("--steps")) cfg.train.total_steps = steps;
  if (cmd->count("--threads")) cfg.train.threads = threads;
  return cfg;
}

int cmd_eval(const std::string& pred_dir, const std::string& gt_dir,
             const std::string& report_base) {
  auto list_masks = [](const fs::path& dir) {
    if (!fs::is_directory(dir)) {
      throw ValidationError("not a directory: " + dir.string());
    }
    std::map<std::string, fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_regular_file() && e.path().extension() == ".msk") {
        out[e.path().stem().string()] = e.path();
      }
    }
    if (out.empty()) throw ValidationError("no .msk files in " + dir.string());
    return out;
  };
  auto preds = list_masks(pred_dir);
  auto gts = list_masks(gt_dir);

  std::vector<std::string> unmatched;
  for (const auto& [stem, p] : preds) {
    if (!gts.contains(stem)) unmatched.push_back(stem + " (prediction only)");
  }
  for (const auto& [stem, p] : gts) {
    if (!preds.contains(stem)) unmatched.push_back(stem + " (ground truth only)");
  }
  if (!unmatched.empty()) {
    std::string msg = "unmatched mask stems:";
    for (const auto& s : unmatched) msg += " " + s;
    throw ValidationError(msg);
  }

  std::vector<metrics::CaseMetrics> cases;
  for (const auto& [stem, pred_path] : preds) {
    auto pred = dataio::load_mask(pred_path);
    auto gt = dataio::load_mask(gts.at(stem));
    if (pred.labels.sizes() != gt.labels.sizes()) {
      throw ValidationError("mask shape mismatch for '" + stem + "'");
    }
    if (!(pred.spacing == gt.spacing)) {
      warn("eval: spacing differs for '" + stem + "'; using ground-truth spacing");
    }
    metrics::CaseMetrics cm;
    cm.id = stem;
    cm.dice = metrics::dice_score(pred.labels, gt.labels);
    const bool np = metrics::boundary_pixels(pred.labels).sum().item<int64_t>() > 0;
    const bool ng = metrics::boundary_pixels(gt.labels).sum().item<int64_t>() > 0;
    if (np && ng) {
      cm.asd_mm = metrics::average_surface_distance(pred.labels, gt.labels, gt.spacing);
    } else {
      cm.asd_defined = false;
    }
    cases.push_back(std::move(cm));
  }
  auto report = metrics::aggregate_report(cases);

  const fs::path base(report_base);
  if (base.has_parent_path()) fs::create_directories(base.parent_path());
  {
    std::ofstream jf(report_base + ".json", std::ios::trunc);
    if (!jf) throw ValidationError("cannot write " + report_base + ".json");
    jf << metrics::report_to_json(report).dump(2) << "\n";
    std::ofstream tf(report_base + ".txt", std::ios::trunc);
    tf << metrics::report_to_text(report);
    std::ofstream cf(report_base + ".csv", std::ios::trunc);
    cf << metrics::report_to_csv(report);
  }
  std::cout << metrics::report_to_text(report);
  return 0;
}

int cmd_gradcheck(std::vector<std::string> names, double tol, bool corrupt) {
  torch::set_num_threads(1);
  if (names.empty() || (names.size() == 1 && names[0] == "all")) {
    names = gradcheck::all_checks();
  }
  auto results = gradcheck::run(names, tol, corrupt);
  bool all_passed = true;
  for (const auto& r : results) {
    std::printf("%-6s max relative error %.3e (tolerance %.1e) %s\n", r.name.c_str(),
                r.max_rel_error, r.tolerance, r.passed ? "ok" : "FAIL");
    all_passed = all_passed && r.passed;
  }
  if (!all_passed) {
    std::fprintf(stderr, "gradcheck: at least one gradient audit failed\n");
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modality adaptation and segmentation toolkit"};
  app.require_subcommand(1);

  // synth-data
  auto* synth = app.add_subcommand("synth-data", "Generate a synthetic two-modality dataset");
  std::string synth_out, synth_gap = "gamma-texture";
  int64_t synth_na = 16, synth_nb = 16, synth_nt = 8, synth_size = 64;
  uint64_t synth_seed = 0;
  bool synth_streaks = false, synth_force = false;
  synth->add_option("--out", synth_out, "Output dataset directory")->required();
  synth->add_option("--n-train-a", synth_na, "Labeled domain-A sample count");
  synth->add_option("--n-train-b", synth_nb, "Unlabeled domain-B sample count");
  synth->add_option("--n-test-b", synth_nt, "Held-out labeled domain-B sample count");
  synth->add_option("--size", synth_size, "Image side length in pixels");
  synth->add_option("--seed", synth_seed, "Master seed");
  synth->add_option("--gap", synth_gap,
                    "Domain-B appearance gap: gamma-texture, bias-field, invert-contrast");
  synth->add_flag("--streaks", synth_streaks, "Add linear streak artifacts to domain B");
  synth->add_flag("--force", synth_force, "Replace an existing output directory");

  // train
  auto* train = app.add_subcommand("train", "Train adaptation and segmentation networks");
  std::string train_config, train_data, train_out, train_resume;
  bool no_pct = false, no_mind = false, no_cc = false, train_force = false;
  uint64_t train_seed = 0;
  int64_t train_steps = 0;
  int train_threads = 1;
  train->add_option("--config", train_config, "Training config JSON file");
  train->add_option("--data", train_data, "Dataset root directory")->required();
  train->add_option("--out", train_out, "Run output directory")->required();
  train->add_option("--resume", train_resume, "Checkpoint directory to resume from");
  train->add_flag("--force", train_force, "Resume even if the config hash differs");
  train->add_flag("--no-pct", no_pct, "Disable the patch-contrastive term");
  train->add_flag("--no-mind", no_mind, "Disable the descriptor half of the anatomy term");
  train->add_flag("--no-cc", no_cc, "Disable the correlation half of the anatomy term");
  train->add_option("--seed", train_seed, "Override train.seed");
  train->add_option("--steps", train_steps, "Override train.total_steps");
  train->add_option("--threads", train_threads, "Override train.threads");

  // adapt / segment
  auto* adapt = app.add_subcommand("adapt", "Translate domain-A images with a trained model");
  auto* segment = app.add_subcommand("segment", "Segment images with a trained model");
  std::string inf_ckpt, inf_in, inf_out;
  bool inf_png = false;
  for (auto* cmd : {adapt, segment}) {
    cmd->add_option("--ckpt", inf_ckpt, "Checkpoint directory")->required();
    cmd->add_option("--input", inf_in, "Directory of .img inputs")->required();
    cmd->add_option("--output", inf_out, "Output directory")->required();
    cmd->add_flag("--png-previews", inf_png, "Also write PNG previews");
  }

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Score predicted masks against ground truth");
  std::string eval_pred, eval_gt, eval_report;
  eval_cmd->add_option("--pred", eval_pred, "Directory of predicted .msk files")->required();
  eval_cmd->add_option("--gt", eval_gt, "Directory of ground-truth .msk files")->required();
  eval_cmd->add_option("--report", eval_report,
                       "Report base path (writes .json, .txt, .csv)")
      ->required();

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient audits");
  std::vector<std::string> gc_losses;
  double gc_tol = 1e-4;
  bool gc_corrupt = false;
  gc->add_option("--loss", gc_losses,
                 "Checks to run (adv idt dice nce pct mind cc ac, or all)");
  gc->add_option("--tol", gc_tol, "Maximum allowed relative error");
  gc->add_flag("--corrupt", gc_corrupt)->group("");  // negative-control hook, hidden

  if (const char* quiet = std::getenv("XMODSEG_QUIET"); quiet && quiet[0] != '\0') {
    set_warn_handler([](const std::string&) {});
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;  // help/version are success; any usage problem is 1
  }

  try {
    if (synth->parsed()) {
      return cmd_synth_data(synth_out, synth_na, synth_nb, synth_nt, synth_size, synth_seed,
                            synth_gap, synth_streaks, synth_force);
    }
    if (train->parsed()) {
      auto manifest = dataio::scan_dataset(train_data);
      const bool config_given = train->count("--config") || train->count("--no-pct") ||
                                train->count("--no-mind") || train->count("--no-cc") ||
                                train->count("--seed") || train->count("--steps") ||
                                train->count("--threads");
      auto cfg = resolve_train_config(train, train_config, no_pct, no_mind, no_cc,
                                      train_seed, train_steps, train_threads);
      if (!train_resume.empty()) {
        auto t = trainer::Trainer::resume(
            train_resume, manifest, train_out,
            config_given ? std::optional<trainer::TrainConfig>(cfg) : std::nullopt,
            train_force);
        t.run();
      } else {
        trainer::Trainer t(cfg, manifest, train_out);
        t.run();
      }
      return 0;
    }
    if (adapt->parsed()) {
      auto bundle = networks::load_bundle(inf_ckpt);
      trainer::adapt_images(bundle, inf_in, inf_out, inf_png);
      return 0;
    }
    if (segment->parsed()) {
      auto bundle = networks::load_bundle(inf_ckpt);
      trainer::segment_images(bundle, inf_in, inf_out, inf_png);
      return 0;
    }
    if (eval_cmd->parsed()) {
      return cmd_eval(eval_pred, eval_gt, eval_report);
    }
    if (gc->parsed()) {
      return cmd_gradcheck(gc_losses, gc_tol, gc_corrupt);
    }
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
