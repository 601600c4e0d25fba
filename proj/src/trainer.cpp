#include "xmodseg/trainer.hpp"

#include <ATen/Context.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>

#include "xmodseg/anatomy.hpp"
#include "xmodseg/losses.hpp"
#include "xmodseg/phantom.hpp"

namespace xmodseg::trainer {

namespace fs = std::filesystem;

namespace {

// Stream tags for per-step rng derivation.
constexpr uint64_t kTagData = 10;
constexpr uint64_t kTagPct = 12;

std::string step_dir_name(int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "step-%06lld", static_cast<long long>(step));
  return buf;
}

void keep_log_prefix(const fs::path& log_path, int64_t lines_to_keep) {
  if (!fs::exists(log_path)) {
    std::ofstream out(log_path, std::ios::trunc);  // fresh output dir: start empty
    return;
  }
  std::ifstream in(log_path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  in.close();
  if (static_cast<int64_t>(lines.size()) < lines_to_keep) {
    throw ValidationError("resume: loss log has " + std::to_string(lines.size()) +
                          " records, checkpoint expects at least " +
                          std::to_string(lines_to_keep));
  }
  std::ofstream out(log_path, std::ios::trunc);
  for (int64_t i = 0; i < lines_to_keep; ++i) out << lines[i] << "\n";
}

torch::Tensor to_unit_batch(const torch::Tensor& hw) {
  return hw.unsqueeze(0).unsqueeze(0);
}

}  // namespace

nlohmann::json step_to_json(const StepRecord& r) {
  nlohmann::json j;
  j["step"] = r.step;
  j["terms"] = {{"adv", r.adv}, {"idt", r.idt}, {"seg", r.seg}, {"pct", r.pct}, {"ac", r.ac}};
  j["d_loss"] = r.d_loss;
  j["total"] = r.total;
  j["ac_cc"] = r.ac_cc;
  j["ac_mind"] = r.ac_mind;
  j["lr"] = r.lr;
  j["rng"] = r.rng;
  j["t_ms"] = r.t_ms;
  return j;
}

Trainer::Trainer(const TrainConfig& config, const dataio::DatasetManifest& manifest,
                 fs::path out_dir, bool /*fresh_init*/)
    : config_(config), manifest_(manifest), out_dir_(std::move(out_dir)) {
  torch::set_num_threads(config_.train.threads);
  for (const auto* e : manifest_.domain_b_train()) b_train_.push_back(e);
  if (manifest_.domain_a.empty()) {
    throw ValidationError("trainer: dataset has no domain-A samples");
  }
  if (b_train_.empty()) {
    throw ValidationError("trainer: dataset has no unlabeled domain-B samples to train on");
  }
  fs::create_directories(out_dir_);
}

Trainer::Trainer(const TrainConfig& config, const dataio::DatasetManifest& manifest,
                 fs::path out_dir)
    : Trainer(config, manifest, std::move(out_dir), true) {
  bundle_ = networks::init_bundle(config_.model, config_.train.seed);
  build_optimizers();
  std::ofstream cf(out_dir_ / "config.json", std::ios::trunc);
  cf << config_to_json(config_).dump(2) << "\n";
  keep_log_prefix(out_dir_ / "log.jsonl", 0);
}

Trainer Trainer::resume(const fs::path& checkpoint_dir,
                        const dataio::DatasetManifest& manifest, fs::path out_dir,
                        const std::optional<TrainConfig>& override_config, bool force) {
  const auto trainer_json_path = checkpoint_dir / "trainer.json";
  std::ifstream tf(trainer_json_path);
  if (!tf) {
    throw ValidationError("resume: cannot open " + trainer_json_path.string());
  }
  nlohmann::json tj;
  try {
    tf >> tj;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(trainer_json_path.string() + ": invalid JSON: " + e.what());
  }
  TrainConfig stored = config_from_json(tj.at("config"));
  const std::string stored_hash = tj.at("config_hash").get<std::string>();

  TrainConfig active = stored;
  if (override_config) {
    if (config_hash(*override_config) != stored_hash) {
      if (!force) {
        throw ValidationError(
            "resume: config does not match the checkpoint's (hash " +
            config_hash(*override_config) + " vs stored " + stored_hash +
            "); pass --force to override");
      }
      warn("resume: overriding checkpoint config (forced)");
      active = *override_config;
    } else {
      active = *override_config;
    }
  }

  Trainer t(active, manifest, std::move(out_dir), false);
  t.bundle_ = networks::load_bundle(checkpoint_dir);
  t.next_step_ = tj.at("next_step").get<int64_t>();
  t.build_optimizers();
  torch::load(*t.opt_g_, (checkpoint_dir / "optim_g.pt").string());
  torch::load(*t.opt_d_, (checkpoint_dir / "optim_d.pt").string());
  auto state = networks::load_param_blob(checkpoint_dir / "state.bin");
  for (auto& [name, tensor] : state) {
    if (name == "torch_rng_state") {
      auto gen = at::detail::getDefaultCPUGenerator();  // shared impl; copy is fine
      gen.set_state(tensor);
    }
  }
  std::ofstream cf(t.out_dir_ / "config.json", std::ios::trunc);
  cf << config_to_json(active).dump(2) << "\n";
  keep_log_prefix(t.out_dir_ / "log.jsonl", t.next_step_);
  return t;
}

void Trainer::build_optimizers() {
  std::vector<torch::Tensor> g_params;
  for (auto& p : bundle_.generator->parameters()) g_params.push_back(p);
  for (auto& p : bundle_.segmenter->parameters()) g_params.push_back(p);
  for (auto& p : bundle_.heads->parameters()) g_params.push_back(p);
  auto opts = torch::optim::AdamOptions(config_.optim.lr)
                  .betas({config_.optim.beta1, config_.optim.beta2});
  opt_g_ = std::make_unique<torch::optim::Adam>(g_params, opts);
  opt_d_ = std::make_unique<torch::optim::Adam>(bundle_.discriminator->parameters(), opts);
}

void Trainer::set_lr(double lr) {
  for (auto* opt : {opt_g_.get(), opt_d_.get()}) {
    for (auto& group : opt->param_groups()) {
      static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
    }
  }
}

double Trainer::lr_at(int64_t step) const {
  const double total = static_cast<double>(config_.train.total_steps);
  const double factor = std::min(1.0, 2.0 * (total - static_cast<double>(step)) / total);
  return config_.optim.lr * factor;
}

const dataio::ImageSample& Trainer::cached_image(const fs::path& path) {
  auto it = image_cache_.find(path.string());
  if (it == image_cache_.end()) {
    auto processed =
        dataio::resize_normalize(dataio::load_image(path), config_.train.image_size);
    it = image_cache_.emplace(path.string(), std::move(processed)).first;
  }
  return it->second;
}

const dataio::MaskSample& Trainer::cached_mask(const fs::path& path) {
  auto it = mask_cache_.find(path.string());
  if (it == mask_cache_.end()) {
    auto processed = dataio::resize_mask(dataio::load_mask(path), config_.train.image_size);
    it = mask_cache_.emplace(path.string(), std::move(processed)).first;
  }
  return it->second;
}

Batch Trainer::sample_batch(int64_t step) {
  auto rng = make_rng(config_.train.seed, {kTagData, static_cast<uint64_t>(step)});
  const auto& entry_a =
      manifest_.domain_a[rng() % static_cast<uint64_t>(manifest_.domain_a.size())];
  const auto* entry_b = b_train_[rng() % static_cast<uint64_t>(b_train_.size())];

  Batch batch;
  batch.id_a = entry_a.id;
  batch.id_b = entry_b->id;
  batch.image_a = to_unit_batch(cached_image(entry_a.image).pixels);
  batch.mask_a =
      to_unit_batch(cached_mask(*entry_a.mask).labels.to(torch::kFloat32));
  batch.image_b = to_unit_batch(cached_image(entry_b->image).pixels);
  return batch;
}

StepRecord Trainer::train_step() {
  const auto t0 = std::chrono::steady_clock::now();
  const int64_t step = next_step_;
  if (step >= config_.train.total_steps) {
    throw ValidationError("train_step: past the configured total_steps");
  }
  Batch batch = sample_batch(step);
  const double lr = lr_at(step);
  set_lr(lr);
  const auto w = config_.effective_weights();
  const auto variant = config_.adv_variant;

  // Evaluate a term on the live graph when it carries weight, otherwise
  // grad-free (still reported, contributes nothing to the update).
  auto term = [](double weight, auto&& fn) -> torch::Tensor {
    if (weight > 0) return fn();
    torch::NoGradGuard no_grad;
    return fn();
  };

  auto fake = bundle_.generator->forward(batch.image_a);

  // Discriminator update against the frozen translation.
  opt_d_->zero_grad();
  auto d_real = bundle_.discriminator->forward(batch.image_b);
  auto d_fake = bundle_.discriminator->forward(fake.detach());
  auto d_loss = losses::adv_loss_d(d_real, d_fake, variant);
  const double d_loss_val = d_loss.item<double>();
  if (!std::isfinite(d_loss_val)) {
    throw NonFiniteLossError("adv_d");
  }
  d_loss.backward();
  opt_d_->step();

  // Joint translator / segmenter / heads update.
  opt_g_->zero_grad();
  losses::LossParts parts;
  parts.adv = term(w.adv, [&] {
    return losses::adv_loss_g(bundle_.discriminator->forward(fake), variant);
  });
  parts.idt = term(w.idt, [&] {
    return losses::identity_loss(bundle_.generator->forward(batch.image_b), batch.image_b);
  });
  parts.seg = term(w.seg, [&] {
    return losses::dice_seg_loss(bundle_.segmenter->forward(fake), batch.mask_a);
  });
  auto pct_rng = make_rng(config_.train.seed, {kTagPct, static_cast<uint64_t>(step)});
  parts.pct = term(w.pct, [&] {
    return losses::pct_loss(bundle_.generator, bundle_.heads, batch.image_a, fake,
                            config_.model.taps, config_.train.samples_per_layer, w.alpha,
                            pct_rng);
  });
  const bool ac_active = w.ac > 0;
  auto cc_term = term(ac_active ? w.cc : 0.0,
                      [&] { return 1.0 - anatomy::cc(fake, batch.image_a); });
  auto mind_term = term(ac_active ? w.mind : 0.0,
                        [&] { return anatomy::mind_loss(fake, batch.image_a); });
  parts.ac = w.cc * cc_term + w.mind * mind_term;

  auto breakdown = losses::total_loss(parts, w);
  breakdown.total.backward();
  opt_g_->step();

  StepRecord record;
  record.step = step;
  record.adv = breakdown.adv;
  record.idt = breakdown.idt;
  record.seg = breakdown.seg;
  record.pct = breakdown.pct;
  record.ac = breakdown.ac;
  record.d_loss = d_loss_val;
  record.total = breakdown.total.item<double>();
  record.ac_cc = cc_term.item<double>();
  record.ac_mind = mind_term.item<double>();
  record.lr = lr;
  record.rng = derive_seed(config_.train.seed, {kTagData, static_cast<uint64_t>(step)});
  record.t_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                    .count();
  ++next_step_;
  bundle_.iteration = next_step_;
  return record;
}

void Trainer::run() {
  std::ofstream log(out_dir_ / "log.jsonl", std::ios::app);
  if (!log) {
    throw ValidationError("trainer: cannot open loss log in " + out_dir_.string());
  }
  const bool can_eval = !manifest_.domain_b_eval().empty();
  while (next_step_ < config_.train.total_steps) {
    auto record = train_step();
    log << step_to_json(record).dump() << "\n";
    log.flush();
    const int64_t done = next_step_;
    if (config_.train.checkpoint_every > 0 && done % config_.train.checkpoint_every == 0 &&
        done < config_.train.total_steps) {
      save_checkpoint(out_dir_ / "checkpoints" / step_dir_name(done));
    }
    if (config_.train.eval_every > 0 && done % config_.train.eval_every == 0 && can_eval &&
        done < config_.train.total_steps) {
      auto report = evaluate();
      fs::create_directories(out_dir_ / "eval");
      std::ofstream ef(out_dir_ / "eval" / (step_dir_name(done) + ".json"), std::ios::trunc);
      ef << metrics::report_to_json(report).dump(2) << "\n";
    }
  }
  save_checkpoint(out_dir_ / "checkpoints" / "last");
  if (can_eval) {
    auto report = evaluate();
    fs::create_directories(out_dir_ / "eval");
    std::ofstream ef(out_dir_ / "eval" / "final.json", std::ios::trunc);
    ef << metrics::report_to_json(report).dump(2) << "\n";
    std::ofstream et(out_dir_ / "eval" / "final.txt", std::ios::trunc);
    et << metrics::report_to_text(report);
  }
}

metrics::MetricsReport Trainer::evaluate() {
  torch::NoGradGuard no_grad;
  std::vector<metrics::CaseMetrics> cases;
  for (const auto* entry : manifest_.domain_b_eval()) {
    const auto& image = cached_image(entry->image);
    const auto& gt = cached_mask(*entry->mask);
    auto prob = bundle_.segmenter->forward(to_unit_batch(image.pixels));
    auto pred = (prob.squeeze(0).squeeze(0) >= 0.5).to(torch::kUInt8);
    metrics::CaseMetrics cm;
    cm.id = entry->id;
    cm.dice = metrics::dice_score(pred, gt.labels);
    const bool pred_has_boundary = metrics::boundary_pixels(pred).sum().item<int64_t>() > 0;
    const bool gt_has_boundary =
        metrics::boundary_pixels(gt.labels).sum().item<int64_t>() > 0;
    if (pred_has_boundary && gt_has_boundary) {
      cm.asd_mm = metrics::average_surface_distance(pred, gt.labels, gt.spacing);
    } else {
      cm.asd_defined = false;
    }
    cases.push_back(std::move(cm));
  }
  return metrics::aggregate_report(cases);
}

void Trainer::save_checkpoint(const fs::path& dir) {
  bundle_.iteration = next_step_;
  networks::save_bundle(bundle_, dir);
  torch::save(*opt_g_, (dir / "optim_g.pt").string());
  torch::save(*opt_d_, (dir / "optim_d.pt").string());
  networks::save_param_blob(
      {{"torch_rng_state", at::detail::getDefaultCPUGenerator().get_state()}},
      dir / "state.bin");
  nlohmann::json tj;
  tj["config"] = config_to_json(config_);
  tj["config_hash"] = config_hash(config_);
  tj["next_step"] = next_step_;
  std::ofstream tf(dir / "trainer.json", std::ios::trunc);
  if (!tf) throw FormatError((dir / "trainer.json").string() + ": cannot open for writing");
  tf << tj.dump(2) << "\n";
}

namespace {

// Window-normalize in place when the stored intensities fall outside [-1, 1];
// geometry is untouched.
void ensure_normalized(dataio::ImageSample& sample) {
  const double lo = sample.pixels.min().item<double>();
  const double hi = sample.pixels.max().item<double>();
  if (lo >= -1.0 - 1e-6 && hi <= 1.0 + 1e-6) return;
  warn("inference: input '" + sample.id +
       "' is outside [-1, 1]; applying percentile window normalization");
  auto normalized = dataio::resize_normalize(sample, sample.pixels.size(0));
  if (normalized.pixels.sizes() == sample.pixels.sizes()) {
    sample.pixels = normalized.pixels;
  } else {
    // Non-square input: apply the window from quantiles directly.
    auto flat = sample.pixels.to(torch::kFloat64).flatten();
    const double p1 = torch::quantile(flat, 0.01).item<double>();
    const double p99 = torch::quantile(flat, 0.99).item<double>();
    if (p99 - p1 < 1e-12) {
      sample.pixels = torch::zeros_like(sample.pixels);
    } else {
      sample.pixels = torch::clamp(2.0f * (sample.pixels - static_cast<float>(p1)) /
                                           static_cast<float>(p99 - p1) -
                                       1.0f,
                                   -1.0f, 1.0f);
    }
  }
}

std::vector<fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) {
    throw ValidationError("inference: input directory not found: " + dir.string());
  }
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".img") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) {
    throw ValidationError("inference: no .img files in " + dir.string());
  }
  return files;
}

void warn_if_padded(const dataio::ImageSample& sample, int64_t multiple) {
  if (sample.pixels.size(0) % multiple != 0 || sample.pixels.size(1) % multiple != 0) {
    warn("inference: '" + sample.id + "' (" + std::to_string(sample.pixels.size(0)) + "x" +
         std::to_string(sample.pixels.size(1)) + ") is not divisible by " +
         std::to_string(multiple) + "; padding and cropping internally");
  }
}

}  // namespace

void adapt_images(networks::ModelBundle& bundle, const fs::path& input_dir,
                  const fs::path& output_dir, bool png_previews) {
  torch::NoGradGuard no_grad;
  auto files = list_images(input_dir);
  fs::create_directories(output_dir);
  if (png_previews) fs::create_directories(output_dir / "previews");
  for (const auto& file : files) {
    auto sample = dataio::load_image(file);
    ensure_normalized(sample);
    warn_if_padded(sample, 4);
    auto adapted = bundle.generator->forward(to_unit_batch(sample.pixels));
    dataio::ImageSample out;
    out.pixels = adapted.squeeze(0).squeeze(0).contiguous();
    out.spacing = sample.spacing;
    out.id = sample.id;
    dataio::save_image(out, output_dir / (out.id + ".img"));
    if (png_previews) {
      dataio::write_png_preview(out.pixels, output_dir / "previews" / (out.id + ".png"));
    }
  }
}

void segment_images(networks::ModelBundle& bundle, const fs::path& input_dir,
                    const fs::path& output_dir, bool png_previews) {
  torch::NoGradGuard no_grad;
  auto files = list_images(input_dir);
  fs::create_directories(output_dir);
  if (png_previews) fs::create_directories(output_dir / "previews");
  for (const auto& file : files) {
    auto sample = dataio::load_image(file);
    ensure_normalized(sample);
    warn_if_padded(sample, 16);
    auto prob = bundle.segmenter->forward(to_unit_batch(sample.pixels));
    dataio::MaskSample mask;
    mask.labels = (prob.squeeze(0).squeeze(0) >= 0.5).to(torch::kUInt8).contiguous();
    mask.spacing = sample.spacing;
    mask.id = sample.id;
    dataio::save_mask(mask, output_dir / (mask.id + ".msk"));
    if (png_previews) {
      dataio::write_png_preview(mask.labels.to(torch::kFloat32) * 2.0f - 1.0f,
                                output_dir / "previews" / (mask.id + ".png"));
    }
  }
}

}  // namespace xmodseg::trainer
