#include "xmodseg/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

namespace xmodseg::trainer {

namespace {

using nlohmann::json;

void require_object(const json& j, const std::string& where) {
  if (!j.is_object()) {
    throw ValidationError("config: expected an object at " +
                          (where.empty() ? "top level" : "'" + where + "'"));
  }
}

void reject_unknown(const json& j, const std::set<std::string>& allowed,
                    const std::string& prefix) {
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (!allowed.contains(key)) {
      throw ValidationError("unknown config key: " + (prefix.empty() ? key : prefix + "." + key));
    }
  }
}

template <typename T>
void read_into(const json& j, const char* key, T& out, const std::string& prefix) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ValidationError("config: bad value for key " +
                          (prefix.empty() ? std::string(key) : prefix + "." + key));
  }
}

}  // namespace

losses::LossWeights TrainConfig::effective_weights() const {
  auto w = weights;
  if (toggles.pct_off) w.pct = 0.0;
  if (toggles.mind_off) w.mind = 0.0;
  if (toggles.cc_off) w.cc = 0.0;
  return w;
}

TrainConfig config_from_json(const json& j) {
  require_object(j, "");
  reject_unknown(j, {"weights", "model", "optim", "train", "toggles", "adv_variant"}, "");

  TrainConfig c;
  if (j.contains("weights")) {
    const auto& w = j.at("weights");
    require_object(w, "weights");
    reject_unknown(w, {"adv", "idt", "seg", "pct", "ac", "alpha", "cc", "mind"}, "weights");
    read_into(w, "adv", c.weights.adv, "weights");
    read_into(w, "idt", c.weights.idt, "weights");
    read_into(w, "seg", c.weights.seg, "weights");
    read_into(w, "pct", c.weights.pct, "weights");
    read_into(w, "ac", c.weights.ac, "weights");
    read_into(w, "alpha", c.weights.alpha, "weights");
    read_into(w, "cc", c.weights.cc, "weights");
    read_into(w, "mind", c.weights.mind, "weights");
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    require_object(m, "model");
    reject_unknown(m,
                   {"gen_width", "disc_width", "seg_width", "head_dim", "residual_blocks",
                    "taps", "scse_combine", "seg_scse"},
                   "model");
    read_into(m, "gen_width", c.model.gen_width, "model");
    read_into(m, "disc_width", c.model.disc_width, "model");
    read_into(m, "seg_width", c.model.seg_width, "model");
    read_into(m, "head_dim", c.model.head_dim, "model");
    read_into(m, "residual_blocks", c.model.residual_blocks, "model");
    read_into(m, "taps", c.model.taps, "model");
    read_into(m, "scse_combine", c.model.scse_combine, "model");
    read_into(m, "seg_scse", c.model.seg_scse, "model");
  }
  if (j.contains("optim")) {
    const auto& o = j.at("optim");
    require_object(o, "optim");
    reject_unknown(o, {"lr", "beta1", "beta2"}, "optim");
    read_into(o, "lr", c.optim.lr, "optim");
    read_into(o, "beta1", c.optim.beta1, "optim");
    read_into(o, "beta2", c.optim.beta2, "optim");
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    require_object(t, "train");
    reject_unknown(t,
                   {"image_size", "batch_size", "total_steps", "checkpoint_every",
                    "eval_every", "seed", "samples_per_layer", "threads"},
                   "train");
    read_into(t, "image_size", c.train.image_size, "train");
    read_into(t, "batch_size", c.train.batch_size, "train");
    read_into(t, "total_steps", c.train.total_steps, "train");
    read_into(t, "checkpoint_every", c.train.checkpoint_every, "train");
    read_into(t, "eval_every", c.train.eval_every, "train");
    read_into(t, "seed", c.train.seed, "train");
    read_into(t, "samples_per_layer", c.train.samples_per_layer, "train");
    read_into(t, "threads", c.train.threads, "train");
  }
  if (j.contains("toggles")) {
    const auto& t = j.at("toggles");
    require_object(t, "toggles");
    reject_unknown(t, {"pct_off", "mind_off", "cc_off"}, "toggles");
    read_into(t, "pct_off", c.toggles.pct_off, "toggles");
    read_into(t, "mind_off", c.toggles.mind_off, "toggles");
    read_into(t, "cc_off", c.toggles.cc_off, "toggles");
  }
  if (j.contains("adv_variant")) {
    std::string v;
    read_into(j, "adv_variant", v, "");
    if (v == "log") {
      c.adv_variant = losses::AdvVariant::Log;
    } else if (v == "lsgan") {
      c.adv_variant = losses::AdvVariant::LeastSquares;
    } else {
      throw ValidationError("config: adv_variant must be \"log\" or \"lsgan\", got \"" + v +
                            "\"");
    }
  }

  // Cross-field validation.
  auto nonneg = [](double v, const char* name) {
    if (!(v >= 0)) throw ValidationError(std::string("config: ") + name + " must be >= 0");
  };
  nonneg(c.weights.adv, "weights.adv");
  nonneg(c.weights.idt, "weights.idt");
  nonneg(c.weights.seg, "weights.seg");
  nonneg(c.weights.pct, "weights.pct");
  nonneg(c.weights.ac, "weights.ac");
  nonneg(c.weights.cc, "weights.cc");
  nonneg(c.weights.mind, "weights.mind");
  if (!(c.weights.alpha > 0)) throw ValidationError("config: weights.alpha must be > 0");
  if (c.model.residual_blocks != 9) {
    throw ValidationError("config: model.residual_blocks is fixed at 9");
  }
  if (c.model.scse_combine != "sum" && c.model.scse_combine != "max") {
    throw ValidationError("config: model.scse_combine must be \"sum\" or \"max\"");
  }
  for (int tap : c.model.taps) {
    if (tap < 0 || tap >= networks::GeneratorImpl::tap_count()) {
      throw ValidationError("config: model.taps entries must lie in 0.." +
                            std::to_string(networks::GeneratorImpl::tap_count() - 1));
    }
  }
  if (c.model.taps.empty()) throw ValidationError("config: model.taps must not be empty");
  if (c.train.total_steps < 1) throw ValidationError("config: train.total_steps must be >= 1");
  if (c.train.image_size < 8) throw ValidationError("config: train.image_size must be >= 8");
  if (c.train.batch_size != 1) {
    throw ValidationError("config: train.batch_size other than 1 is not supported");
  }
  if (c.train.samples_per_layer < 1) {
    throw ValidationError("config: train.samples_per_layer must be >= 1");
  }
  if (c.train.checkpoint_every < 0 || c.train.eval_every < 0) {
    throw ValidationError("config: cadences must be >= 0");
  }
  if (c.train.threads < 1) throw ValidationError("config: train.threads must be >= 1");
  if (!(c.optim.lr > 0)) throw ValidationError("config: optim.lr must be > 0");
  if (!(c.optim.beta1 >= 0 && c.optim.beta1 < 1) ||
      !(c.optim.beta2 >= 0 && c.optim.beta2 < 1)) {
    throw ValidationError("config: optim.beta1/beta2 must lie in [0, 1)");
  }
  return c;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": invalid JSON: " + e.what());
  }
  return config_from_json(j);
}

nlohmann::json config_to_json(const TrainConfig& c) {
  json j;
  j["weights"] = {{"adv", c.weights.adv}, {"idt", c.weights.idt}, {"seg", c.weights.seg},
                  {"pct", c.weights.pct}, {"ac", c.weights.ac},   {"alpha", c.weights.alpha},
                  {"cc", c.weights.cc},   {"mind", c.weights.mind}};
  j["model"] = networks::plan_to_json(c.model);
  j["optim"] = {{"lr", c.optim.lr}, {"beta1", c.optim.beta1}, {"beta2", c.optim.beta2}};
  j["train"] = {{"image_size", c.train.image_size},
                {"batch_size", c.train.batch_size},
                {"total_steps", c.train.total_steps},
                {"checkpoint_every", c.train.checkpoint_every},
                {"eval_every", c.train.eval_every},
                {"seed", c.train.seed},
                {"samples_per_layer", c.train.samples_per_layer},
                {"threads", c.train.threads}};
  j["toggles"] = {{"pct_off", c.toggles.pct_off},
                  {"mind_off", c.toggles.mind_off},
                  {"cc_off", c.toggles.cc_off}};
  j["adv_variant"] = c.adv_variant == losses::AdvVariant::Log ? "log" : "lsgan";
  return j;
}

std::string config_hash(const TrainConfig& c) {
  const std::string dump = config_to_json(c).dump();
  uint64_t h = 1469598103934665603ull;  // FNV-1a 64
  for (unsigned char byte : dump) {
    h ^= byte;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace xmodseg::trainer
