#include "xmodseg/networks.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace xmodseg::networks {

namespace F = torch::nn::functional;
using torch::indexing::Slice;

nlohmann::json plan_to_json(const ArchPlan& plan) {
  return {{"gen_width", plan.gen_width},
          {"disc_width", plan.disc_width},
          {"seg_width", plan.seg_width},
          {"head_dim", plan.head_dim},
          {"residual_blocks", plan.residual_blocks},
          {"taps", plan.taps},
          {"scse_combine", plan.scse_combine},
          {"seg_scse", plan.seg_scse}};
}

ArchPlan plan_from_json(const nlohmann::json& j) {
  ArchPlan plan;
  plan.gen_width = j.at("gen_width").get<int64_t>();
  plan.disc_width = j.at("disc_width").get<int64_t>();
  plan.seg_width = j.at("seg_width").get<int64_t>();
  plan.head_dim = j.at("head_dim").get<int64_t>();
  plan.residual_blocks = j.at("residual_blocks").get<int64_t>();
  plan.taps = j.at("taps").get<std::vector<int>>();
  plan.scse_combine = j.at("scse_combine").get<std::string>();
  plan.seg_scse = j.at("seg_scse").get<bool>();
  return plan;
}

namespace {

torch::nn::InstanceNorm2d make_in(int64_t channels, bool affine = false) {
  return torch::nn::InstanceNorm2d(
      torch::nn::InstanceNorm2dOptions(channels).affine(affine));
}

// Replicate-pad bottom/right so both sides are multiples of m; returns the
// amount padded so the caller can crop back.
torch::Tensor pad_to_multiple(const torch::Tensor& x, int64_t m, int64_t& pad_h,
                              int64_t& pad_w) {
  const int64_t h = x.size(2);
  const int64_t w = x.size(3);
  pad_h = (m - h % m) % m;
  pad_w = (m - w % m) % m;
  if (pad_h == 0 && pad_w == 0) return x;
  return F::pad(x, F::PadFuncOptions({0, pad_w, 0, pad_h}).mode(torch::kReplicate));
}

torch::Tensor crop_back(const torch::Tensor& x, int64_t pad_h, int64_t pad_w) {
  if (pad_h == 0 && pad_w == 0) return x;
  return x.index({Slice(), Slice(), Slice(0, x.size(2) - pad_h),
                  Slice(0, x.size(3) - pad_w)});
}

torch::Tensor ensure_nchw(const torch::Tensor& x, const char* what) {
  if (x.dim() == 2) return x.unsqueeze(0).unsqueeze(0);
  if (x.dim() == 4 && x.size(1) == 1) return x;
  throw ValidationError(std::string(what) + ": expected H x W or N x 1 x H x W input");
}

}  // namespace

ResBlockImpl::ResBlockImpl(int64_t channels) {
  body = torch::nn::Sequential(
      torch::nn::ReflectionPad2d(1),
      torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3)),
      make_in(channels), torch::nn::ReLU(),
      torch::nn::ReflectionPad2d(1),
      torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3)),
      make_in(channels));
  register_module("body", body);
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x) {
  return x + body->forward(x);
}

GeneratorImpl::GeneratorImpl(int64_t width_, int64_t n_res_)
    : width(width_), n_res(n_res_) {
  if (n_res < 6) {
    throw ValidationError("generator: need at least 6 residual blocks (5 encoder + 1)");
  }
  stem = torch::nn::Sequential(
      torch::nn::ReflectionPad2d(3),
      torch::nn::Conv2d(torch::nn::Conv2dOptions(1, width, 7)), make_in(width),
      torch::nn::ReLU());
  down1 = torch::nn::Sequential(
      torch::nn::Conv2d(torch::nn::Conv2dOptions(width, 2 * width, 3).stride(2).padding(1)),
      make_in(2 * width), torch::nn::ReLU());
  down2 = torch::nn::Sequential(
      torch::nn::Conv2d(
          torch::nn::Conv2dOptions(2 * width, 4 * width, 3).stride(2).padding(1)),
      make_in(4 * width), torch::nn::ReLU());
  res_blocks = torch::nn::ModuleList();
  for (int64_t i = 0; i < n_res; ++i) {
    res_blocks->push_back(ResBlock(4 * width));
  }
  up1 = torch::nn::Sequential(
      torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(4 * width, 2 * width, 3)
                                     .stride(2)
                                     .padding(1)
                                     .output_padding(1)),
      make_in(2 * width), torch::nn::ReLU());
  up2 = torch::nn::Sequential(
      torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(2 * width, width, 3)
                                     .stride(2)
                                     .padding(1)
                                     .output_padding(1)),
      make_in(width), torch::nn::ReLU());
  out_stage = torch::nn::Sequential(
      torch::nn::ReflectionPad2d(3),
      torch::nn::Conv2d(torch::nn::Conv2dOptions(width, 1, 7)), torch::nn::Tanh());
  register_module("stem", stem);
  register_module("down1", down1);
  register_module("down2", down2);
  register_module("res_blocks", res_blocks);
  register_module("up1", up1);
  register_module("up2", up2);
  register_module("out_stage", out_stage);
}

std::vector<int64_t> GeneratorImpl::tap_channels(int64_t width) {
  return {1, width, 2 * width, 4 * width, 4 * width, 4 * width, 4 * width, 4 * width,
          4 * width};
}

torch::Tensor GeneratorImpl::forward(const torch::Tensor& x) {
  return forward_with_taps(x, {}).output;
}

TapResult GeneratorImpl::forward_with_taps(const torch::Tensor& input,
                                           const std::vector<int>& tap_ids) {
  auto x = ensure_nchw(input, "generator");
  for (size_t i = 0; i < tap_ids.size(); ++i) {
    if (tap_ids[i] < 0 || tap_ids[i] >= tap_count()) {
      throw ValidationError("generator: invalid tap id " + std::to_string(tap_ids[i]) +
                            "; valid ids are 0.." + std::to_string(tap_count() - 1));
    }
    if (i > 0 && tap_ids[i] <= tap_ids[i - 1]) {
      throw ValidationError("generator: tap ids must be strictly ascending");
    }
  }
  int64_t pad_h = 0, pad_w = 0;
  x = pad_to_multiple(x, 4, pad_h, pad_w);

  TapResult result;
  result.taps.resize(tap_ids.size());
  auto record = [&](int id, const torch::Tensor& t) {
    for (size_t i = 0; i < tap_ids.size(); ++i) {
      if (tap_ids[i] == id) result.taps[i] = t;
    }
  };

  record(0, x);
  auto t = stem->forward(x);
  record(1, t);
  t = down1->forward(t);
  record(2, t);
  t = down2->forward(t);
  record(3, t);
  for (int64_t i = 0; i < n_res; ++i) {
    t = res_blocks[i]->as<ResBlockImpl>()->forward(t);
    if (i < 5) record(static_cast<int>(4 + i), t);
  }
  t = up1->forward(t);
  t = up2->forward(t);
  t = out_stage->forward(t);
  result.output = crop_back(t, pad_h, pad_w);
  if (input.dim() == 2) result.output = result.output.squeeze(0).squeeze(0);
  return result;
}

std::vector<torch::Tensor> GeneratorImpl::encoder_features(
    const torch::Tensor& input, const std::vector<int>& tap_ids) {
  if (tap_ids.empty()) {
    throw ValidationError("encoder_features: no tap ids given");
  }
  auto x = ensure_nchw(input, "generator");
  for (size_t i = 0; i < tap_ids.size(); ++i) {
    if (tap_ids[i] < 0 || tap_ids[i] >= tap_count()) {
      throw ValidationError("generator: invalid tap id " + std::to_string(tap_ids[i]) +
                            "; valid ids are 0.." + std::to_string(tap_count() - 1));
    }
    if (i > 0 && tap_ids[i] <= tap_ids[i - 1]) {
      throw ValidationError("generator: tap ids must be strictly ascending");
    }
  }
  int64_t pad_h = 0, pad_w = 0;
  x = pad_to_multiple(x, 4, pad_h, pad_w);

  std::vector<torch::Tensor> taps(tap_ids.size());
  auto record = [&](int id, const torch::Tensor& t) {
    for (size_t i = 0; i < tap_ids.size(); ++i) {
      if (tap_ids[i] == id) taps[i] = t;
    }
  };
  const int deepest = tap_ids.back();
  record(0, x);
  if (deepest >= 1) {
    auto t = stem->forward(x);
    record(1, t);
    if (deepest >= 2) {
      t = down1->forward(t);
      record(2, t);
    }
    if (deepest >= 3) {
      t = down2->forward(t);
      record(3, t);
    }
    for (int i = 0; i < deepest - 3; ++i) {
      t = res_blocks[i]->as<ResBlockImpl>()->forward(t);
      record(4 + i, t);
    }
  }
  return taps;
}

DiscriminatorImpl::DiscriminatorImpl(int64_t width_) : width(width_) {
  stages = torch::nn::Sequential(
      torch::nn::Conv2d(torch::nn::Conv2dOptions(1, width, 4).stride(2).padding(1)),
      torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)),
      torch::nn::Conv2d(torch::nn::Conv2dOptions(width, 2 * width, 4).stride(2).padding(1)),
      make_in(2 * width),
      torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)),
      torch::nn::Conv2d(
          torch::nn::Conv2dOptions(2 * width, 4 * width, 4).stride(2).padding(1)),
      make_in(4 * width),
      torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)),
      torch::nn::Conv2d(torch::nn::Conv2dOptions(4 * width, 1, 1)));
  register_module("stages", stages);
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& x) {
  return stages->forward(ensure_nchw(x, "discriminator"));
}

SCSEBlockImpl::SCSEBlockImpl(int64_t channels_, Combine combine_)
    : channels(channels_), combine(combine_) {
  if (channels < 2) {
    throw ValidationError("scse: need at least 2 channels");
  }
  fc1 = torch::nn::Linear(channels, channels / 2);
  fc2 = torch::nn::Linear(channels / 2, channels);
  spatial = torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, 1, 1));
  register_module("fc1", fc1);
  register_module("fc2", fc2);
  register_module("spatial", spatial);
}

torch::Tensor SCSEBlockImpl::forward(const torch::Tensor& x) {
  return forward_with_gates(x, std::nullopt, std::nullopt);
}

torch::Tensor SCSEBlockImpl::forward_with_gates(
    const torch::Tensor& x, const std::optional<torch::Tensor>& channel_gate,
    const std::optional<torch::Tensor>& spatial_gate) {
  torch::Tensor cg;
  if (channel_gate) {
    cg = *channel_gate;
  } else {
    auto pooled = F::adaptive_avg_pool2d(
                      x, F::AdaptiveAvgPool2dFuncOptions(std::vector<int64_t>{1, 1}))
                      .flatten(1);
    cg = torch::sigmoid(fc2->forward(torch::relu(fc1->forward(pooled))))
             .view({x.size(0), channels, 1, 1});
  }
  auto sg = spatial_gate ? *spatial_gate : torch::sigmoid(spatial->forward(x));
  auto channel_branch = x * cg;
  auto spatial_branch = x * sg;
  if (combine == Combine::Max) {
    return torch::max(channel_branch, spatial_branch);
  }
  return channel_branch + spatial_branch;
}

namespace {

torch::nn::Sequential double_conv(int64_t in, int64_t out) {
  return torch::nn::Sequential(
      torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1)),
      make_in(out, /*affine=*/true), torch::nn::ReLU(),
      torch::nn::Conv2d(torch::nn::Conv2dOptions(out, out, 3).padding(1)),
      make_in(out, /*affine=*/true), torch::nn::ReLU());
}

}  // namespace

SegmenterImpl::SegmenterImpl(int64_t width_, bool use_scse_, SCSEBlockImpl::Combine combine)
    : width(width_), use_scse(use_scse_) {
  const std::vector<int64_t> widths = {width, 2 * width, 4 * width, 8 * width, 16 * width};
  enc = torch::nn::ModuleList();
  enc_scse = torch::nn::ModuleList();
  int64_t in_ch = 1;
  for (int64_t w : widths) {
    enc->push_back(double_conv(in_ch, w));
    if (use_scse) enc_scse->push_back(SCSEBlock(w, combine));
    in_ch = w;
  }
  ups = torch::nn::ModuleList();
  dec = torch::nn::ModuleList();
  dec_scse = torch::nn::ModuleList();
  for (int level = 3; level >= 0; --level) {
    const int64_t deep = widths[level + 1];
    const int64_t shallow = widths[level];
    ups->push_back(torch::nn::ConvTranspose2d(
        torch::nn::ConvTranspose2dOptions(deep, shallow, 2).stride(2)));
    dec->push_back(double_conv(2 * shallow, shallow));
    if (use_scse) dec_scse->push_back(SCSEBlock(shallow, combine));
  }
  head = torch::nn::Conv2d(torch::nn::Conv2dOptions(width, 1, 1));
  register_module("enc", enc);
  register_module("enc_scse", enc_scse);
  register_module("ups", ups);
  register_module("dec", dec);
  register_module("dec_scse", dec_scse);
  register_module("head", head);
}

torch::Tensor SegmenterImpl::forward(const torch::Tensor& input) {
  auto x = ensure_nchw(input, "segmenter");
  int64_t pad_h = 0, pad_w = 0;
  x = pad_to_multiple(x, 16, pad_h, pad_w);

  std::vector<torch::Tensor> skips;
  auto t = x;
  for (size_t level = 0; level < enc->size(); ++level) {
    if (level > 0) t = F::max_pool2d(t, F::MaxPool2dFuncOptions(2));
    t = enc[level]->as<torch::nn::SequentialImpl>()->forward(t);
    if (use_scse) t = enc_scse[level]->as<SCSEBlockImpl>()->forward(t);
    if (level + 1 < enc->size()) skips.push_back(t);
  }
  for (size_t i = 0; i < ups->size(); ++i) {
    t = ups[i]->as<torch::nn::ConvTranspose2dImpl>()->forward(t);
    t = torch::cat({skips[skips.size() - 1 - i], t}, 1);
    t = dec[i]->as<torch::nn::SequentialImpl>()->forward(t);
    if (use_scse) t = dec_scse[i]->as<SCSEBlockImpl>()->forward(t);
  }
  t = torch::sigmoid(head->forward(t));
  t = crop_back(t, pad_h, pad_w);
  if (input.dim() == 2) t = t.squeeze(0).squeeze(0);
  return t;
}

ProjectionHeadsImpl::ProjectionHeadsImpl(const std::vector<int64_t>& input_channels_,
                                         int64_t out_dim_)
    : out_dim(out_dim_), input_channels(input_channels_) {
  if (input_channels.empty()) {
    throw ValidationError("projection heads: no input layers");
  }
  mlps = torch::nn::ModuleList();
  for (int64_t c : input_channels) {
    mlps->push_back(torch::nn::Sequential(torch::nn::Linear(c, out_dim), torch::nn::ReLU(),
                                          torch::nn::Linear(out_dim, out_dim)));
  }
  register_module("mlps", mlps);
}

torch::Tensor ProjectionHeadsImpl::project(size_t layer_index,
                                           const torch::Tensor& features,
                                           const torch::Tensor& locations) {
  if (layer_index >= mlps->size()) {
    throw ValidationError("projection heads: layer index out of range");
  }
  if (features.dim() != 4 || features.size(0) != 1) {
    throw ValidationError("projection heads: expected 1 x C x H x W features");
  }
  const int64_t c = features.size(1);
  if (c != input_channels[layer_index]) {
    throw ValidationError("projection heads: channel mismatch for layer " +
                          std::to_string(layer_index) + ": expected " +
                          std::to_string(input_channels[layer_index]) + ", got " +
                          std::to_string(c));
  }
  const int64_t hw = features.size(2) * features.size(3);
  auto idx = locations.to(torch::kInt64);
  if (idx.numel() == 0) {
    throw ValidationError("projection heads: empty location set");
  }
  if (idx.min().item<int64_t>() < 0 || idx.max().item<int64_t>() >= hw) {
    throw ValidationError("projection heads: location index out of range");
  }
  auto flat = features.view({c, hw});
  auto sel = flat.index_select(1, idx).t();  // S x C
  auto v = mlps[layer_index]->as<torch::nn::SequentialImpl>()->forward(sel);
  return F::normalize(v, F::NormalizeFuncOptions().dim(1).eps(1e-12));
}

std::vector<torch::Tensor> sample_patch_features(
    ProjectionHeads& heads, const std::vector<torch::Tensor>& feature_stack,
    const std::vector<torch::Tensor>& locations) {
  if (feature_stack.size() != locations.size()) {
    throw ValidationError("sample_patch_features: stack/location count mismatch");
  }
  if (feature_stack.size() != heads->layer_count()) {
    throw ValidationError("sample_patch_features: stack size does not match head count");
  }
  std::vector<torch::Tensor> out;
  out.reserve(feature_stack.size());
  for (size_t l = 0; l < feature_stack.size(); ++l) {
    out.push_back(heads->project(l, feature_stack[l], locations[l]));
  }
  return out;
}

ModelBundle init_bundle(const ArchPlan& plan, uint64_t seed) {
  if (plan.scse_combine != "sum" && plan.scse_combine != "max") {
    throw ValidationError("init_bundle: scse_combine must be \"sum\" or \"max\"");
  }
  if (plan.residual_blocks != 9) {
    throw ValidationError("init_bundle: residual block count is fixed at 9");
  }
  torch::manual_seed(seed);
  ModelBundle bundle;
  bundle.plan = plan;
  bundle.seed = seed;
  bundle.iteration = 0;
  const auto combine = plan.scse_combine == "max" ? SCSEBlockImpl::Combine::Max
                                                  : SCSEBlockImpl::Combine::Sum;
  bundle.generator = Generator(plan.gen_width, plan.residual_blocks);
  bundle.discriminator = Discriminator(plan.disc_width);
  bundle.segmenter = Segmenter(plan.seg_width, plan.seg_scse, combine);
  auto all_channels = GeneratorImpl::tap_channels(plan.gen_width);
  std::vector<int64_t> tap_channels;
  for (int tap : plan.taps) {
    if (tap < 0 || tap >= GeneratorImpl::tap_count()) {
      throw ValidationError("init_bundle: tap id " + std::to_string(tap) +
                            " outside 0.." + std::to_string(GeneratorImpl::tap_count() - 1));
    }
    tap_channels.push_back(all_channels[tap]);
  }
  bundle.heads = ProjectionHeads(tap_channels, plan.head_dim);

  torch::NoGradGuard no_grad;
  for (auto* module : {static_cast<torch::nn::Module*>(bundle.generator.get()),
                       static_cast<torch::nn::Module*>(bundle.discriminator.get()),
                       static_cast<torch::nn::Module*>(bundle.segmenter.get()),
                       static_cast<torch::nn::Module*>(bundle.heads.get())}) {
    for (auto& p : module->named_parameters()) {
      if (p.key().ends_with(".bias")) {
        p.value().zero_();
      } else if (p.value().dim() >= 2) {
        p.value().normal_(0.0, 0.02);  // conv / linear weights
      } else {
        p.value().normal_(1.0, 0.02);  // norm scales
      }
    }
  }
  return bundle;
}

std::vector<std::pair<std::string, torch::Tensor>> named_bundle_tensors(
    const ModelBundle& bundle) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  auto collect = [&](const std::string& prefix, const torch::nn::Module& m) {
    for (const auto& p : m.named_parameters()) {
      out.emplace_back(prefix + "." + p.key(), p.value());
    }
    for (const auto& b : m.named_buffers()) {
      out.emplace_back(prefix + "." + b.key(), b.value());
    }
  };
  collect("generator", *bundle.generator);
  collect("discriminator", *bundle.discriminator);
  collect("segmenter", *bundle.segmenter);
  collect("heads", *bundle.heads);
  return out;
}

namespace {

constexpr char kBlobMagic[4] = {'X', 'M', 'S', 'B'};

uint8_t dtype_code(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return 0;
    case torch::kFloat64: return 1;
    case torch::kUInt8: return 2;
    case torch::kInt64: return 3;
    default:
      throw FormatError("param blob: unsupported tensor dtype");
  }
}

torch::ScalarType code_dtype(uint8_t code, const std::filesystem::path& path) {
  switch (code) {
    case 0: return torch::kFloat32;
    case 1: return torch::kFloat64;
    case 2: return torch::kUInt8;
    case 3: return torch::kInt64;
    default:
      throw FormatError(path.string() + ": unknown dtype code " + std::to_string(code));
  }
}

template <typename T>
void write_pod(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const std::filesystem::path& path) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw FormatError(path.string() + ": truncated blob");
  return v;
}

}  // namespace

void save_param_blob(const std::vector<std::pair<std::string, torch::Tensor>>& tensors,
                     const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(path.string() + ": cannot open for writing");
  out.write(kBlobMagic, 4);
  write_pod<uint32_t>(out, 1);  // version
  write_pod<uint64_t>(out, tensors.size());
  for (const auto& [name, raw] : tensors) {
    auto t = raw.detach().cpu().contiguous();
    write_pod<uint32_t>(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<uint8_t>(out, dtype_code(t.scalar_type()));
    write_pod<uint32_t>(out, static_cast<uint32_t>(t.dim()));
    for (int64_t d = 0; d < t.dim(); ++d) {
      write_pod<uint64_t>(out, static_cast<uint64_t>(t.size(d)));
    }
    out.write(reinterpret_cast<const char*>(t.data_ptr()),
              static_cast<std::streamsize>(t.numel() * t.element_size()));
  }
  if (!out) throw FormatError(path.string() + ": write failed");
}

std::vector<std::pair<std::string, torch::Tensor>> load_param_blob(
    const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string() + ": cannot open file");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kBlobMagic, 4) != 0) {
    throw FormatError(path.string() + ": bad magic bytes");
  }
  const auto version = read_pod<uint32_t>(in, path);
  if (version != 1) {
    throw FormatError(path.string() + ": unsupported blob version " +
                      std::to_string(version));
  }
  const auto count = read_pod<uint64_t>(in, path);
  std::vector<std::pair<std::string, torch::Tensor>> out;
  out.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    const auto name_len = read_pod<uint32_t>(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw FormatError(path.string() + ": truncated blob");
    const auto dtype = code_dtype(read_pod<uint8_t>(in, path), path);
    const auto ndim = read_pod<uint32_t>(in, path);
    std::vector<int64_t> dims(ndim);
    for (uint32_t d = 0; d < ndim; ++d) {
      dims[d] = static_cast<int64_t>(read_pod<uint64_t>(in, path));
    }
    auto t = torch::empty(dims, dtype);
    in.read(reinterpret_cast<char*>(t.data_ptr()),
            static_cast<std::streamsize>(t.numel() * t.element_size()));
    if (!in) throw FormatError(path.string() + ": truncated tensor payload for " + name);
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

void save_bundle(const ModelBundle& bundle, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "xmodseg-checkpoint";
  manifest["version"] = 1;
  manifest["plan"] = plan_to_json(bundle.plan);
  manifest["seed"] = bundle.seed;
  manifest["iteration"] = bundle.iteration;
  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  if (!mf) throw FormatError((dir / "manifest.json").string() + ": cannot open for writing");
  mf << manifest.dump(2) << "\n";
  save_param_blob(named_bundle_tensors(bundle), dir / "params.bin");
}

ModelBundle load_bundle(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream mf(manifest_path);
  if (!mf) throw FormatError(manifest_path.string() + ": cannot open file");
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest_path.string() + ": invalid JSON: " + e.what());
  }
  if (manifest.value("format", "") != "xmodseg-checkpoint") {
    throw FormatError(manifest_path.string() + ": not a checkpoint manifest");
  }
  ArchPlan plan;
  try {
    plan = plan_from_json(manifest.at("plan"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest_path.string() + ": bad architecture plan: " + e.what());
  }
  auto bundle = init_bundle(plan, manifest.value("seed", uint64_t{0}));
  bundle.iteration = manifest.value("iteration", int64_t{0});

  auto loaded = load_param_blob(dir / "params.bin");
  std::map<std::string, torch::Tensor> by_name;
  for (auto& [name, t] : loaded) by_name.emplace(std::move(name), std::move(t));

  torch::NoGradGuard no_grad;
  for (auto& [name, param] : named_bundle_tensors(bundle)) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw FormatError(dir.string() + ": checkpoint is missing tensor " + name);
    }
    if (it->second.sizes() != param.sizes()) {
      std::ostringstream msg;
      msg << dir.string() << ": shape mismatch for " << name << ": checkpoint has "
          << it->second.sizes() << ", architecture needs " << param.sizes();
      throw FormatError(msg.str());
    }
    param.copy_(it->second.to(param.scalar_type()));
    by_name.erase(it);
  }
  if (!by_name.empty()) {
    throw FormatError(dir.string() + ": checkpoint has unexpected tensor " +
                      by_name.begin()->first);
  }
  return bundle;
}

namespace {

int64_t param_count(const torch::nn::Module& m) {
  int64_t n = 0;
  for (const auto& p : m.parameters()) n += p.numel();
  return n;
}

}  // namespace

nlohmann::json architecture_audit(ModelBundle& bundle, int64_t probe_size) {
  nlohmann::json audit;
  audit["plan"] = plan_to_json(bundle.plan);
  audit["residual_blocks"] = static_cast<int64_t>(bundle.generator->res_blocks->size());
  audit["segmenter_levels"] = static_cast<int64_t>(bundle.segmenter->enc->size());
  int64_t scse_blocks = 0;
  if (bundle.segmenter->use_scse) {
    scse_blocks = static_cast<int64_t>(bundle.segmenter->enc_scse->size() +
                                       bundle.segmenter->dec_scse->size());
  }
  audit["scse_blocks"] = scse_blocks;
  audit["parameters"] = {{"generator", param_count(*bundle.generator)},
                         {"discriminator", param_count(*bundle.discriminator)},
                         {"segmenter", param_count(*bundle.segmenter)},
                         {"heads", param_count(*bundle.heads)}};

  torch::NoGradGuard no_grad;
  auto probe = torch::zeros({1, 1, probe_size, probe_size});
  auto taps = bundle.generator->encoder_features(probe, bundle.plan.taps);
  audit["taps"] = nlohmann::json::array();
  for (size_t i = 0; i < taps.size(); ++i) {
    audit["taps"].push_back({{"id", bundle.plan.taps[i]},
                             {"channels", taps[i].size(1)},
                             {"height", taps[i].size(2)},
                             {"width", taps[i].size(3)}});
  }
  auto logits = bundle.discriminator->forward(probe);
  audit["discriminator_output"] = {{"height", logits.size(2)}, {"width", logits.size(3)}};
  return audit;
}

}  // namespace xmodseg::networks
