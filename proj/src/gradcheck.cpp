#include "xmodseg/gradcheck.hpp"

#include <torch/torch.h>

#include <cmath>
#include <functional>

#include "xmodseg/anatomy.hpp"
#include "xmodseg/losses.hpp"
#include "xmodseg/networks.hpp"

namespace xmodseg::gradcheck {

namespace {

using ScalarFn = std::function<torch::Tensor(const torch::Tensor&)>;

// Max relative error between the autodiff gradient of f at x0 and a central
// finite difference, normalized by the largest finite-difference magnitude.
double gradient_error(const ScalarFn& f, const torch::Tensor& x0, bool corrupt,
                      double h = 1e-5) {
  auto x = x0.clone().set_requires_grad(true);
  auto y = f(x);
  if (y.dim() != 0) {
    throw std::logic_error("gradcheck: objective must be scalar");
  }
  y.backward();
  auto grad = x.grad().detach().clone();
  if (corrupt) {
    grad.view(-1)[0] += 1e-2;
  }

  auto fd = torch::zeros_like(x0);
  auto flat_fd = fd.view(-1);
  auto flat_base = x0.reshape(-1);
  torch::NoGradGuard no_grad;
  for (int64_t i = 0; i < flat_base.numel(); ++i) {
    auto plus = x0.clone();
    auto minus = x0.clone();
    plus.view(-1)[i] += h;
    minus.view(-1)[i] -= h;
    const double yp = f(plus).item<double>();
    const double ym = f(minus).item<double>();
    flat_fd[i] = (yp - ym) / (2.0 * h);
  }
  const double denom = fd.abs().max().item<double>() + 1e-12;
  return (grad - fd).abs().max().item<double>() / denom;
}

torch::Tensor unit_rows(const torch::Tensor& m) {
  return torch::nn::functional::normalize(
      m, torch::nn::functional::NormalizeFuncOptions().dim(-1).eps(1e-12));
}

struct Check {
  std::string name;
  std::function<double(bool)> runner;  // corrupt flag -> max rel error
};

std::vector<Check> build_checks() {
  const auto opts = torch::dtype(torch::kFloat64);
  std::vector<Check> checks;

  checks.push_back({"adv", [opts](bool corrupt) {
                      torch::manual_seed(101);
                      auto x0 = torch::randn({2, 1, 4, 4}, opts);
                      return gradient_error(
                          [](const torch::Tensor& x) {
                            return losses::adv_loss_d(x[0], x[1]) + losses::adv_loss_g(x[1]);
                          },
                          x0, corrupt);
                    }});

  checks.push_back({"idt", [opts](bool corrupt) {
                      torch::manual_seed(102);
                      auto x0 = torch::randn({2, 6, 6}, opts);
                      return gradient_error(
                          [](const torch::Tensor& x) {
                            return losses::identity_loss(x[0], x[1]);
                          },
                          x0, corrupt);
                    }});

  checks.push_back({"dice", [opts](bool corrupt) {
                      torch::manual_seed(103);
                      auto x0 = torch::randn({6, 6}, opts);
                      auto mask = (torch::rand({6, 6}, opts) > 0.5).to(torch::kFloat64);
                      return gradient_error(
                          [mask](const torch::Tensor& x) {
                            return losses::dice_seg_loss(torch::sigmoid(x), mask);
                          },
                          x0, corrupt);
                    }});

  checks.push_back({"nce", [opts](bool corrupt) {
                      torch::manual_seed(104);
                      auto x0 = torch::randn({6, 5}, opts);  // anchor, positive, 4 negatives
                      return gradient_error(
                          [](const torch::Tensor& x) {
                            auto rows = unit_rows(x);
                            using torch::indexing::Slice;
                            return losses::nce_term(rows[0], rows[1],
                                                    rows.index({Slice(2)}), 0.07);
                          },
                          x0, corrupt);
                    }});

  checks.push_back({"pct", [opts](bool corrupt) {
                      torch::manual_seed(105);
                      networks::ArchPlan plan;
                      plan.gen_width = 4;
                      plan.head_dim = 8;
                      plan.taps = {0, 1, 2, 3};
                      auto bundle = networks::init_bundle(plan, 105);
                      bundle.generator->to(torch::kFloat64);
                      bundle.heads->to(torch::kFloat64);
                      // Fixed locations: 3 per tap (deepest map on 8x8 is 2x2).
                      std::vector<torch::Tensor> locs = {
                          torch::tensor({0L, 17L, 63L}), torch::tensor({5L, 21L, 42L}),
                          torch::tensor({1L, 7L, 14L}), torch::tensor({0L, 1L, 3L})};
                      auto x0 = torch::randn({8, 8}, opts) * 0.5;
                      return gradient_error(
                          [&](const torch::Tensor& x) {
                            auto adapted = bundle.generator->forward(x);
                            return losses::pct_loss_at(bundle.generator, bundle.heads, x,
                                                       adapted, plan.taps, locs, 0.07);
                          },
                          x0, corrupt);
                    }});

  checks.push_back({"mind", [opts](bool corrupt) {
                      torch::manual_seed(106);
                      auto probe_weights = torch::randn({8, 8, 4}, opts);
                      auto reference = torch::randn({8, 8}, opts);
                      auto x0 = torch::randn({8, 8}, opts);
                      return gradient_error(
                          [probe_weights, reference](const torch::Tensor& x) {
                            auto field = anatomy::mind_descriptor(x);
                            return (field * probe_weights).sum() +
                                   anatomy::mind_loss(x, reference);
                          },
                          x0, corrupt);
                    }});

  checks.push_back({"cc", [opts](bool corrupt) {
                      torch::manual_seed(107);
                      auto reference = torch::randn({6, 6}, opts);
                      auto x0 = torch::randn({6, 6}, opts);
                      return gradient_error(
                          [reference](const torch::Tensor& x) {
                            return anatomy::cc(x, reference);
                          },
                          x0, corrupt);
                    }});

  checks.push_back({"ac", [opts](bool corrupt) {
                      torch::manual_seed(108);
                      auto reference = torch::randn({8, 8}, opts);
                      auto x0 = torch::randn({8, 8}, opts);
                      return gradient_error(
                          [reference](const torch::Tensor& x) {
                            return anatomy::anatomy_loss(x, reference);
                          },
                          x0, corrupt);
                    }});

  return checks;
}

}  // namespace

const std::vector<std::string>& all_checks() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& c : build_checks()) out.push_back(c.name);
    return out;
  }();
  return names;
}

std::vector<CheckResult> run(const std::vector<std::string>& names, double tolerance,
                             bool corrupt) {
  auto checks = build_checks();
  std::vector<CheckResult> results;
  for (const auto& name : names) {
    auto it = std::find_if(checks.begin(), checks.end(),
                           [&](const Check& c) { return c.name == name; });
    if (it == checks.end()) {
      throw ValidationError("gradcheck: unknown loss '" + name + "'");
    }
    CheckResult r;
    r.name = name;
    r.tolerance = tolerance;
    r.max_rel_error = it->runner(corrupt);
    r.passed = r.max_rel_error < tolerance;
    results.push_back(r);
  }
  return results;
}

}  // namespace xmodseg::gradcheck
