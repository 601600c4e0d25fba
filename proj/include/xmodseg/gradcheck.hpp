#pragma once

#include <string>
#include <vector>

#include "xmodseg/common.hpp"

namespace xmodseg::gradcheck {

struct CheckResult {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

// Names of every available finite-difference audit.
const std::vector<std::string>& all_checks();

// Compare autodiff gradients against central finite differences on small
// double-precision instances. `corrupt` perturbs each gradient before the
// comparison (negative control: the audit must then fail).
std::vector<CheckResult> run(const std::vector<std::string>& names, double tolerance,
                             bool corrupt = false);

}  // namespace xmodseg::gradcheck
