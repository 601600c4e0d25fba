#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>

namespace xmodseg {

// Bad user input: malformed files, invalid arguments, inconsistent trees.
// Maps to exit code 1 at the CLI boundary; everything else maps to 2.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed on-disk payloads; message names the offending path.
struct FormatError : ValidationError {
  using ValidationError::ValidationError;
};

// A loss term turned non-finite mid-step; carries the term name.
struct NonFiniteLossError : std::runtime_error {
  explicit NonFiniteLossError(const std::string& term_name)
      : std::runtime_error("non-finite loss term: " + term_name), term(term_name) {}
  std::string term;
};

using WarnHandler = std::function<void(const std::string&)>;

void warn(const std::string& message);

// Swap the warning sink (default: stderr). Returns the previous handler.
WarnHandler set_warn_handler(WarnHandler handler);

using Rng = std::mt19937_64;

uint64_t mix64(uint64_t x);

// Deterministic stream derivation: seed + a short path of tags.
uint64_t derive_seed(uint64_t seed, std::initializer_list<uint64_t> path);
Rng make_rng(uint64_t seed, std::initializer_list<uint64_t> path);

}  // namespace xmodseg
