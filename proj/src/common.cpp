#include "xmodseg/common.hpp"

#include <iostream>
#include <mutex>
#include <utility>

namespace xmodseg {

namespace {
std::mutex g_warn_mutex;
WarnHandler g_warn_handler;
}  // namespace

void warn(const std::string& message) {
  std::lock_guard<std::mutex> lock(g_warn_mutex);
  if (g_warn_handler) {
    g_warn_handler(message);
  } else {
    std::cerr << "[warn] " << message << "\n";
  }
}

WarnHandler set_warn_handler(WarnHandler handler) {
  std::lock_guard<std::mutex> lock(g_warn_mutex);
  auto previous = std::move(g_warn_handler);
  g_warn_handler = std::move(handler);
  return previous;
}

uint64_t mix64(uint64_t x) {
  // splitmix64 finalizer
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

uint64_t derive_seed(uint64_t seed, std::initializer_list<uint64_t> path) {
  uint64_t s = mix64(seed);
  for (uint64_t tag : path) {
    s = mix64(s ^ mix64(tag));
  }
  return s;
}

Rng make_rng(uint64_t seed, std::initializer_list<uint64_t> path) {
  return Rng(derive_seed(seed, path));
}

}  // namespace xmodseg
