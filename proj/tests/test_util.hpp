#pragma once

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "xmodseg/common.hpp"

namespace testutil {

// Unique scratch directory, removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& label = "case") {
    static std::atomic<uint64_t> counter{0};
    auto base = std::filesystem::temp_directory_path() / "xmodseg_tests";
    std::filesystem::create_directories(base);
    path_ = base / (label + "_" + std::to_string(::getpid()) + "_" +
                    std::to_string(counter.fetch_add(1)));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& leaf) const { return path_ / leaf; }

 private:
  std::filesystem::path path_;
};

// Captures xmodseg::warn output for the current scope.
class WarnCapture {
 public:
  WarnCapture() {
    previous_ = xmodseg::set_warn_handler(
        [this](const std::string& message) { messages_.push_back(message); });
  }
  ~WarnCapture() { xmodseg::set_warn_handler(std::move(previous_)); }
  WarnCapture(const WarnCapture&) = delete;
  WarnCapture& operator=(const WarnCapture&) = delete;

  const std::vector<std::string>& messages() const { return messages_; }
  bool contains(const std::string& needle) const {
    for (const auto& m : messages_) {
      if (m.find(needle) != std::string::npos) return true;
    }
    return false;
  }

 private:
  std::vector<std::string> messages_;
  xmodseg::WarnHandler previous_;
};

struct CliResult {
  int exit_code = -1;
  std::string output;  // stdout and stderr interleaved
};

inline std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'') {
      out += "'\\''";
    } else {
      out += c;
    }
  }
  out += "'";
  return out;
}

// Runs the installed CLI binary with the given arguments.
inline CliResult run_cli(const std::vector<std::string>& args) {
  std::string cmd = shell_quote(XMODSEG_CLI_PATH);
  for (const auto& a : args) cmd += " " + shell_quote(a);
  cmd += " 2>&1";

  CliResult result;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) {
    result.output = "popen failed";
    return result;
  }
  char buffer[4096];
  size_t n = 0;
  while ((n = std::fread(buffer, 1, sizeof(buffer), pipe)) > 0) {
    result.output.append(buffer, n);
  }
  const int status = ::pclose(pipe);
  if (status >= 0 && WIFEXITED(status)) {
    result.exit_code = WEXITSTATUS(status);
  }
  return result;
}

}  // namespace testutil
