// SPDX-License-Identifier: Apache-2.0
#pragma once

// External scorer contract: the command receives one image file path as its
// last argument and prints a single line.

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "cascade4d/tensor.hpp"

namespace c4d {

/// Binary PPM (P6, 8 bit) of a [3, H, W] frame in [0, 1].
inline void write_ppm(const Tensor& frame, const std::filesystem::path& path) {
  if (frame.rank() != 3 || frame.dim(0) != 3) throw ShapeError("PPM expects [3, H, W]");
  const std::size_t H = frame.dim(1), W = frame.dim(2), n = H * W;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os << "P6\n" << W << " " << H << "\n255\n";
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      os.put(static_cast<char>(std::lround(std::clamp(frame[c * n + i], 0.0, 1.0) * 255.0)));
  if (!os) throw DataError("failed writing " + path.string());
}

inline std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'')
      out += "'\\''";
    else
      out += c;
  }
  return out + "'";
}

/// Runs `command <image>` and returns its single output line, trimmed.
inline std::string run_scorer(const std::string& command, const Tensor& frame) {
  static std::atomic<unsigned> counter{0};
  const auto path = std::filesystem::temp_directory_path() /
                    ("c4d_score_" + std::to_string(::getpid()) + "_" + std::to_string(counter++) + ".ppm");
  write_ppm(frame, path);
  std::string out;
  int status = -1;
  if (FILE* p = ::popen((command + " " + shell_quote(path.string()) + " 2>/dev/null").c_str(), "r")) {
    char buf[256];
    while (std::fgets(buf, sizeof buf, p)) out += buf;
    status = ::pclose(p);
  }
  std::filesystem::remove(path);
  if (status == -1) throw ScorerError("could not launch scorer '" + command + "'");
  if (!WIFEXITED(status) || WEXITSTATUS(status) != 0)
    throw ScorerError("scorer '" + command + "' exited with status " + std::to_string(WEXITSTATUS(status)));
  while (!out.empty() && (out.back() == '\n' || out.back() == '\r' || out.back() == ' ')) out.pop_back();
  const auto first = out.find_first_not_of(' ');
  out = first == std::string::npos ? "" : out.substr(first);
  if (out.empty() || out.find('\n') != std::string::npos)
    throw ScorerError("scorer '" + command + "' must print exactly one line, got '" + out + "'");
  return out;
}

}  // namespace c4d
