// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "cascade4d/grid.hpp"
#include "cascade4d/tensor.hpp"

namespace c4d {

namespace fs = std::filesystem;

inline std::string view_file_name(std::size_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "view_%02zu.c4dv", v);
  return buf;
}

/// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[40];
  for (int prec = 6; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

/// key=value lines; blank lines and '#' comments skipped.
inline std::map<std::string, std::string> parse_key_values(std::istream& is, const std::string& what) {
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t no = 0;
  while (std::getline(is, line)) {
    ++no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw DataError(what + ":" + std::to_string(no) + ": expected key=value");
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t"), b = s.find_last_not_of(" \t");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline void save_grid(const ImageGrid& g, const fs::path& dir) {
  fs::create_directories(dir);
  for (std::size_t v = 0; v < g.views(); ++v) save_tensor(view_sequence(g, v), dir / view_file_name(v));
  std::ofstream meta(dir / "meta.txt");
  if (!meta) throw DataError("cannot write " + (dir / "meta.txt").string());
  meta << "T=" << g.frames() << "\nV=" << g.views() << "\nH=" << g.height() << "\nW=" << g.width()
       << "\nfps=" << format_double(g.fps) << "\nelevation=" << format_double(g.ring.elevation)
       << "\nradius=" << format_double(g.ring.radius) << "\nring_views=" << g.ring.views << "\nview_ids=";
  for (std::size_t i = 0; i < g.view_ids.size(); ++i) meta << (i ? "," : "") << g.view_ids[i];
  meta << "\n";
}

inline ImageGrid load_grid(const fs::path& dir) {
  std::ifstream meta(dir / "meta.txt");
  if (!meta) throw DataError("missing grid metadata in " + dir.string());
  const auto kv = parse_key_values(meta, (dir / "meta.txt").string());
  auto need = [&](const char* k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw DataError(dir.string() + ": meta.txt lacks " + k);
    return it->second;
  };
  std::size_t T, V, H, W;
  double fps, elevation;
  try {
    T = std::stoul(need("T"));
    V = std::stoul(need("V"));
    H = std::stoul(need("H"));
    W = std::stoul(need("W"));
    fps = std::stod(need("fps"));
    elevation = std::stod(need("elevation"));
  } catch (const std::logic_error&) {
    throw DataError(dir.string() + ": malformed meta.txt");
  }
  CameraRing ring{V, elevation, 2.0};
  std::vector<std::size_t> ids;
  if (auto it = kv.find("radius"); it != kv.end()) ring.radius = std::stod(it->second);
  if (auto it = kv.find("ring_views"); it != kv.end()) ring.views = std::stoul(it->second);
  if (auto it = kv.find("view_ids"); it != kv.end() && !it->second.empty()) {
    std::stringstream ss(it->second);
    std::string tok;
    while (std::getline(ss, tok, ',')) ids.push_back(std::stoul(tok));
  }
  Tensor px({T, V, 3, H, W});
  const std::size_t cell = 3 * H * W;
  for (std::size_t v = 0; v < V; ++v) {
    const Tensor seq = load_tensor(dir / view_file_name(v));
    if (seq.shape() != Shape{T, 3, H, W})
      throw ShapeError(view_file_name(v) + " has shape " + shape_str(seq.shape()) + ", meta says " +
                       shape_str({T, 3, H, W}));
    for (std::size_t t = 0; t < T; ++t)
      std::copy_n(seq.data().begin() + t * cell, cell, px.data().begin() + (t * V + v) * cell);
  }
  return ImageGrid::make(std::move(px), ring, std::move(ids), fps);
}

}  // namespace c4d
