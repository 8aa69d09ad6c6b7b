// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cascade4d/error.hpp"
#include "cascade4d/grid_io.hpp"

namespace c4d {

struct ManifestRecord {
  std::string id;
  std::vector<std::string> view_paths;
  std::size_t frames = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::optional<double> perceptual;
  std::optional<double> flow_mean;
  std::optional<double> completeness;  // 1 accept, 0 reject
  bool accepted = false;

  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

struct Manifest {
  std::vector<ManifestRecord> records;

  std::size_t accepted_count() const {
    std::size_t n = 0;
    for (const auto& r : records) n += r.accepted;
    return n;
  }
  friend bool operator==(const Manifest&, const Manifest&) = default;
};

inline constexpr const char* kManifestHeader =
    "#id\tview_paths\tframes\tresolution\tperceptual\tflow_mean\tcompleteness\taccepted";

namespace detail {

inline std::string opt_str(const std::optional<double>& v) { return v ? format_double(*v) : "NA"; }

inline std::optional<double> opt_parse(const std::string& s) {
  if (s == "NA") return std::nullopt;
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw std::invalid_argument(s);
  return v;
}

}  // namespace detail

inline void write_manifest(const Manifest& m, std::ostream& os) {
  os << kManifestHeader << "\n";
  for (const auto& r : m.records) {
    if (r.id.find_first_of("\t\n") != std::string::npos) throw DataError("manifest id contains a tab or newline");
    os << r.id << "\t";
    for (std::size_t i = 0; i < r.view_paths.size(); ++i) {
      if (r.view_paths[i].find_first_of(",\t\n") != std::string::npos)
        throw DataError("manifest path contains a separator: " + r.view_paths[i]);
      os << (i ? "," : "") << r.view_paths[i];
    }
    os << "\t" << r.frames << "\t" << r.height << "x" << r.width << "\t" << detail::opt_str(r.perceptual) << "\t"
       << detail::opt_str(r.flow_mean) << "\t" << detail::opt_str(r.completeness) << "\t" << (r.accepted ? 1 : 0)
       << "\n";
  }
}

inline Manifest read_manifest(std::istream& is) {
  Manifest m;
  std::string line;
  std::size_t no = 0;
  while (std::getline(is, line)) {
    ++no;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, '\t')) f.push_back(tok);
    if (f.size() != 8) throw DataError("manifest line " + std::to_string(no) + ": expected 8 fields");
    ManifestRecord r;
    try {
      r.id = f[0];
      std::stringstream ps(f[1]);
      while (std::getline(ps, tok, ',')) r.view_paths.push_back(tok);
      r.frames = std::stoul(f[2]);
      const auto x = f[3].find('x');
      if (x == std::string::npos) throw std::invalid_argument(f[3]);
      r.height = std::stoul(f[3].substr(0, x));
      r.width = std::stoul(f[3].substr(x + 1));
      r.perceptual = detail::opt_parse(f[4]);
      r.flow_mean = detail::opt_parse(f[5]);
      r.completeness = detail::opt_parse(f[6]);
      if (f[7] != "0" && f[7] != "1") throw std::invalid_argument(f[7]);
      r.accepted = f[7] == "1";
    } catch (const std::logic_error&) {
      throw DataError("manifest line " + std::to_string(no) + ": malformed field");
    }
    m.records.push_back(std::move(r));
  }
  return m;
}

inline void save_manifest(const Manifest& m, const std::filesystem::path& p) {
  std::ofstream os(p);
  if (!os) throw DataError("cannot write " + p.string());
  write_manifest(m, os);
}

inline Manifest load_manifest(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw DataError("cannot read " + p.string());
  return read_manifest(is);
}

}  // namespace c4d
