// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cascade4d/autodiff.hpp"
#include "cascade4d/rng.hpp"

namespace c4d {

enum class Partition { base, lora, branch };

inline const char* partition_name(Partition p) {
  switch (p) {
    case Partition::base:
      return "base";
    case Partition::lora:
      return "lora";
    case Partition::branch:
      return "branch";
  }
  return "?";
}

inline Partition parse_partition(const std::string& s) {
  if (s == "base") return Partition::base;
  if (s == "lora") return Partition::lora;
  if (s == "branch") return Partition::branch;
  throw DataError("unknown partition tag '" + s + "'");
}

/// Named parameter tensors, each tagged with the partition it trains in.
class ParameterStore {
 public:
  struct Entry {
    Tensor value;
    Partition partition;
  };

  void add(const std::string& name, Tensor value, Partition p) {
    if (!entries_.emplace(name, Entry{std::move(value), p}).second)
      throw ConfigError("duplicate parameter " + name);
  }

  /// Normal init with stddev `std`, keyed by (seed, name) so adding a
  /// parameter never perturbs the others.
  void add_normal(const std::string& name, Shape shape, double std, Partition p, std::uint64_t seed) {
    add(name, Tensor::randn(std::move(shape), CounterRng(seed, fnv1a(name)), std), p);
  }

  void add_zeros(const std::string& name, Shape shape, Partition p) { add(name, Tensor(std::move(shape)), p); }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  const Tensor& get(const std::string& name) const { return at(name).value; }
  Tensor& mut(const std::string& name) { return const_cast<Entry&>(at(name)).value; }
  Partition partition(const std::string& name) const { return at(name).partition; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : entries_) out.push_back(k);
    return out;
  }
  std::set<std::string> names(Partition p) const {
    std::set<std::string> out;
    for (const auto& [k, e] : entries_)
      if (e.partition == p) out.insert(k);
    return out;
  }
  std::size_t count(Partition p) const {
    std::size_t n = 0;
    for (const auto& [_, e] : entries_) n += e.value.size() * (e.partition == p);
    return n;
  }
  const std::map<std::string, Entry>& entries() const { return entries_; }

  /// Removes every parameter of one partition.
  void drop(Partition p) { std::erase_if(entries_, [p](const auto& kv) { return kv.second.partition == p; }); }

  /// Copies in the entries of another store, replacing same-named ones.
  void merge(const ParameterStore& other) {
    for (const auto& [k, e] : other.entries_) entries_[k] = e;
  }

  friend bool operator==(const ParameterStore& a, const ParameterStore& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (const auto& [k, e] : a.entries_) {
      auto it = b.entries_.find(k);
      if (it == b.entries_.end() || it->second.partition != e.partition || !(it->second.value == e.value))
        return false;
    }
    return true;
  }

 private:
  const Entry& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("unknown parameter " + name);
    return it->second;
  }

  std::map<std::string, Entry> entries_;
};

// ---------------------------------------------------------------------------
// Checkpoints: one container per parameter plus index.txt

inline std::string checkpoint_file_name(const std::string& name) {
  std::string f;
  for (char c : name) f += (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '_') ? c : '-';
  return f + ".c4dt";
}

inline void save_checkpoint(const ParameterStore& ps, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream idx(dir / "index.txt");
  if (!idx) throw DataError("cannot write " + (dir / "index.txt").string());
  idx << "# name\tshape\tpartition\n";
  for (const auto& [name, e] : ps.entries()) {
    save_tensor(e.value, dir / checkpoint_file_name(name));
    idx << name << "\t";
    for (std::size_t i = 0; i < e.value.rank(); ++i) idx << (i ? "x" : "") << e.value.dim(i);
    idx << "\t" << partition_name(e.partition) << "\n";
  }
}

inline ParameterStore load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream idx(dir / "index.txt");
  if (!idx) throw DataError("missing checkpoint index in " + dir.string());
  ParameterStore ps;
  std::string line;
  while (std::getline(idx, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::stringstream ss(line);
    std::string name, shape, tag;
    if (!std::getline(ss, name, '\t') || !std::getline(ss, shape, '\t') || !std::getline(ss, tag))
      throw DataError("malformed checkpoint index line: " + line);
    Tensor t = load_tensor(dir / checkpoint_file_name(name));
    std::string got;
    for (std::size_t i = 0; i < t.rank(); ++i) got += (i ? "x" : "") + std::to_string(t.dim(i));
    if (got != shape) throw ShapeError("checkpoint " + name + " has shape " + got + ", index says " + shape);
    ps.add(name, std::move(t), parse_partition(tag));
  }
  return ps;
}

// ---------------------------------------------------------------------------
// Binding parameters onto a tape

/// Lazily places parameters on a tape: trainable names become gradient
/// leaves, everything else a constant.
class Binder {
 public:
  Binder(Tape& tape, const ParameterStore& ps, const std::set<std::string>* trainable = nullptr)
      : tape_(tape), ps_(ps), trainable_(trainable) {}

  Var operator()(const std::string& name) {
    auto it = cache_.find(name);
    if (it != cache_.end()) return it->second;
    const Tensor& v = ps_.get(name);
    Var var = (trainable_ && trainable_->count(name)) ? tape_.parameter(name, v) : tape_.constant(v);
    tape_.pin(var.id);
    cache_.emplace(name, var);
    return var;
  }

  bool has(const std::string& name) const { return ps_.contains(name); }
  Tape& tape() { return tape_; }
  const ParameterStore& store() const { return ps_; }

 private:
  Tape& tape_;
  const ParameterStore& ps_;
  const std::set<std::string>* trainable_;
  std::map<std::string, Var> cache_;
};

}  // namespace c4d
