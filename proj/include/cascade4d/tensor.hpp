// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "cascade4d/error.hpp"
#include "cascade4d/rng.hpp"

namespace c4d {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

/// Dense row-major tensor of doubles with value semantics.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel(shape_) != data_.size())
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  static Tensor randn(Shape shape, const CounterRng& rng, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t.data_[i] = stddev * rng.normal(i);
    return t;
  }

  static Tensor uniform(Shape shape, const CounterRng& rng, double lo = 0.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t.data_[i] = lo + (hi - lo) * rng.uniform(i);
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
  double at(std::initializer_list<std::size_t> idx) const { return data_[offset(idx)]; }

  double item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape s) const {
    if (numel(s) != data_.size())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    return Tensor(std::move(s), data_);
  }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size()) throw ShapeError("index rank mismatch for " + shape_str(shape_));
    std::size_t off = 0;
    std::size_t k = 0;
    for (std::size_t i : idx) {
      if (i >= shape_[k]) throw ShapeError("index out of range for " + shape_str(shape_));
      off = off * shape_[k++] + i;
    }
    return off;
  }

  Shape shape_;
  std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double l2_norm(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Container format: "C4DT", u32 rank, u64 extents[rank], f64 payload, all LE.

namespace detail {

template <typename T>
T byteswap(T v) {
  auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
  std::reverse(bytes.begin(), bytes.end());
  return std::bit_cast<T>(bytes);
}

template <typename T>
void write_le(std::ostream& os, T v) {
  if constexpr (std::endian::native == std::endian::big) v = byteswap(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError("truncated tensor container");
  if constexpr (std::endian::native == std::endian::big) v = byteswap(v);
  return v;
}

}  // namespace detail

inline constexpr char kTensorMagic[4] = {'C', '4', 'D', 'T'};

inline void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kTensorMagic, 4);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) detail::write_le<std::uint64_t>(os, e);
  for (double v : t.data()) detail::write_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
}

inline Tensor read_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kTensorMagic, 4) != 0) throw DataError("bad tensor container magic");
  const auto rank = detail::read_le<std::uint32_t>(is);
  if (rank > 16) throw DataError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) e = detail::read_le<std::uint64_t>(is);
  std::vector<double> data(numel(shape));
  for (auto& v : data) v = std::bit_cast<double>(detail::read_le<std::uint64_t>(is));
  return Tensor(std::move(shape), std::move(data));
}

inline void save_tensor(const Tensor& t, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  write_tensor(os, t);
  if (!os) throw DataError("failed writing " + path.string());
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read " + path.string());
  return read_tensor(is);
}

}  // namespace c4d
