// SPDX-License-Identifier: Apache-2.0
#pragma once

// Grid-aware Frechet video distances and scorer-backed metrics.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cascade4d/codec.hpp"
#include "cascade4d/grid.hpp"
#include "cascade4d/linalg.hpp"
#include "cascade4d/perceptual.hpp"
#include "cascade4d/scorer.hpp"

namespace c4d {

/// Pure map from a frame sequence [L, 3, H, W] to a fixed-width vector.
struct FeatureExtractor {
  std::string name;
  std::size_t width = 0;
  std::function<std::vector<double>(const Tensor&)> fn;

  std::vector<double> operator()(const Tensor& seq) const {
    std::vector<double> f = fn(seq);
    if (f.size() != width) throw ShapeError("extractor " + name + " returned width " + std::to_string(f.size()));
    return f;
  }
};

/// Per-channel latent mean and temporal-difference energy, mixed down to
/// `width` by a fixed Gaussian projection.
inline FeatureExtractor latent_stats_extractor(const CodecSpec& codec = CodecSpec{}, std::size_t width = 64,
                                               std::uint64_t seed = 0xFEA7) {
  const std::size_t C = codec.channels(), in = 2 * C;
  const Tensor proj = Tensor::randn({width, in}, CounterRng(seed, 0x9E0), 1.0 / std::sqrt(double(in)));
  auto fn = [codec, C, in, width, proj](const Tensor& seq) {
    if (seq.rank() != 4 || seq.dim(1) != 3) throw ShapeError("extractor expects [L, 3, H, W], got " + shape_str(seq.shape()));
    const Tensor z = encode_frames(seq, codec);
    const std::size_t L = z.dim(0), hw = z.dim(2) * z.dim(3);
    std::vector<double> s(in, 0.0);
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < hw; ++p) {
          const double v = z[(l * C + c) * hw + p];
          s[c] += v / double(L * hw);
          if (l + 1 < L) {
            const double d = z[((l + 1) * C + c) * hw + p] - v;
            s[C + c] += d * d / double((L - 1) * hw);
          }
        }
    std::vector<double> f(width, 0.0);
    for (std::size_t i = 0; i < width; ++i)
      for (std::size_t j = 0; j < in; ++j) f[i] += proj[i * in + j] * s[j];
    return f;
  };
  return FeatureExtractor{"latent-stats-" + std::to_string(width), width, fn};
}

struct GaussianStats {
  std::vector<double> mean;
  Matrix cov;
  std::size_t count = 0;

  std::size_t width() const { return mean.size(); }
};

/// Mean and unbiased covariance; adds lambda I with lambda = 1e-6 tr / d when
/// there are fewer than d + 1 samples. Samples are accumulated in sorted
/// order, so the result does not depend on their order.
inline GaussianStats fit_gaussian(std::vector<std::vector<double>> xs) {
  if (xs.size() < 2) throw DataError("Gaussian fit needs at least 2 samples, got " + std::to_string(xs.size()));
  const std::size_t d = xs[0].size(), n = xs.size();
  for (const auto& x : xs)
    if (x.size() != d) throw ShapeError("feature width mismatch in Gaussian fit");
  std::sort(xs.begin(), xs.end());
  GaussianStats g{std::vector<double>(d, 0.0), Matrix(d), n};
  for (const auto& x : xs) {
    for (std::size_t i = 0; i < d; ++i) g.mean[i] += x[i] / double(n);
  }
  for (const auto& x : xs)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) g.cov(i, j) += (x[i] - g.mean[i]) * (x[j] - g.mean[j]) / double(n - 1);
  if (n < d + 1) {
    const double lambda = 1e-6 * g.cov.trace() / double(d);
    for (std::size_t i = 0; i < d; ++i) g.cov(i, i) += lambda;
  }
  return g;
}

namespace detail {

inline Matrix psd_sqrt(const Matrix& m, const char* what) {
  const SymEigen e = jacobi_eigen(symmetrized(m));
  double top = 0.0;
  for (double l : e.values) top = std::max(top, std::abs(l));
  const double tol = 1e-10 * std::max(1.0, top);
  for (double l : e.values)
    if (l < -tol) throw NumericalError(std::string(what) + " has eigenvalue " + std::to_string(l));
  return spectral_apply(e, [](double l) { return std::sqrt(std::max(l, 0.0)); });
}

}  // namespace detail

/// |mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)), with the square root taken
/// through sqrt(S1) S2 sqrt(S1).
inline double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  if (a.width() != b.width())
    throw ShapeError("Frechet width mismatch: " + std::to_string(a.width()) + " vs " + std::to_string(b.width()));
  double d2 = 0.0;
  for (std::size_t i = 0; i < a.width(); ++i) d2 += (a.mean[i] - b.mean[i]) * (a.mean[i] - b.mean[i]);
  const Matrix r1 = detail::psd_sqrt(a.cov, "covariance");
  const Matrix m = symmetrized(r1 * b.cov * r1);
  const Matrix s = detail::psd_sqrt(m, "covariance product");
  const double mn = m.frobenius();
  if (mn > 0.0) {
    Matrix diff = s * s;
    for (std::size_t i = 0; i < diff.a.size(); ++i) diff.a[i] -= m.a[i];
    if (diff.frobenius() / mn >= 1e-8) throw NumericalError("matrix square root residual too large");
  }
  d2 += a.cov.trace() + b.cov.trace() - 2.0 * s.trace();
  if (d2 < -1e-8 * std::max(1.0, a.cov.trace() + b.cov.trace()))
    throw NumericalError("negative Frechet distance " + std::to_string(d2));
  return std::max(d2, 0.0);
}

/// Frechet distance between feature sets of free sequences.
inline double fvd(const std::vector<Tensor>& gen, const std::vector<Tensor>& ref, const FeatureExtractor& fx) {
  if (gen.size() < 2 || ref.size() < 2) throw DataError("FVD needs at least 2 samples per side");
  std::vector<std::vector<double>> fg, fr;
  for (const auto& s : gen) fg.push_back(fx(s));
  for (const auto& s : ref) fr.push_back(fx(s));
  return frechet_distance(fit_gaussian(fg), fit_gaussian(fr));
}

namespace detail {

inline void check_sets(const std::vector<ImageGrid>& gen, const std::vector<ImageGrid>& ref) {
  if (gen.size() < 2 || ref.size() < 2) throw DataError("grid FVD needs at least 2 samples per side");
  const std::size_t T = gen[0].frames(), V = gen[0].views();
  for (const auto* set : {&gen, &ref})
    for (const auto& g : *set)
      if (g.views() != V || g.frames() != T) throw ShapeError("grid FVD needs grids of equal T and V");
}

template <typename Slice>
double axis_fvd(const std::vector<ImageGrid>& gen, const std::vector<ImageGrid>& ref, const FeatureExtractor& fx,
                std::size_t count, Slice slice) {
  double s = 0.0;
  for (std::size_t k = 0; k < count; ++k) {
    std::vector<Tensor> a, b;
    for (const auto& g : gen) a.push_back(slice(g, k));
    for (const auto& g : ref) b.push_back(slice(g, k));
    s += fvd(a, b, fx);
  }
  return s / double(count);
}

}  // namespace detail

/// Fixed view, sequence over frames; mean over views.
inline double fvd_f(const std::vector<ImageGrid>& gen, const std::vector<ImageGrid>& ref, const FeatureExtractor& fx) {
  detail::check_sets(gen, ref);
  return detail::axis_fvd(gen, ref, fx, gen[0].views(), [](const ImageGrid& g, std::size_t v) { return view_sequence(g, v); });
}

/// Fixed frame, sequence over views; mean over frames.
inline double fvd_v(const std::vector<ImageGrid>& gen, const std::vector<ImageGrid>& ref, const FeatureExtractor& fx) {
  detail::check_sets(gen, ref);
  return detail::axis_fvd(gen, ref, fx, gen[0].frames(),
                          [](const ImageGrid& g, std::size_t t) { return frame_sequence(g, t); });
}

inline double fvd_diag(const std::vector<ImageGrid>& gen, const std::vector<ImageGrid>& ref,
                       const FeatureExtractor& fx) {
  detail::check_sets(gen, ref);
  std::vector<Tensor> a, b;
  for (const auto& g : gen) a.push_back(extract_diagonal(g));
  for (const auto& g : ref) b.push_back(extract_diagonal(g));
  return fvd(a, b, fx);
}

/// Mean cellwise perceptual distance between paired grids.
inline double mean_perceptual(const std::vector<ImageGrid>& gen, const std::vector<ImageGrid>& ref) {
  if (gen.empty() || gen.size() != ref.size()) throw DataError("perceptual metric needs equally sized, non-empty sets");
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < gen.size(); ++i) {
    if (gen[i].pixels.shape() != ref[i].pixels.shape()) throw ShapeError("perceptual metric: paired grids differ in shape");
    for (std::size_t t = 0; t < gen[i].frames(); ++t)
      for (std::size_t v = 0; v < gen[i].views(); ++v, ++n)
        s += perceptual_distance(grid_cell(gen[i], t, v), grid_cell(ref[i], t, v));
  }
  return s / double(n);
}

struct ScorerResult {
  bool available = false;
  double value = 0.0;
  std::size_t count = 0;

  std::string text() const {
    if (!available) return "unavailable";
    std::ostringstream os;
    os.precision(17);
    os << value;
    return os.str();
  }
};

/// Mean of an external image scorer. `command` empty means no scorer is
/// configured and the result is marked unavailable.
inline ScorerResult clip_score(const std::vector<Tensor>& images, const std::optional<std::string>& command) {
  if (images.empty()) throw DataError("clip score needs at least one image");
  if (!command || command->empty()) return ScorerResult{};
  double s = 0.0;
  for (const auto& img : images) {
    const std::string line = run_scorer(*command, img);
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(line, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != line.size() || !std::isfinite(v)) throw ScorerError("scorer printed '" + line + "', expected a number");
    s += v;
  }
  return ScorerResult{true, s / double(images.size()), images.size()};
}

struct EvalRow {
  std::string metric;
  std::string value;
  std::size_t gen_count = 0;
  std::size_t ref_count = 0;
};

inline std::string eval_report(const std::vector<EvalRow>& rows, const std::string& extractor,
                               const std::string& config_hash) {
  std::ostringstream os;
  os << "# extractor " << extractor << "\n# config_hash " << config_hash << "\n";
  os << "metric\tvalue\tgen_samples\tref_samples\n";
  for (const auto& r : rows) os << r.metric << "\t" << r.value << "\t" << r.gen_count << "\t" << r.ref_count << "\n";
  return os.str();
}

}  // namespace c4d
