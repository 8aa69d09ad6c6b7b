// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "cascade4d/eval.hpp"

using namespace c4d;

namespace {

Eigen::MatrixXd to_eigen(const Matrix& m) {
  Eigen::MatrixXd r(m.n, m.n);
  for (std::size_t i = 0; i < m.n; ++i)
    for (std::size_t j = 0; j < m.n; ++j) r(i, j) = m(i, j);
  return r;
}

Matrix random_psd(std::size_t d, std::uint64_t seed, std::size_t rank = 0) {
  const std::size_t k = rank ? rank : d + 2;
  const Tensor a = Tensor::randn({d, k}, CounterRng(seed, 1));
  Matrix m(d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t l = 0; l < k; ++l) m(i, j) += a[i * k + l] * a[j * k + l] / double(k);
  return m;
}

/// Independent route: eigenvalues of the non-symmetric product S1 S2.
double oracle_frechet(const Eigen::VectorXd& m1, const Eigen::MatrixXd& s1, const Eigen::VectorXd& m2,
                      const Eigen::MatrixXd& s2) {
  Eigen::EigenSolver<Eigen::MatrixXd> es(s1 * s2);
  double tr = 0.0;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) tr += std::sqrt(std::max(0.0, es.eigenvalues()[i].real()));
  return (m1 - m2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr;
}

/// Mean/covariance (+ shrinkage) with Eigen, then the oracle distance.
double oracle_fvd(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  auto fit = [](const std::vector<std::vector<double>>& xs, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
    const auto n = Eigen::Index(xs.size()), d = Eigen::Index(xs[0].size());
    Eigen::MatrixXd X(n, d);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < d; ++j) X(i, j) = xs[i][j];
    mu = X.colwise().mean();
    const Eigen::MatrixXd C = X.rowwise() - mu.transpose();
    cov = C.transpose() * C / double(n - 1);
    if (n < d + 1) cov += Eigen::MatrixXd::Identity(d, d) * (1e-6 * cov.trace() / double(d));
  };
  Eigen::VectorXd m1, m2;
  Eigen::MatrixXd s1, s2;
  fit(a, m1, s1);
  fit(b, m2, s2);
  return oracle_frechet(m1, s1, m2, s2);
}

/// T x V grid whose view v is a constant grey level from `levels`, with a
/// small per-frame wobble so sequences are not all identical.
ImageGrid constant_views(const std::vector<double>& levels, std::size_t T, std::size_t res, double wobble) {
  const std::size_t V = levels.size();
  Tensor px({T, V, 3, res, res});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t v = 0; v < V; ++v)
      for (std::size_t i = 0; i < 3 * res * res; ++i)
        px[(t * V + v) * 3 * res * res + i] = levels[v] + wobble * double(t % 2) * (i < res * res ? 1.0 : 0.5);
  CameraRing ring;
  ring.views = V;
  return ImageGrid::make(std::move(px), ring);
}

/// Latin square: sample i gives view v the level palette[(i + v) % V].
std::vector<ImageGrid> latin_set(std::size_t V, std::size_t T, const std::vector<std::size_t>& perm, double wobble) {
  std::vector<ImageGrid> out;
  for (std::size_t i = 0; i < V; ++i) {
    std::vector<double> levels(V);
    for (std::size_t v = 0; v < V; ++v) levels[v] = 0.1 + 0.8 * double((i + perm[v]) % V) / double(V - 1);
    out.push_back(constant_views(levels, T, 8, wobble));
  }
  return out;
}

std::vector<ImageGrid> random_set(std::size_t n, std::size_t T, std::size_t V, std::uint64_t seed) {
  std::vector<ImageGrid> out;
  CameraRing ring;
  ring.views = V;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(ImageGrid::make(Tensor::uniform({T, V, 3, 8, 8}, CounterRng(seed, i)), ring));
  return out;
}

std::filesystem::path script(const std::string& name, const std::string& body) {
  const auto p = std::filesystem::temp_directory_path() / name;
  std::ofstream(p) << "#!/bin/sh\n" << body << "\n";
  std::filesystem::permissions(p, std::filesystem::perms::owner_all);
  return p;
}

}  // namespace

TEST(Jacobi, MatchesEigenSpectrum) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Matrix m = random_psd(7, s);
    const SymEigen e = jacobi_eigen(m);
    std::vector<double> mine = e.values;
    std::sort(mine.begin(), mine.end());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(to_eigen(m));
    for (std::size_t i = 0; i < 7; ++i) EXPECT_NEAR(mine[i], es.eigenvalues()[Eigen::Index(i)], 1e-10);
    const Matrix back = spectral_apply(e, [](double l) { return l; });
    for (std::size_t i = 0; i < m.a.size(); ++i) EXPECT_NEAR(back.a[i], m.a[i], 1e-10);
  }
}

TEST(Frechet, OneDimensionalClosedForm) {
  GaussianStats a{{0.0}, Matrix(1, 1.0), 10}, b{{1.0}, Matrix(1, 1.0), 10};
  EXPECT_EQ(frechet_distance(a, b), 1.0);
  GaussianStats c{{0.5}, Matrix(1, 4.0), 10};
  // (0.5)^2 + (1 - 2)^2
  EXPECT_NEAR(frechet_distance(a, c), 1.25, 1e-15);
}

TEST(Frechet, MatchesEigenOracle) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const std::size_t d = 4;
    GaussianStats a{{}, random_psd(d, 2 * s), 20}, b{{}, random_psd(d, 2 * s + 1), 20};
    const Tensor m = Tensor::randn({2, d}, CounterRng(s, 9));
    a.mean.assign(m.data().begin(), m.data().begin() + d);
    b.mean.assign(m.data().begin() + d, m.data().end());
    Eigen::VectorXd m1(d), m2(d);
    for (std::size_t i = 0; i < d; ++i) {
      m1[Eigen::Index(i)] = a.mean[i];
      m2[Eigen::Index(i)] = b.mean[i];
    }
    const double oracle = oracle_frechet(m1, to_eigen(a.cov), m2, to_eigen(b.cov));
    EXPECT_NEAR(frechet_distance(a, b), oracle, 1e-6);
    EXPECT_NEAR(frechet_distance(a, b), frechet_distance(b, a), 1e-10);
    EXPECT_LE(frechet_distance(a, a), 1e-8);
  }
}

TEST(Frechet, RankDeficientCovariances) {
  GaussianStats a{std::vector<double>(5, 0.0), random_psd(5, 3, 2), 3}, b{std::vector<double>(5, 0.0), random_psd(5, 4, 2), 3};
  const double d = frechet_distance(a, b);
  EXPECT_GE(d, 0.0);
  EXPECT_LE(frechet_distance(a, a), 1e-8);
}

TEST(Frechet, Errors) {
  GaussianStats a{{0.0}, Matrix(1, 1.0), 2}, b{{0.0, 0.0}, Matrix(2, 0.0), 2};
  EXPECT_THROW(frechet_distance(a, b), ShapeError);
  GaussianStats neg{{0.0}, Matrix(1, -1.0), 2};
  EXPECT_THROW(frechet_distance(neg, a), NumericalError);
  EXPECT_THROW(fit_gaussian({{1.0}}), DataError);
}

TEST(Gaussian, ShrinkageOnlyWhenUndersampled) {
  std::vector<std::vector<double>> xs{{1, 0}, {0, 1}};
  GaussianStats g = fit_gaussian(xs);
  // sample covariance [[.5, -.5], [-.5, .5]], trace 1 -> lambda 5e-7
  EXPECT_NEAR(g.cov(0, 0), 0.5 + 5e-7, 1e-18);
  EXPECT_NEAR(g.cov(0, 1), -0.5, 1e-18);
  xs.push_back({1, 1});
  g = fit_gaussian(xs);
  EXPECT_NEAR(g.cov(0, 0), 1.0 / 3.0, 1e-15);
}

TEST(Extractor, DeterministicFixedWidth) {
  const FeatureExtractor fx = latent_stats_extractor();
  EXPECT_EQ(fx.width, 64u);
  const Tensor seq = Tensor::uniform({3, 3, 8, 8}, CounterRng(1, 1));
  EXPECT_EQ(fx(seq), fx(seq));
  EXPECT_EQ(fx(seq).size(), 64u);
  EXPECT_THROW(fx(Tensor({3, 8, 8})), ShapeError);
}

TEST(Fvd, ZeroOnIdenticalSetsAndOrderInvariant) {
  const FeatureExtractor fx = latent_stats_extractor();
  const auto set = random_set(4, 3, 3, 1);
  EXPECT_LE(fvd_f(set, set, fx), 1e-8);
  EXPECT_LE(fvd_v(set, set, fx), 1e-8);
  EXPECT_LE(fvd_diag(set, set, fx), 1e-8);
  const auto other = random_set(4, 3, 3, 2);
  auto rev = other;
  std::reverse(rev.begin(), rev.end());
  EXPECT_NEAR(fvd_f(other, set, fx), fvd_f(rev, set, fx), 1e-9);
  EXPECT_NEAR(fvd_v(other, set, fx), fvd_v(rev, set, fx), 1e-9);
}

TEST(Fvd, MatchesIndependentRecomputation) {
  const FeatureExtractor fx = latent_stats_extractor();
  const auto gen = random_set(5, 3, 4, 3), ref = random_set(4, 3, 4, 4);
  double f = 0, v = 0;
  for (std::size_t k = 0; k < 4; ++k) {
    std::vector<std::vector<double>> a, b;
    for (const auto& g : gen) a.push_back(fx(view_sequence(g, k)));
    for (const auto& g : ref) b.push_back(fx(view_sequence(g, k)));
    f += oracle_fvd(a, b) / 4.0;
  }
  for (std::size_t t = 0; t < 3; ++t) {
    std::vector<std::vector<double>> a, b;
    for (const auto& g : gen) a.push_back(fx(frame_sequence(g, t)));
    for (const auto& g : ref) b.push_back(fx(frame_sequence(g, t)));
    v += oracle_fvd(a, b) / 3.0;
  }
  std::vector<std::vector<double>> a, b;
  for (const auto& g : gen) a.push_back(fx(extract_diagonal(g)));
  for (const auto& g : ref) b.push_back(fx(extract_diagonal(g)));
  EXPECT_NEAR(fvd_f(gen, ref, fx), f, 1e-6 * std::max(1.0, f));
  EXPECT_NEAR(fvd_v(gen, ref, fx), v, 1e-6 * std::max(1.0, v));
  EXPECT_NEAR(fvd_diag(gen, ref, fx), oracle_fvd(a, b), 1e-6);
  EXPECT_GT(fvd_f(gen, ref, fx), 0.0);
  EXPECT_GT(fvd_v(gen, ref, fx), 0.0);
  EXPECT_GT(fvd_diag(gen, ref, fx), 0.0);
}

TEST(Fvd, ViewPermutationSeenOnlyAcrossViews) {
  const FeatureExtractor fx = latent_stats_extractor();
  const std::size_t V = 6;
  std::vector<std::size_t> id(V), perm{3, 0, 5, 1, 4, 2};
  for (std::size_t v = 0; v < V; ++v) id[v] = v;
  const auto ref = latin_set(V, 3, id, 0.02);
  const auto shuffled = latin_set(V, 3, perm, 0.02);
  EXPECT_LE(fvd_f(shuffled, ref, fx), 1e-8);
  EXPECT_NEAR(fvd_f(shuffled, ref, fx), fvd_f(ref, ref, fx), 1e-8);
  EXPECT_GT(fvd_v(shuffled, ref, fx), 1e-3);
}

TEST(Fvd, DiagonalDistinguishesCorruptedDiagonal) {
  const FeatureExtractor fx = latent_stats_extractor();
  const auto ref = random_set(4, 4, 4, 5);
  auto gen = ref;
  for (auto& g : gen)
    for (std::size_t k = 0; k < 4; ++k)
      for (std::size_t i = 0; i < 3 * 64; ++i) g.pixels[(k * 4 + k) * 3 * 64 + i] = 1.0;
  EXPECT_GT(fvd_diag(gen, ref, fx), 1e-3);
  EXPECT_THROW(fvd_f({ref[0]}, ref, fx), DataError);
  EXPECT_THROW(fvd_v(ref, random_set(2, 4, 3, 1), fx), ShapeError);
}

TEST(Perceptual, MeanOverPairedCells) {
  const auto a = random_set(2, 2, 2, 1);
  EXPECT_EQ(mean_perceptual(a, a), 0.0);
  EXPECT_GT(mean_perceptual(a, random_set(2, 2, 2, 2)), 0.0);
  EXPECT_THROW(mean_perceptual(a, random_set(3, 2, 2, 2)), DataError);
}

TEST(ClipScore, ExternalScorerPlumbing) {
  const std::vector<Tensor> imgs{Tensor({3, 4, 4}, 0.2), Tensor({3, 4, 4}, 0.9)};
  const auto r = clip_score(imgs, std::nullopt);
  EXPECT_FALSE(r.available);
  EXPECT_EQ(r.text(), "unavailable");
  const auto constant = clip_score(imgs, script("c4d_clip_const.sh", "echo 0.9").string());
  EXPECT_TRUE(constant.available);
  EXPECT_NEAR(constant.value, 0.9, 1e-15);
  // 0.8 for dark images, 1.0 for bright ones (pixel byte 51 vs 230)
  const auto mixed = clip_score(
      imgs, script("c4d_clip_mixed.sh", "tail -c 1 \"$1\" | od -An -tu1 | awk '{ if ($1 < 128) print 0.8; else print 1.0 }'").string());
  EXPECT_NEAR(mixed.value, 0.9, 1e-12);
  EXPECT_THROW(clip_score({}, std::nullopt), DataError);
  EXPECT_THROW(clip_score(imgs, script("c4d_clip_bad.sh", "echo high").string()), ScorerError);
}

TEST(Report, TableLayout) {
  const std::string r = eval_report({{"fvd_f", "1.5", 4, 4}}, "latent-stats-64", "deadbeef");
  EXPECT_NE(r.find("metric\tvalue\tgen_samples\tref_samples"), std::string::npos);
  EXPECT_NE(r.find("fvd_f\t1.5\t4\t4"), std::string::npos);
  EXPECT_NE(r.find("deadbeef"), std::string::npos);
}
