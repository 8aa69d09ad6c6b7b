// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "cascade4d/codec.hpp"

using namespace c4d;

namespace {

ImageGrid random_grid(std::size_t T, std::size_t V, std::size_t H, std::size_t W, std::uint64_t seed) {
  return ImageGrid::make(Tensor::uniform({T, V, 3, H, W}, CounterRng(seed)), CameraRing{V});
}

}  // namespace

TEST(Codec, MixingIsOrthonormal) {
  for (std::size_t p : {1, 2, 4}) {
    CodecSpec spec(p, 11);
    const std::size_t d = spec.channels();
    const Tensor& M = spec.mixing();
    double worst = 0.0;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) s += M[k * d + i] * M[k * d + j];
        worst = std::max(worst, std::abs(s - (i == j ? 1.0 : 0.0)));
      }
    EXPECT_LT(worst, 1e-10) << "patch " << p;
  }
}

TEST(Codec, SeedReproducesMixing) {
  EXPECT_EQ(CodecSpec(4, 3).mixing(), CodecSpec(4, 3).mixing());
  EXPECT_NE(CodecSpec(4, 3).mixing(), CodecSpec(4, 4).mixing());
}

TEST(Codec, ShapeArithmetic) {
  CodecSpec spec;
  const LatentGrid z = encode(random_grid(1, 2, 32, 32, 1), spec);
  EXPECT_EQ(z.values.shape(), (Shape{1, 2, 48, 8, 8}));
}

TEST(Codec, ZeroMapsToZero) {
  CodecSpec spec;
  const ImageGrid g = ImageGrid::make(Tensor({2, 2, 3, 8, 8}), CameraRing{2});
  const LatentGrid e = encode(g, spec);
  for (double v : e.values.data()) EXPECT_EQ(v, 0.0);
  LatentGrid z{Tensor({2, 2, 48, 2, 2}), {0, 1}};
  const ImageGrid d = decode(z, spec, CameraRing{2});
  for (double v : d.pixels.data()) EXPECT_EQ(v, 0.0);
}

TEST(Codec, RoundTripAndNorm) {
  for (auto [p, H, W] : {std::tuple{4, 32, 32}, {2, 6, 10}, {4, 64, 16}, {1, 3, 5}}) {
    CodecSpec spec(p, 5);
    const ImageGrid g = random_grid(2, 3, H, W, 9);
    const LatentGrid z = encode(g, spec);
    EXPECT_LT(max_abs_diff(decode_raw(z, spec), g.pixels), 1e-9);
    EXPECT_LT(max_abs_diff(decode(z, spec, g.ring).pixels, g.pixels), 1e-9);
    EXPECT_NEAR(l2_norm(z.values), l2_norm(g.pixels), 1e-9);
  }
}

TEST(Codec, Linearity) {
  CodecSpec spec(4, 2);
  const Tensor x = Tensor::uniform({3, 3, 16, 16}, CounterRng(1));
  const Tensor y = Tensor::uniform({3, 3, 16, 16}, CounterRng(2));
  const double a = 0.7, b = -1.3;
  Tensor mix(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) mix[i] = a * x[i] + b * y[i];
  const Tensor ex = encode_frames(x, spec), ey = encode_frames(y, spec), em = encode_frames(mix, spec);
  double worst = 0.0;
  for (std::size_t i = 0; i < em.size(); ++i) worst = std::max(worst, std::abs(em[i] - (a * ex[i] + b * ey[i])));
  EXPECT_LT(worst, 1e-9);
}

TEST(Codec, Errors) {
  CodecSpec spec(4);
  EXPECT_THROW(encode(random_grid(1, 2, 30, 32, 1), spec), ShapeError);
  LatentGrid z{Tensor({1, 2, 12, 2, 2}), {0, 1}};
  EXPECT_THROW(decode(z, spec, CameraRing{2}), ShapeError);
}
