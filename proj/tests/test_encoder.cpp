#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "hfsc/encoder.hpp"
#include "hfsc/gradcheck.hpp"
#include "hfsc/ops.hpp"
#include "hfsc/rng.hpp"

using namespace hfsc;

namespace {

template <typename T>
std::vector<Tensor<T>> all_leaves(ParamSet<T>& ps, std::vector<Tensor<T>> extra) {
  for (size_t i = 0; i < ps.size(); ++i) extra.push_back(ps.at(i));
  return extra;
}

}  // namespace

TEST_CASE("feature extractors halve spatial extent and set channel width") {
  ParamSet<float> ps;
  auto spec = make_spectral_encoder(ps, 16, 16, 8, 1);
  auto spat = make_spatial_encoder(ps, 16, 8, 1);
  auto fuse = make_fused_path(ps, 8, 1);

  Rng rng(2);
  TensorF x1 = TensorF::uniform(Shape{2, 16, 64, 64}, rng, 0.f, 1.f);
  TensorF x2 = TensorF::uniform(Shape{2, 3, 64, 64}, rng, 0.f, 1.f);
  TensorF ss = spectral_encode(spec, x1);
  TensorF sp = spatial_encode(spat, x2);
  CHECK(ss.shape() == Shape{2, 8, 32, 32});
  CHECK(sp.shape() == Shape{2, 8, 32, 32});
  CHECK(fused_encode(fuse, ss, sp).shape() == Shape{2, 8, 32, 32});

  TensorF x1s = TensorF::uniform(Shape{1, 16, 6, 10}, rng, 0.f, 1.f);
  TensorF x2s = TensorF::uniform(Shape{1, 3, 6, 10}, rng, 0.f, 1.f);
  CHECK(spectral_encode(spec, x1s).shape() == Shape{1, 8, 3, 5});
  CHECK(spatial_encode(spat, x2s).shape() == Shape{1, 8, 3, 5});

  TensorF odd = TensorF::uniform(Shape{1, 16, 63, 64}, rng, 0.f, 1.f);
  CHECK_THROWS_WITH_AS(spectral_encode(spec, odd), doctest::Contains("even"),
                       std::invalid_argument);
  TensorF odd2 = TensorF::uniform(Shape{1, 3, 64, 63}, rng, 0.f, 1.f);
  CHECK_THROWS_WITH_AS(spatial_encode(spat, odd2), doctest::Contains("even"),
                       std::invalid_argument);
}

TEST_CASE("zero input with zero bias stays zero through the spectral branch") {
  ParamSet<float> ps;
  auto spec = make_spectral_encoder(ps, 4, 8, 4, 3);
  TensorF zeros(Shape{1, 4, 8, 8}, 0.f);
  TensorF out = spectral_encode(spec, zeros);
  for (float v : out.values()) CHECK(v == 0.f);
}

TEST_CASE("constant input gives a constant interior response in the spatial branch") {
  ParamSet<float> ps;
  auto spat = make_spatial_encoder(ps, 8, 4, 4);
  TensorF flat(Shape{1, 3, 64, 64}, 0.6f);
  TensorF out = spatial_encode(spat, flat);  // (1,4,32,32)
  for (int64_t c = 0; c < 4; ++c) {
    const float ref = out.data()[idx4(out.shape(), 0, c, 15, 15)];
    for (int64_t y = 1; y <= 30; ++y)
      for (int64_t x = 1; x <= 30; ++x)
        CHECK(out.data()[idx4(out.shape(), 0, c, y, x)] == doctest::Approx(ref).epsilon(1e-5));
  }
}

TEST_CASE("residual block is the identity with zero weights and adds its branch otherwise") {
  ParamSet<double> ps;
  auto c1 = make_conv(ps, "rb.c1", 3, 3, 1, 1, 5);
  auto c3 = make_conv(ps, "rb.c3", 3, 3, 3, 1, 5);
  Rng rng(6);
  TensorD x = TensorD::uniform(Shape{1, 3, 6, 6}, rng, -1., 1.);

  auto zc1 = c1, zc3 = c3;
  zc3.w = TensorD(zc3.w.shape(), 0.0);
  TensorD ident = residual_block(x, zc1, zc3);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(ident.data()[i] == x.data()[i]);

  TensorD y = residual_block(x, c1, c3);
  TensorD branch = cr(c3, cr(c1, x));
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(y.data()[i] - x.data()[i] == doctest::Approx(branch.data()[i]).epsilon(1e-12));
}

TEST_CASE("enhancement gains live in (0,1) with sigmoid-neutral zero input") {
  ParamSet<float> ps;
  auto fuse = make_fused_path(ps, 8, 7);
  Rng rng(8);
  TensorF z = TensorF::normal(Shape{2, 8, 6, 6}, rng, 0.f, 2.f);

  TensorF gc = spectral_enhancement(fuse, z);
  TensorF gp = spatial_enhancement(fuse, z);
  CHECK(gc.shape() == Shape{2, 8, 1, 1});
  CHECK(gp.shape() == Shape{2, 1, 6, 6});
  for (float v : gc.values()) {
    CHECK(v > 0.f);
    CHECK(v < 1.f);
  }
  for (float v : gp.values()) {
    CHECK(v > 0.f);
    CHECK(v < 1.f);
  }

  TensorF zeros(Shape{1, 8, 6, 6}, 0.f);
  TensorF gc0 = spectral_enhancement(fuse, zeros);
  TensorF gp0 = spatial_enhancement(fuse, zeros);
  for (float v : gc0.values()) CHECK(v == 0.5f);
  for (float v : gp0.values()) CHECK(v == 0.5f);
}

TEST_CASE("pooling stages match arithmetic-mean oracles") {
  Rng rng(9);
  TensorF z = TensorF::uniform(Shape{2, 3, 4, 5}, rng, -1.f, 1.f);
  TensorF gap = ops::spatial_mean(z);
  TensorF cm = ops::channel_mean(z);
  REQUIRE(gap.shape() == Shape{2, 3, 1, 1});
  REQUIRE(cm.shape() == Shape{2, 1, 4, 5});
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t c = 0; c < 3; ++c) {
      double acc = 0;
      for (int64_t y = 0; y < 4; ++y)
        for (int64_t x = 0; x < 5; ++x) acc += z.data()[idx4(z.shape(), n, c, y, x)];
      CHECK(gap.data()[n * 3 + c] == doctest::Approx(acc / 20.0).epsilon(1e-6));
    }
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t y = 0; y < 4; ++y)
      for (int64_t x = 0; x < 5; ++x) {
        double acc = 0;
        for (int64_t c = 0; c < 3; ++c) acc += z.data()[idx4(z.shape(), n, c, y, x)];
        CHECK(cm.data()[idx4(cm.shape(), n, 0, y, x)] == doctest::Approx(acc / 3.0).epsilon(1e-6));
      }
}

TEST_CASE("fused features are the trunk modulated by both gains") {
  ParamSet<float> ps;
  auto fuse = make_fused_path(ps, 4, 10);
  Rng rng(11);
  TensorF ss = TensorF::uniform(Shape{2, 4, 8, 8}, rng, -1.f, 1.f);
  TensorF sp = TensorF::uniform(Shape{2, 4, 8, 8}, rng, -1.f, 1.f);

  TensorF z = fused_trunk(fuse, ss, sp);
  TensorF sf = fused_encode(fuse, ss, sp);
  REQUIRE(sf.shape() == z.shape());

  TensorF gc = spectral_enhancement(fuse, z);
  TensorF gp = spatial_enhancement(fuse, z);
  const Shape& s = z.shape();
  for (int64_t n = 0; n < s[0]; ++n)
    for (int64_t c = 0; c < s[1]; ++c)
      for (int64_t y = 0; y < s[2]; ++y)
        for (int64_t x = 0; x < s[3]; ++x) {
          const float want = z.data()[idx4(s, n, c, y, x)] * gc.data()[n * s[1] + c] *
                             gp.data()[idx4(gp.shape(), n, 0, y, x)];
          CHECK(sf.data()[idx4(s, n, c, y, x)] == doctest::Approx(want).epsilon(1e-6));
          CHECK(std::abs(sf.data()[idx4(s, n, c, y, x)]) <=
                std::abs(z.data()[idx4(s, n, c, y, x)]) + 1e-7f);
        }

  // saturating the gain convs pushes both factors to 1, leaving the trunk
  auto sat = fuse;
  sat.se2.w = TensorF(sat.se2.w.shape(), 0.f);
  sat.se2.b = TensorF(sat.se2.b.shape(), 60.f);
  sat.pe.w = TensorF(sat.pe.w.shape(), 0.f);
  sat.pe.b = TensorF(sat.pe.b.shape(), 60.f);
  TensorF unmodulated = fused_encode(sat, ss, sp);
  TensorF zsat = fused_trunk(sat, ss, sp);
  for (int64_t i = 0; i < unmodulated.numel(); ++i)
    CHECK(unmodulated.data()[i] == doctest::Approx(zsat.data()[i]).epsilon(1e-6));

  TensorF small = TensorF::uniform(Shape{2, 4, 4, 4}, rng, -1.f, 1.f);
  CHECK_THROWS_WITH_AS(fused_trunk(fuse, ss, small), doctest::Contains("differ"),
                       std::invalid_argument);
}

TEST_CASE("spectral branch gradients match finite differences") {
  ParamSet<double> ps;
  auto enc = make_spectral_encoder(ps, 3, 4, 2, 12);
  Rng rng(13);
  auto ins = all_leaves(ps, {TensorD::uniform(Shape{1, 3, 4, 4}, rng, 0.2, 1.2)});
  auto res = grad_check<double>(
      [&enc](std::vector<TensorD>& in) {
        TensorD y = spectral_encode(enc, in[0]);
        return ops::mean_all(ops::mul(y, y));
      },
      ins);
  INFO(res.worst);
  CHECK(res.ok(1e-5));
}

TEST_CASE("spatial branch gradients match finite differences") {
  ParamSet<double> ps;
  auto enc = make_spatial_encoder(ps, 4, 2, 14);
  Rng rng(15);
  auto ins = all_leaves(ps, {TensorD::uniform(Shape{1, 3, 4, 4}, rng, 0.2, 1.2)});
  auto res = grad_check<double>(
      [&enc](std::vector<TensorD>& in) {
        TensorD y = spatial_encode(enc, in[0]);
        return ops::mean_all(ops::mul(y, y));
      },
      ins);
  INFO(res.worst);
  CHECK(res.ok(1e-5));
}

TEST_CASE("residual block gradients match finite differences") {
  ParamSet<double> ps;
  auto c1 = make_conv(ps, "rb.c1", 2, 2, 1, 1, 16);
  auto c3 = make_conv(ps, "rb.c3", 2, 2, 3, 1, 16);
  Rng rng(17);
  auto ins = all_leaves(ps, {TensorD::uniform(Shape{1, 2, 4, 4}, rng, 0.2, 1.2)});
  auto res = grad_check<double>(
      [&c1, &c3](std::vector<TensorD>& in) {
        TensorD y = residual_block(in[0], c1, c3);
        return ops::mean_all(ops::mul(y, y));
      },
      ins);
  INFO(res.worst);
  CHECK(res.ok(1e-5));
}

TEST_CASE("full fused encoder gradients match finite differences") {
  ParamSet<double> ps;
  auto fuse = make_fused_path(ps, 4, 18);
  Rng rng(19);
  auto ins = all_leaves(ps, {TensorD::uniform(Shape{1, 4, 8, 8}, rng, 0.2, 1.2),
                             TensorD::uniform(Shape{1, 4, 8, 8}, rng, 0.2, 1.2)});
  auto res = grad_check<double>(
      [&fuse](std::vector<TensorD>& in) {
        TensorD y = fused_encode(fuse, in[0], in[1]);
        return ops::mean_all(ops::mul(y, y));
      },
      ins);
  INFO(res.worst);
  CHECK(res.ok(1e-5));
}
