#include <chrono>
#include <functional>
#include <limits>
#include <vector>

#include "hfsc/gradcheck.hpp"
#include "hfsc/harness.hpp"

namespace hfsc {

namespace {

using TD = Tensor<double>;
using Inputs = std::vector<TD>;
using Fn = std::function<TD(Inputs&)>;

constexpr double kOpTol = 1e-5;
constexpr double kLayerTol = 1e-4;

std::vector<TD> with_params(ParamSet<double>& ps, std::initializer_list<TD> extra) {
  std::vector<TD> v(extra);
  for (size_t i = 0; i < ps.size(); ++i) v.push_back(ps.at(i));
  return v;
}

// Fixed-weight scalar readout; breaks symmetric outputs (e.g. softmax rows)
// so every input coordinate influences the loss.
TD readout(const TD& x, uint64_t seed) {
  Rng r(seed);
  TD w = TD::uniform(x.shape(), r, -1.0, 1.0);
  return ops::mean_all(ops::mul(x, w));
}

}  // namespace

GradCheckReport gradcheck_all() {
  GradCheckReport rep;
  const auto t0 = std::chrono::steady_clock::now();
  auto check = [&rep](const char* name, double tol, Inputs inputs, const Fn& fn) {
    GradCheckResult res = grad_check<double>(fn, inputs);
    rep.checks.push_back({name, res.max_rel_err, tol, res.ok(tol)});
    rep.all_ok = rep.all_ok && rep.checks.back().ok;
  };

  Rng rng(0x6c0de);
  auto U = [&rng](const Shape& s, double lo, double hi) { return TD::uniform(s, rng, lo, hi); };

  // --- elementwise & broadcast ---
  check("op.add", kOpTol, {U(Shape{2, 3, 4, 4}, -1, 1), U(Shape{1, 3, 1, 1}, -1, 1)},
        [](Inputs& in) { return readout(ops::add(in[0], in[1]), 1); });
  check("op.sub", kOpTol, {U(Shape{2, 3, 4, 4}, -1, 1), U(Shape{2, 1, 4, 4}, -1, 1)},
        [](Inputs& in) { return readout(ops::sub(in[0], in[1]), 2); });
  check("op.mul", kOpTol, {U(Shape{2, 3, 4, 4}, -1, 1), U(Shape{1, 3, 1, 1}, -1, 1)},
        [](Inputs& in) { return readout(ops::mul(in[0], in[1]), 3); });
  check("op.div", kOpTol, {U(Shape{2, 3, 4, 4}, -1, 1), U(Shape{2, 3, 1, 1}, 0.5, 1.5)},
        [](Inputs& in) { return readout(ops::div(in[0], in[1]), 4); });
  check("op.scalar_affine", kOpTol, {U(Shape{2, 3, 4, 4}, -1, 1)}, [](Inputs& in) {
    return readout(ops::rsub_scalar(1.0, ops::add_scalar(ops::mul_scalar(in[0], 1.7), 0.3)), 5);
  });
  check("op.relu", kOpTol, {U(Shape{2, 3, 4, 4}, -1, 1)},
        [](Inputs& in) { return readout(ops::relu(in[0]), 6); });
  check("op.sigmoid", kOpTol, {U(Shape{2, 3, 4, 4}, -2, 2)},
        [](Inputs& in) { return readout(ops::sigmoid(in[0]), 7); });
  check("op.sqrt", kOpTol, {U(Shape{2, 3, 4, 4}, 0.2, 2)},
        [](Inputs& in) { return readout(ops::sqrt_op(in[0]), 8); });

  // --- reductions ---
  check("op.sum_all", kOpTol, {U(Shape{2, 3, 4, 4}, -1, 1)},
        [](Inputs& in) { return ops::sum_all(in[0]); });
  check("op.mean_all", kOpTol, {U(Shape{2, 3, 4, 4}, -1, 1)},
        [](Inputs& in) { return ops::mean_all(in[0]); });
  check("op.mean_per_sample", kOpTol, {U(Shape{2, 3, 2, 2}, -1, 1)},
        [](Inputs& in) { return readout(ops::mean_per_sample(in[0]), 9); });
  check("op.spatial_mean", kOpTol, {U(Shape{2, 3, 4, 4}, -1, 1)},
        [](Inputs& in) { return readout(ops::spatial_mean(in[0]), 10); });
  check("op.channel_mean", kOpTol, {U(Shape{2, 3, 4, 4}, -1, 1)},
        [](Inputs& in) { return readout(ops::channel_mean(in[0]), 11); });

  // --- normalizers ---
  check("op.softmax", kOpTol, {U(Shape{2, 4, 2, 2}, -1, 1)},
        [](Inputs& in) { return readout(ops::softmax(in[0], 1), 12); });
  check("op.softmax_channels", kOpTol, {U(Shape{1, 4, 2, 2}, -1, 1)},
        [](Inputs& in) { return readout(ops::softmax_channels(in[0]), 13); });
  check("op.normalize_power", kOpTol, {U(Shape{2, 2, 2, 2}, 0.3, 1)}, [](Inputs& in) {
    auto p = normalize_power(in[0]);
    return ops::add(readout(p.first, 14), readout(p.second, 15));
  });

  // --- convolutions ---
  check("op.conv2d_k1s1", kOpTol,
        {U(Shape{1, 3, 4, 4}, -1, 1), U(Shape{2, 3, 1, 1}, -1, 1), U(Shape{2}, -0.5, 0.5)},
        [](Inputs& in) { return readout(ops::conv2d(in[0], in[1], in[2], 1, 0), 16); });
  check("op.conv2d_k3s1", kOpTol,
        {U(Shape{1, 3, 4, 4}, -1, 1), U(Shape{2, 3, 3, 3}, -1, 1), U(Shape{2}, -0.5, 0.5)},
        [](Inputs& in) { return readout(ops::conv2d(in[0], in[1], in[2], 1, 1), 17); });
  check("op.conv2d_k3s2", kOpTol,
        {U(Shape{1, 2, 4, 4}, -1, 1), U(Shape{3, 2, 3, 3}, -1, 1), U(Shape{3}, -0.5, 0.5)},
        [](Inputs& in) { return readout(ops::conv2d(in[0], in[1], in[2], 2, 1), 18); });
  check("op.conv_transpose2d_s1", kOpTol,
        {U(Shape{1, 2, 3, 3}, -1, 1), U(Shape{2, 3, 3, 3}, -1, 1), U(Shape{3}, -0.5, 0.5)},
        [](Inputs& in) { return readout(ops::conv_transpose2d(in[0], in[1], in[2], 1, 1, 0), 19); });
  check("op.conv_transpose2d_s2", kOpTol,
        {U(Shape{1, 2, 3, 3}, -1, 1), U(Shape{2, 3, 3, 3}, -1, 1), U(Shape{3}, -0.5, 0.5)},
        [](Inputs& in) { return readout(ops::conv_transpose2d(in[0], in[1], in[2], 2, 1, 1), 20); });

  // --- token ops ---
  check("op.linear", kOpTol,
        {U(Shape{1, 5, 3}, -1, 1), U(Shape{4, 3}, -1, 1), U(Shape{4}, -0.5, 0.5)},
        [](Inputs& in) { return readout(ops::linear(in[0], in[1], in[2]), 21); });
  check("op.attention", kOpTol,
        {U(Shape{1, 6, 4}, -1, 1), U(Shape{1, 6, 4}, -1, 1), U(Shape{1, 6, 4}, -1, 1)},
        [](Inputs& in) { return readout(ops::attention(in[0], in[1], in[2], 2), 22); });
  check("op.tokens_roundtrip", kOpTol, {U(Shape{1, 3, 2, 4}, -1, 1)}, [](Inputs& in) {
    return readout(ops::tokens_to_nchw(ops::nchw_to_tokens(in[0]), 2, 4), 23);
  });

  // --- structure ops ---
  check("op.concat_channels", kOpTol,
        {U(Shape{1, 2, 3, 3}, -1, 1), U(Shape{1, 1, 3, 3}, -1, 1), U(Shape{1, 3, 3, 3}, -1, 1)},
        [](Inputs& in) {
          return readout(ops::concat_channels<double>({in[0], in[1], in[2]}), 24);
        });
  check("op.cumsum_channels", kOpTol, {U(Shape{1, 4, 2, 2}, -1, 1)},
        [](Inputs& in) { return readout(ops::cumsum_channels(in[0]), 25); });
  check("op.upsample_bicubic", kOpTol, {U(Shape{1, 2, 3, 3}, -1, 1)},
        [](Inputs& in) { return readout(ops::upsample_bicubic(in[0], 2), 26); });
  check("op.mse", kOpTol, {U(Shape{2, 3, 4, 4}, -1, 1), U(Shape{2, 3, 4, 4}, -1, 1)},
        [](Inputs& in) { return ops::mse(in[0], in[1]); });

  // --- layers ---
  {
    ParamSet<double> ps;
    SpectralEncoder<double> enc = make_spectral_encoder(ps, 3, 4, 2, 0xe5);
    check("layer.spectral_encoder", kOpTol, with_params(ps, {U(Shape{1, 3, 4, 4}, 0.2, 1.2)}),
          [enc](Inputs& in) { return readout(spectral_encode(enc, in[0]), 27); });
  }
  {
    ParamSet<double> ps;
    SpatialEncoder<double> enc = make_spatial_encoder(ps, 4, 2, 0xe6);
    check("layer.spatial_encoder", kOpTol, with_params(ps, {U(Shape{1, 3, 4, 4}, 0.2, 1.2)}),
          [enc](Inputs& in) { return readout(spatial_encode(enc, in[0]), 28); });
  }
  {
    ParamSet<double> ps;
    FusedPath<double> f = make_fused_path(ps, 4, 0xe7);
    check("layer.fused_path", kLayerTol,
          with_params(ps, {U(Shape{1, 4, 4, 4}, 0.2, 1.2), U(Shape{1, 4, 4, 4}, 0.2, 1.2)}),
          [f](Inputs& in) { return readout(fused_encode(f, in[0], in[1]), 29); });
  }
  {
    ParamSet<double> ps;
    GuidanceBlock<double> g = make_guidance_block(ps, "g", 4, 2, 0xe8);
    check("layer.guidance", kLayerTol,
          with_params(ps, {U(Shape{1, 4, 2, 2}, -1, 1), U(Shape{1, 4, 2, 2}, -1, 1)}),
          [g](Inputs& in) { return readout(guidance(g, in[0], in[1]), 30); });
  }
  {
    ParamSet<double> ps;
    GuidanceBlock<double> g1 = make_guidance_block(ps, "g1", 4, 2, 0xe9);
    GuidanceBlock<double> g2 = make_guidance_block(ps, "g2", 4, 2, 0xea);
    check("layer.hierarchy_fuse", kLayerTol,
          with_params(ps, {U(Shape{1, 4, 2, 2}, -1, 1), U(Shape{1, 4, 2, 2}, -1, 1),
                           U(Shape{1, 4, 2, 2}, -1, 1)}),
          [g1, g2](Inputs& in) {
            return readout(hierarchy_fuse(g1, g2, in[0], in[1], in[2]).first, 31);
          });
  }
  {
    ParamSet<double> ps;
    Decoder<double> dec = make_decoder(ps, 2, 3, true, 0xeb);
    TD target = U(Shape{1, 3, 8, 8}, 0, 1);
    check("layer.decoder", kLayerTol,
          with_params(ps, {U(Shape{1, 2, 4, 4}, -1, 1), U(Shape{1, 2, 4, 4}, 0.2, 0.8),
                           U(Shape{1, 2, 4, 4}, 0.2, 0.8)}),
          [dec, target](Inputs& in) {
            return ops::mse(decode(dec, in[0], in[1], in[2]), target);
          });
  }

  // --- full tiny pipeline over a noiseless channel ---
  {
    Model<double> m = make_model<double>(Variant::proposed, ModelDims{4, 4, 8, 2, 2, 8}, 0xec);
    TD x1 = U(Shape{1, 4, 4, 4}, 0.1, 0.9);
    TD x2 = U(Shape{1, 3, 8, 8}, 0.1, 0.9);
    TD target = U(Shape{1, 4, 8, 8}, 0.1, 0.9);
    ChannelConfig ch;
    ch.snr_db = std::numeric_limits<double>::infinity();
    check("pipeline.end_to_end", kLayerTol, with_params(m.params, {x1, x2}),
          [&m, target, ch](Inputs& in) {
            return ops::mse(forward(m, in[0], in[1], ch).y_hat, target);
          });
  }

  rep.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace hfsc
