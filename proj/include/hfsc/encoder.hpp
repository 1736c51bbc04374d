#pragma once

// Transmitter-side feature extraction. All layer structs are thin bags of
// tensor handles registered in a ParamSet; init is keyed by parameter name so
// layers shared between ablation variants start from identical values.

#include <cmath>
#include <string>

#include "hfsc/ops.hpp"
#include "hfsc/optim.hpp"
#include "hfsc/rng.hpp"

namespace hfsc {

template <typename T>
Tensor<T> init_weight(const Shape& s, int64_t fan_in, uint64_t seed, const std::string& name) {
  Rng rng(substream(seed, hash_name(name.c_str())));
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in));
  return Tensor<T>::uniform(s, rng, static_cast<T>(-a), static_cast<T>(a));
}

template <typename T>
struct Conv {
  Tensor<T> w, b;
  int stride = 1, pad = 0;
};

template <typename T>
Conv<T> make_conv(ParamSet<T>& ps, const std::string& name, int64_t cout, int64_t cin, int k,
                  int stride, uint64_t seed) {
  Conv<T> c;
  c.stride = stride;
  c.pad = k / 2;
  c.w = ps.add(name + ".w", init_weight<T>(Shape{cout, cin, k, k}, cin * k * k, seed, name + ".w"));
  c.b = ps.add(name + ".b", Tensor<T>(Shape{cout}));
  return c;
}

template <typename T>
Tensor<T> conv_fwd(const Conv<T>& c, const Tensor<T>& x) {
  return ops::conv2d(x, c.w, c.b, c.stride, c.pad);
}

// CR = conv + ReLU.
template <typename T>
Tensor<T> cr(const Conv<T>& c, const Tensor<T>& x) {
  return ops::relu(conv_fwd(c, x));
}

template <typename T>
struct SpectralEncoder {
  Conv<T> c1, c2;  // 1x1 L->c_mid stride 1, 1x1 c_mid->l stride 2
};

template <typename T>
struct SpatialEncoder {
  Conv<T> c1, c2;  // 3x3 3->c_mid stride 1, 3x3 c_mid->l stride 2
};

template <typename T>
SpectralEncoder<T> make_spectral_encoder(ParamSet<T>& ps, int64_t L, int64_t c_mid, int64_t l,
                                         uint64_t seed) {
  return {make_conv(ps, "enc.spec.c1", c_mid, L, 1, 1, seed),
          make_conv(ps, "enc.spec.c2", l, c_mid, 1, 2, seed)};
}

template <typename T>
SpatialEncoder<T> make_spatial_encoder(ParamSet<T>& ps, int64_t c_mid, int64_t l, uint64_t seed) {
  return {make_conv(ps, "enc.spat.c1", c_mid, 3, 3, 1, seed),
          make_conv(ps, "enc.spat.c2", l, c_mid, 3, 2, seed)};
}

namespace detail {
template <typename T>
void require_even_spatial(const Tensor<T>& x, const char* who) {
  if (x.shape()[2] % 2 || x.shape()[3] % 2)
    throw std::invalid_argument(std::string(who) + ": spatial extents of " + x.shape().str() +
                                " must be even for the stride-2 stage");
}
}  // namespace detail

template <typename T>
Tensor<T> spectral_encode(const SpectralEncoder<T>& e, const Tensor<T>& x1_up) {
  detail::require_even_spatial(x1_up, "spectral_encode");
  return cr(e.c2, cr(e.c1, x1_up));
}

template <typename T>
Tensor<T> spatial_encode(const SpatialEncoder<T>& e, const Tensor<T>& x2) {
  detail::require_even_spatial(x2, "spatial_encode");
  return cr(e.c2, cr(e.c1, x2));
}

// x + CR3(CR1(x)), channel-preserving.
template <typename T>
Tensor<T> residual_block(const Tensor<T>& x, const Conv<T>& c1, const Conv<T>& c3) {
  return ops::add(x, cr(c3, cr(c1, x)));
}

template <typename T>
struct FusedPath {
  Conv<T> pre1, pre3;          // per-branch CR before concatenation
  Conv<T> rb1a, rb1b;          // entry residual block, 2l -> l projection
  Conv<T> rb2a, rb2b;          // second residual block, l -> l
  Conv<T> se1, se2;            // spectral enhancement bottleneck
  Conv<T> pe;                  // spatial enhancement 3x3
};

template <typename T>
FusedPath<T> make_fused_path(ParamSet<T>& ps, int64_t l, uint64_t seed) {
  const int64_t lr = std::max<int64_t>(1, l / 4);
  FusedPath<T> f;
  f.pre1 = make_conv(ps, "enc.fuse.pre1", l, l, 1, 1, seed);
  f.pre3 = make_conv(ps, "enc.fuse.pre3", l, l, 3, 1, seed);
  f.rb1a = make_conv(ps, "enc.fuse.rb1a", l, 2 * l, 1, 1, seed);
  f.rb1b = make_conv(ps, "enc.fuse.rb1b", l, l, 3, 1, seed);
  f.rb2a = make_conv(ps, "enc.fuse.rb2a", l, l, 1, 1, seed);
  f.rb2b = make_conv(ps, "enc.fuse.rb2b", l, l, 3, 1, seed);
  f.se1 = make_conv(ps, "enc.fuse.se1", lr, l, 1, 1, seed);
  f.se2 = make_conv(ps, "enc.fuse.se2", l, lr, 1, 1, seed);
  f.pe = make_conv(ps, "enc.fuse.pe", 1, 1, 3, 1, seed);
  return f;
}

// Per-channel gain in (0,1): GAP -> 1x1 bottleneck -> sigmoid.
template <typename T>
Tensor<T> spectral_enhancement(const FusedPath<T>& f, const Tensor<T>& z) {
  return ops::sigmoid(conv_fwd(f.se2, ops::relu(conv_fwd(f.se1, ops::spatial_mean(z)))));
}

// Per-position gain in (0,1): channel mean -> 3x3 -> sigmoid.
template <typename T>
Tensor<T> spatial_enhancement(const FusedPath<T>& f, const Tensor<T>& z) {
  return ops::sigmoid(conv_fwd(f.pe, ops::channel_mean(z)));
}

// Z = F_f(F_f([CR1(S_s) || CR3(S_p)])), the 2l concatenation projected to l
// inside the first block (skip taken after the projection).
template <typename T>
Tensor<T> fused_trunk(const FusedPath<T>& f, const Tensor<T>& s_s, const Tensor<T>& s_p) {
  if (s_s.shape() != s_p.shape())
    throw std::invalid_argument("fused_trunk: shapes " + s_s.shape().str() + " and " +
                                s_p.shape().str() + " differ");
  Tensor<T> c = ops::concat_channels<T>({cr(f.pre1, s_s), cr(f.pre3, s_p)});
  Tensor<T> y = cr(f.rb1a, c);
  Tensor<T> z1 = ops::add(y, cr(f.rb1b, y));
  return residual_block(z1, f.rb2a, f.rb2b);
}

template <typename T>
Tensor<T> fused_encode(const FusedPath<T>& f, const Tensor<T>& s_s, const Tensor<T>& s_p) {
  Tensor<T> z = fused_trunk(f, s_s, s_p);
  return ops::mul(ops::mul(z, spectral_enhancement(f, z)), spatial_enhancement(f, z));
}

}  // namespace hfsc
