#pragma once

// Receiver-side reconstruction: three transpose-convolution branches summed.
// Base path upsamples x2 then refines at full resolution; the two mask
// branches gate the received features at feature resolution before their own
// x2 upsampling. Final layers are linear; clamping happens at metric time.

#include <string>

#include "hfsc/encoder.hpp"
#include "hfsc/ops.hpp"
#include "hfsc/optim.hpp"

namespace hfsc {

template <typename T>
struct ConvT {
  Tensor<T> w, b;  // weight (in, out, k, k)
  int stride = 1, pad = 1, outpad = 0;
};

template <typename T>
ConvT<T> make_convt(ParamSet<T>& ps, const std::string& name, int64_t cin, int64_t cout,
                    int stride, uint64_t seed) {
  ConvT<T> c;
  c.stride = stride;
  c.pad = 1;
  c.outpad = stride == 2 ? 1 : 0;
  c.w = ps.add(name + ".w", init_weight<T>(Shape{cin, cout, 3, 3}, cin * 9, seed, name + ".w"));
  c.b = ps.add(name + ".b", Tensor<T>(Shape{cout}));
  return c;
}

template <typename T>
Tensor<T> convt_fwd(const ConvT<T>& c, const Tensor<T>& x) {
  return ops::conv_transpose2d(x, c.w, c.b, c.stride, c.pad, c.outpad);
}

template <typename T>
struct Decoder {
  ConvT<T> ctr1;  // stride 2, input -> L, ReLU
  ConvT<T> ctr2;  // stride 1, L -> L, linear
  ConvT<T> ctr3;  // stride 2, input -> L, linear (mask branch)
  ConvT<T> ctr4;  // stride 2, input -> L, linear (complement-mask branch)
  bool has_branches = true;
};

template <typename T>
Decoder<T> make_decoder(ParamSet<T>& ps, int64_t in_channels, int64_t L, bool with_branches,
                        uint64_t seed) {
  Decoder<T> d;
  d.has_branches = with_branches;
  d.ctr1 = make_convt(ps, "dec.ctr1", in_channels, L, 2, seed);
  d.ctr2 = make_convt(ps, "dec.ctr2", L, L, 1, seed);
  if (with_branches) {
    d.ctr3 = make_convt(ps, "dec.ctr3", in_channels, L, 2, seed);
    d.ctr4 = make_convt(ps, "dec.ctr4", in_channels, L, 2, seed);
  }
  return d;
}

// Base path only: CTR2(relu(CTR1(s))). Single-source baselines stop here.
template <typename T>
Tensor<T> decode_base(const Decoder<T>& d, const Tensor<T>& s_hat) {
  return convt_fwd(d.ctr2, ops::relu(convt_fwd(d.ctr1, s_hat)));
}

// Y = CTR2(relu(CTR1(s))) + CTR3(s*m_fp) + CTR4(s*(1-m_fps)).
template <typename T>
Tensor<T> decode(const Decoder<T>& d, const Tensor<T>& s_hat, const Tensor<T>& m_fp,
                 const Tensor<T>& m_fps) {
  if (!d.has_branches)
    throw std::invalid_argument("decode: decoder was built without mask branches");
  Tensor<T> base = decode_base(d, s_hat);
  Tensor<T> b3 = convt_fwd(d.ctr3, ops::mul(s_hat, m_fp));
  Tensor<T> b4 = convt_fwd(d.ctr4, ops::mul(s_hat, ops::rsub_scalar(T(1), m_fps)));
  return ops::add(ops::add(base, b3), b4);
}

}  // namespace hfsc
