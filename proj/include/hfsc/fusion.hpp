#pragma once

// Hierarchy-aware fusion: Transformer guidance (SA -> CA -> SA -> linear ->
// channel softmax), cumulative masks, and the two-stage convex blend that
// folds the deep and shallow features into one transmitted map.

#include <cmath>
#include <string>
#include <utility>

#include "hfsc/encoder.hpp"
#include "hfsc/ops.hpp"
#include "hfsc/optim.hpp"

namespace hfsc {

template <typename T>
struct AttnLayer {
  Tensor<T> wq, bq, wk, bk, wv, bv;
};

template <typename T>
struct GuidanceBlock {
  AttnLayer<T> sa1, ca, sa2;
  Tensor<T> wl, bl;  // final channel projection
  int heads = 1;
};

template <typename T>
AttnLayer<T> make_attn_layer(ParamSet<T>& ps, const std::string& name, int64_t l, uint64_t seed) {
  AttnLayer<T> a;
  a.wq = ps.add(name + ".wq", init_weight<T>(Shape{l, l}, l, seed, name + ".wq"));
  a.bq = ps.add(name + ".bq", Tensor<T>(Shape{l}));
  a.wk = ps.add(name + ".wk", init_weight<T>(Shape{l, l}, l, seed, name + ".wk"));
  a.bk = ps.add(name + ".bk", Tensor<T>(Shape{l}));
  a.wv = ps.add(name + ".wv", init_weight<T>(Shape{l, l}, l, seed, name + ".wv"));
  a.bv = ps.add(name + ".bv", Tensor<T>(Shape{l}));
  return a;
}

template <typename T>
GuidanceBlock<T> make_guidance_block(ParamSet<T>& ps, const std::string& name, int64_t l,
                                     int heads, uint64_t seed) {
  if (heads < 1 || l % heads != 0)
    throw std::invalid_argument("guidance: feature channels " + std::to_string(l) +
                                " not divisible by heads " + std::to_string(heads));
  GuidanceBlock<T> g;
  g.heads = heads;
  g.sa1 = make_attn_layer(ps, name + ".sa1", l, seed);
  g.ca = make_attn_layer(ps, name + ".ca", l, seed);
  g.sa2 = make_attn_layer(ps, name + ".sa2", l, seed);
  g.wl = ps.add(name + ".out.w", init_weight<T>(Shape{l, l}, l, seed, name + ".out.w"));
  g.bl = ps.add(name + ".out.b", Tensor<T>(Shape{l}));
  return g;
}

template <typename T>
Tensor<T> attn_apply(const AttnLayer<T>& a, const Tensor<T>& q_tokens, const Tensor<T>& kv_tokens,
                     int heads) {
  return ops::attention(ops::linear(q_tokens, a.wq, a.bq), ops::linear(kv_tokens, a.wk, a.bk),
                        ops::linear(kv_tokens, a.wv, a.bv), heads);
}

// Dynamic guidance vector: channel-softmaxed per position, same shape as the
// inputs. Spatial positions are the tokens; no positional encoding.
template <typename T>
Tensor<T> guidance(const GuidanceBlock<T>& g, const Tensor<T>& deep, const Tensor<T>& shallow) {
  if (deep.shape() != shallow.shape())
    throw std::invalid_argument("guidance: shapes " + deep.shape().str() + " and " +
                                shallow.shape().str() + " differ");
  const int64_t h = deep.shape()[2], w = deep.shape()[3];
  Tensor<T> dt = ops::nchw_to_tokens(deep);
  Tensor<T> st = ops::nchw_to_tokens(shallow);
  Tensor<T> a1 = attn_apply(g.sa1, dt, dt, g.heads);
  Tensor<T> a2 = attn_apply(g.ca, a1, st, g.heads);
  Tensor<T> a3 = attn_apply(g.sa2, a2, a2, g.heads);
  Tensor<T> lin = ops::linear(a3, g.wl, g.bl);
  return ops::softmax_channels(ops::tokens_to_nchw(lin, h, w));
}

// Running channel sum of a softmaxed guidance vector: monotone per position,
// terminal channel 1.
template <typename T>
Tensor<T> cumulative_mask(const Tensor<T>& n) {
  return ops::cumsum_channels(n);
}

// a*m + b*(1-m)
template <typename T>
Tensor<T> blend(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& m) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("blend: shapes " + a.shape().str() + " and " + b.shape().str() +
                                " differ");
  return ops::add(ops::mul(a, m), ops::mul(b, ops::rsub_scalar(T(1), m)));
}

template <typename T>
struct MaskPair {
  Tensor<T> m_fp;   // deep vs spatial-shallow stage
  Tensor<T> m_fps;  // fused vs spectral-shallow stage
  int quant_bits = 8;
};

// Stage 1: S_(f,p) = S_f*m_fp + S_p*(1-m_fp).
// Stage 2: S = S_(f,p)*(1-m_fps) + S_s*m_fps.
template <typename T>
std::pair<Tensor<T>, MaskPair<T>> hierarchy_fuse(const GuidanceBlock<T>& g1,
                                                 const GuidanceBlock<T>& g2, const Tensor<T>& s_f,
                                                 const Tensor<T>& s_s, const Tensor<T>& s_p) {
  if (s_f.shape() != s_s.shape() || s_f.shape() != s_p.shape())
    throw std::invalid_argument("hierarchy_fuse: shapes " + s_f.shape().str() + ", " +
                                s_s.shape().str() + ", " + s_p.shape().str() + " differ");
  MaskPair<T> masks;
  masks.m_fp = cumulative_mask(guidance(g1, s_f, s_p));
  Tensor<T> s_fp = blend(s_f, s_p, masks.m_fp);
  masks.m_fps = cumulative_mask(guidance(g2, s_fp, s_s));
  Tensor<T> s = blend(s_s, s_fp, masks.m_fps);
  return {s, masks};
}

// Uniform [0,1] quantization for side-info accounting; the computation path
// keeps full precision. Returns the rounded masks and the side-info bytes.
template <typename T>
std::pair<MaskPair<T>, int64_t> quantize_masks(const MaskPair<T>& masks, int bits) {
  if (bits != 4 && bits != 8 && bits != 16)
    throw std::invalid_argument("quantize_masks: bits must be 4, 8 or 16, got " +
                                std::to_string(bits));
  const T levels = static_cast<T>((1 << bits) - 1);
  auto q = [&](const Tensor<T>& m) {
    Tensor<T> out(m.shape());
    for (int64_t i = 0; i < m.numel(); ++i)
      out.data()[i] = std::round(m.data()[i] * levels) / levels;
    return out;
  };
  MaskPair<T> out{q(masks.m_fp), q(masks.m_fps), bits};
  const Shape& s = masks.m_fp.shape();
  const int64_t per_mask = s[1] * s[2] * s[3];  // per sample
  return {out, 2 * per_mask * bits / 8};
}

}  // namespace hfsc
