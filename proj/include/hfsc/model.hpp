#pragma once

// Variant assembly and the end-to-end forward pass (encoders -> fusion ->
// power normalization -> channel -> decoder).

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "hfsc/channel.hpp"
#include "hfsc/cube.hpp"
#include "hfsc/decoder.hpp"
#include "hfsc/encoder.hpp"
#include "hfsc/fusion.hpp"

namespace hfsc {

enum class Variant { full, proposed, separate, basic, hsi_only, rgb_only };

inline Variant parse_variant(const std::string& s) {
  if (s == "full") return Variant::full;
  if (s == "proposed") return Variant::proposed;
  if (s == "separate") return Variant::separate;
  if (s == "basic") return Variant::basic;
  if (s == "hsi_only") return Variant::hsi_only;
  if (s == "rgb_only") return Variant::rgb_only;
  throw std::invalid_argument(
      "unknown variant: " + s + " (want full|proposed|separate|basic|hsi_only|rgb_only)");
}

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::proposed: return "proposed";
    case Variant::separate: return "separate";
    case Variant::basic: return "basic";
    case Variant::hsi_only: return "hsi_only";
    default: return "rgb_only";
  }
}

inline bool variant_has_spectral(Variant v) { return v != Variant::rgb_only; }
inline bool variant_has_spatial(Variant v) { return v != Variant::hsi_only; }
inline bool variant_has_fused(Variant v) {
  return v == Variant::full || v == Variant::proposed || v == Variant::separate ||
         v == Variant::basic;
}
inline bool variant_has_guidance(Variant v) {
  return v == Variant::proposed || v == Variant::separate;
}
inline bool variant_single_source(Variant v) {
  return v == Variant::hsi_only || v == Variant::rgb_only;
}

struct ModelDims {
  int64_t L = 16;   // spectral bands
  int64_t l = 8;    // feature channels
  int64_t c_mid = 16;
  int heads = 2;
  int scale = 4;    // HR/LR spatial ratio
  int quant_bits = 8;
};

template <typename T>
struct Model {
  Variant variant = Variant::proposed;
  ModelDims dims;
  ParamSet<T> params;
  std::optional<SpectralEncoder<T>> spec;
  std::optional<SpatialEncoder<T>> spat;
  std::optional<FusedPath<T>> fuse;
  std::optional<GuidanceBlock<T>> g1, g2;
  Decoder<T> dec;
};

template <typename T>
Model<T> make_model(Variant v, const ModelDims& dims, uint64_t init_seed) {
  Model<T> m;
  m.variant = v;
  m.dims = dims;
  if (variant_has_spectral(v))
    m.spec = make_spectral_encoder(m.params, dims.L, dims.c_mid, dims.l, init_seed);
  if (variant_has_spatial(v))
    m.spat = make_spatial_encoder(m.params, dims.c_mid, dims.l, init_seed);
  if (variant_has_fused(v)) m.fuse = make_fused_path(m.params, dims.l, init_seed);
  if (variant_has_guidance(v)) {
    m.g1 = make_guidance_block(m.params, "fusion.g1", dims.l, dims.heads, init_seed);
    m.g2 = make_guidance_block(m.params, "fusion.g2", dims.l, dims.heads, init_seed);
  }
  const int64_t dec_in = v == Variant::full ? 3 * dims.l : dims.l;
  m.dec = make_decoder(m.params, dec_in, dims.L, !variant_single_source(v), init_seed);
  return m;
}

template <typename T>
struct ForwardResult {
  Tensor<T> y_hat;        // (N, L, H, W), unclamped
  Tensor<T> s;            // transmitted feature map before power normalization
  MaskPair<T> masks;      // tensors defined only when the variant produces them
  ChannelDiag diag;
};

// x1_lr: (N, L, H/scale, W/scale) LR-HSI; x2: (N, 3, H, W) HR-RGB (undefined
// tensor allowed where the variant ignores a source). With quantized_masks
// the receiver decodes from masks rounded to quant_bits — the precision the
// side-info byte count pays for; training keeps full precision so gradients
// reach the guidance blocks through the decode path.
template <typename T>
ForwardResult<T> forward(const Model<T>& m, const Tensor<T>& x1_lr, const Tensor<T>& x2,
                         const ChannelConfig& ch, bool quantized_masks = false) {
  ForwardResult<T> r;
  Tensor<T> s_s, s_p;
  if (variant_has_spectral(m.variant)) {
    if (!x1_lr.defined()) throw std::invalid_argument("forward: variant needs the LR-HSI input");
    if (x1_lr.shape()[1] != m.dims.L)
      throw std::invalid_argument("forward: LR-HSI " + x1_lr.shape().str() + " does not carry " +
                                  std::to_string(m.dims.L) + " bands");
    s_s = spectral_encode(*m.spec, ops::upsample_bicubic(x1_lr, m.dims.scale));
  }
  if (variant_has_spatial(m.variant)) {
    if (!x2.defined()) throw std::invalid_argument("forward: variant needs the HR-RGB input");
    s_p = spatial_encode(*m.spat, x2);
  }
  if (s_s.defined() && s_p.defined() && s_s.shape() != s_p.shape())
    throw std::invalid_argument("forward: feature shapes " + s_s.shape().str() + " and " +
                                s_p.shape().str() + " differ (check scale against input sizes)");

  switch (m.variant) {
    case Variant::proposed:
    case Variant::separate: {
      Tensor<T> s_f = fused_encode(*m.fuse, s_s, s_p);
      auto fused = hierarchy_fuse(*m.g1, *m.g2, s_f, s_s, s_p);
      r.s = fused.first;
      r.masks = fused.second;
      break;
    }
    case Variant::basic:
      r.s = fused_encode(*m.fuse, s_s, s_p);
      break;
    case Variant::full:
      r.s = ops::concat_channels<T>({fused_encode(*m.fuse, s_s, s_p), s_s, s_p});
      break;
    case Variant::hsi_only:
      r.s = s_s;
      break;
    case Variant::rgb_only:
      r.s = s_p;
      break;
  }
  r.masks.quant_bits = m.dims.quant_bits;

  auto norm = normalize_power(r.s);
  Tensor<T> noisy = channel_apply(norm.first, ch, &r.diag);
  Tensor<T> s_hat = ops::mul(noisy, norm.second);

  if (variant_single_source(m.variant)) {
    r.y_hat = decode_base(m.dec, s_hat);
  } else if (m.variant == Variant::proposed) {
    const MaskPair<T>& mk =
        quantized_masks ? quantize_masks(r.masks, m.dims.quant_bits).first : r.masks;
    r.y_hat = decode(m.dec, s_hat, mk.m_fp, mk.m_fps);
  } else {
    // masks withheld (separate) or never formed (basic/full): neutral 0.5
    Tensor<T> half = Tensor<T>::from(Shape{1, 1, 1, 1}, {T(0.5)});
    r.y_hat = decode(m.dec, s_hat, half, half);
  }
  return r;
}

// --- cube <-> tensor bridges ---

template <typename T>
Tensor<T> cube_to_tensor(const HsiCube& c) {
  Tensor<T> t(Shape{1, c.bands, c.height, c.width});
  for (int64_t i = 0; i < c.numel(); ++i) t.data()[i] = static_cast<T>(c.data[i]);
  return t;
}

template <typename T>
Tensor<T> rgb_to_tensor(const RgbImage& img) {
  Tensor<T> t(Shape{1, 3, img.height, img.width});
  for (size_t i = 0; i < img.data.size(); ++i) t.data()[i] = static_cast<T>(img.data[i]);
  return t;
}

// Values clamped to [0,1] on the way out (evaluation-time range contract).
template <typename T>
HsiCube tensor_to_cube(const Tensor<T>& t, int64_t sample = 0) {
  if (t.shape().nd != 4) throw std::invalid_argument("tensor_to_cube: want 4D, got " + t.shape().str());
  const int64_t L = t.shape()[1], H = t.shape()[2], W = t.shape()[3];
  HsiCube c(W, H, L);
  const T* src = t.data() + sample * L * H * W;
  for (int64_t i = 0; i < L * H * W; ++i)
    c.data[i] = std::clamp(static_cast<float>(src[i]), 0.f, 1.f);
  return c;
}

// Stacks scene triples into batched input/target tensors.
template <typename T>
void batch_to_tensors(const std::vector<const SceneTriple*>& batch, Tensor<T>& x1_lr,
                      Tensor<T>& x2, Tensor<T>& target) {
  if (batch.empty()) throw std::invalid_argument("batch_to_tensors: empty batch");
  const auto& t0 = *batch[0];
  const int64_t N = static_cast<int64_t>(batch.size());
  const int64_t L = t0.hr_hsi.bands, H = t0.hr_hsi.height, W = t0.hr_hsi.width;
  const int64_t h = t0.lr_hsi.height, w = t0.lr_hsi.width;
  x1_lr = Tensor<T>(Shape{N, L, h, w});
  x2 = Tensor<T>(Shape{N, 3, H, W});
  target = Tensor<T>(Shape{N, L, H, W});
  for (int64_t n = 0; n < N; ++n) {
    const SceneTriple& t = *batch[n];
    if (t.hr_hsi.bands != L || t.hr_hsi.height != H || t.hr_hsi.width != W)
      throw std::invalid_argument("batch_to_tensors: inconsistent patch shapes in batch");
    for (int64_t i = 0; i < L * h * w; ++i)
      x1_lr.data()[n * L * h * w + i] = static_cast<T>(t.lr_hsi.data[i]);
    for (int64_t i = 0; i < 3 * H * W; ++i)
      x2.data()[n * 3 * H * W + i] = static_cast<T>(t.hr_rgb.data[i]);
    for (int64_t i = 0; i < L * H * W; ++i)
      target.data()[n * L * H * W + i] = static_cast<T>(t.hr_hsi.data[i]);
  }
}

}  // namespace hfsc
