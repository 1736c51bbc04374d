#pragma once

// Analog feature transmission. Transmit power is normalized to 1 per sample,
// so noise variance is sigma^2 = 10^(-snr_db/10) for every channel kind.
// All channels are differentiable: AWGN noise is an additive constant, the
// MMSE equalizer is a fixed per-symbol scale once the fade is drawn, and the
// SVD path is the identity on retained eigenchannels.

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "hfsc/ops.hpp"
#include "hfsc/rng.hpp"
#include "hfsc/tensor.hpp"

namespace hfsc {

enum class ChannelKind { awgn, rayleigh_mmse, mimo_svd };

inline ChannelKind parse_channel(const std::string& s) {
  if (s == "awgn") return ChannelKind::awgn;
  if (s == "rayleigh") return ChannelKind::rayleigh_mmse;
  if (s == "mimo") return ChannelKind::mimo_svd;
  throw std::invalid_argument("unknown channel kind: " + s + " (want awgn|rayleigh|mimo)");
}

inline const char* channel_name(ChannelKind k) {
  switch (k) {
    case ChannelKind::awgn: return "awgn";
    case ChannelKind::rayleigh_mmse: return "rayleigh";
    default: return "mimo";
  }
}

struct ChannelConfig {
  ChannelKind kind = ChannelKind::awgn;
  double snr_db = 7.0;  // +inf means noiseless
  uint64_t seed = 0;
  int n_t = 2, n_r = 2;  // mimo only
};

struct ChannelDiag {
  int dropped_streams = 0;  // mimo eigenchannels below threshold
  bool padded = false;      // odd symbol count padded for complex packing
};

inline double noise_variance(double snr_db) {
  if (std::isinf(snr_db) && snr_db > 0) return 0.0;
  if (!std::isfinite(snr_db)) throw std::invalid_argument("noise_variance: snr_db must be finite or +inf");
  return std::pow(10.0, -snr_db / 10.0);
}

// s -> (s / sqrt(mean(s^2)), scale); per-sample normalization, scale shape (N,1,1,1).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> normalize_power(const Tensor<T>& s) {
  Tensor<T> p = ops::mean_per_sample(ops::mul(s, s));
  for (T v : p.values())
    if (!(v > T(0)))
      throw std::runtime_error("normalize_power: sample with zero power in " + s.shape().str());
  Tensor<T> scale = ops::sqrt_op(p);
  return {ops::div(s, scale), scale};
}

// --- AWGN ---

template <typename T>
Tensor<T> awgn(const Tensor<T>& symbols, double snr_db, uint64_t seed) {
  const double var = noise_variance(snr_db);
  if (var == 0.0) return symbols;
  const double sigma = std::sqrt(var);
  Tensor<T> out(symbols.shape());
  const T* x = symbols.data();
  T* y = out.data();
  for (int64_t i = 0, n = symbols.numel(); i < n; ++i)
    y[i] = x[i] + static_cast<T>(sigma * keyed_normal(seed, static_cast<uint64_t>(i)));
  attach(out, {symbols}, [xn = symbols.raw(), on = out.raw()]() {
    xn->ensure_grad();
    for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
  });
  return out;
}

// --- Rayleigh with per-symbol MMSE equalization ---
//
// Real pairs are packed as x = (s0 + i*s1)/sqrt(2) so complex symbols have
// unit power when the real stream does. h ~ CN(0,1) known at the receiver,
// y = h*x + n with n ~ CN(0, sigma^2), equalized x_hat = conj(h)*y/(|h|^2+sigma^2).

// Test hook: explicit fades and noise (arrays of length ceil(count/2), re/im).
template <typename T>
Tensor<T> rayleigh_mmse_explicit(const Tensor<T>& symbols, const std::vector<double>& h_re,
                                 const std::vector<double>& h_im, const std::vector<double>& n_re,
                                 const std::vector<double>& n_im, double var,
                                 ChannelDiag* diag = nullptr) {
  const int64_t n = symbols.numel();
  const int64_t pairs = (n + 1) / 2;
  if (static_cast<int64_t>(h_re.size()) < pairs || static_cast<int64_t>(n_re.size()) < pairs)
    throw std::invalid_argument("rayleigh_mmse: need " + std::to_string(pairs) + " fades, got " +
                                std::to_string(h_re.size()));
  if (diag && (n % 2)) diag->padded = true;

  Tensor<T> out(symbols.shape());
  std::vector<T> gain(static_cast<size_t>(pairs));
  const T* x = symbols.data();
  T* y = out.data();
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  for (int64_t p = 0; p < pairs; ++p) {
    const double s0 = x[2 * p];
    const double s1 = (2 * p + 1 < n) ? x[2 * p + 1] : 0.0;
    const std::complex<double> xc(s0 * inv_sqrt2, s1 * inv_sqrt2);
    const std::complex<double> h(h_re[p], h_im[p]);
    const std::complex<double> nn(n_re[p], n_im[p]);
    const std::complex<double> rec = h * xc + nn;
    const double h2 = std::norm(h);
    const std::complex<double> eq = std::conj(h) * rec / (h2 + var);
    y[2 * p] = static_cast<T>(eq.real() * std::sqrt(2.0));
    if (2 * p + 1 < n) y[2 * p + 1] = static_cast<T>(eq.imag() * std::sqrt(2.0));
    gain[p] = static_cast<T>(h2 / (h2 + var));
  }
  attach(out, {symbols}, [xn = symbols.raw(), on = out.raw(), gain = std::move(gain), n]() {
    xn->ensure_grad();
    for (int64_t i = 0; i < n; ++i) xn->grad[i] += on->grad[i] * gain[i / 2];
  });
  return out;
}

template <typename T>
Tensor<T> rayleigh_mmse(const Tensor<T>& symbols, double snr_db, uint64_t seed,
                        ChannelDiag* diag = nullptr) {
  const double var = noise_variance(snr_db);
  if (var == 0.0) return symbols;
  const int64_t pairs = (symbols.numel() + 1) / 2;
  std::vector<double> h_re(pairs), h_im(pairs), n_re(pairs), n_im(pairs);
  const uint64_t hseed = substream(seed, 0x68);
  const uint64_t nseed = substream(seed, 0x6e);
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  const double nsig = std::sqrt(var) * inv_sqrt2;
  for (int64_t p = 0; p < pairs; ++p) {
    h_re[p] = keyed_normal(hseed, 2 * p) * inv_sqrt2;
    h_im[p] = keyed_normal(hseed, 2 * p + 1) * inv_sqrt2;
    n_re[p] = keyed_normal(nseed, 2 * p) * nsig;
    n_im[p] = keyed_normal(nseed, 2 * p + 1) * nsig;
  }
  return rayleigh_mmse_explicit(symbols, h_re, h_im, n_re, n_im, var, diag);
}

// --- MIMO with SVD precoding ---
//
// One H per call (n_r x n_t, entries CN(0,1)), H = U S V^H; transmit V*x per
// n_t-length complex block, receive U^H(y), divide by singular values. Streams
// with singular value <= 1e-6 are zeroed and counted.

constexpr double kMimoSingularEps = 1e-6;

template <typename T>
Tensor<T> mimo_svd_explicit(const Tensor<T>& symbols, const Eigen::MatrixXcd& H,
                            const std::vector<double>& n_re, const std::vector<double>& n_im,
                            double var, ChannelDiag* diag = nullptr) {
  const int64_t nt = H.cols();
  if (H.rows() != nt) throw std::invalid_argument("mimo_svd: H must be square (n_t = n_r)");
  const int64_t n = symbols.numel();
  const int64_t cplx = (n + 1) / 2;
  const int64_t blocks = (cplx + nt - 1) / nt;
  if (static_cast<int64_t>(n_re.size()) < blocks * nt)
    throw std::invalid_argument("mimo_svd: need " + std::to_string(blocks * nt) +
                                " noise samples, got " + std::to_string(n_re.size()));
  if (diag && (n % 2 || cplx % nt)) diag->padded = true;

  Eigen::JacobiSVD<Eigen::MatrixXcd> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::MatrixXcd U = svd.matrixU();
  const Eigen::MatrixXcd V = svd.matrixV();
  const Eigen::VectorXd sv = svd.singularValues();
  std::vector<bool> keep(static_cast<size_t>(nt));
  int dropped = 0;
  for (int64_t k = 0; k < nt; ++k) {
    keep[k] = sv(k) > kMimoSingularEps;
    if (!keep[k]) ++dropped;
  }
  if (diag) diag->dropped_streams += dropped;

  Tensor<T> out(symbols.shape());
  std::vector<T> gate(static_cast<size_t>(blocks * nt));
  const T* x = symbols.data();
  T* y = out.data();
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  Eigen::VectorXcd xb(nt), nb(nt);
  for (int64_t bl = 0; bl < blocks; ++bl) {
    for (int64_t k = 0; k < nt; ++k) {
      const int64_t ci = bl * nt + k;
      const double s0 = (2 * ci < n) ? x[2 * ci] : 0.0;
      const double s1 = (2 * ci + 1 < n) ? x[2 * ci + 1] : 0.0;
      xb(k) = std::complex<double>(s0 * inv_sqrt2, s1 * inv_sqrt2);
      nb(k) = std::complex<double>(n_re[ci], n_im[ci]);
    }
    const Eigen::VectorXcd rec = U.adjoint() * (H * (V * xb) + nb);
    for (int64_t k = 0; k < nt; ++k) {
      const int64_t ci = bl * nt + k;
      std::complex<double> eq(0.0, 0.0);
      if (keep[k]) eq = rec(k) / sv(k);
      gate[ci] = keep[k] ? T(1) : T(0);
      if (2 * ci < n) y[2 * ci] = static_cast<T>(eq.real() * std::sqrt(2.0));
      if (2 * ci + 1 < n) y[2 * ci + 1] = static_cast<T>(eq.imag() * std::sqrt(2.0));
    }
  }
  (void)var;
  attach(out, {symbols}, [xn = symbols.raw(), on = out.raw(), gate = std::move(gate), n]() {
    xn->ensure_grad();
    for (int64_t i = 0; i < n; ++i) xn->grad[i] += on->grad[i] * gate[i / 2];
  });
  return out;
}

template <typename T>
Tensor<T> mimo_svd(const Tensor<T>& symbols, double snr_db, uint64_t seed, int n_t, int n_r,
                   ChannelDiag* diag = nullptr) {
  if (n_t != n_r || (n_t != 2 && n_t != 4))
    throw std::invalid_argument("mimo_svd: n_t = n_r in {2,4}, got " + std::to_string(n_t) + "x" +
                                std::to_string(n_r));
  const double var = noise_variance(snr_db);
  if (var == 0.0) return symbols;
  const uint64_t hseed = substream(seed, 0x48);
  const uint64_t nseed = substream(seed, 0x4e);
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  Eigen::MatrixXcd H(n_r, n_t);
  for (int r = 0; r < n_r; ++r)
    for (int c = 0; c < n_t; ++c)
      H(r, c) = std::complex<double>(keyed_normal(hseed, 2 * (r * n_t + c)) * inv_sqrt2,
                                     keyed_normal(hseed, 2 * (r * n_t + c) + 1) * inv_sqrt2);
  const int64_t cplx = (symbols.numel() + 1) / 2;
  const int64_t blocks = (cplx + n_t - 1) / n_t;
  const double nsig = std::sqrt(var) * inv_sqrt2;
  std::vector<double> n_re(blocks * n_t), n_im(blocks * n_t);
  for (int64_t i = 0; i < blocks * n_t; ++i) {
    n_re[i] = keyed_normal(nseed, 2 * i) * nsig;
    n_im[i] = keyed_normal(nseed, 2 * i + 1) * nsig;
  }
  return mimo_svd_explicit(symbols, H, n_re, n_im, var, diag);
}

// Dispatch on the configured kind; +inf SNR bypasses the channel entirely so
// noiseless evaluation matches a channel-free forward pass bit-exactly.
template <typename T>
Tensor<T> channel_apply(const Tensor<T>& symbols, const ChannelConfig& cfg,
                        ChannelDiag* diag = nullptr) {
  if (std::isinf(cfg.snr_db) && cfg.snr_db > 0) return symbols;
  switch (cfg.kind) {
    case ChannelKind::awgn: return awgn(symbols, cfg.snr_db, cfg.seed);
    case ChannelKind::rayleigh_mmse: return rayleigh_mmse(symbols, cfg.snr_db, cfg.seed, diag);
    default: return mimo_svd(symbols, cfg.snr_db, cfg.seed, cfg.n_t, cfg.n_r, diag);
  }
}

}  // namespace hfsc
