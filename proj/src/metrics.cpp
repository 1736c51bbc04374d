#include "hfsc/metrics.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace hfsc {

namespace {

void check_same_shape(const HsiCube& a, const HsiCube& b, const char* who) {
  if (a.width != b.width || a.height != b.height || a.bands != b.bands)
    throw std::invalid_argument(std::string(who) + ": cubes " + std::to_string(a.width) + "x" +
                                std::to_string(a.height) + "x" + std::to_string(a.bands) +
                                " and " + std::to_string(b.width) + "x" +
                                std::to_string(b.height) + "x" + std::to_string(b.bands) +
                                " differ");
}

constexpr int kWin = 11;
constexpr double kC1 = 0.01 * 0.01;  // (K1*dynamic range)^2
constexpr double kC2 = 0.03 * 0.03;

std::vector<double> gauss11() {
  std::vector<double> g(kWin);
  const double sigma = 1.5;
  double sum = 0;
  for (int i = 0; i < kWin; ++i) {
    const double d = i - (kWin - 1) / 2.0;
    sum += g[i] = std::exp(-0.5 * d * d / (sigma * sigma));
  }
  for (double& v : g) v /= sum;
  return g;
}

// Separable full-window Gaussian filter: (H,W) -> (H-10, W-10).
std::vector<double> filt_valid(const std::vector<double>& img, int64_t H, int64_t W,
                               const std::vector<double>& g) {
  const int64_t Wv = W - kWin + 1, Hv = H - kWin + 1;
  std::vector<double> rows(static_cast<size_t>(H * Wv));
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < Wv; ++x) {
      double acc = 0;
      for (int i = 0; i < kWin; ++i) acc += g[i] * img[y * W + x + i];
      rows[y * Wv + x] = acc;
    }
  std::vector<double> out(static_cast<size_t>(Hv * Wv));
  for (int64_t y = 0; y < Hv; ++y)
    for (int64_t x = 0; x < Wv; ++x) {
      double acc = 0;
      for (int i = 0; i < kWin; ++i) acc += g[i] * rows[(y + i) * Wv + x];
      out[y * Wv + x] = acc;
    }
  return out;
}

}  // namespace

double mse(const HsiCube& y, const HsiCube& y_hat) {
  check_same_shape(y, y_hat, "mse");
  double acc = 0;
  for (int64_t i = 0; i < y.numel(); ++i) {
    const double d = static_cast<double>(y.data[i]) - static_cast<double>(y_hat.data[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(y.numel());
}

double psnr_from_mse(double m) {
  if (m <= 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / m);
}

double psnr(const HsiCube& y, const HsiCube& y_hat) { return psnr_from_mse(mse(y, y_hat)); }

double ssim(const HsiCube& y, const HsiCube& y_hat) {
  check_same_shape(y, y_hat, "ssim");
  const int64_t H = y.height, W = y.width;
  if (H < kWin || W < kWin)
    throw std::invalid_argument("ssim: image " + std::to_string(W) + "x" + std::to_string(H) +
                                " smaller than the 11x11 window");
  const auto g = gauss11();
  const int64_t HW = H * W;
  const int64_t Hv = H - kWin + 1, Wv = W - kWin + 1;

  double band_sum = 0;
  std::vector<double> a(HW), b(HW), aa(HW), bb(HW), ab(HW);
  for (int64_t band = 0; band < y.bands; ++band) {
    const float* pa = y.data.data() + band * HW;
    const float* pb = y_hat.data.data() + band * HW;
    for (int64_t i = 0; i < HW; ++i) {
      a[i] = pa[i];
      b[i] = pb[i];
      aa[i] = a[i] * a[i];
      bb[i] = b[i] * b[i];
      ab[i] = a[i] * b[i];
    }
    const auto mu_a = filt_valid(a, H, W, g);
    const auto mu_b = filt_valid(b, H, W, g);
    const auto m_aa = filt_valid(aa, H, W, g);
    const auto m_bb = filt_valid(bb, H, W, g);
    const auto m_ab = filt_valid(ab, H, W, g);
    double acc = 0;
    for (int64_t i = 0; i < Hv * Wv; ++i) {
      const double va = m_aa[i] - mu_a[i] * mu_a[i];
      const double vb = m_bb[i] - mu_b[i] * mu_b[i];
      const double cov = m_ab[i] - mu_a[i] * mu_b[i];
      acc += ((2 * mu_a[i] * mu_b[i] + kC1) * (2 * cov + kC2)) /
             ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + kC1) * (va + vb + kC2));
    }
    band_sum += acc / static_cast<double>(Hv * Wv);
  }
  return band_sum / static_cast<double>(y.bands);
}

BandwidthReport bandwidth_report(const std::string& variant, int64_t w1, int64_t h1, int64_t l,
                                 int quant_bits) {
  const int64_t base = w1 * h1 * l;
  BandwidthReport r;
  r.symbols = (variant == "full") ? 3 * base : base;
  r.mask_bytes = (variant == "proposed") ? 2 * base * quant_bits / 8 : 0;
  const int64_t g = std::gcd(r.symbols, 3 * base);
  r.ratio_num = r.symbols / g;
  r.ratio_den = 3 * base / g;
  return r;
}

}  // namespace hfsc
