#pragma once

#include <cstdint>
#include <string>

#include "hfsc/cube.hpp"

namespace hfsc {

struct MetricRecord {
  double psnr_db = 0;  // +inf sentinel when mse == 0
  double ssim = 0;
  double mse = 0;
  int64_t symbols_transmitted = 0;
  int64_t mask_side_info_bytes = 0;
};

struct BandwidthReport {
  int64_t symbols = 0;
  int64_t mask_bytes = 0;
  int64_t ratio_num = 0, ratio_den = 0;  // exact symbols ratio vs the full variant
};

double mse(const HsiCube& y, const HsiCube& y_hat);
double psnr(const HsiCube& y, const HsiCube& y_hat);
double psnr_from_mse(double mse);

// Mean over bands of per-band SSIM: 11x11 Gaussian window (sigma 1.5),
// K1 = 0.01, K2 = 0.03, dynamic range 1, full windows only.
double ssim(const HsiCube& y, const HsiCube& y_hat);

BandwidthReport bandwidth_report(const std::string& variant, int64_t w1, int64_t h1, int64_t l,
                                 int quant_bits);

}  // namespace hfsc
