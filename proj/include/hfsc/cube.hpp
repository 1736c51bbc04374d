#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace hfsc {

// Band-sequential spectral image cube, values in [0,1].
// data[(b*height + y)*width + x]
struct HsiCube {
  int64_t width = 0, height = 0, bands = 0;
  std::vector<float> data;

  HsiCube() = default;
  HsiCube(int64_t w, int64_t h, int64_t b, float fill = 0.f)
      : width(w), height(h), bands(b), data(static_cast<size_t>(w * h * b), fill) {}

  int64_t numel() const { return width * height * bands; }
  float& at(int64_t b, int64_t y, int64_t x) { return data[(b * height + y) * width + x]; }
  float at(int64_t b, int64_t y, int64_t x) const { return data[(b * height + y) * width + x]; }
};

// Channel-major (3,H,W), values in [0,1].
struct RgbImage {
  int64_t width = 0, height = 0;
  std::vector<float> data;

  RgbImage() = default;
  RgbImage(int64_t w, int64_t h, float fill = 0.f)
      : width(w), height(h), data(static_cast<size_t>(3 * w * h), fill) {}

  float& at(int64_t c, int64_t y, int64_t x) { return data[(c * height + y) * width + x]; }
  float at(int64_t c, int64_t y, int64_t x) const { return data[(c * height + y) * width + x]; }
};

struct SceneTriple {
  HsiCube lr_hsi;
  RgbImage hr_rgb;
  HsiCube hr_hsi;
  int scale = 1;
};

// 3xL row-stochastic matrix mapping bands to RGB.
struct SpectralResponse {
  int64_t bands = 0;
  std::vector<float> weights;  // weights[c*bands + b]

  float at(int64_t c, int64_t b) const { return weights[c * bands + b]; }
};

// --- native cube format: <name>.json sidecar + <name>.bin of LE f32 ---
HsiCube load_cube(const std::string& path);
void save_cube(const std::string& path, const HsiCube& cube);

// Import a binary P5 PGM file, or a directory of per-band PGMs in
// lexicographic order, as a normalized cube.
HsiCube import_pgm(const std::string& path);

SpectralResponse default_response(int64_t bands);
SpectralResponse load_response(const std::string& path, int64_t bands);

// Per-band Gaussian blur (sigma = 0.5*scale, kernel 2*ceil(2*sigma)+1,
// edge clamped) followed by decimation.
HsiCube degrade_to_lr(const HsiCube& hr, int scale);
RgbImage project_to_rgb(const HsiCube& hr, const SpectralResponse& resp);

SceneTriple make_synthetic_scene(uint64_t seed, int64_t W, int64_t H, int64_t L, int scale,
                                 int blobs);

// Grid of aligned LR/RGB/HR crops; hr_patch and stride must be multiples of
// the scale so low-res crops land on pixel boundaries.
std::vector<SceneTriple> extract_patches(const SceneTriple& t, int64_t hr_patch, int64_t stride);

}  // namespace hfsc
