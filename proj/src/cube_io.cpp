#include "hfsc/cube.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <stdexcept>

#include "hfsc/rng.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace hfsc {

namespace {

std::string strip_ext(const std::string& path) {
  for (const char* ext : {".json", ".bin"}) {
    const size_t n = std::strlen(ext);
    if (path.size() > n && path.compare(path.size() - n, n, ext) == 0)
      return path.substr(0, path.size() - n);
  }
  return path;
}

void validate_dims(int64_t w, int64_t h, int64_t b, const std::string& where) {
  if (w < 1 || h < 1 || b < 1)
    throw std::runtime_error(where + ": bad dimensions " + std::to_string(w) + "x" +
                             std::to_string(h) + "x" + std::to_string(b));
}

}  // namespace

HsiCube load_cube(const std::string& path) {
  const std::string prefix = strip_ext(path);
  const std::string jpath = prefix + ".json";
  const std::string bpath = prefix + ".bin";

  std::ifstream jf(jpath);
  if (!jf) throw std::runtime_error("load_cube: cannot open " + jpath);
  json meta = json::parse(jf);
  const int64_t w = meta.at("width").get<int64_t>();
  const int64_t h = meta.at("height").get<int64_t>();
  const int64_t b = meta.at("bands").get<int64_t>();
  validate_dims(w, h, b, "load_cube " + jpath);
  if (meta.at("dtype").get<std::string>() != "f32")
    throw std::runtime_error("load_cube: unsupported dtype in " + jpath);
  if (meta.at("layout").get<std::string>() != "band-sequential")
    throw std::runtime_error("load_cube: unsupported layout in " + jpath);
  const bool normalized = meta.at("normalized").get<bool>();

  std::ifstream bf(bpath, std::ios::binary);
  if (!bf) throw std::runtime_error("load_cube: cannot open " + bpath);
  bf.seekg(0, std::ios::end);
  const int64_t bytes = bf.tellg();
  bf.seekg(0);
  const int64_t want = w * h * b * 4;
  if (bytes != want)
    throw std::runtime_error("load_cube: " + bpath + " holds " + std::to_string(bytes / 4) +
                             " floats, sidecar wants " + std::to_string(want / 4));

  HsiCube cube(w, h, b);
  bf.read(reinterpret_cast<char*>(cube.data.data()), want);
  if (!bf) throw std::runtime_error("load_cube: short read from " + bpath);

  float mx = 0.f;
  for (float v : cube.data) {
    if (!std::isfinite(v)) throw std::runtime_error("load_cube: non-finite value in " + bpath);
    mx = std::max(mx, std::abs(v));
  }
  if (!normalized) {
    if (mx > 0.f)
      for (float& v : cube.data) v /= mx;
  } else if (mx > 1.f + 1e-5f) {
    throw std::runtime_error("load_cube: " + bpath + " flagged normalized but max is " +
                             std::to_string(mx));
  }
  for (float& v : cube.data) v = std::clamp(v, 0.f, 1.f);
  return cube;
}

void save_cube(const std::string& path, const HsiCube& cube) {
  validate_dims(cube.width, cube.height, cube.bands, "save_cube");
  const std::string prefix = strip_ext(path);
  json meta;
  meta["width"] = cube.width;
  meta["height"] = cube.height;
  meta["bands"] = cube.bands;
  meta["dtype"] = "f32";
  meta["layout"] = "band-sequential";
  meta["normalized"] = true;
  std::ofstream jf(prefix + ".json");
  if (!jf) throw std::runtime_error("save_cube: cannot write " + prefix + ".json");
  jf << meta.dump(2) << "\n";

  std::ofstream bf(prefix + ".bin", std::ios::binary);
  if (!bf) throw std::runtime_error("save_cube: cannot write " + prefix + ".bin");
  bf.write(reinterpret_cast<const char*>(cube.data.data()),
           static_cast<std::streamsize>(cube.data.size() * 4));
  if (!bf) throw std::runtime_error("save_cube: short write to " + prefix + ".bin");
}

namespace {

// One P5 plane, normalized by maxval.
void read_pgm_plane(const std::string& path, int64_t& w, int64_t& h, std::vector<float>& out) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("import_pgm: cannot open " + path);

  auto next_token = [&f, &path]() {
    std::string tok;
    int c;
    while ((c = f.get()) != EOF) {
      if (c == '#') {  // comment to end of line
        while ((c = f.get()) != EOF && c != '\n') {
        }
        continue;
      }
      if (std::isspace(c)) continue;
      tok.push_back(static_cast<char>(c));
      while ((c = f.peek()) != EOF && !std::isspace(c)) tok.push_back(static_cast<char>(f.get()));
      return tok;
    }
    throw std::runtime_error("import_pgm: truncated header in " + path);
  };

  if (next_token() != "P5") throw std::runtime_error("import_pgm: " + path + " is not binary P5");
  const int64_t pw = std::stoll(next_token());
  const int64_t ph = std::stoll(next_token());
  const int64_t maxval = std::stoll(next_token());
  if (pw < 1 || ph < 1 || maxval < 1 || maxval > 65535)
    throw std::runtime_error("import_pgm: bad header in " + path);
  f.get();  // single whitespace after maxval

  const int bytes_per = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(static_cast<size_t>(pw * ph * bytes_per));
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!f) throw std::runtime_error("import_pgm: short pixel data in " + path);

  out.resize(static_cast<size_t>(pw * ph));
  for (int64_t i = 0; i < pw * ph; ++i) {
    const int v = bytes_per == 1 ? raw[i] : (raw[2 * i] << 8) | raw[2 * i + 1];  // big-endian
    out[i] = static_cast<float>(v) / static_cast<float>(maxval);
  }
  w = pw;
  h = ph;
}

}  // namespace

HsiCube import_pgm(const std::string& path) {
  std::vector<std::string> files;
  if (fs::is_directory(path)) {
    for (const auto& e : fs::directory_iterator(path))
      if (e.is_regular_file() && e.path().extension() == ".pgm") files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw std::runtime_error("import_pgm: no .pgm files in " + path);
  } else {
    files.push_back(path);
  }

  HsiCube cube;
  cube.bands = static_cast<int64_t>(files.size());
  for (size_t b = 0; b < files.size(); ++b) {
    int64_t w = 0, h = 0;
    std::vector<float> plane;
    read_pgm_plane(files[b], w, h, plane);
    if (b == 0) {
      cube.width = w;
      cube.height = h;
      cube.data.resize(static_cast<size_t>(cube.bands * w * h));
    } else if (w != cube.width || h != cube.height) {
      throw std::runtime_error("import_pgm: " + files[b] + " is " + std::to_string(w) + "x" +
                               std::to_string(h) + ", band 0 was " + std::to_string(cube.width) +
                               "x" + std::to_string(cube.height));
    }
    std::copy(plane.begin(), plane.end(), cube.data.begin() + b * w * h);
  }
  return cube;
}

SpectralResponse default_response(int64_t bands) {
  if (bands < 3)
    throw std::runtime_error("default_response: need at least 3 bands, got " +
                             std::to_string(bands));
  SpectralResponse r;
  r.bands = bands;
  r.weights.assign(static_cast<size_t>(3 * bands), 0.f);
  for (int64_t c = 0; c < 3; ++c) {
    const int64_t lo = c * bands / 3, hi = (c + 1) * bands / 3;
    for (int64_t b = lo; b < hi; ++b) r.weights[c * bands + b] = 1.f / static_cast<float>(hi - lo);
  }
  return r;
}

SpectralResponse load_response(const std::string& path, int64_t bands) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_response: cannot open " + path);
  SpectralResponse r;
  r.bands = bands;
  r.weights.reserve(static_cast<size_t>(3 * bands));
  std::string line;
  int rows = 0;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    int64_t cols = 0;
    double row_sum = 0;
    std::vector<float> row;
    while (std::getline(ss, cell, ',')) {
      const float v = std::stof(cell);
      if (v < 0.f) throw std::runtime_error("load_response: negative weight in " + path);
      row.push_back(v);
      row_sum += v;
      ++cols;
    }
    if (cols != bands)
      throw std::runtime_error("load_response: row " + std::to_string(rows) + " has " +
                               std::to_string(cols) + " columns, want " + std::to_string(bands));
    if (row_sum <= 0) throw std::runtime_error("load_response: zero row in " + path);
    for (float v : row) r.weights.push_back(static_cast<float>(v / row_sum));
    ++rows;
  }
  if (rows != 3)
    throw std::runtime_error("load_response: " + path + " has " + std::to_string(rows) +
                             " rows, want 3");
  return r;
}

HsiCube degrade_to_lr(const HsiCube& hr, int scale) {
  if (scale < 1) throw std::runtime_error("degrade_to_lr: scale must be >= 1");
  if (hr.width % scale || hr.height % scale)
    throw std::runtime_error("degrade_to_lr: " + std::to_string(hr.width) + "x" +
                             std::to_string(hr.height) + " not divisible by scale " +
                             std::to_string(scale));
  if (scale == 1) return hr;

  const double sigma = 0.5 * scale;
  const int64_t half = static_cast<int64_t>(std::ceil(2.0 * sigma));
  std::vector<double> kern(2 * half + 1);
  double ksum = 0;
  for (int64_t i = -half; i <= half; ++i)
    ksum += kern[i + half] = std::exp(-0.5 * (i * i) / (sigma * sigma));
  for (double& k : kern) k /= ksum;

  const int64_t W = hr.width, H = hr.height;
  auto clampi = [](int64_t i, int64_t n) { return std::min(std::max<int64_t>(i, 0), n - 1); };
  HsiCube lr(W / scale, H / scale, hr.bands);
  std::vector<double> rows(static_cast<size_t>(H * W));

  for (int64_t b = 0; b < hr.bands; ++b) {
    const float* src = hr.data.data() + b * H * W;
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        double acc = 0;
        for (int64_t i = -half; i <= half; ++i) acc += kern[i + half] * src[y * W + clampi(x + i, W)];
        rows[y * W + x] = acc;
      }
    for (int64_t oy = 0; oy < lr.height; ++oy)
      for (int64_t ox = 0; ox < lr.width; ++ox) {
        const int64_t y = oy * scale, x = ox * scale;  // decimation at offset 0
        double acc = 0;
        for (int64_t i = -half; i <= half; ++i) acc += kern[i + half] * rows[clampi(y + i, H) * W + x];
        lr.at(b, oy, ox) = static_cast<float>(std::clamp(acc, 0.0, 1.0));
      }
  }
  return lr;
}

RgbImage project_to_rgb(const HsiCube& hr, const SpectralResponse& resp) {
  if (resp.bands != hr.bands)
    throw std::runtime_error("project_to_rgb: response has " + std::to_string(resp.bands) +
                             " columns, cube has " + std::to_string(hr.bands) + " bands");
  RgbImage rgb(hr.width, hr.height);
  const int64_t HW = hr.width * hr.height;
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t b = 0; b < hr.bands; ++b) {
      const float w = resp.at(c, b);
      if (w == 0.f) continue;
      const float* src = hr.data.data() + b * HW;
      float* dst = rgb.data.data() + c * HW;
      for (int64_t i = 0; i < HW; ++i) dst[i] += w * src[i];
    }
  for (float& v : rgb.data) v = std::clamp(v, 0.f, 1.f);
  return rgb;
}

SceneTriple make_synthetic_scene(uint64_t seed, int64_t W, int64_t H, int64_t L, int scale,
                                 int blobs) {
  if (W % scale || H % scale)
    throw std::runtime_error("make_synthetic_scene: " + std::to_string(W) + "x" +
                             std::to_string(H) + " not divisible by scale " +
                             std::to_string(scale));
  Rng rng(seed);
  HsiCube hr(W, H, L);
  const int64_t HW = W * H;
  // Ambient base reflectance: real scenes are never exactly black anywhere.
  const float base = static_cast<float>(rng.uniform(0.06, 0.12));
  for (float& v : hr.data) v = base;
  std::vector<double> spatial(static_cast<size_t>(HW));
  for (int bl = 0; bl < blobs; ++bl) {
    const double amp = rng.uniform(0.3, 1.0);
    const double cx = rng.uniform(0.0, static_cast<double>(W));
    const double cy = rng.uniform(0.0, static_cast<double>(H));
    const double sg = rng.uniform(0.02, 0.125) * static_cast<double>(W);
    const double a0 = rng.uniform(0.45, 0.8);
    double harm[4];
    for (double& a : harm) a = rng.uniform(-0.18, 0.18);
    // Narrow absorption/emission lines: band-local structure a broadband
    // projection integrates away, so it only survives in the HSI source.
    double line_c[3], line_w[3], line_a[3];
    for (int li = 0; li < 3; ++li) {
      line_c[li] = rng.uniform(0.0, static_cast<double>(L));
      line_w[li] = rng.uniform(0.4, 1.2);
      line_a[li] = (rng.below(2) ? 1.0 : -1.0) * rng.uniform(0.2, 0.5);
    }
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        const double dx = x - cx, dy = y - cy;
        spatial[y * W + x] = amp * std::exp(-0.5 * (dx * dx + dy * dy) / (sg * sg));
      }
    for (int64_t b = 0; b < L; ++b) {
      const double t = (b + 0.5) / static_cast<double>(L);
      double spec = a0;
      for (int k = 0; k < 4; ++k) spec += harm[k] * std::cos((k + 1) * M_PI * t);
      for (int li = 0; li < 3; ++li) {
        const double db = (b + 0.5 - line_c[li]) / line_w[li];
        spec += line_a[li] * std::exp(-0.5 * db * db);
      }
      float* dst = hr.data.data() + b * HW;
      for (int64_t i = 0; i < HW; ++i) dst[i] += static_cast<float>(spec * spatial[i]);
    }
  }
  for (float& v : hr.data) v = std::clamp(v, 0.f, 1.f);

  SceneTriple t;
  t.scale = scale;
  t.hr_hsi = std::move(hr);
  t.lr_hsi = degrade_to_lr(t.hr_hsi, scale);
  t.hr_rgb = project_to_rgb(t.hr_hsi, default_response(L));
  return t;
}

std::vector<SceneTriple> extract_patches(const SceneTriple& t, int64_t hr_patch, int64_t stride) {
  const int64_t W = t.hr_hsi.width, H = t.hr_hsi.height, L = t.hr_hsi.bands;
  const int scale = t.scale;
  if (hr_patch > W || hr_patch > H)
    throw std::runtime_error("extract_patches: patch " + std::to_string(hr_patch) +
                             " exceeds scene " + std::to_string(W) + "x" + std::to_string(H));
  if (hr_patch % scale || stride % scale || stride < 1)
    throw std::runtime_error("extract_patches: patch " + std::to_string(hr_patch) + " and stride " +
                             std::to_string(stride) + " must be positive multiples of scale " +
                             std::to_string(scale));

  std::vector<SceneTriple> out;
  const int64_t lp = hr_patch / scale;
  for (int64_t oy = 0; oy + hr_patch <= H; oy += stride)
    for (int64_t ox = 0; ox + hr_patch <= W; ox += stride) {
      SceneTriple p;
      p.scale = scale;
      p.hr_hsi = HsiCube(hr_patch, hr_patch, L);
      p.lr_hsi = HsiCube(lp, lp, L);
      p.hr_rgb = RgbImage(hr_patch, hr_patch);
      for (int64_t b = 0; b < L; ++b)
        for (int64_t y = 0; y < hr_patch; ++y)
          for (int64_t x = 0; x < hr_patch; ++x)
            p.hr_hsi.at(b, y, x) = t.hr_hsi.at(b, oy + y, ox + x);
      for (int64_t b = 0; b < L; ++b)
        for (int64_t y = 0; y < lp; ++y)
          for (int64_t x = 0; x < lp; ++x)
            p.lr_hsi.at(b, y, x) = t.lr_hsi.at(b, oy / scale + y, ox / scale + x);
      for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < hr_patch; ++y)
          for (int64_t x = 0; x < hr_patch; ++x)
            p.hr_rgb.at(c, y, x) = t.hr_rgb.at(c, oy + y, ox + x);
      out.push_back(std::move(p));
    }
  return out;
}

}  // namespace hfsc
