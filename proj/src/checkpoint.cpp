#include "hfsc/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace hfsc {
namespace {

constexpr char kMagic[4] = {'H', 'F', 'S', 'C'};
constexpr uint32_t kVersion = 1;

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error("checkpoint: " + msg); }

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;

  void need(size_t n) const {
    if (pos + n > buf.size()) fail("truncated file");
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(uint8_t(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(uint8_t(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  float f32() {
    uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string bytes(size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const NamedTensor& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  put_u64(out, ckpt.step);
  put_u64(out, ckpt.config_json.size());
  out += ckpt.config_json;
  put_u64(out, ckpt.tensors.size());
  for (const NamedTensor& t : ckpt.tensors) {
    put_u64(out, t.name.size());
    out += t.name;
    put_u32(out, uint32_t(t.dims.size()));
    int64_t numel = 1;
    for (int64_t d : t.dims) {
      if (d <= 0) fail("tensor " + t.name + " has non-positive dim");
      put_u64(out, uint64_t(d));
      numel *= d;
    }
    if (numel != int64_t(t.values.size()))
      fail("tensor " + t.name + " dims do not match value count");
    for (float v : t.values) put_f32(out, v);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail("cannot open " + path + " for writing");
  f.write(out.data(), std::streamsize(out.size()));
  if (!f) fail("write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail("cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r{buf};
  if (r.bytes(4) != std::string(kMagic, 4)) fail(path + " is not a checkpoint file");
  uint32_t version = r.u32();
  if (version != kVersion) fail("unsupported version " + std::to_string(version));
  Checkpoint ckpt;
  ckpt.step = r.u64();
  ckpt.config_json = r.bytes(r.u64());
  uint64_t count = r.u64();
  ckpt.tensors.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.bytes(r.u64());
    uint32_t ndim = r.u32();
    if (ndim > 8) fail("tensor " + t.name + " has implausible rank");
    uint64_t numel = 1;
    for (uint32_t d = 0; d < ndim; ++d) {
      uint64_t dim = r.u64();
      if (dim == 0) fail("tensor " + t.name + " has zero dim");
      t.dims.push_back(int64_t(dim));
      numel *= dim;
    }
    if (numel > (uint64_t(1) << 32)) fail("tensor " + t.name + " too large");
    t.values.resize(numel);
    for (uint64_t k = 0; k < numel; ++k) t.values[k] = r.f32();
    ckpt.tensors.push_back(std::move(t));
  }
  if (r.pos != buf.size()) fail("trailing bytes in " + path);
  return ckpt;
}

}  // namespace hfsc
