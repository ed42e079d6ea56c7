#include "bgvc/wav_io.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <vector>

#include <torch/torch.h>

#include "bgvc/error.hpp"

namespace bgvc::audio {

namespace {

uint32_t le32(const unsigned char* p) {
  return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 |
         uint32_t(p[3]) << 24;
}
uint16_t le16(const unsigned char* p) { return uint16_t(p[0] | p[1] << 8); }

void put32(std::ostream& os, uint32_t v) {
  const char b[4] = {char(v & 0xff), char(v >> 8 & 0xff), char(v >> 16 & 0xff),
                     char(v >> 24 & 0xff)};
  os.write(b, 4);
}
void put16(std::ostream& os, uint16_t v) {
  const char b[2] = {char(v & 0xff), char(v >> 8 & 0xff)};
  os.write(b, 2);
}

} // namespace

dsp::Waveform read_wav(const std::filesystem::path& path, ReadOptions opts) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw DataError("wav: cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  const std::string name = path.string();
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw FormatError("wav: " + name + " is not a RIFF/WAVE file");

  bool have_fmt = false;
  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t rate = 0;
  const unsigned char* data = nullptr;
  size_t data_size = 0;
  size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    const uint32_t size = le32(chunk + 4);
    const size_t body = pos + 8;
    const size_t avail = bytes.size() - body;
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (size < 16 || avail < 16)
        throw FormatError("wav: truncated fmt chunk in " + name);
      format = le16(chunk + 8);
      channels = le16(chunk + 10);
      rate = le32(chunk + 12);
      bits = le16(chunk + 22);
      if (format == 0xFFFE && size >= 40 && avail >= 40)
        format = le16(chunk + 32); // extensible: first two bytes of the GUID
      have_fmt = true;
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = chunk + 8;
      data_size = std::min<size_t>(size, avail);
      break;
    }
    pos = body + size + (size & 1u);
  }
  if (!have_fmt || data == nullptr)
    throw FormatError("wav: missing fmt or data chunk in " + name);
  if (format != 1 || bits != 16)
    throw DataError("wav: " + name + " is not 16-bit PCM");
  if (channels != 1)
    throw DataError("wav: " + name + " has " + std::to_string(channels) +
                    " channels; only mono is supported");

  const int64_t n = int64_t(data_size / 2);
  auto samples = torch::empty({n}, torch::kFloat32);
  float* out = samples.data_ptr<float>();
  for (int64_t i = 0; i < n; ++i)
    out[i] = float(int16_t(le16(data + 2 * i))) / 32768.0f;

  dsp::Waveform w{samples, int(rate)};
  if (w.sample_rate_hz != dsp::kSampleRate) {
    if (!opts.resample)
      throw DataError("wav: " + name + " is " + std::to_string(rate) +
                      " Hz; expected 16000 (pass the resample option to convert)");
    w = resample(w, dsp::kSampleRate);
  }
  return w;
}

void write_wav(const std::filesystem::path& path, const dsp::Waveform& w) {
  dsp::validate(w);
  auto s = w.samples.detach().to(torch::kDouble).contiguous();
  const double* p = s.data_ptr<double>();
  const int64_t n = s.numel();
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os)
    throw DataError("wav: cannot write " + path.string());
  const uint32_t data_bytes = uint32_t(n * 2);
  os.write("RIFF", 4);
  put32(os, 36 + data_bytes);
  os.write("WAVEfmt ", 8);
  put32(os, 16);
  put16(os, 1);
  put16(os, 1);
  put32(os, uint32_t(w.sample_rate_hz));
  put32(os, uint32_t(w.sample_rate_hz) * 2);
  put16(os, 2);
  put16(os, 16);
  os.write("data", 4);
  put32(os, data_bytes);
  std::vector<char> buf(size_t(n) * 2);
  for (int64_t i = 0; i < n; ++i) {
    const double v = std::clamp(p[i], -1.0, 1.0) * 32768.0;
    const auto q = int16_t(std::clamp(std::lround(v), -32768L, 32767L));
    buf[2 * i] = char(uint16_t(q) & 0xff);
    buf[2 * i + 1] = char(uint16_t(q) >> 8);
  }
  os.write(buf.data(), std::streamsize(buf.size()));
  if (!os)
    throw DataError("wav: short write to " + path.string());
}

dsp::Waveform resample(const dsp::Waveform& w, int target_rate) {
  dsp::validate(w);
  if (target_rate <= 0)
    throw ConfigError("resample: target rate must be positive");
  if (w.sample_rate_hz == target_rate)
    return w;
  constexpr int kHalfWidth = 32; // taps on each side at the lower rate
  const double ratio = double(target_rate) / double(w.sample_rate_hz);
  const double cutoff = std::min(1.0, ratio); // relative to the input Nyquist
  auto in = w.samples.to(torch::kDouble).contiguous();
  const double* x = in.data_ptr<double>();
  const int64_t n_in = in.numel();
  const int64_t n_out = int64_t(std::floor(double(n_in) * ratio));
  auto out = torch::zeros({n_out}, torch::kDouble);
  double* y = out.data_ptr<double>();
  const double half = kHalfWidth / cutoff;
  for (int64_t j = 0; j < n_out; ++j) {
    const double t = double(j) / ratio;
    const int64_t lo = std::max<int64_t>(0, int64_t(std::ceil(t - half)));
    const int64_t hi = std::min<int64_t>(n_in - 1, int64_t(std::floor(t + half)));
    double acc = 0.0;
    for (int64_t k = lo; k <= hi; ++k) {
      const double d = double(k) - t;
      const double arg = std::numbers::pi * d * cutoff;
      const double sinc = d == 0.0 ? 1.0 : std::sin(arg) / arg;
      const double win = 0.5 + 0.5 * std::cos(std::numbers::pi * d / half);
      acc += x[k] * cutoff * sinc * win;
    }
    y[j] = acc;
  }
  return {out.to(w.samples.scalar_type()), target_rate};
}

} // namespace bgvc::audio
