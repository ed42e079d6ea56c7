#include "bgvc/dsp.hpp"

#include <cmath>
#include <string>

#include <torch/torch.h>

#include "bgvc/error.hpp"

namespace bgvc::dsp {

namespace {

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

torch::Dtype real_dtype_of(const torch::Tensor& t) {
  switch (t.scalar_type()) {
  case torch::kComplexDouble:
  case torch::kDouble:
    return torch::kDouble;
  default:
    return torch::kFloat32;
  }
}

void check_complex(const torch::Tensor& t, const char* what) {
  if (!t.defined() || !t.is_complex())
    throw ShapeError(std::string(what) + ": expected a complex tensor");
}

} // namespace

torch::Tensor FrameParams::window_tensor(torch::Dtype dtype) const {
  auto opts = torch::TensorOptions().dtype(dtype);
  switch (window) {
  case WindowKind::rectangular:
    return torch::ones({fft_size}, opts);
  case WindowKind::hann:
  default:
    return torch::hann_window(fft_size, /*periodic=*/true, opts);
  }
}

void FrameParams::validate() const {
  if (fft_size <= 0 || hop <= 0)
    throw ConfigError("frame params: fft_size and hop must be positive");
  if (hop > fft_size)
    throw ConfigError("frame params: hop (" + std::to_string(hop) +
                      ") exceeds fft_size (" + std::to_string(fft_size) + ")");
  // Nonzero overlap-add: every sample position inside one hop period must be
  // covered by some window with non-negligible energy.
  auto w = window_tensor(torch::kDouble);
  auto w2 = (w * w).contiguous();
  const double* pw = w2.data_ptr<double>();
  double lo = INFINITY, hi = 0.0;
  for (int64_t r = 0; r < hop; ++r) {
    double acc = 0.0;
    for (int64_t k = r; k < fft_size; k += hop)
      acc += pw[k];
    lo = std::min(lo, acc);
    hi = std::max(hi, acc);
  }
  if (!(lo > 1e-10 * hi))
    throw ConfigError("frame params: window does not satisfy the overlap-add "
                      "condition at hop " + std::to_string(hop));
}

void validate(const Waveform& w) {
  if (w.sample_rate_hz <= 0)
    throw DataError("waveform: sample rate must be positive");
  if (!w.samples.defined() || w.samples.dim() != 1)
    throw DataError("waveform: samples must be a 1-D tensor");
  if (!w.samples.is_floating_point())
    throw DataError("waveform: samples must be floating point");
  if (w.samples.numel() > 0 && !torch::isfinite(w.samples).all().item<bool>())
    throw DataError("waveform: non-finite sample values");
}

void require_pipeline_rate(const Waveform& w) {
  validate(w);
  if (w.sample_rate_hz != kSampleRate)
    throw DataError("waveform: expected " + std::to_string(kSampleRate) +
                    " Hz audio, got " + std::to_string(w.sample_rate_hz));
}

int64_t frame_count(int64_t length, const FrameParams& frames) {
  if (frames.center)
    return 1 + length / frames.hop;
  if (length < frames.fft_size)
    return 0;
  return 1 + (length - frames.fft_size) / frames.hop;
}

torch::Tensor stft(const torch::Tensor& samples, const FrameParams& frames) {
  frames.validate();
  if (!samples.defined() || samples.numel() == 0)
    throw DataError("stft: empty waveform");
  if (samples.dim() < 1 || samples.dim() > 2)
    throw ShapeError("stft: expected [L] or [B, L] samples");
  if (samples.size(-1) < frames.fft_size)
    throw DataError("stft: waveform shorter than fft_size (" +
                    std::to_string(samples.size(-1)) + " < " +
                    std::to_string(frames.fft_size) + ")");
  auto window = frames.window_tensor(real_dtype_of(samples)).to(samples.device());
  auto spec = torch::stft(samples, frames.fft_size, frames.hop, frames.fft_size,
                          window, frames.center, "constant",
                          /*normalized=*/false, /*onesided=*/true,
                          /*return_complex=*/true);
  return spec.transpose(-1, -2);
}

torch::Tensor istft(const torch::Tensor& bins, const FrameParams& frames,
                    int64_t length) {
  frames.validate();
  check_complex(bins, "istft");
  if (bins.dim() < 2 || bins.size(-1) != frames.num_bins())
    throw ShapeError("istft: bin count " +
                     std::to_string(bins.dim() >= 1 ? bins.size(-1) : 0) +
                     " does not match fft_size " + std::to_string(frames.fft_size));
  if (length <= 0)
    throw DataError("istft: output length must be positive");
  auto window = frames.window_tensor(real_dtype_of(bins)).to(bins.device());
  try {
    return torch::istft(bins.transpose(-1, -2), frames.fft_size, frames.hop,
                        frames.fft_size, window, frames.center,
                        /*normalized=*/false, /*onesided=*/true, length,
                        /*return_complex=*/false);
  } catch (const c10::Error& e) {
    throw ConfigError(std::string("istft: ") + e.what_without_backtrace());
  }
}

ComplexSpectrogram stft(const Waveform& w, const FrameParams& frames) {
  validate(w);
  return {stft(w.samples, frames), frames, w.size()};
}

Waveform istft(const ComplexSpectrogram& s) {
  if (!s.frames)
    throw ConfigError("istft: spectrogram carries no frame params");
  int64_t length = s.length;
  if (length <= 0)
    length = s.frames->center ? (s.num_frames() - 1) * s.frames->hop
                              : (s.num_frames() - 1) * s.frames->hop + s.frames->fft_size;
  return {istft(s.bins, *s.frames, length), kSampleRate};
}

torch::Tensor safe_magnitude(const torch::Tensor& bins, double eps) {
  check_complex(bins, "magnitude");
  auto power = torch::real(bins).square() + torch::imag(bins).square();
  return torch::sqrt(power + eps * eps) - eps;
}

torch::Tensor compressed_magnitude(const torch::Tensor& bins, double p,
                                   double eps) {
  check_complex(bins, "power_law_compress");
  auto power = torch::real(bins).square() + torch::imag(bins).square();
  return safe_magnitude(bins) * torch::pow(power + eps, (p - 1.0) / 2.0);
}

torch::Tensor power_law_compress(const torch::Tensor& bins, double p,
                                 double eps) {
  check_complex(bins, "power_law_compress");
  if (!(p > 0.0) || p > 1.0)
    throw ConfigError("power_law_compress: p must lie in (0, 1]");
  auto power = torch::real(bins).square() + torch::imag(bins).square();
  auto gain = torch::pow(power + eps, (p - 1.0) / 2.0);
  return torch::complex(torch::real(bins) * gain, torch::imag(bins) * gain);
}

ComplexSpectrogram power_law_compress(const ComplexSpectrogram& s, double p) {
  return {power_law_compress(s.bins, p), s.frames, s.length};
}

std::vector<double> mel_centers(const MelParams& mel) {
  const double lo = hz_to_mel(mel.fmin), hi = hz_to_mel(mel.fmax);
  std::vector<double> centers(static_cast<size_t>(mel.n_mels));
  for (int64_t m = 0; m < mel.n_mels; ++m)
    centers[m] = mel_to_hz(lo + (hi - lo) * double(m + 1) / double(mel.n_mels + 1));
  return centers;
}

torch::Tensor mel_filterbank(const MelParams& mel, const FrameParams& frames,
                             int sample_rate, torch::Dtype dtype) {
  if (mel.n_mels <= 0)
    throw ConfigError("mel: n_mels must be positive");
  if (mel.fmin < 0.0 || mel.fmax <= mel.fmin)
    throw ConfigError("mel: require 0 <= fmin < fmax");
  if (mel.fmax > sample_rate / 2.0)
    throw ConfigError("mel: fmax " + std::to_string(mel.fmax) +
                      " Hz exceeds Nyquist " + std::to_string(sample_rate / 2.0));
  const int64_t n_bins = frames.num_bins();
  const double lo = hz_to_mel(mel.fmin), hi = hz_to_mel(mel.fmax);
  std::vector<double> edges(static_cast<size_t>(mel.n_mels + 2));
  for (size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_to_hz(lo + (hi - lo) * double(i) / double(mel.n_mels + 1));

  auto fb = torch::zeros({n_bins, mel.n_mels}, torch::kDouble);
  auto acc = fb.accessor<double, 2>();
  for (int64_t k = 0; k < n_bins; ++k) {
    const double f = double(k) * sample_rate / double(frames.fft_size);
    for (int64_t m = 0; m < mel.n_mels; ++m) {
      const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
      double v = 0.0;
      if (f > left && f <= center)
        v = (f - left) / (center - left);
      else if (f > center && f < right)
        v = (right - f) / (right - center);
      acc[k][m] = v;
    }
  }
  return fb.to(dtype);
}

torch::Tensor mel(const torch::Tensor& samples, const MelParams& mel_params,
                  const FrameParams& frames) {
  auto spec = stft(samples, frames);
  auto mag = safe_magnitude(spec);
  auto fb = mel_filterbank(mel_params, frames, kSampleRate, mag.scalar_type())
                .to(mag.device());
  return torch::matmul(mag, fb);
}

torch::Tensor log_mel(const torch::Tensor& samples, const MelParams& mel_params,
                      const FrameParams& frames) {
  return torch::log(torch::clamp_min(mel(samples, mel_params, frames),
                                     mel_params.log_floor));
}

torch::Tensor log_mel(const MelSpectrogram& m) {
  return torch::log(torch::clamp_min(m.frames, m.params.log_floor));
}

MelSpectrogram mel_spectrogram(const Waveform& w, const MelParams& mel_params,
                               const FrameParams& frames) {
  validate(w);
  // validate the filterbank against the waveform's own Nyquist first
  mel_filterbank(mel_params, frames, w.sample_rate_hz);
  return {mel(w.samples, mel_params, frames), mel_params};
}

torch::Tensor apply_crm(const torch::Tensor& bins, const torch::Tensor& mask) {
  check_complex(bins, "apply_crm");
  check_complex(mask, "apply_crm mask");
  if (bins.sizes() != mask.sizes())
    throw ShapeError("apply_crm: mask shape does not match spectrogram shape");
  return bins * mask;
}

ComplexSpectrogram apply_crm(const ComplexSpectrogram& s,
                             const ComplexRatioMask& m) {
  return {apply_crm(s.bins, m.mask), s.frames, s.length};
}

} // namespace bgvc::dsp
