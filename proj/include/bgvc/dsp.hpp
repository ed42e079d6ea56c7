#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <torch/types.h>

namespace bgvc::dsp {

inline constexpr int kSampleRate = 16000;

enum class WindowKind { hann, rectangular };

/// Short-time analysis configuration. Defaults are the pipeline's
/// 16 kHz speech setup: 1024-point frames, 256-sample hop, periodic Hann,
/// zero-padded centered frames.
struct FrameParams {
  int64_t fft_size = 1024;
  int64_t hop = 256;
  WindowKind window = WindowKind::hann;
  bool center = true;

  int64_t num_bins() const { return fft_size / 2 + 1; }
  torch::Tensor window_tensor(torch::Dtype dtype = torch::kFloat32) const;

  /// Throws ConfigError when hop > fft_size, sizes are non-positive, or the
  /// window does not satisfy the nonzero overlap-add condition at this hop.
  void validate() const;

  bool operator==(const FrameParams&) const = default;
};

struct MelParams {
  int64_t n_mels = 80;
  double fmin = 0.0;
  double fmax = 8000.0;
  double log_floor = 1e-5;

  bool operator==(const MelParams&) const = default;
};

/// Mono audio. `samples` is a 1-D floating tensor.
struct Waveform {
  torch::Tensor samples;
  int sample_rate_hz = kSampleRate;

  int64_t size() const { return samples.defined() ? samples.numel() : 0; }
};

/// Throws DataError on an undefined / non 1-D / non-finite sample tensor
/// or a non-positive rate.
void validate(const Waveform& w);
/// validate() plus the 16 kHz pipeline-rate requirement.
void require_pipeline_rate(const Waveform& w);

/// Complex bins indexed (..., t, f) with F = fft_size / 2 + 1.
struct ComplexSpectrogram {
  torch::Tensor bins;
  std::optional<FrameParams> frames;
  int64_t length = 0; // analysed signal length, needed to invert exactly

  int64_t num_frames() const { return bins.size(-2); }
  int64_t num_bins() const { return bins.size(-1); }
};

/// Linear-scale (non-negative) mel frames indexed (..., t, mel).
struct MelSpectrogram {
  torch::Tensor frames;
  MelParams params;
};

struct ComplexRatioMask {
  torch::Tensor mask;
};

/// Frame count produced by stft() for a signal of `length` samples.
int64_t frame_count(int64_t length, const FrameParams& frames);

ComplexSpectrogram stft(const Waveform& w, const FrameParams& frames);
Waveform istft(const ComplexSpectrogram& s);

/// Batched, differentiable forms. `samples` is [L] or [B, L]; bins come back
/// as [T, F] or [B, T, F].
torch::Tensor stft(const torch::Tensor& samples, const FrameParams& frames);
torch::Tensor istft(const torch::Tensor& bins, const FrameParams& frames,
                    int64_t length);

/// |s| computed as sqrt(|s|^2 + eps^2) - eps: exactly zero at zero with a
/// finite gradient there.
torch::Tensor safe_magnitude(const torch::Tensor& bins, double eps = 1e-8);

/// Per bin |s|^p e^{j arg s}, evaluated as s * (|s|^2 + eps)^((p-1)/2) so a
/// zero bin maps to exactly zero and the phase is untouched elsewhere.
ComplexSpectrogram power_law_compress(const ComplexSpectrogram& s, double p);
torch::Tensor power_law_compress(const torch::Tensor& bins, double p,
                                 double eps = 1e-8);
/// Magnitude of power_law_compress(bins): |s| * (|s|^2 + eps)^((p-1)/2), with
/// |s| from safe_magnitude so the gradient stays finite at zero.
torch::Tensor compressed_magnitude(const torch::Tensor& bins, double p,
                                   double eps = 1e-8);

/// Triangular HTK-scale filterbank, shape [F, n_mels]. Each filter peaks at 1.
torch::Tensor mel_filterbank(const MelParams& mel, const FrameParams& frames,
                             int sample_rate = kSampleRate,
                             torch::Dtype dtype = torch::kFloat32);
/// Centre frequency in Hz of each mel filter.
std::vector<double> mel_centers(const MelParams& mel);

MelSpectrogram mel_spectrogram(const Waveform& w, const MelParams& mel,
                               const FrameParams& frames);
/// Linear mel of [L] or [B, L] samples, [.., T, n_mels].
torch::Tensor mel(const torch::Tensor& samples, const MelParams& mel,
                  const FrameParams& frames);
/// log(max(mel, log_floor)), the representation the reconstruction losses use.
torch::Tensor log_mel(const torch::Tensor& samples, const MelParams& mel,
                      const FrameParams& frames);
torch::Tensor log_mel(const MelSpectrogram& m);

ComplexSpectrogram apply_crm(const ComplexSpectrogram& s,
                             const ComplexRatioMask& m);
torch::Tensor apply_crm(const torch::Tensor& bins, const torch::Tensor& mask);

} // namespace bgvc::dsp
