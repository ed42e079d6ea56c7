#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include <torch/nn/module.h>
#include <torch/nn/modules/conv.h>
#include <torch/nn/modules/linear.h>
#include <torch/nn/modules/rnn.h>

#include "bgvc/dsp.hpp"

namespace bgvc::sep {

struct SeparatorConfig {
  std::vector<int64_t> channels{16, 32, 64}; // complex channels per encoder block
  int64_t freq_kernel = 5;
  int64_t time_kernel = 3;
  int64_t rnn_proj = 128;   // complex projection in front of the recurrent layer
  int64_t rnn_hidden = 128; // complex recurrent width
  int64_t head_channels = 8;
  double mask_bound = 1.0;
  double input_compress = 0.3; // power-law exponent applied to the network input
  uint64_t seed = 17;

  bool operator==(const SeparatorConfig&) const = default;
};

/// Pair of real tensors carrying the real and imaginary parts of a complex
/// feature map.
using ComplexPair = std::pair<torch::Tensor, torch::Tensor>;

/// Complex 2-D convolution as two real convolutions combined by the complex
/// product rule: (Wr + iWi) * (xr + ixi).
class ComplexConv2dImpl : public torch::nn::Module {
public:
  ComplexConv2dImpl(const torch::nn::Conv2dOptions& opts);
  ComplexPair forward(const ComplexPair& x);
  torch::nn::Conv2d re{nullptr}, im{nullptr};
};
TORCH_MODULE(ComplexConv2d);

class ComplexConvTranspose2dImpl : public torch::nn::Module {
public:
  ComplexConvTranspose2dImpl(const torch::nn::ConvTranspose2dOptions& opts);
  ComplexPair forward(const ComplexPair& x);
  torch::nn::ConvTranspose2d re{nullptr}, im{nullptr};
};
TORCH_MODULE(ComplexConvTranspose2d);

class ComplexLinearImpl : public torch::nn::Module {
public:
  ComplexLinearImpl(int64_t in, int64_t out);
  ComplexPair forward(const ComplexPair& x);
  torch::nn::Linear re{nullptr}, im{nullptr};
};
TORCH_MODULE(ComplexLinear);

/// Complex recurrence: two real LSTMs combined by the complex product rule.
class ComplexLstmImpl : public torch::nn::Module {
public:
  ComplexLstmImpl(int64_t in, int64_t hidden);
  ComplexPair forward(const ComplexPair& x); // [B, T, in] each
  torch::nn::LSTM re{nullptr}, im{nullptr};
};
TORCH_MODULE(ComplexLstm);

struct SeparationOutput {
  dsp::ComplexRatioMask crm_speech;
  dsp::ComplexRatioMask crm_background;
  dsp::ComplexSpectrogram est_speech;
  dsp::ComplexSpectrogram est_background;
};

/// Raw network output for the batched training path.
struct MaskPair {
  torch::Tensor speech;     // complex [B, T, F]
  torch::Tensor background; // complex [B, T, F]
};

/// Complex convolutional encoder, complex recurrent bottleneck, mirrored
/// decoder with skip connections and two complex mask heads.
class SeparatorImpl : public torch::nn::Module {
public:
  SeparatorImpl(SeparatorConfig cfg, dsp::FrameParams frames);

  /// mix: complex [B, T, F] -> bounded masks of the same shape.
  MaskPair forward(const torch::Tensor& mix);

  const SeparatorConfig& config() const { return cfg_; }
  const dsp::FrameParams& frames() const { return frames_; }

private:
  torch::Tensor bound(const ComplexPair& raw) const;

  SeparatorConfig cfg_;
  dsp::FrameParams frames_;
  std::vector<int64_t> freq_sizes_; // bins at each encoder depth
  std::vector<ComplexConv2d> encoder_;
  std::vector<ComplexConvTranspose2d> decoder_;
  ComplexLinear proj_in_{nullptr}, proj_out_{nullptr};
  ComplexLstm rnn_{nullptr};
  ComplexConv2d speech_head_{nullptr}, background_head_{nullptr};
};
TORCH_MODULE(Separator);

/// Builds a separator with parameters drawn from `cfg.seed`.
Separator make_separator(const SeparatorConfig& cfg, const dsp::FrameParams& frames);

int64_t parameter_count(const torch::nn::Module& m);

struct SeparateOptions {
  /// Replace both estimated masks with 1+0j (ablation / oracle checks).
  bool identity_masks = false;
};

/// Inference on one spectrogram ([T, F] or [B, T, F]). Runs without autograd.
SeparationOutput separate_spec(const dsp::ComplexSpectrogram& mix, Separator& model,
                               const SeparateOptions& opts = {});

/// stft -> separate_spec -> istft per source; outputs have the input length.
std::pair<dsp::Waveform, dsp::Waveform> separate_wave(const dsp::Waveform& mix,
                                                       Separator& model,
                                                       const SeparateOptions& opts = {});

} // namespace bgvc::sep
