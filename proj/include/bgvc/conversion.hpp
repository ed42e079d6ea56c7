#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <torch/nn/module.h>
#include <torch/nn/modules/conv.h>
#include <torch/nn/modules/embedding.h>
#include <torch/nn/modules/linear.h>
#include <torch/nn/modules/rnn.h>

#include "bgvc/bottleneck.hpp"
#include "bgvc/dsp.hpp"
#include "bgvc/separator.hpp"

namespace bgvc::vc {

struct VcConfig {
  int64_t bn_dim = 256;
  int64_t enc_channels = 128;
  int64_t enc_kernel = 5;
  int64_t enc_layers = 3;
  int64_t enc_hidden = 128;
  int64_t speaker_dim = 128;
  int64_t gen_channels = 128;
  std::vector<int64_t> upsample_strides{16, 8, 8};
  int64_t resblock_kernel = 3;
  std::vector<int64_t> resblock_dilations{1, 3};
  std::vector<int64_t> disc_pools{1, 4};          // one discriminator per scale
  std::vector<int64_t> disc_channels{16, 32, 64, 64};
  uint64_t seed = 23;

  /// Samples produced per hidden frame.
  int64_t upsample_factor() const;
  /// Feature layers per discriminator, including the score layer.
  int64_t disc_layers() const { return int64_t(disc_channels.size()) + 1; }
  bool operator==(const VcConfig&) const = default;
};

/// Registry of known speakers, mapped to rows of the generator's embedding
/// table. Lookup of an unknown id throws.
class SpeakerTable {
public:
  SpeakerTable() = default;
  explicit SpeakerTable(std::vector<std::string> ids);

  int64_t index_of(const std::string& id) const;
  bool contains(const std::string& id) const;
  const std::vector<std::string>& ids() const { return ids_; }
  int64_t size() const { return int64_t(ids_.size()); }
  bool operator==(const SpeakerTable&) const = default;

private:
  std::vector<std::string> ids_;
};

/// Three stride-1 convolution stacks with LeakyReLU, then an LSTM.
class ClstmEncoderImpl : public torch::nn::Module {
public:
  explicit ClstmEncoderImpl(const VcConfig& cfg);
  /// [B, T, bn_dim] -> [B, T, enc_hidden]
  torch::Tensor forward(const torch::Tensor& bn);

private:
  std::vector<torch::nn::Conv1d> convs_;
  torch::nn::LSTM rnn_{nullptr};
};
TORCH_MODULE(ClstmEncoder);

class ResBlockImpl : public torch::nn::Module {
public:
  ResBlockImpl(int64_t channels, int64_t kernel, const std::vector<int64_t>& dilations);
  torch::Tensor forward(torch::Tensor x);

private:
  std::vector<torch::nn::Conv1d> dilated_, pointwise_;
};
TORCH_MODULE(ResBlock);

/// Transposed-convolution upsampler with residual dilated stacks, conditioned
/// on a speaker embedding from the lookup table.
class GeneratorImpl : public torch::nn::Module {
public:
  GeneratorImpl(const VcConfig& cfg, int64_t num_speakers);
  /// hidden [B, T, enc_hidden], speakers [B] (int64) -> waveform [B, T * factor]
  torch::Tensor forward(const torch::Tensor& hidden, const torch::Tensor& speakers);

private:
  torch::nn::Embedding embedding_{nullptr};
  torch::nn::Linear condition_{nullptr};
  torch::nn::Conv1d pre_{nullptr}, post_{nullptr};
  std::vector<torch::nn::ConvTranspose1d> ups_;
  std::vector<ResBlock> blocks_;
};
TORCH_MODULE(Generator);

/// Encoder + generator + speaker registry: the trainable VC parameter store.
class VcModelImpl : public torch::nn::Module {
public:
  VcModelImpl(VcConfig cfg, SpeakerTable speakers);
  const VcConfig& config() const { return cfg_; }
  const SpeakerTable& speakers() const { return speakers_; }

  ClstmEncoder encoder{nullptr};
  Generator generator{nullptr};

private:
  VcConfig cfg_;
  SpeakerTable speakers_;
};
TORCH_MODULE(VcModel);

VcModel make_vc_model(const VcConfig& cfg, const SpeakerTable& speakers);

/// Per-discriminator, per-layer features plus the final score map.
struct DiscriminatorFeatures {
  std::vector<torch::Tensor> scores;              // one per discriminator
  std::vector<std::vector<torch::Tensor>> layers; // [disc][layer]
};

class ScaleDiscriminatorImpl : public torch::nn::Module {
public:
  ScaleDiscriminatorImpl(const VcConfig& cfg, int64_t pool);
  /// [B, L] -> (score, per-layer features; the score map is the last layer)
  std::pair<torch::Tensor, std::vector<torch::Tensor>> forward(const torch::Tensor& w);

private:
  int64_t pool_;
  std::vector<torch::nn::Conv1d> convs_;
  torch::nn::Conv1d out_{nullptr};
};
TORCH_MODULE(ScaleDiscriminator);

class DiscriminatorSetImpl : public torch::nn::Module {
public:
  explicit DiscriminatorSetImpl(const VcConfig& cfg);
  DiscriminatorFeatures forward(const torch::Tensor& w); // [B, L]

private:
  std::vector<ScaleDiscriminator> discs_;
};
TORCH_MODULE(DiscriminatorSet);

DiscriminatorSet make_discriminators(const VcConfig& cfg);

/// [T, bn_dim] -> [T, enc_hidden], inference mode.
torch::Tensor encode(const bn::BottleneckFeatures& bn, VcModel& model);
/// [T, enc_hidden] -> waveform of T * upsample_factor samples.
dsp::Waveform generate(const torch::Tensor& hidden, const std::string& speaker_id,
                       VcModel& model);
DiscriminatorFeatures discriminate(const dsp::Waveform& w, DiscriminatorSet& discs);

/// Everything inference needs.
struct Pipeline {
  sep::Separator separator{nullptr};
  bn::ExtractorHandle extractor;
  VcModel vc{nullptr};
};

/// Throws ConfigError unless extractor frame rate, bottleneck dimension and
/// generator upsampling agree.
void check_compatible(const sep::Separator& separator, const bn::ExtractorHandle& ex,
                      const VcModel& vc);

struct ConvertOptions {
  sep::SeparateOptions separation;
  /// Replaces extract -> encode -> generate (test stubs).
  std::function<dsp::Waveform(const dsp::Waveform& separated_speech)> vc_override;
};

struct ConvertResult {
  dsp::Waveform output;
  dsp::Waveform converted;  // speech in the target voice, input length
  dsp::Waveform separated_speech;
  dsp::Waveform separated_background;
};

/// separate -> extract -> encode -> generate; the generated speech is trimmed
/// or padded to the input length, and the separated background is added at
/// unit gain when `keep_background` is set.
ConvertResult convert(const dsp::Waveform& mix, const std::string& target_speaker,
                      bool keep_background, Pipeline& models,
                      const ConvertOptions& opts = {});

/// Trim or zero-pad the last dimension to `length`.
torch::Tensor fit_length(const torch::Tensor& x, int64_t length);

} // namespace bgvc::vc
