#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include <torch/nn/module.h>
#include <torch/nn/modules/conv.h>
#include <torch/nn/modules/rnn.h>

#include "bgvc/dsp.hpp"

namespace bgvc::blob {
struct Blob;
}

namespace bgvc::bn {

/// Frozen stand-in for a pretrained recogniser encoder: log-mel frontend,
/// stride-2 convolutional subsampling blocks, one recurrent layer.
struct ExtractorConfig {
  int64_t conv_channels = 128;
  int64_t subsample_blocks = 2; // each halves the frame rate
  int64_t dim = 256;
  uint64_t seed = 1234;
  dsp::FrameParams frames;
  dsp::MelParams mel;

  int64_t subsample_factor() const { return int64_t(1) << subsample_blocks; }
  bool operator==(const ExtractorConfig&) const = default;
};

/// Frame-rate features, [T', dim] for a single utterance.
struct BottleneckFeatures {
  torch::Tensor frames;
  int64_t subsample_factor = 1;

  int64_t num_frames() const { return frames.size(0); }
  int64_t dim() const { return frames.size(1); }
};

enum class Provenance { seeded_default, externally_loaded };

class ExtractorNetImpl : public torch::nn::Module {
public:
  explicit ExtractorNetImpl(const ExtractorConfig& cfg);
  /// log-mel [B, T, n_mels] -> features [B, ceil(T / factor), dim]
  torch::Tensor forward(const torch::Tensor& log_mel);

private:
  std::vector<torch::nn::Conv1d> convs_;
  torch::nn::LSTM rnn_{nullptr};
};
TORCH_MODULE(ExtractorNet);

/// Immutable handle on a frozen extractor. Copies share the same frozen
/// parameters; nothing reachable from the handle can modify them.
class ExtractorHandle {
public:
  /// Parameters drawn from cfg.seed and never trained.
  static ExtractorHandle seeded(const ExtractorConfig& cfg);
  /// Parameters read from the "<prefix>.*" tensors of a blob.
  static ExtractorHandle restore(const ExtractorConfig& cfg, const blob::Blob& b,
                                 const std::string& prefix, Provenance p);

  /// [B, L] samples -> [B, T', dim]. Differentiable with respect to the
  /// samples (so upstream modules can train through it); the extractor's
  /// own parameters never require gradients.
  torch::Tensor extract_batch(const torch::Tensor& samples) const;

  const ExtractorConfig& config() const { return cfg_; }
  Provenance provenance() const { return provenance_; }
  int64_t dim() const { return cfg_.dim; }
  /// Hash of the canonical config JSON; stable across save/load.
  std::string config_hash() const;
  /// Hash of every frozen parameter.
  uint64_t param_hash() const;
  const torch::nn::Module& module() const { return *net_; }

private:
  ExtractorHandle(ExtractorConfig cfg, ExtractorNet net, Provenance p);

  ExtractorConfig cfg_;
  ExtractorNet net_{nullptr};
  Provenance provenance_ = Provenance::seeded_default;
};

/// Expected feature frames for a waveform of `samples` samples.
int64_t expected_frames(int64_t samples, const ExtractorConfig& cfg);

BottleneckFeatures extract(const dsp::Waveform& speech, const ExtractorHandle& h);

/// Extractor interchange file: a blob of kind "extractor" whose header holds
/// the full config and whose tensors are the parameters.
void save_external(const std::filesystem::path& path, const ExtractorHandle& h);
/// Throws FormatError for a corrupt or wrong-version file and ConfigError
/// when `expected_dim` is given and differs from the stored dimension.
ExtractorHandle load_external(const std::filesystem::path& path,
                              std::optional<int64_t> expected_dim = std::nullopt);

/// Directory of per-utterance feature files ("<utterance_id>.bnf"), used to
/// bypass the encoder entirely.
class PrecomputedFeatures {
public:
  explicit PrecomputedFeatures(std::filesystem::path dir) : dir_(std::move(dir)) {}
  void store(const std::string& utterance_id, const BottleneckFeatures& f) const;
  BottleneckFeatures load(const std::string& utterance_id,
                          std::optional<int64_t> expected_dim = std::nullopt) const;
  bool contains(const std::string& utterance_id) const;

private:
  std::filesystem::path path_for(const std::string& id) const;
  std::filesystem::path dir_;
};

} // namespace bgvc::bn
