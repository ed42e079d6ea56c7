#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "bgvc/bottleneck.hpp"
#include "bgvc/conversion.hpp"
#include "bgvc/dsp.hpp"
#include "bgvc/losses.hpp"
#include "bgvc/separator.hpp"

namespace bgvc {

enum class Stage { vc_only, ss_only, joint };
/// Removals mirroring the ablation variants: drop the separation terms, drop
/// the conversion terms, or skip joint training.
enum class Ablation { none, ss_loss, vc_loss, no_joint };

std::string to_string(Stage s);
std::string to_string(Ablation a);
Stage parse_stage(const std::string& s);
Ablation parse_ablation(const std::string& s);

struct OptimConfig {
  double lr = 2e-4;
  double beta1 = 0.8;
  double beta2 = 0.99;
  double lr_decay = 0.9999; // multiplicative, per optimizer step
  bool operator==(const OptimConfig&) const = default;
};

struct TrainConfig {
  int64_t batch_size = 4;
  int64_t crop_samples = 8192;
  bool pad_short = true;
  int64_t steps_vc = 2000;
  int64_t steps_ss = 2000;
  int64_t steps_joint = 4000;
  OptimConfig optim;
  /// Stage-one generator input: separated speech from the frozen separator,
  /// or the clean source.
  bool vc_input_clean = false;
  /// Single-threaded numerics for bit-reproducible runs.
  bool determinism = true;
  int64_t freeze_check_every = 100;
  int64_t history = 100;
  Ablation ablation = Ablation::none;
  bool operator==(const TrainConfig&) const = default;
};

struct DataConfig {
  double snr_min = 0.0;
  double snr_max = 10.0;
  bool wrap_background = false;
  double silence_threshold = 1e-8; // mean-square power below this is silent
  bool operator==(const DataConfig&) const = default;
};

struct ModelConfig {
  dsp::FrameParams frames;
  dsp::MelParams mel;
  sep::SeparatorConfig separator;
  bn::ExtractorConfig extractor; // frames / mel mirror the fields above
  vc::VcConfig vc;

  /// Copies the shared frame / mel settings into the extractor config.
  void sync();
  /// Cross-module constraints: frame params valid, bottleneck dimension equals
  /// the encoder input, bottleneck period equals the generator upsampling.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// The full, validated configuration tree of a run.
struct RunConfig {
  uint64_t seed = 7;
  ModelConfig model;
  losses::PlcpaConfig plcpa;
  losses::MtlWeights weights;
  TrainConfig train;
  DataConfig data;

  void validate() const;
};

/// Parses and validates; unknown keys anywhere in the tree are rejected.
RunConfig parse_config(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);
nlohmann::json config_to_json(const RunConfig& cfg);

namespace dsp {
void to_json(nlohmann::json& j, const FrameParams& v);
void from_json(const nlohmann::json& j, FrameParams& v);
void to_json(nlohmann::json& j, const MelParams& v);
void from_json(const nlohmann::json& j, MelParams& v);
} // namespace dsp
namespace sep {
void to_json(nlohmann::json& j, const SeparatorConfig& v);
void from_json(const nlohmann::json& j, SeparatorConfig& v);
} // namespace sep
namespace bn {
void to_json(nlohmann::json& j, const ExtractorConfig& v);
void from_json(const nlohmann::json& j, ExtractorConfig& v);
} // namespace bn
namespace vc {
void to_json(nlohmann::json& j, const VcConfig& v);
void from_json(const nlohmann::json& j, VcConfig& v);
} // namespace vc
namespace losses {
void to_json(nlohmann::json& j, const PlcpaConfig& v);
void from_json(const nlohmann::json& j, PlcpaConfig& v);
void to_json(nlohmann::json& j, const MtlWeights& v);
void from_json(const nlohmann::json& j, MtlWeights& v);
} // namespace losses
void to_json(nlohmann::json& j, const OptimConfig& v);
void from_json(const nlohmann::json& j, OptimConfig& v);
void to_json(nlohmann::json& j, const TrainConfig& v);
void from_json(const nlohmann::json& j, TrainConfig& v);
void to_json(nlohmann::json& j, const DataConfig& v);
void from_json(const nlohmann::json& j, DataConfig& v);
void to_json(nlohmann::json& j, const ModelConfig& v);
void from_json(const nlohmann::json& j, ModelConfig& v);

} // namespace bgvc
