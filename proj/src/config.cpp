#include "bgvc/config.hpp"

#include <fstream>
#include <set>

#include "bgvc/error.hpp"

namespace bgvc {

namespace {

/// Reads optional keys from a JSON object and rejects any it did not consume.
class Fields {
public:
  Fields(const nlohmann::json& j, const char* section) : j_(j), section_(section) {
    if (!j.is_object())
      throw ConfigError(std::string("config: section '") + section + "' must be an object");
  }
  ~Fields() noexcept(false) {
    if (std::uncaught_exceptions() > 0)
      return;
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key))
        throw ConfigError("config: unknown key '" + key + "' in section '" +
                          section_ + "'");
  }
  template <typename T> void operator()(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key))
      return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config: bad value for '" + section_ + "." + key + "': " +
                        e.what());
    }
  }

private:
  const nlohmann::json& j_;
  std::string section_;
  std::set<std::string> seen_;
};

} // namespace

std::string to_string(Stage s) {
  switch (s) {
  case Stage::vc_only: return "vc";
  case Stage::ss_only: return "ss";
  case Stage::joint: return "joint";
  }
  return "?";
}

std::string to_string(Ablation a) {
  switch (a) {
  case Ablation::none: return "none";
  case Ablation::ss_loss: return "ss-loss";
  case Ablation::vc_loss: return "vc-loss";
  case Ablation::no_joint: return "no-joint";
  }
  return "?";
}

Stage parse_stage(const std::string& s) {
  if (s == "vc") return Stage::vc_only;
  if (s == "ss") return Stage::ss_only;
  if (s == "joint") return Stage::joint;
  throw ConfigError("unknown stage '" + s + "' (expected vc, ss or joint)");
}

Ablation parse_ablation(const std::string& s) {
  if (s == "none") return Ablation::none;
  if (s == "ss-loss") return Ablation::ss_loss;
  if (s == "vc-loss") return Ablation::vc_loss;
  if (s == "no-joint") return Ablation::no_joint;
  throw ConfigError("unknown ablation '" + s + "' (expected ss-loss, vc-loss or no-joint)");
}

namespace dsp {
void to_json(nlohmann::json& j, const FrameParams& v) {
  j = {{"fft_size", v.fft_size},
       {"hop", v.hop},
       {"window", v.window == WindowKind::hann ? "hann" : "rectangular"},
       {"center", v.center}};
}
void from_json(const nlohmann::json& j, FrameParams& v) {
  Fields f(j, "frames");
  std::string window = v.window == WindowKind::hann ? "hann" : "rectangular";
  f("fft_size", v.fft_size);
  f("hop", v.hop);
  f("window", window);
  f("center", v.center);
  if (window == "hann")
    v.window = WindowKind::hann;
  else if (window == "rectangular")
    v.window = WindowKind::rectangular;
  else
    throw ConfigError("config: unknown window '" + window + "'");
}
void to_json(nlohmann::json& j, const MelParams& v) {
  j = {{"n_mels", v.n_mels}, {"fmin", v.fmin}, {"fmax", v.fmax}, {"log_floor", v.log_floor}};
}
void from_json(const nlohmann::json& j, MelParams& v) {
  Fields f(j, "mel");
  f("n_mels", v.n_mels);
  f("fmin", v.fmin);
  f("fmax", v.fmax);
  f("log_floor", v.log_floor);
}
} // namespace dsp

namespace sep {
void to_json(nlohmann::json& j, const SeparatorConfig& v) {
  j = {{"channels", v.channels},         {"freq_kernel", v.freq_kernel},
       {"time_kernel", v.time_kernel},   {"rnn_proj", v.rnn_proj},
       {"rnn_hidden", v.rnn_hidden},     {"head_channels", v.head_channels},
       {"mask_bound", v.mask_bound},     {"input_compress", v.input_compress},
       {"seed", v.seed}};
}
void from_json(const nlohmann::json& j, SeparatorConfig& v) {
  Fields f(j, "separator");
  f("channels", v.channels);
  f("freq_kernel", v.freq_kernel);
  f("time_kernel", v.time_kernel);
  f("rnn_proj", v.rnn_proj);
  f("rnn_hidden", v.rnn_hidden);
  f("head_channels", v.head_channels);
  f("mask_bound", v.mask_bound);
  f("input_compress", v.input_compress);
  f("seed", v.seed);
}
} // namespace sep

namespace bn {
void to_json(nlohmann::json& j, const ExtractorConfig& v) {
  j = {{"conv_channels", v.conv_channels},
       {"subsample_blocks", v.subsample_blocks},
       {"dim", v.dim},
       {"seed", v.seed},
       {"frames", v.frames},
       {"mel", v.mel}};
}
void from_json(const nlohmann::json& j, ExtractorConfig& v) {
  Fields f(j, "extractor");
  f("conv_channels", v.conv_channels);
  f("subsample_blocks", v.subsample_blocks);
  f("dim", v.dim);
  f("seed", v.seed);
  f("frames", v.frames);
  f("mel", v.mel);
}
} // namespace bn

namespace vc {
void to_json(nlohmann::json& j, const VcConfig& v) {
  j = {{"bn_dim", v.bn_dim},
       {"enc_channels", v.enc_channels},
       {"enc_kernel", v.enc_kernel},
       {"enc_layers", v.enc_layers},
       {"enc_hidden", v.enc_hidden},
       {"speaker_dim", v.speaker_dim},
       {"gen_channels", v.gen_channels},
       {"upsample_strides", v.upsample_strides},
       {"resblock_kernel", v.resblock_kernel},
       {"resblock_dilations", v.resblock_dilations},
       {"disc_pools", v.disc_pools},
       {"disc_channels", v.disc_channels},
       {"seed", v.seed}};
}
void from_json(const nlohmann::json& j, VcConfig& v) {
  Fields f(j, "vc");
  f("bn_dim", v.bn_dim);
  f("enc_channels", v.enc_channels);
  f("enc_kernel", v.enc_kernel);
  f("enc_layers", v.enc_layers);
  f("enc_hidden", v.enc_hidden);
  f("speaker_dim", v.speaker_dim);
  f("gen_channels", v.gen_channels);
  f("upsample_strides", v.upsample_strides);
  f("resblock_kernel", v.resblock_kernel);
  f("resblock_dilations", v.resblock_dilations);
  f("disc_pools", v.disc_pools);
  f("disc_channels", v.disc_channels);
  f("seed", v.seed);
}
} // namespace vc

namespace losses {
void to_json(nlohmann::json& j, const PlcpaConfig& v) {
  j = {{"p", v.p}, {"alpha", v.alpha}, {"beta", v.beta}};
}
void from_json(const nlohmann::json& j, PlcpaConfig& v) {
  Fields f(j, "plcpa");
  f("p", v.p);
  f("alpha", v.alpha);
  f("beta", v.beta);
}
void to_json(nlohmann::json& j, const MtlWeights& v) {
  j = {{"uni", v.uni}, {"ss", v.ss}, {"vc", v.vc}};
}
void from_json(const nlohmann::json& j, MtlWeights& v) {
  Fields f(j, "weights");
  f("uni", v.uni);
  f("ss", v.ss);
  f("vc", v.vc);
}
} // namespace losses

void to_json(nlohmann::json& j, const OptimConfig& v) {
  j = {{"lr", v.lr}, {"beta1", v.beta1}, {"beta2", v.beta2}, {"lr_decay", v.lr_decay}};
}
void from_json(const nlohmann::json& j, OptimConfig& v) {
  Fields f(j, "optim");
  f("lr", v.lr);
  f("beta1", v.beta1);
  f("beta2", v.beta2);
  f("lr_decay", v.lr_decay);
}

void to_json(nlohmann::json& j, const TrainConfig& v) {
  j = {{"batch_size", v.batch_size},
       {"crop_samples", v.crop_samples},
       {"pad_short", v.pad_short},
       {"steps_vc", v.steps_vc},
       {"steps_ss", v.steps_ss},
       {"steps_joint", v.steps_joint},
       {"optim", v.optim},
       {"vc_stage_input", v.vc_input_clean ? "clean" : "separated"},
       {"determinism", v.determinism},
       {"freeze_check_every", v.freeze_check_every},
       {"history", v.history},
       {"ablation", to_string(v.ablation)}};
}
void from_json(const nlohmann::json& j, TrainConfig& v) {
  Fields f(j, "train");
  std::string input = v.vc_input_clean ? "clean" : "separated";
  std::string ablation = to_string(v.ablation);
  f("batch_size", v.batch_size);
  f("crop_samples", v.crop_samples);
  f("pad_short", v.pad_short);
  f("steps_vc", v.steps_vc);
  f("steps_ss", v.steps_ss);
  f("steps_joint", v.steps_joint);
  f("optim", v.optim);
  f("vc_stage_input", input);
  f("determinism", v.determinism);
  f("freeze_check_every", v.freeze_check_every);
  f("history", v.history);
  f("ablation", ablation);
  if (input != "clean" && input != "separated")
    throw ConfigError("config: train.vc_stage_input must be 'clean' or 'separated'");
  v.vc_input_clean = input == "clean";
  v.ablation = parse_ablation(ablation);
}

void to_json(nlohmann::json& j, const DataConfig& v) {
  j = {{"snr_min", v.snr_min},
       {"snr_max", v.snr_max},
       {"wrap_background", v.wrap_background},
       {"silence_threshold", v.silence_threshold}};
}
void from_json(const nlohmann::json& j, DataConfig& v) {
  Fields f(j, "data");
  f("snr_min", v.snr_min);
  f("snr_max", v.snr_max);
  f("wrap_background", v.wrap_background);
  f("silence_threshold", v.silence_threshold);
}

void to_json(nlohmann::json& j, const ModelConfig& v) {
  nlohmann::json ex = v.extractor;
  ex.erase("frames");
  ex.erase("mel");
  j = {{"frames", v.frames},
       {"mel", v.mel},
       {"separator", v.separator},
       {"extractor", ex},
       {"vc", v.vc}};
}
void from_json(const nlohmann::json& j, ModelConfig& v) {
  Fields f(j, "model");
  f("frames", v.frames);
  f("mel", v.mel);
  f("separator", v.separator);
  f("extractor", v.extractor);
  f("vc", v.vc);
  v.sync();
}

void ModelConfig::sync() {
  extractor.frames = frames;
  extractor.mel = mel;
}

void ModelConfig::validate() const {
  frames.validate();
  dsp::mel_filterbank(mel, frames); // Nyquist / range checks
  if (!(extractor.frames == frames) || !(extractor.mel == mel))
    throw ConfigError("config: extractor frame/mel params differ from the model's");
  if (extractor.dim != vc.bn_dim)
    throw ConfigError("config: extractor.dim (" + std::to_string(extractor.dim) +
                      ") must equal vc.bn_dim (" + std::to_string(vc.bn_dim) + ")");
  const int64_t period = extractor.subsample_factor() * frames.hop;
  if (period != vc.upsample_factor())
    throw ConfigError("config: bottleneck period " + std::to_string(period) +
                      " samples (subsample factor x hop) must equal the generator "
                      "upsampling factor " + std::to_string(vc.upsample_factor()));
}

void RunConfig::validate() const {
  model.validate();
  plcpa.validate();
  if (weights.uni < 0 || weights.ss < 0 || weights.vc < 0)
    throw ConfigError("config: loss weights must be non-negative");
  if (train.batch_size < 1 || train.crop_samples < model.frames.fft_size)
    throw ConfigError("config: batch_size >= 1 and crop_samples >= fft_size required");
  if (train.steps_vc < 0 || train.steps_ss < 0 || train.steps_joint < 0)
    throw ConfigError("config: step budgets must be non-negative");
  if (!(train.optim.lr > 0.0) || !(train.optim.lr_decay > 0.0) ||
      train.optim.lr_decay > 1.0)
    throw ConfigError("config: lr must be positive and lr_decay in (0, 1]");
  if (train.freeze_check_every < 1 || train.history < 1)
    throw ConfigError("config: freeze_check_every and history must be >= 1");
  if (!(data.snr_min <= data.snr_max))
    throw ConfigError("config: snr_min must not exceed snr_max");
}

RunConfig parse_config(const nlohmann::json& j) {
  RunConfig cfg;
  {
    Fields f(j, "root");
    f("seed", cfg.seed);
    f("model", cfg.model);
    f("plcpa", cfg.plcpa);
    f("weights", cfg.weights);
    f("train", cfg.train);
    f("data", cfg.data);
  }
  cfg.model.sync();
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in)
    throw ConfigError("config: cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

nlohmann::json config_to_json(const RunConfig& cfg) {
  return {{"seed", cfg.seed},       {"model", cfg.model},
          {"plcpa", cfg.plcpa},     {"weights", cfg.weights},
          {"train", cfg.train},     {"data", cfg.data}};
}

} // namespace bgvc
