#include "bgvc/bottleneck.hpp"

#include <torch/torch.h>

#include "bgvc/blob.hpp"
#include "bgvc/config.hpp"
#include "bgvc/error.hpp"

namespace bgvc::bn {

ExtractorNetImpl::ExtractorNetImpl(const ExtractorConfig& cfg) {
  if (cfg.subsample_blocks < 0 || cfg.conv_channels < 1 || cfg.dim < 1)
    throw ConfigError("extractor: invalid layer sizes");
  int64_t in = cfg.mel.n_mels;
  for (int64_t i = 0; i < cfg.subsample_blocks; ++i) {
    convs_.push_back(register_module(
        "conv" + std::to_string(i),
        torch::nn::Conv1d(torch::nn::Conv1dOptions(in, cfg.conv_channels, 3)
                              .stride(2)
                              .padding(1))));
    in = cfg.conv_channels;
  }
  rnn_ = register_module(
      "rnn", torch::nn::LSTM(torch::nn::LSTMOptions(in, cfg.dim).batch_first(true)));
}

torch::Tensor ExtractorNetImpl::forward(const torch::Tensor& log_mel) {
  auto x = log_mel.transpose(1, 2);
  for (auto& conv : convs_)
    x = torch::leaky_relu(conv(x), 0.1);
  return std::get<0>(rnn_->forward(x.transpose(1, 2).contiguous()));
}

ExtractorHandle::ExtractorHandle(ExtractorConfig cfg, ExtractorNet net, Provenance p)
    : cfg_(std::move(cfg)), net_(std::move(net)), provenance_(p) {
  for (auto& param : net_->parameters())
    param.set_requires_grad(false);
  net_->eval();
}

ExtractorHandle ExtractorHandle::seeded(const ExtractorConfig& cfg) {
  cfg.frames.validate();
  torch::manual_seed(cfg.seed);
  return ExtractorHandle(cfg, ExtractorNet(cfg), Provenance::seeded_default);
}

ExtractorHandle ExtractorHandle::restore(const ExtractorConfig& cfg, const blob::Blob& b,
                                         const std::string& prefix, Provenance p) {
  cfg.frames.validate();
  ExtractorNet net(cfg);
  blob::load_module(b, prefix, *net);
  return ExtractorHandle(cfg, net, p);
}

torch::Tensor ExtractorHandle::extract_batch(const torch::Tensor& samples) const {
  if (samples.dim() != 2)
    throw ShapeError("extract: expected [B, L] samples");
  auto feats = dsp::log_mel(samples.to(torch::kFloat32), cfg_.mel, cfg_.frames);
  return net_.ptr()->forward(feats);
}

std::string ExtractorHandle::config_hash() const {
  const std::string canonical = nlohmann::json(cfg_).dump();
  auto t = torch::from_blob(const_cast<char*>(canonical.data()),
                            {int64_t(canonical.size())}, torch::kUInt8);
  return blob::hex(blob::hash_tensors({{"config", t}}));
}

uint64_t ExtractorHandle::param_hash() const { return blob::hash_module(*net_); }

int64_t expected_frames(int64_t samples, const ExtractorConfig& cfg) {
  int64_t t = dsp::frame_count(samples, cfg.frames);
  for (int64_t i = 0; i < cfg.subsample_blocks; ++i)
    t = (t + 1) / 2;
  return t;
}

BottleneckFeatures extract(const dsp::Waveform& speech, const ExtractorHandle& h) {
  dsp::require_pipeline_rate(speech);
  torch::NoGradGuard no_grad;
  auto f = h.extract_batch(speech.samples.unsqueeze(0)).squeeze(0);
  return {f, h.config().subsample_factor()};
}

void save_external(const std::filesystem::path& path, const ExtractorHandle& h) {
  blob::Blob b;
  b.kind = "extractor";
  b.header["config"] = h.config();
  b.header["config_hash"] = h.config_hash();
  blob::append_module(b, "net", h.module());
  blob::write(path, b);
}

ExtractorHandle load_external(const std::filesystem::path& path,
                              std::optional<int64_t> expected_dim) {
  auto b = blob::read(path, "extractor");
  ExtractorConfig cfg;
  try {
    cfg = b.header.at("config").get<ExtractorConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("extractor: bad config header: ") + e.what());
  }
  if (expected_dim && *expected_dim != cfg.dim)
    throw ConfigError("extractor: feature dimension " + std::to_string(cfg.dim) +
                      " does not match the conversion encoder input " +
                      std::to_string(*expected_dim));
  auto h = ExtractorHandle::restore(cfg, b, "net", Provenance::externally_loaded);
  if (b.header.contains("config_hash") &&
      b.header["config_hash"].get<std::string>() != h.config_hash())
    throw FormatError("extractor: config hash mismatch in " + path.string());
  return h;
}

std::filesystem::path PrecomputedFeatures::path_for(const std::string& id) const {
  if (id.empty() || id.find('/') != std::string::npos || id == "." || id == "..")
    throw DataError("features: invalid utterance id '" + id + "'");
  return dir_ / (id + ".bnf");
}

void PrecomputedFeatures::store(const std::string& utterance_id,
                                const BottleneckFeatures& f) const {
  blob::Blob b;
  b.kind = "bnf";
  b.header["utterance_id"] = utterance_id;
  b.header["subsample_factor"] = f.subsample_factor;
  b.tensors.emplace_back("frames", f.frames.detach().to(torch::kFloat32).contiguous());
  blob::write(path_for(utterance_id), b);
}

BottleneckFeatures PrecomputedFeatures::load(const std::string& utterance_id,
                                             std::optional<int64_t> expected_dim) const {
  auto b = blob::read(path_for(utterance_id), "bnf");
  const auto& frames = b.tensor("frames");
  if (frames.dim() != 2)
    throw FormatError("features: expected a [T, d] array for " + utterance_id);
  if (expected_dim && frames.size(1) != *expected_dim)
    throw ConfigError("features: dimension " + std::to_string(frames.size(1)) +
                      " does not match expected " + std::to_string(*expected_dim));
  return {frames, b.header.value("subsample_factor", int64_t(1))};
}

bool PrecomputedFeatures::contains(const std::string& utterance_id) const {
  return std::filesystem::exists(path_for(utterance_id));
}

} // namespace bgvc::bn
