#include "bgvc/conversion.hpp"

#include <numeric>

#include <torch/torch.h>

#include "bgvc/error.hpp"

namespace bgvc::vc {

namespace {
constexpr double kSlope = 0.1;
}

int64_t VcConfig::upsample_factor() const {
  return std::accumulate(upsample_strides.begin(), upsample_strides.end(),
                         int64_t(1), std::multiplies<>());
}

SpeakerTable::SpeakerTable(std::vector<std::string> ids) : ids_(std::move(ids)) {
  for (size_t i = 0; i < ids_.size(); ++i) {
    if (ids_[i].empty())
      throw ConfigError("speakers: empty speaker id");
    for (size_t j = 0; j < i; ++j)
      if (ids_[i] == ids_[j])
        throw ConfigError("speakers: duplicate speaker id '" + ids_[i] + "'");
  }
}

int64_t SpeakerTable::index_of(const std::string& id) const {
  for (size_t i = 0; i < ids_.size(); ++i)
    if (ids_[i] == id)
      return int64_t(i);
  throw ConfigError("unknown speaker '" + id + "'");
}

bool SpeakerTable::contains(const std::string& id) const {
  return std::find(ids_.begin(), ids_.end(), id) != ids_.end();
}

ClstmEncoderImpl::ClstmEncoderImpl(const VcConfig& cfg) {
  if (cfg.enc_kernel % 2 == 0)
    throw ConfigError("vc: encoder kernel must be odd (stride-1, length preserving)");
  int64_t in = cfg.bn_dim;
  for (int64_t i = 0; i < cfg.enc_layers; ++i) {
    convs_.push_back(register_module(
        "conv" + std::to_string(i),
        torch::nn::Conv1d(torch::nn::Conv1dOptions(in, cfg.enc_channels, cfg.enc_kernel)
                              .padding(cfg.enc_kernel / 2))));
    in = cfg.enc_channels;
  }
  rnn_ = register_module(
      "rnn", torch::nn::LSTM(torch::nn::LSTMOptions(in, cfg.enc_hidden).batch_first(true)));
}

torch::Tensor ClstmEncoderImpl::forward(const torch::Tensor& bn) {
  auto x = bn.transpose(1, 2);
  for (auto& conv : convs_)
    x = torch::leaky_relu(conv(x), kSlope);
  return std::get<0>(rnn_->forward(x.transpose(1, 2).contiguous()));
}

ResBlockImpl::ResBlockImpl(int64_t channels, int64_t kernel,
                           const std::vector<int64_t>& dilations) {
  for (size_t i = 0; i < dilations.size(); ++i) {
    const int64_t d = dilations[i];
    dilated_.push_back(register_module(
        "dilated" + std::to_string(i),
        torch::nn::Conv1d(torch::nn::Conv1dOptions(channels, channels, kernel)
                              .dilation(d)
                              .padding(d * (kernel - 1) / 2))));
    pointwise_.push_back(register_module(
        "pointwise" + std::to_string(i),
        torch::nn::Conv1d(torch::nn::Conv1dOptions(channels, channels, kernel)
                              .padding((kernel - 1) / 2))));
  }
}

torch::Tensor ResBlockImpl::forward(torch::Tensor x) {
  for (size_t i = 0; i < dilated_.size(); ++i) {
    auto h = dilated_[i](torch::leaky_relu(x, kSlope));
    x = x + pointwise_[i](torch::leaky_relu(h, kSlope));
  }
  return x;
}

GeneratorImpl::GeneratorImpl(const VcConfig& cfg, int64_t num_speakers) {
  if (num_speakers < 1)
    throw ConfigError("vc: at least one speaker required");
  if (cfg.upsample_strides.empty())
    throw ConfigError("vc: at least one upsampling block required");
  if (cfg.resblock_kernel % 2 == 0)
    throw ConfigError("vc: resblock kernel must be odd");
  embedding_ = register_module("embedding",
                               torch::nn::Embedding(num_speakers, cfg.speaker_dim));
  condition_ = register_module("condition",
                               torch::nn::Linear(cfg.speaker_dim, cfg.enc_hidden));
  pre_ = register_module(
      "pre", torch::nn::Conv1d(
                 torch::nn::Conv1dOptions(cfg.enc_hidden, cfg.gen_channels, 7).padding(3)));
  int64_t ch = cfg.gen_channels;
  for (size_t i = 0; i < cfg.upsample_strides.size(); ++i) {
    const int64_t s = cfg.upsample_strides[i];
    if (s < 1 || (s > 1 && s % 2 != 0))
      throw ConfigError("vc: upsample strides must be 1 or even");
    const int64_t out = std::max<int64_t>(ch / 2, 1);
    const int64_t k = s == 1 ? 1 : 2 * s;
    const int64_t pad = s == 1 ? 0 : s / 2;
    ups_.push_back(register_module(
        "up" + std::to_string(i),
        torch::nn::ConvTranspose1d(
            torch::nn::ConvTranspose1dOptions(ch, out, k).stride(s).padding(pad))));
    blocks_.push_back(register_module(
        "res" + std::to_string(i),
        ResBlock(out, cfg.resblock_kernel, cfg.resblock_dilations)));
    ch = out;
  }
  post_ = register_module(
      "post", torch::nn::Conv1d(torch::nn::Conv1dOptions(ch, 1, 7).padding(3)));
}

torch::Tensor GeneratorImpl::forward(const torch::Tensor& hidden,
                                     const torch::Tensor& speakers) {
  auto cond = condition_(embedding_(speakers)); // [B, H]
  auto x = (hidden + cond.unsqueeze(1)).transpose(1, 2);
  x = pre_(x);
  for (size_t i = 0; i < ups_.size(); ++i) {
    x = ups_[i](torch::leaky_relu(x, kSlope));
    x = blocks_[i](x);
  }
  x = post_(torch::leaky_relu(x, kSlope));
  return torch::tanh(x).squeeze(1);
}

VcModelImpl::VcModelImpl(VcConfig cfg, SpeakerTable speakers)
    : cfg_(std::move(cfg)), speakers_(std::move(speakers)) {
  encoder = register_module("encoder", ClstmEncoder(cfg_));
  generator = register_module("generator", Generator(cfg_, speakers_.size()));
}

VcModel make_vc_model(const VcConfig& cfg, const SpeakerTable& speakers) {
  torch::manual_seed(cfg.seed);
  return VcModel(cfg, speakers);
}

ScaleDiscriminatorImpl::ScaleDiscriminatorImpl(const VcConfig& cfg, int64_t pool)
    : pool_(pool) {
  if (pool < 1)
    throw ConfigError("vc: discriminator pool factor must be >= 1");
  if (cfg.disc_channels.empty())
    throw ConfigError("vc: discriminator needs at least one layer");
  int64_t in = 1;
  const size_t n = cfg.disc_channels.size();
  for (size_t i = 0; i < n; ++i) {
    const int64_t out = cfg.disc_channels[i];
    torch::nn::Conv1dOptions o(in, out, 15);
    o.padding(7);
    if (i > 0 && i + 1 < n) {
      // strided grouped layers in the middle of the stack
      int64_t g = std::gcd(std::gcd(in, out), int64_t(4));
      o = torch::nn::Conv1dOptions(in, out, 41).stride(4).groups(g).padding(20);
    } else if (i + 1 == n && n > 1) {
      o = torch::nn::Conv1dOptions(in, out, 5).padding(2);
    }
    convs_.push_back(register_module("conv" + std::to_string(i), torch::nn::Conv1d(o)));
    in = out;
  }
  out_ = register_module(
      "out", torch::nn::Conv1d(torch::nn::Conv1dOptions(in, 1, 3).padding(1)));
}

std::pair<torch::Tensor, std::vector<torch::Tensor>>
ScaleDiscriminatorImpl::forward(const torch::Tensor& w) {
  auto x = w.unsqueeze(1);
  if (pool_ > 1)
    x = torch::avg_pool1d(x, {pool_}, {pool_}, {0}, /*ceil_mode=*/true);
  std::vector<torch::Tensor> feats;
  for (auto& conv : convs_) {
    x = torch::leaky_relu(conv(x), kSlope);
    feats.push_back(x);
  }
  auto score = out_(x);
  feats.push_back(score);
  return {score.flatten(1), feats};
}

DiscriminatorSetImpl::DiscriminatorSetImpl(const VcConfig& cfg) {
  if (cfg.disc_pools.empty())
    throw ConfigError("vc: at least one discriminator scale required");
  for (size_t i = 0; i < cfg.disc_pools.size(); ++i)
    discs_.push_back(register_module("d" + std::to_string(i),
                                     ScaleDiscriminator(cfg, cfg.disc_pools[i])));
}

DiscriminatorFeatures DiscriminatorSetImpl::forward(const torch::Tensor& w) {
  DiscriminatorFeatures out;
  for (auto& d : discs_) {
    auto [score, feats] = d->forward(w);
    out.scores.push_back(score);
    out.layers.push_back(std::move(feats));
  }
  return out;
}

DiscriminatorSet make_discriminators(const VcConfig& cfg) {
  torch::manual_seed(cfg.seed + 1);
  return DiscriminatorSet(cfg);
}

torch::Tensor encode(const bn::BottleneckFeatures& bn, VcModel& model) {
  if (bn.frames.dim() != 2 || bn.frames.size(1) != model->config().bn_dim)
    throw ShapeError("encode: bottleneck dimension " +
                     std::to_string(bn.frames.dim() == 2 ? bn.frames.size(1) : -1) +
                     " does not match encoder input " +
                     std::to_string(model->config().bn_dim));
  torch::NoGradGuard no_grad;
  return model->encoder->forward(bn.frames.to(torch::kFloat32).unsqueeze(0)).squeeze(0);
}

dsp::Waveform generate(const torch::Tensor& hidden, const std::string& speaker_id,
                       VcModel& model) {
  const int64_t idx = model->speakers().index_of(speaker_id);
  if (hidden.dim() != 2 || hidden.size(1) != model->config().enc_hidden)
    throw ShapeError("generate: expected [T, enc_hidden] hidden sequence");
  torch::NoGradGuard no_grad;
  auto spk = torch::full({1}, idx, torch::kInt64);
  auto w = model->generator->forward(hidden.unsqueeze(0).to(torch::kFloat32), spk);
  return {w.squeeze(0), dsp::kSampleRate};
}

DiscriminatorFeatures discriminate(const dsp::Waveform& w, DiscriminatorSet& discs) {
  dsp::validate(w);
  torch::NoGradGuard no_grad;
  return discs->forward(w.samples.to(torch::kFloat32).unsqueeze(0));
}

void check_compatible(const sep::Separator& separator, const bn::ExtractorHandle& ex,
                      const VcModel& vc) {
  const auto& ec = ex.config();
  if (!(ec.frames == separator->frames()))
    throw ConfigError("pipeline: extractor and separator frame params differ");
  if (ec.dim != vc->config().bn_dim)
    throw ConfigError("pipeline: extractor dimension " + std::to_string(ec.dim) +
                      " does not match VC encoder input " +
                      std::to_string(vc->config().bn_dim));
  const int64_t frame_samples = ec.subsample_factor() * ec.frames.hop;
  if (frame_samples != vc->config().upsample_factor())
    throw ConfigError("pipeline: bottleneck frame period (" +
                      std::to_string(frame_samples) +
                      " samples) differs from generator upsampling factor " +
                      std::to_string(vc->config().upsample_factor()));
}

torch::Tensor fit_length(const torch::Tensor& x, int64_t length) {
  const int64_t n = x.size(-1);
  if (n == length)
    return x;
  if (n > length)
    return x.narrow(-1, 0, length);
  return torch::constant_pad_nd(x, {0, length - n});
}

ConvertResult convert(const dsp::Waveform& mix, const std::string& target_speaker,
                      bool keep_background, Pipeline& models,
                      const ConvertOptions& opts) {
  dsp::require_pipeline_rate(mix);
  if (!opts.vc_override)
    models.vc->speakers().index_of(target_speaker);

  auto [speech, background] = sep::separate_wave(mix, models.separator, opts.separation);
  dsp::Waveform converted;
  if (opts.vc_override) {
    converted = opts.vc_override(speech);
  } else {
    auto feats = bn::extract(speech, models.extractor);
    auto hidden = encode(feats, models.vc);
    converted = generate(hidden, target_speaker, models.vc);
  }
  converted.samples = fit_length(converted.samples, mix.size());

  ConvertResult r;
  r.converted = converted;
  r.separated_speech = speech;
  r.separated_background = background;
  r.output = converted;
  if (keep_background) {
    auto bg = fit_length(background.samples.to(converted.samples.scalar_type()),
                         converted.size());
    r.output = {converted.samples + bg, dsp::kSampleRate};
  }
  return r;
}

} // namespace bgvc::vc
