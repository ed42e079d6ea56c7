#include "bgvc/separator.hpp"

#include <torch/torch.h>

#include "bgvc/error.hpp"

namespace bgvc::sep {

namespace {

constexpr double kSlope = 0.1;

ComplexPair leaky(const ComplexPair& x) {
  return {torch::leaky_relu(x.first, kSlope), torch::leaky_relu(x.second, kSlope)};
}

ComplexPair cat_channels(const ComplexPair& a, const ComplexPair& b) {
  return {torch::cat({a.first, b.first}, 1), torch::cat({a.second, b.second}, 1)};
}

} // namespace

ComplexConv2dImpl::ComplexConv2dImpl(const torch::nn::Conv2dOptions& opts)
    : re(register_module("re", torch::nn::Conv2d(opts))),
      im(register_module("im", torch::nn::Conv2d(opts))) {}

ComplexPair ComplexConv2dImpl::forward(const ComplexPair& x) {
  return {re(x.first) - im(x.second), re(x.second) + im(x.first)};
}

ComplexConvTranspose2dImpl::ComplexConvTranspose2dImpl(
    const torch::nn::ConvTranspose2dOptions& opts)
    : re(register_module("re", torch::nn::ConvTranspose2d(opts))),
      im(register_module("im", torch::nn::ConvTranspose2d(opts))) {}

ComplexPair ComplexConvTranspose2dImpl::forward(const ComplexPair& x) {
  return {re(x.first) - im(x.second), re(x.second) + im(x.first)};
}

ComplexLinearImpl::ComplexLinearImpl(int64_t in, int64_t out)
    : re(register_module("re", torch::nn::Linear(in, out))),
      im(register_module("im", torch::nn::Linear(in, out))) {}

ComplexPair ComplexLinearImpl::forward(const ComplexPair& x) {
  return {re(x.first) - im(x.second), re(x.second) + im(x.first)};
}

ComplexLstmImpl::ComplexLstmImpl(int64_t in, int64_t hidden)
    : re(register_module("re", torch::nn::LSTM(
                                   torch::nn::LSTMOptions(in, hidden).batch_first(true)))),
      im(register_module("im", torch::nn::LSTM(
                                   torch::nn::LSTMOptions(in, hidden).batch_first(true)))) {}

ComplexPair ComplexLstmImpl::forward(const ComplexPair& x) {
  auto rr = std::get<0>(re->forward(x.first));
  auto ii = std::get<0>(im->forward(x.second));
  auto ri = std::get<0>(re->forward(x.second));
  auto ir = std::get<0>(im->forward(x.first));
  return {rr - ii, ri + ir};
}

SeparatorImpl::SeparatorImpl(SeparatorConfig cfg, dsp::FrameParams frames)
    : cfg_(std::move(cfg)), frames_(frames) {
  frames_.validate();
  if (cfg_.channels.empty())
    throw ConfigError("separator: at least one encoder block required");
  if (cfg_.freq_kernel < 1 || cfg_.freq_kernel % 2 == 0 || cfg_.time_kernel < 1 ||
      cfg_.time_kernel % 2 == 0)
    throw ConfigError("separator: kernel sizes must be odd and positive");
  if (!(cfg_.mask_bound > 0.0))
    throw ConfigError("separator: mask_bound must be positive");
  if (!(cfg_.input_compress > 0.0) || cfg_.input_compress > 1.0)
    throw ConfigError("separator: input_compress must lie in (0, 1]");

  const int64_t fk = cfg_.freq_kernel, tk = cfg_.time_kernel;
  const int64_t fp = fk / 2, tp = tk / 2;
  freq_sizes_.push_back(frames_.num_bins());
  int64_t in_ch = 1;
  for (size_t i = 0; i < cfg_.channels.size(); ++i) {
    const int64_t out_ch = cfg_.channels[i];
    encoder_.push_back(register_module(
        "enc" + std::to_string(i),
        ComplexConv2d(torch::nn::Conv2dOptions(in_ch, out_ch, {fk, tk})
                          .stride({2, 1})
                          .padding({fp, tp}))));
    freq_sizes_.push_back((freq_sizes_.back() + 2 * fp - fk) / 2 + 1);
    if (freq_sizes_.back() < 1)
      throw ConfigError("separator: too many encoder blocks for fft_size");
    in_ch = out_ch;
  }

  const int64_t n = int64_t(cfg_.channels.size());
  const int64_t flat = cfg_.channels.back() * freq_sizes_.back();
  proj_in_ = register_module("proj_in", ComplexLinear(flat, cfg_.rnn_proj));
  rnn_ = register_module("rnn", ComplexLstm(cfg_.rnn_proj, cfg_.rnn_hidden));
  proj_out_ = register_module("proj_out", ComplexLinear(cfg_.rnn_hidden, flat));

  decoder_.resize(size_t(n), nullptr);
  for (int64_t i = n - 1; i >= 0; --i) {
    const int64_t dec_in = 2 * cfg_.channels[size_t(i)];
    const int64_t dec_out = i > 0 ? cfg_.channels[size_t(i - 1)] : cfg_.head_channels;
    const int64_t target = freq_sizes_[size_t(i)];
    const int64_t natural = (freq_sizes_[size_t(i + 1)] - 1) * 2 - 2 * fp + fk;
    const int64_t extra = target - natural;
    if (extra < 0 || extra > 1)
      throw ConfigError("separator: decoder cannot restore frequency size");
    decoder_[size_t(i)] = register_module(
        "dec" + std::to_string(i),
        ComplexConvTranspose2d(torch::nn::ConvTranspose2dOptions(dec_in, dec_out, {fk, tk})
                                   .stride({2, 1})
                                   .padding({fp, tp})
                                   .output_padding({extra, 0})));
  }
  speech_head_ = register_module(
      "speech_head", ComplexConv2d(torch::nn::Conv2dOptions(cfg_.head_channels, 1, 1)));
  background_head_ = register_module(
      "background_head",
      ComplexConv2d(torch::nn::Conv2dOptions(cfg_.head_channels, 1, 1)));
}

torch::Tensor SeparatorImpl::bound(const ComplexPair& raw) const {
  // [B, 1, F, T] -> [B, T, F]; magnitude squashed by tanh, phase kept.
  auto r = raw.first.squeeze(1).transpose(1, 2);
  auto i = raw.second.squeeze(1).transpose(1, 2);
  auto mag = torch::sqrt(r.square() + i.square() + 1e-12);
  auto gain = cfg_.mask_bound * torch::tanh(mag) / mag;
  return torch::complex(r * gain, i * gain);
}

MaskPair SeparatorImpl::forward(const torch::Tensor& mix) {
  if (!mix.is_complex() || mix.dim() != 3 || mix.size(2) != frames_.num_bins())
    throw ShapeError("separator: expected complex [B, T, " +
                     std::to_string(frames_.num_bins()) + "] input");
  auto x = dsp::power_law_compress(mix, cfg_.input_compress);
  ComplexPair h{torch::real(x).transpose(1, 2).unsqueeze(1).contiguous(),
                torch::imag(x).transpose(1, 2).unsqueeze(1).contiguous()};

  std::vector<ComplexPair> skips;
  for (auto& block : encoder_) {
    h = leaky(block->forward(h));
    skips.push_back(h);
  }

  const int64_t B = h.first.size(0), C = h.first.size(1), Fq = h.first.size(2),
                T = h.first.size(3);
  auto flatten = [&](const torch::Tensor& t) {
    return t.permute({0, 3, 1, 2}).reshape({B, T, C * Fq});
  };
  auto unflatten = [&](const torch::Tensor& t) {
    return t.reshape({B, T, C, Fq}).permute({0, 2, 3, 1});
  };
  auto z = proj_in_->forward({flatten(h.first), flatten(h.second)});
  z = rnn_->forward(z);
  z = proj_out_->forward(z);
  ComplexPair dec{unflatten(z.first), unflatten(z.second)};

  for (int64_t i = int64_t(decoder_.size()) - 1; i >= 0; --i)
    dec = leaky(decoder_[size_t(i)]->forward(cat_channels(dec, skips[size_t(i)])));

  return {bound(speech_head_->forward(dec)), bound(background_head_->forward(dec))};
}

Separator make_separator(const SeparatorConfig& cfg, const dsp::FrameParams& frames) {
  torch::manual_seed(cfg.seed);
  return Separator(cfg, frames);
}

int64_t parameter_count(const torch::nn::Module& m) {
  int64_t n = 0;
  for (const auto& p : m.parameters())
    n += p.numel();
  return n;
}

SeparationOutput separate_spec(const dsp::ComplexSpectrogram& mix, Separator& model,
                               const SeparateOptions& opts) {
  if (!mix.frames || !(*mix.frames == model->frames()))
    throw ShapeError("separate_spec: spectrogram frame params differ from the "
                     "separator's configuration");
  if (mix.bins.dim() < 2 || mix.bins.dim() > 3)
    throw ShapeError("separate_spec: expected [T, F] or [B, T, F] bins");
  torch::NoGradGuard no_grad;
  const bool single = mix.bins.dim() == 2;
  auto bins = single ? mix.bins.unsqueeze(0) : mix.bins;
  auto in = bins.to(torch::kComplexFloat);

  MaskPair masks;
  if (opts.identity_masks) {
    auto one = torch::ones_like(in);
    masks = {one, one};
  } else {
    masks = model->forward(in);
  }
  masks.speech = masks.speech.to(bins.scalar_type());
  masks.background = masks.background.to(bins.scalar_type());
  if (single) {
    masks.speech = masks.speech.squeeze(0);
    masks.background = masks.background.squeeze(0);
  }
  SeparationOutput out;
  out.crm_speech = {masks.speech};
  out.crm_background = {masks.background};
  out.est_speech = dsp::apply_crm(mix, out.crm_speech);
  out.est_background = dsp::apply_crm(mix, out.crm_background);
  return out;
}

std::pair<dsp::Waveform, dsp::Waveform> separate_wave(const dsp::Waveform& mix,
                                                       Separator& model,
                                                       const SeparateOptions& opts) {
  dsp::require_pipeline_rate(mix);
  auto spec = dsp::stft(mix, model->frames());
  auto out = separate_spec(spec, model, opts);
  auto speech = dsp::istft(out.est_speech);
  auto background = dsp::istft(out.est_background);
  return {speech, background};
}

} // namespace bgvc::sep
