#include "doctest_torch.hpp"

#include <algorithm>
#include <chrono>

#include <torch/torch.h>

#include "bgvc/dsp.hpp"
#include "bgvc/error.hpp"
#include "bgvc/separator.hpp"
#include "support.hpp"

using namespace bgvc;
using namespace bgvc::sep;
using bgvc::testing::seeded;

namespace {

SeparatorConfig small() {
  SeparatorConfig c;
  c.channels = {4, 8};
  c.rnn_proj = 16;
  c.rnn_hidden = 16;
  c.head_channels = 4;
  return c;
}

dsp::ComplexSpectrogram spec_of(const torch::Tensor& x) {
  return dsp::stft(dsp::Waveform{x, dsp::kSampleRate}, dsp::FrameParams{});
}

} // namespace

TEST_SUITE("separator") {

TEST_CASE("default size stays under four million parameters") {
  auto m = make_separator(SeparatorConfig{}, dsp::FrameParams{});
  CHECK(parameter_count(*m) <= 4'000'000);
  for (const auto& p : m->parameters())
    CHECK(torch::isfinite(p).all().item<bool>());
}

TEST_CASE("outputs are shape matched and masks bounded") {
  auto m = make_separator(small(), dsp::FrameParams{});
  auto gen = seeded(20);
  auto mix = spec_of(torch::randn({6000}, gen));
  auto out = separate_spec(mix, m);
  for (const auto* t : {&out.crm_speech.mask, &out.crm_background.mask, &out.est_speech.bins,
                        &out.est_background.bins})
    CHECK(t->sizes() == mix.bins.sizes());
  CHECK(out.crm_speech.mask.abs().max().item<double>() <= small().mask_bound + 1e-6);
  CHECK(out.crm_background.mask.abs().max().item<double>() <= small().mask_bound + 1e-6);
  auto expect = dsp::apply_crm(mix.bins, out.crm_speech.mask);
  CHECK(torch::allclose(out.est_speech.bins, expect));
}

TEST_CASE("zero mixture gives zero sources") {
  auto m = make_separator(small(), dsp::FrameParams{});
  auto [s, b] = separate_wave(dsp::Waveform{torch::zeros({8000})}, m);
  CHECK(s.samples.abs().max().item<double>() == 0.0);
  CHECK(b.samples.abs().max().item<double>() == 0.0);
}

TEST_CASE("fixed seed gives identical output") {
  auto gen = seeded(21);
  auto x = torch::randn({7000}, gen);
  auto a = make_separator(small(), dsp::FrameParams{});
  auto b = make_separator(small(), dsp::FrameParams{});
  auto sa = separate_spec(spec_of(x), a), sb = separate_spec(spec_of(x), b);
  CHECK(torch::equal(sa.crm_speech.mask, sb.crm_speech.mask));
  CHECK(torch::equal(sa.est_background.bins, sb.est_background.bins));
  auto again = separate_spec(spec_of(x), a);
  CHECK(torch::equal(sa.est_speech.bins, again.est_speech.bins));
}

TEST_CASE("wave separation preserves length") {
  auto m = make_separator(small(), dsp::FrameParams{});
  auto gen = seeded(22);
  auto lens = torch::randint(16000, 160001, {4}, gen);
  for (int i = 0; i < 4; ++i) {
    const int64_t n = lens[i].item<int64_t>();
    auto [s, b] = separate_wave(dsp::Waveform{torch::randn({n}, gen) * 0.1}, m);
    CHECK(s.size() == n);
    CHECK(b.size() == n);
  }
}

TEST_CASE("identity masks reproduce the stft round trip") {
  auto m = make_separator(small(), dsp::FrameParams{});
  auto gen = seeded(23);
  auto x = torch::randn({9000}, gen) * 0.2;
  auto [s, b] = separate_wave(dsp::Waveform{x}, m, {true});
  auto rt = dsp::istft(spec_of(x)).samples;
  CHECK(torch::equal(s.samples, rt));
  CHECK(torch::equal(b.samples, rt));
}

TEST_CASE("frame parameter mismatch is rejected") {
  auto m = make_separator(small(), dsp::FrameParams{});
  auto s = dsp::stft(dsp::Waveform{torch::zeros({4000})}, dsp::FrameParams{512, 128});
  CHECK_THROWS_AS(separate_spec(s, m), ShapeError);
  CHECK_THROWS_AS(separate_wave(dsp::Waveform{torch::zeros({4000}), 8000}, m), DataError);
}

TEST_CASE("every parameter receives gradient") {
  auto m = make_separator(small(), dsp::FrameParams{});
  auto gen = seeded(24);
  auto x = torch::randn({2, 6000}, gen);
  auto bins = dsp::stft(x, dsp::FrameParams{}).to(torch::kComplexFloat);
  auto masks = m->forward(bins);
  auto loss = torch::view_as_real(masks.speech).square().mean() +
              torch::view_as_real(masks.background).abs().mean();
  loss.backward();
  for (const auto& item : m->named_parameters()) {
    INFO(item.key());
    const auto& p = item.value();
    REQUIRE(p.grad().defined());
    CHECK(p.grad().abs().sum().item<double>() > 0.0);
  }
}

TEST_CASE("paired real convolutions equal a complex convolution") {
  auto gen = seeded(25);
  ComplexConv2d conv(torch::nn::Conv2dOptions(3, 5, {3, 2}).padding({1, 0}));
  conv->to(torch::kDouble);
  auto xr = torch::randn({2, 3, 9, 6}, gen, torch::kDouble);
  auto xi = torch::randn({2, 3, 9, 6}, gen, torch::kDouble);
  auto [yr, yi] = conv->forward({xr, xi});

  auto w = torch::complex(conv->re->weight, conv->im->weight);
  auto bias = torch::complex(conv->re->bias - conv->im->bias, conv->re->bias + conv->im->bias);
  auto y = torch::conv2d(torch::complex(xr, xi), w, bias, 1, {1, 0});
  CHECK((torch::real(y) - yr).abs().max().item<double>() < 1e-12);
  CHECK((torch::imag(y) - yi).abs().max().item<double>() < 1e-12);
}

TEST_CASE("forward cost grows linearly in frame count") {
  auto m = make_separator(small(), dsp::FrameParams{});
  torch::NoGradGuard ng;
  auto gen = seeded(26);
  auto run = [&](int64_t frames) {
    auto bins = torch::randn({1, frames, 513}, gen, torch::kComplexFloat);
    m->forward(bins);
    std::vector<double> t;
    for (int i = 0; i < 5; ++i) {
      auto t0 = std::chrono::steady_clock::now();
      m->forward(bins);
      t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    std::sort(t.begin(), t.end());
    return t[2];
  };
  const double t1 = run(150), t2 = run(300);
  CHECK(t2 / t1 <= 2.5);
}

} // TEST_SUITE
