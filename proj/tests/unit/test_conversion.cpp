#include "doctest_torch.hpp"

#include <torch/torch.h>

#include "bgvc/conversion.hpp"
#include "bgvc/error.hpp"
#include "bgvc/losses.hpp"
#include "support.hpp"

using namespace bgvc;
using namespace bgvc::vc;
using bgvc::testing::seeded;

namespace {

VcConfig small() { return bgvc::testing::tiny_config().model.vc; }

Pipeline tiny_pipeline() {
  auto cfg = bgvc::testing::tiny_config();
  return {sep::make_separator(cfg.model.separator, cfg.model.frames),
          bn::ExtractorHandle::seeded(cfg.model.extractor),
          make_vc_model(cfg.model.vc, SpeakerTable({"alice", "bob"}))};
}

} // namespace

TEST_SUITE("conversion") {

TEST_CASE("speaker table") {
  SpeakerTable t({"a", "b", "c"});
  CHECK(t.index_of("b") == 1);
  CHECK(t.contains("c"));
  CHECK_FALSE(t.contains("d"));
  CHECK_THROWS_AS(t.index_of("d"), ConfigError);
  CHECK_THROWS_AS(SpeakerTable({"a", "a"}), ConfigError);
  CHECK_THROWS_AS(SpeakerTable({""}), ConfigError);
}

TEST_CASE("encoder preserves length and is reproducible") {
  auto a = make_vc_model(small(), SpeakerTable({"s"}));
  auto b = make_vc_model(small(), SpeakerTable({"s"}));
  auto gen = seeded(40);
  for (int64_t len : {17, 64, 301}) {
    bn::BottleneckFeatures f{torch::randn({len, small().bn_dim}, gen), 4};
    auto h = encode(f, a);
    CHECK(h.size(0) == len);
    CHECK(h.size(1) == small().enc_hidden);
    CHECK(torch::equal(h, encode(f, b)));
  }
  bn::BottleneckFeatures wrong{torch::randn({10, small().bn_dim + 1}, gen), 4};
  CHECK_THROWS_AS(encode(wrong, a), ShapeError);
}

TEST_CASE("gradient reaches every encoder and generator weight") {
  auto m = make_vc_model(small(), SpeakerTable({"s", "t"}));
  auto gen = seeded(41);
  auto bnf = torch::randn({2, 12, small().bn_dim}, gen);
  auto hidden = m->encoder->forward(bnf);
  auto w = m->generator->forward(hidden, torch::tensor({0, 1}));
  w.square().mean().backward();
  for (const auto& item : m->named_parameters()) {
    INFO(item.key());
    const auto& p = item.value();
    REQUIRE(p.grad().defined());
    CHECK(p.grad().abs().sum().item<double>() > 0.0);
  }
}

TEST_CASE("generated length is the product of upsampling strides") {
  auto c = small();
  c.upsample_strides = {8, 8, 4};
  CHECK(c.upsample_factor() == 256);
  auto m = make_vc_model(c, SpeakerTable({"s"}));
  auto hidden = torch::randn({64, c.enc_hidden});
  CHECK(generate(hidden, "s", m).size() == 16384);

  for (auto strides : {std::vector<int64_t>{4, 4}, std::vector<int64_t>{2, 8, 2}, std::vector<int64_t>{16}}) {
    c.upsample_strides = strides;
    auto g = make_vc_model(c, SpeakerTable({"s"}));
    int64_t prod = 1;
    for (auto s : strides)
      prod *= s;
    CHECK(generate(torch::randn({9, c.enc_hidden}), "s", g).size() == 9 * prod);
  }
}

TEST_CASE("speaker conditioning changes the output") {
  auto m = make_vc_model(small(), SpeakerTable({"s", "t"}));
  auto gen = seeded(42);
  auto hidden = torch::randn({20, small().enc_hidden}, gen);
  auto a = generate(hidden, "s", m).samples, b = generate(hidden, "t", m).samples;
  CHECK((a - b).square().sum().item<double>() > 0.0);
  CHECK(torch::equal(a, generate(hidden, "s", m).samples));
  CHECK(torch::isfinite(a).all().item<bool>());
  CHECK_THROWS_AS(generate(hidden, "u", m), ConfigError);
}

TEST_CASE("discriminator shapes") {
  auto d = make_discriminators(small());
  auto gen = seeded(43);
  for (int64_t len : {2048, 4000, 8192, 12345}) {
    auto x = torch::randn({len}, gen) * 0.1;
    auto f = discriminate(dsp::Waveform{x}, d);
    REQUIRE(f.layers.size() == small().disc_pools.size());
    CHECK(f.scores.size() == small().disc_pools.size());
    for (const auto& ls : f.layers)
      CHECK(int64_t(ls.size()) == small().disc_layers());
    auto g = discriminate(dsp::Waveform{x}, d);
    for (size_t i = 0; i < f.layers.size(); ++i) {
      CHECK(losses::feat_match(f.layers[i], g.layers[i]).item<double>() == 0.0);
      auto y = discriminate(dsp::Waveform{torch::randn({len}, gen)}, d);
      for (size_t l = 0; l < f.layers[i].size(); ++l)
        CHECK(f.layers[i][l].sizes() == y.layers[i][l].sizes());
    }
  }
}

TEST_CASE("pipeline compatibility checks") {
  auto p = tiny_pipeline();
  CHECK_NOTHROW(check_compatible(p.separator, p.extractor, p.vc));
  auto cfg = bgvc::testing::tiny_config();
  auto ex = cfg.model.extractor;
  ex.dim += 1;
  CHECK_THROWS_AS(check_compatible(p.separator, bn::ExtractorHandle::seeded(ex), p.vc),
                  ConfigError);
  auto vcc = cfg.model.vc;
  vcc.upsample_strides = {8, 8, 8};
  CHECK_THROWS_AS(
      check_compatible(p.separator, p.extractor, make_vc_model(vcc, SpeakerTable({"a"}))),
      ConfigError);
}

TEST_CASE("convert with an identity stub returns the separated speech") {
  auto p = tiny_pipeline();
  auto gen = seeded(44);
  dsp::Waveform mix{torch::randn({9000}, gen) * 0.2};
  ConvertOptions stub;
  stub.vc_override = [](const dsp::Waveform& s) { return s; };
  auto r = convert(mix, "alice", false, p, stub);
  CHECK(torch::equal(r.output.samples, r.separated_speech.samples));
  auto kept = convert(mix, "alice", true, p, stub);
  CHECK(torch::allclose(kept.output.samples,
                        r.separated_speech.samples + r.separated_background.samples));
  CHECK_FALSE(torch::equal(kept.output.samples, r.output.samples));

  // background toggle is a no-op when the separated background is silent
  dsp::Waveform silent{torch::zeros({9000})};
  auto z0 = convert(silent, "alice", false, p, stub), z1 = convert(silent, "alice", true, p, stub);
  CHECK(torch::equal(z0.output.samples, z1.output.samples));
}

TEST_CASE("convert output length and errors") {
  auto p = tiny_pipeline();
  auto gen = seeded(45);
  auto lens = torch::randint(3000, 20000, {5}, gen);
  for (int i = 0; i < 5; ++i) {
    const int64_t n = lens[i].item<int64_t>();
    auto r = convert(dsp::Waveform{torch::randn({n}, gen) * 0.1}, "bob", true, p);
    CHECK(r.output.size() == r.converted.size());
    CHECK(r.converted.size() == n);
  }
  dsp::Waveform mix{torch::randn({5000}, gen) * 0.1};
  CHECK_THROWS_AS(convert(mix, "carol", true, p), ConfigError);
  CHECK_THROWS_AS(convert(dsp::Waveform{mix.samples, 22050}, "bob", true, p), DataError);

  auto a = convert(mix, "alice", false, p), b = convert(mix, "bob", false, p);
  CHECK(torch::equal(a.output.samples, convert(mix, "alice", false, p).output.samples));
  auto d = (dsp::log_mel(a.output.samples, {}, {}) - dsp::log_mel(b.output.samples, {}, {}));
  CHECK(d.abs().mean().item<double>() > 0.0);
}

TEST_CASE("fit_length trims and pads") {
  auto x = torch::arange(5, torch::kFloat);
  CHECK(fit_length(x, 3).size(0) == 3);
  auto padded = fit_length(x, 8);
  CHECK(padded.size(0) == 8);
  CHECK(padded.slice(0, 5).abs().sum().item<double>() == 0.0);
  CHECK(torch::equal(fit_length(x, 5), x));
}

} // TEST_SUITE
