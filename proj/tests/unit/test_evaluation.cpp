#include "doctest_torch.hpp"

#include <fstream>

#include <torch/torch.h>

#include "bgvc/error.hpp"
#include "bgvc/evaluation.hpp"
#include "bgvc/training.hpp"
#include "bgvc/wav_io.hpp"
#include "support.hpp"

using namespace bgvc;
using namespace bgvc::eval;
using bgvc::testing::seeded;
namespace fs = std::filesystem;

namespace {

std::pair<int, int> png_size(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  unsigned char h[24];
  in.read(reinterpret_cast<char*>(h), 24);
  auto be = [&](int o) { return (h[o] << 24) | (h[o + 1] << 16) | (h[o + 2] << 8) | h[o + 3]; };
  return {be(16), be(20)};
}

std::vector<data::ExampleRecord> write_examples(const fs::path& dir, int n) {
  auto corpus = data::make_toy_corpus({2, (n + 1) / 2, 2, 1.0, 8});
  auto set = data::toy_training_set(corpus, 2);
  set.resize(size_t(n));
  std::vector<data::ExampleRecord> recs;
  for (int i = 0; i < n; ++i) {
    const auto id = "m" + std::to_string(i);
    audio::write_wav(dir / (id + "_mix.wav"), set[i].mix);
    audio::write_wav(dir / (id + "_speech.wav"), set[i].clean_speech);
    audio::write_wav(dir / (id + "_bg.wav"), set[i].background);
    recs.push_back({id, dir / (id + "_mix.wav"), dir / (id + "_speech.wav"),
                    dir / (id + "_bg.wav"), set[i].speaker_id, set[i].spec, set[i].gain,
                    set[i].norm_scale});
  }
  data::save_example_manifest(dir / "mixtures.jsonl", recs);
  return recs;
}

} // namespace

TEST_SUITE("evaluation") {

TEST_CASE("si-sdr identities") {
  auto gen = seeded(60);
  auto ref = torch::randn({4000}, gen, torch::kDouble);
  CHECK(capped(si_sdr(ref, ref)) == kSiSdrCap);
  CHECK(capped(si_sdr(ref * 2, ref)) == kSiSdrCap);

  auto est = ref + 0.3 * torch::randn({4000}, gen, torch::kDouble);
  const double base = si_sdr(est, ref);
  for (double a : {0.01, 0.5, 3.0, 1000.0}) {
    CHECK(si_sdr(est * a, ref) == doctest::Approx(base).epsilon(1e-12));
    CHECK(si_sdr(est, ref * a) == doctest::Approx(base).epsilon(1e-12));
  }
}

TEST_CASE("orthogonal noise of equal power gives 0 dB") {
  auto gen = seeded(61);
  for (int i = 0; i < 10; ++i) {
    auto ref = torch::randn({3000}, gen, torch::kDouble);
    auto n = torch::randn({3000}, gen, torch::kDouble);
    n = n - (n.dot(ref) / ref.dot(ref)) * ref; // Gram-Schmidt
    n = n * std::sqrt(ref.dot(ref).item<double>() / n.dot(n).item<double>());
    CHECK(std::abs(si_sdr(ref + n, ref)) < 1e-6);
  }
  // direct evaluation of the projection formula on a hand case
  auto r = torch::tensor({1.0, 0.0}, torch::kDouble), e = torch::tensor({1.0, 1.0}, torch::kDouble);
  CHECK(std::abs(si_sdr(e, r)) < 1e-12);
  auto e2 = torch::tensor({1.0, 0.5}, torch::kDouble);
  CHECK(si_sdr(e2, r) == doctest::Approx(10 * std::log10(4.0)).epsilon(1e-12));
}

TEST_CASE("si-sdr errors") {
  CHECK_THROWS_AS(si_sdr(torch::ones({10}), torch::zeros({10})), DataError);
  CHECK_THROWS_AS(si_sdr(torch::ones({10}), torch::ones({11})), DataError);
  CHECK(capped(-500.0) == -kSiSdrCap);
  CHECK(capped(12.5) == 12.5);
}

TEST_CASE("report aggregation and files") {
  EvalReport rep;
  rep.rows = {{"a", "u1", "speech", 10.0, {}}, {"a", "u2", "speech", 13.0, {}},
              {"a", "u1", "background", -1.0, {}}, {"b", "u1", "speech", 4.0, {}}};
  auto agg = rep.aggregate();
  REQUIRE(agg.size() == 3);
  for (const auto& r : agg) {
    CHECK(r.utterance_id == "mean");
    if (r.system == "a" && r.target == "speech")
      CHECK(std::abs(r.si_sdr_db - 11.5) < 1e-9);
  }
  auto back = EvalReport::from_json(rep.to_json());
  REQUIRE(back.rows.size() == 4);
  CHECK(back.rows[2].si_sdr_db == -1.0);

  auto dir = bgvc::testing::scratch_dir("report");
  rep.write_csv(dir / "r.csv");
  std::ifstream in(dir / "r.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "system,utterance_id,target,si_sdr_db");
  int lines = 0;
  for (std::string l; std::getline(in, l);)
    ++lines;
  CHECK(lines == 7);

  rep.has_pesq = true;
  rep.rows[0].pesq = 3.1;
  rep.write_csv(dir / "p.csv");
  std::ifstream pin(dir / "p.csv");
  std::getline(pin, header);
  CHECK(header == "system,utterance_id,target,si_sdr_db,pesq");
}

TEST_CASE("oracle estimates score at the cap") {
  auto dir = bgvc::testing::scratch_dir("oracle");
  auto recs = write_examples(dir, 3);
  std::map<std::string, std::pair<dsp::Waveform, dsp::Waveform>> refs;
  for (const auto& r : recs) {
    auto ex = data::load_example(r);
    refs[r.mix_path.string()] = {ex.clean_speech, ex.background};
  }
  // look the references up by mixture content
  std::vector<std::pair<torch::Tensor, std::pair<dsp::Waveform, dsp::Waveform>>> table;
  for (const auto& r : recs)
    table.push_back({audio::read_wav(r.mix_path).samples, refs[r.mix_path.string()]});
  SourceEstimator oracle = [&](const dsp::Waveform& mix) {
    for (const auto& [m, out] : table)
      if (torch::equal(m, mix.samples))
        return out;
    throw std::runtime_error("unknown mixture");
  };
  auto rep = evaluate(recs, oracle, {"oracle", {}, {}});
  CHECK(rep.rows.size() == 2 * recs.size());
  for (const auto& row : rep.rows) {
    CHECK(row.si_sdr_db == kSiSdrCap);
    CHECK(row.system == "oracle");
  }
  auto again = evaluate(recs, oracle, {"oracle", {}, {}});
  CHECK(again.to_json() == rep.to_json());
}

TEST_CASE("external scorer contract") {
  auto dir = bgvc::testing::scratch_dir("scorer");
  auto recs = write_examples(dir, 2);
  auto scorer = external_scorer("read ref; read deg; test -f \"$ref\" && test -f \"$deg\" && echo 2.75");
  CHECK(scorer(recs[0].speech_path, recs[0].mix_path) == 2.75);
  CHECK_THROWS_AS(external_scorer("exit 3")(recs[0].speech_path, recs[0].mix_path), DataError);
  CHECK_THROWS_AS(external_scorer("echo nope")(recs[0].speech_path, recs[0].mix_path), DataError);

  SourceEstimator passthrough = [](const dsp::Waveform& m) { return std::make_pair(m, m); };
  auto rep = evaluate(recs, passthrough, {"mix", scorer, dir / "scratch"});
  CHECK(rep.has_pesq);
  for (const auto& row : rep.rows) {
    REQUIRE(row.pesq.has_value());
    CHECK(*row.pesq == 2.75);
  }
}

TEST_CASE("evaluate a checkpoint end to end") {
  auto dir = bgvc::testing::scratch_dir("evalsys");
  auto recs = write_examples(dir, 2);
  auto cfg = bgvc::testing::tiny_config();
  train::TrainState st(cfg, {"spk0", "spk1"});
  train::save_checkpoint(st, dir / "m.ckpt");
  auto rep = evaluate_system(dir / "m.ckpt", dir / "mixtures.jsonl", dir / "out");
  CHECK(rep.rows.size() == 4);
  CHECK(fs::exists(dir / "out" / "report.csv"));
  CHECK(fs::exists(dir / "out" / "report.json"));
  auto again = evaluate_system(dir / "m.ckpt", dir / "mixtures.jsonl", dir / "out2");
  CHECK(again.to_json() == rep.to_json());
  fs::remove(recs[0].speech_path);
  CHECK_THROWS_AS(evaluate_system(dir / "m.ckpt", dir / "mixtures.jsonl", dir / "out3"),
                  DataError);
}

TEST_CASE("figures") {
  auto dir = bgvc::testing::scratch_dir("figures");
  {
    train::JsonlLog log(dir / "train.jsonl");
    for (int i = 1; i <= 20; ++i)
      log.write({i, Stage::joint,
                 {{"rec_uni", 1.0 / i}, {"ss_s", 0.5 / i}, {"total", 50.0 / i}}});
  }
  auto gen = seeded(62);
  MelPanels panels;
  panels.utterance_id = "u1";
  panels.mix = {torch::randn({8000}, gen) * 0.1};
  panels.separated_speech = {torch::randn({8000}, gen) * 0.1};
  FigureOptions fo;
  fo.mel_width = 320;
  fo.mel_height = 120;

  auto m = emit_figures(dir / "train.jsonl", EvalReport{}, {panels}, dir / "a", fo);
  auto has = [&](const FigureManifest& fm, const std::string& f) {
    return std::find(fm.emitted.begin(), fm.emitted.end(), f) != fm.emitted.end();
  };
  CHECK(has(m, "loss_rec_uni.svg"));
  CHECK(has(m, "loss_total.svg"));
  CHECK(has(m, "mel_u1_mix.png"));
  CHECK_FALSE(has(m, "si_sdr.svg"));
  bool omitted_sdr = false;
  for (const auto& [f, why] : m.omitted)
    omitted_sdr = omitted_sdr || f == "si_sdr.svg";
  CHECK(omitted_sdr);
  CHECK(fs::exists(dir / "a" / "figures.json"));
  for (const auto& f : m.emitted)
    CHECK(fs::exists(dir / "a" / f));
  CHECK(png_size(dir / "a" / "mel_u1_mix.png") == std::make_pair(320, 120));

  EvalReport rep;
  rep.rows = {{"proposed", "u1", "speech", 7.0, {}}};
  auto m2 = emit_figures(dir / "train.jsonl", rep, {panels}, dir / "b", fo);
  CHECK(has(m2, "si_sdr.svg"));
  auto m3 = emit_figures(dir / "train.jsonl", rep, {panels}, dir / "c", fo);
  CHECK(m3.emitted == m2.emitted);

  std::ofstream(dir / "empty.jsonl").close();
  CHECK_THROWS_AS(emit_figures(dir / "empty.jsonl", rep, {}, dir / "d", fo), DataError);
}

TEST_CASE("heatmap png dimensions") {
  auto dir = bgvc::testing::scratch_dir("png");
  write_heatmap_png(dir / "h.png", torch::rand({80, 37}), 200, 90);
  CHECK(png_size(dir / "h.png") == std::make_pair(200, 90));
}

} // TEST_SUITE
