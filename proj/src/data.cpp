#include "bgvc/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include <torch/torch.h>

#include "bgvc/error.hpp"
#include "bgvc/wav_io.hpp"

namespace bgvc::data {

namespace fs = std::filesystem;

namespace {

std::string kind_name(Kind k) { return k == Kind::speech ? "speech" : "background"; }

Kind parse_kind(const std::string& s) {
  if (s == "speech") return Kind::speech;
  if (s == "background") return Kind::background;
  throw DataError("manifest: unknown kind '" + s + "'");
}

fs::path resolve(const fs::path& base, const fs::path& p) {
  return p.is_absolute() ? p : base / p;
}

std::vector<nlohmann::json> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in)
    throw DataError("manifest: cannot open " + path.string());
  std::vector<nlohmann::json> rows;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos)
      continue;
    try {
      rows.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("manifest: " + path.string() + ":" + std::to_string(lineno) +
                      ": " + e.what());
    }
  }
  return rows;
}

void write_jsonl(const fs::path& path, const std::vector<nlohmann::json>& rows) {
  if (path.has_parent_path())
    fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os)
    throw DataError("manifest: cannot write " + path.string());
  for (const auto& r : rows)
    os << r.dump() << '\n';
}

template <typename T>
T field(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.contains(key))
    throw DataError(where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + ": bad field '" + key + "': " + e.what());
  }
}

} // namespace

Manifest Manifest::load(const fs::path& path, bool check_paths) {
  Manifest m;
  const fs::path base = path.parent_path();
  std::set<std::string> ids;
  static const std::set<std::string> known{"utterance_id", "audio_path", "speaker_id",
                                           "kind"};
  for (const auto& row : read_jsonl(path)) {
    const std::string where = "manifest " + path.string();
    for (const auto& [k, v] : row.items())
      if (!known.count(k))
        throw DataError(where + ": unknown field '" + k + "'");
    ManifestRecord r;
    r.utterance_id = field<std::string>(row, "utterance_id", where);
    r.audio_path = resolve(base, field<std::string>(row, "audio_path", where));
    r.kind = parse_kind(field<std::string>(row, "kind", where));
    if (row.contains("speaker_id"))
      r.speaker_id = field<std::string>(row, "speaker_id", where);
    if (r.kind == Kind::speech && r.speaker_id.empty())
      throw DataError(where + ": speech record '" + r.utterance_id + "' has no speaker_id");
    if (!ids.insert(r.utterance_id).second)
      throw DataError(where + ": duplicate utterance_id '" + r.utterance_id + "'");
    if (check_paths && !fs::exists(r.audio_path))
      throw DataError(where + ": missing audio " + r.audio_path.string());
    m.records.push_back(std::move(r));
  }
  return m;
}

void Manifest::save(const fs::path& path) const {
  std::vector<nlohmann::json> rows;
  for (const auto& r : records) {
    nlohmann::json j = {{"utterance_id", r.utterance_id},
                        {"audio_path", r.audio_path.generic_string()},
                        {"kind", kind_name(r.kind)}};
    if (!r.speaker_id.empty())
      j["speaker_id"] = r.speaker_id;
    rows.push_back(std::move(j));
  }
  write_jsonl(path, rows);
}

Manifest Manifest::of_kind(Kind k) const {
  Manifest m;
  for (const auto& r : records)
    if (r.kind == k)
      m.records.push_back(r);
  return m;
}

std::vector<std::string> Manifest::speakers() const {
  std::set<std::string> s;
  for (const auto& r : records)
    if (r.kind == Kind::speech)
      s.insert(r.speaker_id);
  return {s.begin(), s.end()};
}

const ManifestRecord& Manifest::find(const std::string& utterance_id) const {
  for (const auto& r : records)
    if (r.utterance_id == utterance_id)
      return r;
  throw DataError("manifest: no utterance '" + utterance_id + "'");
}

double power(const torch::Tensor& x) {
  return x.to(torch::kDouble).square().mean().item<double>();
}

double measured_snr_db(const torch::Tensor& speech, const torch::Tensor& background) {
  return 10.0 * std::log10(power(speech) / power(background));
}

TrainingExample mix_at_snr(const dsp::Waveform& speech, const dsp::Waveform& background,
                           const MixSpec& spec, const MixOptions& opts) {
  dsp::require_pipeline_rate(speech);
  dsp::require_pipeline_rate(background);
  if (!std::isfinite(spec.snr_db))
    throw DataError("mix: SNR must be finite");
  const int64_t n = speech.size();
  const int64_t nb = background.size();
  if (n == 0)
    throw DataError("mix: empty speech");
  if (nb == 0)
    throw DataError("mix: empty background");
  if (spec.background_offset < 0)
    throw DataError("mix: negative background offset");

  auto s = speech.samples.to(torch::kDouble);
  auto b = background.samples.to(torch::kDouble);
  torch::Tensor clip;
  if (spec.background_offset + n <= nb) {
    clip = b.narrow(0, spec.background_offset, n);
  } else if (opts.wrap_background) {
    auto idx = (torch::arange(n, torch::kInt64) + spec.background_offset) % nb;
    clip = b.index_select(0, idx);
  } else {
    throw DataError("mix: background '" + spec.background_id + "' (" +
                    std::to_string(nb) + " samples) is shorter than speech '" +
                    spec.speech_id + "' (" + std::to_string(n) + ") at offset " +
                    std::to_string(spec.background_offset));
  }

  const double ps = power(s);
  if (!(ps > opts.silence_threshold))
    throw DataError("mix: speech '" + spec.speech_id + "' is silent");
  const double pb = power(clip);
  if (!(pb > opts.silence_threshold))
    throw DataError("mix: background '" + spec.background_id +
                    "' is silent over the clipped region; SNR is unattainable");

  const double gain = std::sqrt(ps / (pb * std::pow(10.0, spec.snr_db / 10.0)));
  auto scaled = clip * gain;
  auto mix = s + scaled;
  double norm = 1.0;
  const double peak = mix.abs().max().item<double>();
  if (peak > 1.0) {
    norm = 0.999 / peak;
    mix = mix * norm;
    s = s * norm;
    scaled = scaled * norm;
  }
  TrainingExample ex;
  ex.clean_speech = {s.to(torch::kFloat32), dsp::kSampleRate};
  ex.background = {scaled.to(torch::kFloat32), dsp::kSampleRate};
  // summed in float so the stored parts add up exactly to the stored mix
  ex.mix = {ex.clean_speech.samples + ex.background.samples, dsp::kSampleRate};
  ex.spec = spec;
  ex.gain = gain;
  ex.norm_scale = norm;
  return ex;
}

std::vector<MixSpec> sample_mixes(const Manifest& speech, const Manifest& background,
                                  size_t n, double snr_min, double snr_max, uint64_t seed,
                                  const LengthFn& length_of, bool wrap_background) {
  if (speech.empty())
    throw DataError("sample_mixes: empty speech manifest");
  if (background.empty())
    throw DataError("sample_mixes: empty background manifest");
  if (!(snr_min <= snr_max))
    throw ConfigError("sample_mixes: snr_min exceeds snr_max");
  LengthFn length = length_of;
  if (!length)
    length = [](const ManifestRecord& r) { return audio::read_wav(r.audio_path).size(); };

  Rng rng(seed);
  std::vector<MixSpec> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    const auto& s = speech.records[rng.below(speech.size())];
    const auto& b = background.records[rng.below(background.size())];
    MixSpec spec;
    spec.speech_id = s.utterance_id;
    spec.background_id = b.utterance_id;
    spec.snr_db = rng.uniform(snr_min, snr_max);
    const int64_t ls = length(s), lb = length(b);
    if (lb >= ls)
      spec.background_offset = int64_t(rng.below(uint64_t(lb - ls + 1)));
    else if (wrap_background)
      spec.background_offset = int64_t(rng.below(uint64_t(lb)));
    else
      spec.background_offset = 0;
    spec.rng_seed = rng.next();
    out.push_back(std::move(spec));
  }
  return out;
}

Batch make_batch(const std::vector<const TrainingExample*>& examples,
                 const BatchOptions& opts, Rng& rng) {
  if (examples.empty())
    throw DataError("make_batch: no examples");
  int64_t shortest = INT64_MAX, longest = 0;
  for (const auto* ex : examples) {
    if (ex->mix.sample_rate_hz != examples.front()->mix.sample_rate_hz)
      throw DataError("make_batch: examples do not share a sample rate");
    shortest = std::min(shortest, ex->mix.size());
    longest = std::max(longest, ex->mix.size());
  }
  const int64_t crop = opts.crop_samples > 0 ? opts.crop_samples : longest;
  if (!opts.pad_short && crop > shortest)
    throw DataError("make_batch: crop of " + std::to_string(crop) +
                    " samples exceeds the shortest utterance (" +
                    std::to_string(shortest) + ") and padding is disabled");

  Batch b;
  std::vector<torch::Tensor> mix, clean, bg;
  auto take = [&](const torch::Tensor& x, int64_t off) {
    auto seg = x.narrow(0, off, std::min(crop, x.size(0) - off)).to(torch::kFloat32);
    if (seg.size(0) < crop)
      seg = torch::constant_pad_nd(seg, {0, crop - seg.size(0)});
    return seg;
  };
  for (const auto* ex : examples) {
    const int64_t len = ex->mix.size();
    const int64_t off = len > crop ? int64_t(rng.below(uint64_t(len - crop + 1))) : 0;
    b.offsets.push_back(off);
    mix.push_back(take(ex->mix.samples, off));
    clean.push_back(take(ex->clean_speech.samples, off));
    bg.push_back(take(ex->background.samples, off));
    b.speaker_ids.push_back(ex->speaker_id);
  }
  b.mix = torch::stack(mix);
  b.clean = torch::stack(clean);
  b.background = torch::stack(bg);
  b.mix_spec = dsp::stft(b.mix, opts.frames);
  b.clean_spec = dsp::stft(b.clean, opts.frames);
  b.background_spec = dsp::stft(b.background, opts.frames);
  b.mix_mel = dsp::log_mel(b.mix, opts.mel, opts.frames);
  b.clean_mel = dsp::log_mel(b.clean, opts.mel, opts.frames);
  return b;
}

nlohmann::json to_json(const MixSpec& s) {
  return {{"speech_id", s.speech_id},
          {"background_id", s.background_id},
          {"snr_db", s.snr_db},
          {"background_offset", s.background_offset},
          {"rng_seed", s.rng_seed}};
}

MixSpec mix_spec_from_json(const nlohmann::json& j) {
  const std::string where = "mix spec";
  MixSpec s;
  s.speech_id = field<std::string>(j, "speech_id", where);
  s.background_id = field<std::string>(j, "background_id", where);
  s.snr_db = field<double>(j, "snr_db", where);
  s.background_offset = field<int64_t>(j, "background_offset", where);
  s.rng_seed = field<uint64_t>(j, "rng_seed", where);
  return s;
}

std::vector<ExampleRecord> load_example_manifest(const fs::path& path) {
  const fs::path base = path.parent_path();
  std::vector<ExampleRecord> out;
  std::set<std::string> ids;
  for (const auto& row : read_jsonl(path)) {
    const std::string where = "mixture manifest " + path.string();
    ExampleRecord r;
    r.utterance_id = field<std::string>(row, "utterance_id", where);
    r.mix_path = resolve(base, field<std::string>(row, "mix_path", where));
    r.speech_path = resolve(base, field<std::string>(row, "speech_path", where));
    r.background_path = resolve(base, field<std::string>(row, "background_path", where));
    r.speaker_id = field<std::string>(row, "speaker_id", where);
    if (row.contains("mix_spec"))
      r.spec = mix_spec_from_json(row.at("mix_spec"));
    if (row.contains("gain"))
      r.gain = field<double>(row, "gain", where);
    if (row.contains("norm_scale"))
      r.norm_scale = field<double>(row, "norm_scale", where);
    if (!ids.insert(r.utterance_id).second)
      throw DataError(where + ": duplicate utterance_id '" + r.utterance_id + "'");
    out.push_back(std::move(r));
  }
  return out;
}

void save_example_manifest(const fs::path& path, const std::vector<ExampleRecord>& records) {
  std::vector<nlohmann::json> rows;
  const fs::path base = path.parent_path();
  auto rel = [&](const fs::path& p) {
    return (base.empty() ? p : p.lexically_relative(base)).generic_string();
  };
  for (const auto& r : records)
    rows.push_back({{"utterance_id", r.utterance_id},
                    {"mix_path", rel(r.mix_path)},
                    {"speech_path", rel(r.speech_path)},
                    {"background_path", rel(r.background_path)},
                    {"speaker_id", r.speaker_id},
                    {"mix_spec", to_json(r.spec)},
                    {"gain", r.gain},
                    {"norm_scale", r.norm_scale}});
  write_jsonl(path, rows);
}

TrainingExample load_example(const ExampleRecord& r) {
  TrainingExample ex;
  ex.mix = audio::read_wav(r.mix_path);
  ex.clean_speech = audio::read_wav(r.speech_path);
  ex.background = audio::read_wav(r.background_path);
  if (ex.mix.size() != ex.clean_speech.size() || ex.mix.size() != ex.background.size())
    throw DataError("example '" + r.utterance_id + "': mix / speech / background lengths differ");
  ex.speaker_id = r.speaker_id;
  ex.spec = r.spec;
  ex.gain = r.gain;
  ex.norm_scale = r.norm_scale;
  return ex;
}

// ---------------------------------------------------------------------------
// Toy corpus

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

struct Vowel {
  double f1, f2, f3;
};
constexpr Vowel kVowels[] = {
    {730, 1090, 2440}, {270, 2290, 3010}, {300, 870, 2240}, {530, 1840, 2480}, {570, 840, 2410}};

double formant_gain(double f, const Vowel& v, double scale) {
  auto peak = [](double f, double c, double bw) {
    const double d = (f - c) / bw;
    return 1.0 / (1.0 + d * d);
  };
  return peak(f, v.f1 * scale, 90.0) + 0.7 * peak(f, v.f2 * scale, 120.0) +
         0.4 * peak(f, v.f3 * scale, 160.0) + 0.02;
}

std::vector<double> synth_speech(int speaker, double seconds, Rng& rng) {
  const int64_t n = int64_t(seconds * dsp::kSampleRate);
  std::vector<double> y(size_t(n), 0.0);
  const double base_f0 = speaker % 2 == 0 ? 115.0 + 10.0 * (speaker / 2)
                                          : 215.0 + 12.0 * (speaker / 2);
  const double formant_scale = speaker % 2 == 0 ? 1.0 : 1.17;
  const double sr = dsp::kSampleRate;

  int64_t pos = int64_t(rng.uniform(0.02, 0.08) * sr);
  while (pos < n) {
    const int64_t len = int64_t(rng.uniform(0.14, 0.30) * sr);
    const Vowel& v = kVowels[rng.below(5)];
    const double f0_start = base_f0 * rng.uniform(0.9, 1.12);
    const double f0_slope = rng.uniform(-0.25, 0.25); // relative change over the syllable
    const double level = rng.uniform(0.6, 1.0);
    double phase = 0.0;
    for (int64_t i = 0; i < len && pos + i < n; ++i) {
      const double u = double(i) / double(len);
      const double f0 = f0_start * (1.0 + f0_slope * u) *
                        (1.0 + 0.01 * std::sin(kTwoPi * 5.5 * double(i) / sr));
      phase += kTwoPi * f0 / sr;
      const double env = level * std::pow(std::sin(std::numbers::pi * u), 0.6);
      double acc = 0.0;
      for (int h = 1; h * f0 < 7000.0; ++h)
        acc += formant_gain(h * f0, v, formant_scale) / std::sqrt(double(h)) *
               std::sin(double(h) * phase);
      y[size_t(pos + i)] += env * acc;
    }
    pos += len + int64_t(rng.uniform(0.03, 0.09) * sr);
  }
  double peak = 0.0;
  for (double v : y)
    peak = std::max(peak, std::abs(v));
  if (peak > 0.0)
    for (double& v : y)
      v *= 0.6 / peak;
  return y;
}

std::vector<double> synth_background(int index, double seconds, Rng& rng) {
  const int64_t n = int64_t(seconds * dsp::kSampleRate);
  const double sr = dsp::kSampleRate;
  std::vector<double> y(size_t(n), 0.0);

  // coloured noise bed
  double lp1 = 0.0, lp2 = 0.0;
  const double a1 = rng.uniform(0.85, 0.97), a2 = rng.uniform(0.3, 0.6);
  const double bed = rng.uniform(0.4, 0.8);
  for (int64_t i = 0; i < n; ++i) {
    const double w = rng.normal();
    lp1 = a1 * lp1 + (1.0 - a1) * w;
    lp2 = a2 * lp2 + (1.0 - a2) * w;
    y[size_t(i)] += bed * (3.0 * lp1 + 0.3 * lp2);
  }

  // low drone with a slow tremolo
  const double root = 55.0 * std::pow(2.0, double(index % 7) / 12.0);
  const double drone = rng.uniform(0.2, 0.4);
  for (int64_t i = 0; i < n; ++i) {
    const double t = double(i) / sr;
    const double trem = 1.0 + 0.3 * std::sin(kTwoPi * 0.7 * t);
    y[size_t(i)] += drone * trem *
                    (std::sin(kTwoPi * root * t) + 0.5 * std::sin(kTwoPi * 2 * root * t) +
                     0.25 * std::sin(kTwoPi * 3 * root * t));
  }

  // percussion: decaying high-passed noise bursts on a beat grid
  const double bpm = rng.uniform(100.0, 150.0);
  const int64_t beat = int64_t(60.0 / bpm * sr);
  const double hit = rng.uniform(0.6, 1.0);
  double prev = 0.0;
  for (int64_t start = int64_t(rng.uniform(0.0, 0.2) * sr); start < n; start += beat) {
    for (int64_t i = 0; i < int64_t(0.08 * sr) && start + i < n; ++i) {
      const double w = rng.normal();
      const double hp = w - prev;
      prev = w;
      y[size_t(start + i)] += hit * hp * std::exp(-double(i) / (0.015 * sr));
    }
  }

  double peak = 0.0;
  for (double v : y)
    peak = std::max(peak, std::abs(v));
  if (peak > 0.0)
    for (double& v : y)
      v *= 0.5 / peak;
  return y;
}

dsp::Waveform to_waveform(const std::vector<double>& y) {
  auto t = torch::from_blob(const_cast<double*>(y.data()), {int64_t(y.size())},
                            torch::kDouble)
               .to(torch::kFloat32);
  return {t, dsp::kSampleRate};
}

} // namespace

const dsp::Waveform& ToyCorpus::audio_of(const std::string& utterance_id) const {
  for (size_t i = 0; i < manifest.records.size(); ++i)
    if (manifest.records[i].utterance_id == utterance_id)
      return audio[i];
  throw DataError("toy corpus: no utterance '" + utterance_id + "'");
}

ToyCorpus make_toy_corpus(const ToyCorpusOptions& opts) {
  if (opts.speakers < 1 || opts.utterances_per_speaker < 1 || opts.backgrounds < 1 ||
      !(opts.seconds > 0.1))
    throw ConfigError("toy corpus: invalid sizes");
  ToyCorpus c;
  Rng rng(opts.seed);
  for (int s = 0; s < opts.speakers; ++s) {
    const std::string spk = "spk" + std::to_string(s);
    for (int u = 0; u < opts.utterances_per_speaker; ++u) {
      const std::string id = spk + "_utt" + std::to_string(u);
      Rng local(rng.next());
      c.manifest.records.push_back({id, "audio/" + id + ".wav", spk, Kind::speech});
      c.audio.push_back(to_waveform(synth_speech(s, opts.seconds, local)));
    }
  }
  for (int b = 0; b < opts.backgrounds; ++b) {
    const std::string id = "bg" + std::to_string(b);
    Rng local(rng.next());
    c.manifest.records.push_back({id, "audio/" + id + ".wav", "", Kind::background});
    c.audio.push_back(to_waveform(synth_background(b, opts.seconds + 1.0, local)));
  }
  return c;
}

void write_toy_corpus(const fs::path& dir, const ToyCorpus& corpus) {
  for (size_t i = 0; i < corpus.manifest.records.size(); ++i)
    audio::write_wav(dir / corpus.manifest.records[i].audio_path, corpus.audio[i]);
  corpus.manifest.of_kind(Kind::speech).save(dir / "speech.jsonl");
  corpus.manifest.of_kind(Kind::background).save(dir / "background.jsonl");
}

std::vector<TrainingExample> toy_training_set(const ToyCorpus& corpus, uint64_t seed,
                                              double snr_min, double snr_max) {
  auto speech = corpus.manifest.of_kind(Kind::speech);
  auto background = corpus.manifest.of_kind(Kind::background);
  if (background.empty())
    throw DataError("toy corpus: no backgrounds");
  Rng rng(seed);
  std::vector<TrainingExample> out;
  for (const auto& s : speech.records) {
    const auto& b = background.records[rng.below(background.size())];
    const auto& sw = corpus.audio_of(s.utterance_id);
    const auto& bw = corpus.audio_of(b.utterance_id);
    MixSpec spec;
    spec.speech_id = s.utterance_id;
    spec.background_id = b.utterance_id;
    spec.snr_db = rng.uniform(snr_min, snr_max);
    spec.background_offset =
        bw.size() >= sw.size() ? int64_t(rng.below(uint64_t(bw.size() - sw.size() + 1))) : 0;
    spec.rng_seed = rng.next();
    auto ex = mix_at_snr(sw, bw, spec);
    ex.speaker_id = s.speaker_id;
    out.push_back(std::move(ex));
  }
  return out;
}

} // namespace bgvc::data
