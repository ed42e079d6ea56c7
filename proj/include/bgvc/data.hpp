#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/types.h>

#include "bgvc/dsp.hpp"
#include "bgvc/rng.hpp"

namespace bgvc::data {

enum class Kind { speech, background };

struct ManifestRecord {
  std::string utterance_id;
  std::filesystem::path audio_path;
  std::string speaker_id; // empty for backgrounds
  Kind kind = Kind::speech;
};

/// JSON-lines corpus index, one record per line:
///   {"utterance_id": ..., "audio_path": ..., "speaker_id": ..., "kind": "speech"|"background"}
/// Relative audio paths resolve against the manifest's directory.
struct Manifest {
  std::vector<ManifestRecord> records;

  /// Throws DataError on duplicate ids, malformed lines, or (when
  /// `check_paths`) missing audio files.
  static Manifest load(const std::filesystem::path& path, bool check_paths = true);
  void save(const std::filesystem::path& path) const;
  Manifest of_kind(Kind k) const;
  std::vector<std::string> speakers() const; // sorted, unique
  const ManifestRecord& find(const std::string& utterance_id) const;
  size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
};

struct MixSpec {
  std::string speech_id;
  std::string background_id;
  double snr_db = 0.0;
  int64_t background_offset = 0;
  uint64_t rng_seed = 0;
};

struct MixOptions {
  bool wrap_background = false;
  double silence_threshold = 1e-8;
};

/// mix = clean_speech + background, all equal length. When the raw sum would
/// clip, all three are scaled by `norm_scale` < 1, which leaves the SNR intact.
struct TrainingExample {
  dsp::Waveform mix;
  dsp::Waveform clean_speech;
  dsp::Waveform background; // already scaled by gain (and norm_scale)
  std::string speaker_id;
  MixSpec spec;
  double gain = 1.0;
  double norm_scale = 1.0;
};

/// Mean squared amplitude.
double power(const torch::Tensor& x);
/// 10 log10(P(speech) / P(background)).
double measured_snr_db(const torch::Tensor& speech, const torch::Tensor& background);

/// Clips the background at `spec.background_offset` to the speech length
/// (wrapping around only if allowed) and scales it so the speech-to-background
/// power ratio equals `spec.snr_db`.
TrainingExample mix_at_snr(const dsp::Waveform& speech, const dsp::Waveform& background,
                           const MixSpec& spec, const MixOptions& opts = {});

using LengthFn = std::function<int64_t(const ManifestRecord&)>;

/// Random (speech, background, SNR, offset) draws, reproducible under `seed`;
/// SNR is uniform over [snr_min, snr_max]. `length_of` defaults to reading
/// the audio file.
std::vector<MixSpec> sample_mixes(const Manifest& speech, const Manifest& background,
                                  size_t n, double snr_min, double snr_max, uint64_t seed,
                                  const LengthFn& length_of = {},
                                  bool wrap_background = false);

struct BatchOptions {
  int64_t crop_samples = 8192; // <= 0: use the full (common) length
  bool pad_short = true;       // zero-pad the tail of short examples
  dsp::FrameParams frames;
  dsp::MelParams mel;
};

struct Batch {
  torch::Tensor mix, clean, background; // [B, L]
  torch::Tensor mix_spec, clean_spec, background_spec; // complex [B, T, F]
  torch::Tensor mix_mel, clean_mel;     // log mel [B, T, n_mels]
  std::vector<std::string> speaker_ids;
  std::vector<int64_t> offsets; // crop start per example
};

/// Random fixed-length crops (same offset for mix / clean / background) plus
/// the spectral views the losses need.
Batch make_batch(const std::vector<const TrainingExample*>& examples,
                 const BatchOptions& opts, Rng& rng);

/// On-disk mixture record written by the mixing command:
///   {"utterance_id", "mix_path", "speech_path", "background_path",
///    "speaker_id", "mix_spec": {...}, "gain", "norm_scale"}
struct ExampleRecord {
  std::string utterance_id;
  std::filesystem::path mix_path, speech_path, background_path;
  std::string speaker_id;
  MixSpec spec;
  double gain = 1.0;
  double norm_scale = 1.0;
};

std::vector<ExampleRecord> load_example_manifest(const std::filesystem::path& path);
void save_example_manifest(const std::filesystem::path& path,
                           const std::vector<ExampleRecord>& records);
TrainingExample load_example(const ExampleRecord& r);

nlohmann::json to_json(const MixSpec& s);
MixSpec mix_spec_from_json(const nlohmann::json& j);

/// Synthetic stand-in corpus: harmonic, formant-shaped "speech" per speaker
/// and noise / drone / percussion "music" backgrounds.
struct ToyCorpusOptions {
  int speakers = 2;
  int utterances_per_speaker = 4;
  int backgrounds = 4;
  double seconds = 2.0;
  uint64_t seed = 2024;
};

struct ToyCorpus {
  Manifest manifest; // speech + background records (audio_path = "audio/<id>.wav")
  std::vector<dsp::Waveform> audio; // parallel to manifest.records
  const dsp::Waveform& audio_of(const std::string& utterance_id) const;
};

ToyCorpus make_toy_corpus(const ToyCorpusOptions& opts = {});
/// Writes <dir>/audio/*.wav, <dir>/speech.jsonl and <dir>/background.jsonl.
void write_toy_corpus(const std::filesystem::path& dir, const ToyCorpus& corpus);

/// The training set of the toy setup: each speech utterance mixed once with a
/// sampled background at a sampled SNR.
std::vector<TrainingExample> toy_training_set(const ToyCorpus& corpus, uint64_t seed,
                                              double snr_min = 0.0,
                                              double snr_max = 10.0);

} // namespace bgvc::data
