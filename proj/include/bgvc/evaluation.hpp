#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>
#include <torch/types.h>

#include "bgvc/data.hpp"
#include "bgvc/dsp.hpp"

namespace bgvc::eval {

/// Reported ceiling for SI-SDR so perfect estimates stay finite in tables.
inline constexpr double kSiSdrCap = 100.0;

/// Scale-invariant SDR in dB, computed in double precision. Returns +inf
/// when the residual is numerically zero. Throws DataError on a silent
/// reference or a length mismatch.
double si_sdr(const torch::Tensor& est, const torch::Tensor& ref);
double si_sdr(const dsp::Waveform& est, const dsp::Waveform& ref);
/// Clamped to [-cap, cap].
inline double capped(double db) {
  return db > kSiSdrCap ? kSiSdrCap : (db < -kSiSdrCap ? -kSiSdrCap : db);
}

struct ReportRow {
  std::string system;
  std::string utterance_id; // "mean" on aggregate rows
  std::string target;       // "speech" | "background"
  double si_sdr_db = 0.0;   // capped
  std::optional<double> pesq;
};

/// Per-utterance rows plus aggregate means per (system, target).
struct EvalReport {
  std::vector<ReportRow> rows;
  bool has_pesq = false;

  std::vector<ReportRow> aggregate() const;
  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);

  /// Columns: system,utterance_id,target,si_sdr_db[,pesq]; per-utterance
  /// rows first, then the aggregate rows.
  void write_csv(const std::filesystem::path& path) const;
  void write_json(const std::filesystem::path& path) const;
};

/// Reference-vs-degraded quality score for two WAV files.
using PesqScorer =
    std::function<double(const std::filesystem::path& ref, const std::filesystem::path& deg)>;

/// Runs `command` through the shell once per pair. The command reads two
/// lines on stdin (reference WAV path, then degraded WAV path) and prints one
/// number on stdout. Non-zero exit or unparsable output throws DataError.
PesqScorer external_scorer(const std::string& command);

/// Mixture -> (estimated speech, estimated background).
using SourceEstimator =
    std::function<std::pair<dsp::Waveform, dsp::Waveform>(const dsp::Waveform& mix)>;

struct EvalOptions {
  std::string system = "proposed";
  PesqScorer pesq;
  /// Where estimates are written when a PESQ scorer needs files.
  std::optional<std::filesystem::path> scratch_dir;
};

/// Scores estimated speech against clean speech and estimated background
/// against the reference background, one row per utterance and target.
EvalReport evaluate(const std::vector<data::ExampleRecord>& manifest,
                    const SourceEstimator& estimator, const EvalOptions& opts = {});

/// Loads a training checkpoint, separates every mixture of `eval_manifest`
/// and writes report.csv / report.json under `out_dir`.
EvalReport evaluate_system(const std::filesystem::path& checkpoint,
                           const std::filesystem::path& eval_manifest,
                           const std::filesystem::path& out_dir, const EvalOptions& opts = {});

struct FigureOptions {
  int mel_width = 640;
  int mel_height = 240;
  int plot_width = 640;
  int plot_height = 360;
};

/// Waveforms rendered as mel panels; any of them may be left undefined.
struct MelPanels {
  std::string utterance_id;
  dsp::Waveform mix, separated_speech, separated_background, converted, recomposed;
};

struct FigureManifest {
  std::vector<std::string> emitted; // file names relative to out_dir
  std::vector<std::pair<std::string, std::string>> omitted; // (figure, reason)
  nlohmann::json to_json() const;
};

/// Loss curve per logged term (loss_<term>.svg), per-utterance SI-SDR bars
/// (si_sdr.svg) and mel panels (mel_<utterance>_<panel>.png), plus
/// figures.json listing what was and was not emitted. Throws DataError on an
/// empty training log.
FigureManifest emit_figures(const std::filesystem::path& training_log, const EvalReport& report,
                            const std::vector<MelPanels>& panels,
                            const std::filesystem::path& out_dir,
                            const FigureOptions& opts = {}, const dsp::MelParams& mel = {},
                            const dsp::FrameParams& frames = {});

/// Colour-mapped PNG of a [rows, cols] array, flipped so row 0 is at the
/// bottom, resampled to width x height.
void write_heatmap_png(const std::filesystem::path& path, const torch::Tensor& values, int width,
                       int height);

} // namespace bgvc::eval
