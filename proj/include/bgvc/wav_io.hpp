#pragma once

#include <filesystem>

#include "bgvc/dsp.hpp"

namespace bgvc::audio {

struct ReadOptions {
  /// Resample anything that is not 16 kHz instead of rejecting it.
  bool resample = false;
};

/// Reads a mono 16-bit PCM WAV file as float32 samples in [-1, 1).
/// Throws DataError for other encodings, channel counts, or (without
/// `resample`) sample rates.
dsp::Waveform read_wav(const std::filesystem::path& path, ReadOptions opts = {});

/// Writes mono 16-bit PCM, rounding to nearest and clipping to [-1, 1].
void write_wav(const std::filesystem::path& path, const dsp::Waveform& w);

/// Band-limited (Hann-windowed sinc) sample-rate conversion.
dsp::Waveform resample(const dsp::Waveform& w, int target_rate);

} // namespace bgvc::audio
