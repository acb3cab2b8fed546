#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "hexsynth/audio.hpp"
#include "hexsynth/tensor.hpp"

namespace hexsynth {

// ---- scaling -------------------------------------------------------------

double midi_from_hz(double hz);
double hz_from_midi(double midi);

// MIDI-spaced F0 scale: 35 Hz -> 0, 1200 Hz -> 1. Throws RangeError outside
// [35, 1200] Hz.
double scale_f0(double hz);
// Same map on a MIDI number, without range checks.
double scale_f0_midi(double midi);
// Inverse of scale_f0_midi.
double unscale_f0_midi(double unit);
double unscale_f0(double unit);  // -> Hz
// Width of one semitone on the unit F0 scale.
double f0_unit_per_semitone();

// -80 dB -> 0, 0 dB -> 1, clipped.
double scale_loudness(double db);
double scale_centroid(double centroid_hz, double sample_rate);

// min(floor(value * n_bins), n_bins - 1). Negative values throw RangeError.
int quantize(double value, int n_bins);
// Bin center (bin + 0.5) / n_bins.
double dequantize(int bin, int n_bins);

// A-weighting gain in dB, normalized to ~0 dB at 1 kHz.
double a_weighting_db(double freq_hz);

// ---- contours ------------------------------------------------------------

inline constexpr int kAnalysisWindow = 2048;

// Number of 128 Hz feature frames covering n samples at 48 kHz.
std::size_t frames_for_samples(std::size_t n_samples);

// Per-frame A-weighted loudness in dB (clipped to [-80, 0]); frame t is
// centered on sample t * 375 with a 2048-sample Hann window. A full-scale
// sinusoid reads 0 dB before weighting.
std::vector<double> loudness_db(const AudioBuffer& audio);
// Frames [first, first + count) only.
std::vector<double> loudness_db(const AudioBuffer& audio, std::size_t first, std::size_t count);
// loudness_db followed by scale_loudness.
std::vector<double> extract_loudness(const AudioBuffer& audio);
// Per-frame magnitude spectral centroid divided by Nyquist; silent frames 0.
std::vector<double> extract_centroid(const AudioBuffer& audio);

struct PitchContour {
  std::vector<double> f0_hz;
  std::vector<double> f0_unit;
  std::vector<double> periodicity;
};

// Normalized-autocorrelation pitch tracker (McLeod-style key-maximum picking
// with parabolic interpolation) over 2048-sample frames at hop 375. The
// periodicity is the normalized autocorrelation at the chosen lag, in [0, 1].
PitchContour estimate_f0_periodicity(const AudioBuffer& audio);

// ---- per-string feature tensors -------------------------------------------

// f0, l, p, c contours, each (6, n_frames).
struct ControlFeatures {
  Mat f0;
  Mat l;
  Mat p;
  Mat c;

  ControlFeatures() = default;
  explicit ControlFeatures(Eigen::Index n_frames);

  Eigen::Index n_frames() const { return f0.cols(); }
  // Checks shapes, finiteness and ranges; throws ValidationError.
  void validate() const;
  // Frames [start, start + count).
  ControlFeatures slice(Eigen::Index start, Eigen::Index count) const;
};

// Quantized features, stored as the index of the single hot bin per
// (string, frame); row index string * n_frames + frame.
struct QuantizedControlFeatures {
  Eigen::Index n_frames = 0;
  std::vector<int> f0;  // 305 bins
  std::vector<int> l;   // 64 bins
  std::vector<int> p;
  std::vector<int> c;

  // Dense one-hot (6 * n_frames, n_bins) views.
  Mat one_hot_f0() const;
  Mat one_hot_l() const;
  Mat one_hot_p() const;
  Mat one_hot_c() const;
};

QuantizedControlFeatures quantize_features(const ControlFeatures& f);

// Extracts all four contours from per-string (hexaphonic) audio.
ControlFeatures extract_features(const MultiChannelAudio& strings);
void extract_string_features(const AudioBuffer& audio, int string, ControlFeatures& out);

// Binary feature cache: magic, version, shape and frame-rate header followed
// by little-endian doubles. Round trips are bit-exact.
void write_feature_cache(const std::filesystem::path& path, const ControlFeatures& f);
ControlFeatures read_feature_cache(const std::filesystem::path& path);

}  // namespace hexsynth
