#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "hexsynth/audio.hpp"
#include "hexsynth/tensor.hpp"

namespace hexsynth {

// Synthesizer controls for all six strings. H and N hold one row per
// (string, frame); a is (6, n_frames).
struct SynthesisParams {
  Mat H;  // (6 * T, 128) harmonic distribution
  Mat a;  // (6, T) global harmonic amplitude
  Mat N;  // (6 * T, 128) noise band amplitudes

  Eigen::Index n_frames() const { return a.cols(); }
  static SynthesisParams zeros(Eigen::Index n_frames);
  void validate() const;  // shapes, finiteness, non-negativity
  SynthesisParams slice(Eigen::Index start, Eigen::Index count) const;
};

// One trainable 0.25 s impulse response per string.
struct ReverbBank {
  Mat ir;  // (6, 12000)

  static ReverbBank zeros();
  // uniform(-1e-4, 1e-4)
  static ReverbBank random_init(std::uint64_t seed);
  void validate() const;
};

// Linear interpolation between frame centers (frame t at sample t * 375);
// the last frame is held. Output length n_frames * 375.
std::vector<double> upsample_controls(std::span<const double> frames);
Mat upsample_controls(const Mat& frames);  // (T, d) -> (T * 375, d)

// Additive oscillator bank for one string. Harmonics at or above Nyquist are
// zeroed per frame and the rest renormalized to sum to one before scaling by a.
AudioBuffer harmonic_synth(std::span<const double> f0_unit, const Mat& H, std::span<const double> a);

struct HarmonicGrad {
  Mat dH;                 // (T, 128)
  std::vector<double> da; // (T)
};
// Vector-Jacobian product of harmonic_synth with respect to H and a.
HarmonicGrad harmonic_synth_backward(std::span<const double> f0_unit, const Mat& H, std::span<const double> a,
                                     std::span<const double> grad_out);

// Same, with the fundamental given directly in Hz.
AudioBuffer harmonic_synth_hz(std::span<const double> f0_hz, const Mat& H, std::span<const double> a);
HarmonicGrad harmonic_synth_backward_hz(std::span<const double> f0_hz, const Mat& H, std::span<const double> a,
                                        std::span<const double> grad_out);
std::vector<double> f0_unit_to_hz(std::span<const double> f0_unit);

// Seeded uniform white noise in [-1, 1).
std::vector<double> white_noise(std::size_t n, std::uint64_t seed);

// Filtered noise for one string: each frame applies a zero-phase filter whose
// response is the 128-band envelope (bands uniform over 0-24 kHz, linearly
// interpolated across FFT bins) to a Hann-windowed noise segment; segments
// are overlap-added at hop 375.
AudioBuffer noise_synth(const Mat& N, std::size_t n_samples, std::uint64_t seed);
Mat noise_synth_backward(const Mat& N, std::size_t n_samples, std::uint64_t seed, std::span<const double> grad_out);

// dry + (dry * ir), truncated to the dry length.
AudioBuffer reverb_apply(const AudioBuffer& dry, std::span<const double> ir);

struct ReverbGrad {
  std::vector<double> d_dry;
  std::vector<double> d_ir;
};
ReverbGrad reverb_backward(std::span<const double> dry, std::span<const double> ir, std::span<const double> grad_out);

// Elementwise sum; throws ShapeError on length mismatch.
AudioBuffer mix_voices(std::span<const AudioBuffer> per_string);

struct SynthOutput {
  AudioBuffer mixture;
  std::vector<AudioBuffer> strings;  // post-reverb, one per string
};

// Per string: reverb(harmonic + noise); the mixture is their sum.
SynthOutput synthesize(const SynthesisParams& params, const Mat& f0_unit, const ReverbBank& reverb,
                       std::uint64_t noise_seed);

struct SynthGrad {
  Mat dH;
  Mat da;
  Mat dN;
  Mat d_ir;
};
// Gradient of <grad_mixture, mixture> with respect to H, a, N and the IRs.
SynthGrad synthesize_backward(const SynthesisParams& params, const Mat& f0_unit, const ReverbBank& reverb,
                              std::uint64_t noise_seed, std::span<const double> grad_mixture);

// ---- long-form rendering ----------------------------------------------------

struct RenderConfig {
  double window_s = 8.0;
  double hop_s = 4.0;
  double crossfade_s = 0.1;
  // Crossfade start measured from the start of the overlap region; the
  // default places it at local time 6.0 s of the earlier window.
  double crossfade_offset_s = 2.0;
};

struct RenderWindow {
  Eigen::Index start_frame;
  Eigen::Index n_frames;
};

struct Crossfade {
  std::size_t start_sample;  // global
  std::size_t length;
};

struct RenderPlan {
  std::vector<RenderWindow> windows;
  std::vector<Crossfade> crossfades;  // crossfades[k] joins windows k and k+1
  std::size_t total_samples = 0;
};

RenderPlan plan_windows(Eigen::Index total_frames, const RenderConfig& cfg = {});

// Produces the audio for one window: (first frame, frame count, window index).
using WindowSynth = std::function<AudioBuffer(Eigen::Index, Eigen::Index, std::size_t)>;

AudioBuffer render_windowed(Eigen::Index total_frames, const WindowSynth& synth, const RenderConfig& cfg = {});

}  // namespace hexsynth
