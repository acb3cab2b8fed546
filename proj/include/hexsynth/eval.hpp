#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "hexsynth/audio.hpp"
#include "hexsynth/features.hpp"
#include "hexsynth/midi_io.hpp"
#include "hexsynth/models.hpp"

namespace hexsynth {

// ---- spectral distance ------------------------------------------------------------

struct WindowedMssl {
  std::vector<double> windows;
  double mean = 0.0;
};

// Non-overlapping windows; a trailing partial window is dropped unless the
// clip is shorter than one window, in which case the whole clip is used.
WindowedMssl eval_mssl(const AudioBuffer& natural, const AudioBuffer& rendered, double window_s = 8.0);

// ---- pitch accuracy -----------------------------------------------------------------

enum class PitchReference {
  kEstimated,  // semitones estimated from the natural string audio
  kMidi,       // semitones of the input notes
};

// Nearest MIDI semitone per frame of every string, ties to even.
std::vector<std::vector<double>> estimate_semitones(const MultiChannelAudio& strings);

// Fraction of frames with an active note where the semitone estimated from
// the rendered string equals the reference semitone. Absent when no frame is
// active. natural is required for kEstimated.
std::optional<double> pitch_accuracy(const MultiChannelAudio& rendered, const StringwiseMidiInput& midi,
                                     PitchReference reference, const MultiChannelAudio* natural = nullptr);

// Same comparison on (6, T) unit F0 contours instead of audio.
std::optional<double> contour_pitch_accuracy(const Mat& f0_unit, const StringwiseMidiInput& midi);

// ---- plots ------------------------------------------------------------------------

struct PlotSeries {
  std::string label;
  std::string points;  // SVG polyline points, one run per voiced stretch joined by ';'
};

struct F0Plot {
  double duration_s = 0.0;
  double midi_low = 0.0, midi_high = 0.0;
  std::vector<PlotSeries> series;

  std::string to_svg() const;
};

struct F0Curve {
  std::string label;
  std::vector<double> midi;  // per frame; NaN where unvoiced
};

// Predicted curves, the target and the input MIDI of one string, plus the
// input MIDI of its neighbours.
F0Plot f0_plot(const std::vector<F0Curve>& predictions, const std::vector<double>& target_midi,
               const StringwiseMidiInput& midi, int string_index);
void plot_f0_comparison(const std::filesystem::path& path, const std::vector<F0Curve>& predictions,
                        const std::vector<double>& target_midi, const StringwiseMidiInput& midi, int string_index);

// (6, T) unit contour row -> MIDI numbers
std::vector<double> contour_midi(const Mat& f0_unit, int string_index);

// ---- reports --------------------------------------------------------------------

struct RecordingEval {
  std::string id;
  std::vector<double> mssl_windows;
  double mssl_mean = 0.0;
  std::optional<double> crepe_acc;
  std::optional<double> midi_acc;
};

struct EvalReport {
  std::string system;
  std::string checkpoint;
  std::string split;
  std::vector<RecordingEval> recordings;
  double mssl_mean = 0.0;
  std::optional<double> crepe_acc;
  std::optional<double> midi_acc;

  // Means over recordings; absent accuracies are left out.
  void aggregate();
  nlohmann::json to_json() const;
  std::string table() const;
};

// ---- bleed experiment --------------------------------------------------------------

struct BleedConfig {
  double corruption_rate = 0.3;
  int n_train = 24;
  int n_test = 6;
  double clip_s = 2.0;
  int steps = 400;
  int batch_size = 2;
  double learning_rate = 1e-3;
  ModelConfig model = ModelConfig::desk();
};

struct BleedReport {
  double corruption_rate = 0.0;
  double rg_accuracy = 0.0;
  double cl_accuracy = 0.0;
  long long test_frames = 0;

  nlohmann::json to_json() const;
};

// Two neighbouring strings play at least three semitones apart. Target F0
// jumps to the neighbour's pitch in random bursts covering corruption_rate of
// the frames; rg and cl control models learn from the corrupted targets and
// are scored against the input MIDI on held-out clips.
BleedReport bleed_experiment(std::uint64_t seed, const BleedConfig& cfg = {});

}  // namespace hexsynth
