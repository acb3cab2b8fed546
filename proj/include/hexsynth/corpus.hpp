#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "hexsynth/audio.hpp"
#include "hexsynth/midi_io.hpp"

namespace hexsynth {

// One row of catalog.json.
struct CatalogEntry {
  std::string id;
  std::string player;
  std::string progression;
  std::string style;

  std::string group() const { return player + "|" + progression + "|" + style; }
  bool operator==(const CatalogEntry&) const = default;
};

// catalog.json is a JSON array of {id, player, progression, style}. A corpus
// directory without one is empty.
std::vector<CatalogEntry> read_catalog(const std::filesystem::path& corpus_dir);
void write_catalog(const std::filesystem::path& corpus_dir, const std::vector<CatalogEntry>& catalog);

// 6 players x 3 progressions x 5 styles x 2 tempos x {comp, solo}.
std::vector<CatalogEntry> guitarset_shaped_catalog();

// <corpus>/<id>/{mix.wav, strings.wav, notes.jsonl}
struct RecordingFiles {
  std::filesystem::path mix, strings, notes;
};
RecordingFiles recording_files(const std::filesystem::path& corpus_dir, const std::string& id);

struct SourceRecording {
  std::string id;
  NoteEventList notes;
  MultiChannelAudio strings;
  AudioBuffer mix;
};

SourceRecording load_source_recording(const std::filesystem::path& corpus_dir, const std::string& id);
void write_source_recording(const std::filesystem::path& corpus_dir, const SourceRecording& rec);

// ---- synthetic material ------------------------------------------------------------

struct SyntheticConfig {
  double duration_s = 2.0;
  // Probability that a string plays at all.
  double string_activity = 0.8;
  double min_note_s = 0.25;
  double max_note_s = 0.8;
  double max_gap_s = 0.3;
};

// Decaying harmonic plucks in standard tuning, one voice per string; the
// mix is the plain sum of the string channels.
SourceRecording synthetic_recording(const std::string& id, std::uint64_t seed, const SyntheticConfig& cfg = {});

// One pluck sampled at 48 kHz, velocity in [0, 1].
std::vector<double> pluck(double hz, double velocity, double duration_s, std::uint64_t seed);

// Writes n synthetic recordings plus a catalog cycling over players,
// progressions and styles.
std::vector<CatalogEntry> write_demo_corpus(const std::filesystem::path& corpus_dir, int n_recordings,
                                            std::uint64_t seed, const SyntheticConfig& cfg = {});

inline constexpr int kOpenStringMidi[kNumStrings] = {40, 45, 50, 55, 59, 64};

}  // namespace hexsynth
