#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hexsynth/audio.hpp"
#include "hexsynth/tensor.hpp"

namespace hexsynth {

// One note on one string. Pitch is a continuous MIDI number.
struct NoteEvent {
  int string_index = 0;
  double onset_s = 0.0;
  double offset_s = 0.0;
  double pitch_midi = 0.0;
  std::optional<double> velocity;  // unit scale; filled by velocity_proxy when absent

  bool operator==(const NoteEvent&) const = default;
};

using NoteEventList = std::vector<NoteEvent>;

std::string describe(const NoteEvent& note);

// Sorts by (string, onset) and checks field ranges and same-string overlap.
// Throws ValidationError naming the offending note(s).
void validate_and_sort(NoteEventList& notes);

// JSON-lines notes or a standard MIDI file (detected from the header).
NoteEventList parse_note_events(const std::filesystem::path& path);
NoteEventList parse_note_events_jsonl(std::string_view text);
// Standard MIDI file bytes. Tracks map to strings low E -> 0 ... high e -> 5;
// a leading note-less conductor track is skipped when 7 tracks are present.
// Pitch bends split a note into segments with continuous pitch.
NoteEventList parse_standard_midi(std::span<const unsigned char> bytes);

std::string serialize_note_events(const NoteEventList& notes);
void write_note_events(const std::filesystem::path& path, const NoteEventList& notes);

// String-wise one-hot conditioning at 128 Hz. Stored as the hot bin index per
// (string, frame), -1 where the string is inactive; dense views on request.
struct StringwiseMidiInput {
  Eigen::Index n_frames = 0;
  std::vector<int> pitch_bin;       // 305 bins
  std::vector<int> vel_bin;         // 64 bins
  std::vector<double> pitch_midi;   // continuous pitch of the active note, NaN if inactive
  double frame_rate_hz = kFrameRate;

  static StringwiseMidiInput silent(Eigen::Index n_frames);

  bool active(Eigen::Index string, Eigen::Index frame) const {
    return pitch_bin[static_cast<std::size_t>(row_of(string, frame, n_frames))] >= 0;
  }

  Mat x_pitch() const;  // (6 * n_frames, 305)
  Mat x_vel() const;    // (6 * n_frames, 64)
  static Mat string_one_hot();  // 6 x 6 identity

  // Frames [start, start + count); frames past the end are inactive.
  StringwiseMidiInput slice(Eigen::Index start, Eigen::Index count) const;
  // Reorders strings: output string i takes input string perm[i].
  StringwiseMidiInput permute_strings(std::span<const int> perm) const;

  bool operator==(const StringwiseMidiInput& other) const;
};

StringwiseMidiInput encode_stringwise(const NoteEventList& notes, double duration_s);

// Peak unit-scaled A-weighted loudness of the string channel over the note.
double velocity_proxy(const AudioBuffer& string_audio, const NoteEvent& note);
// Fills every missing velocity from the matching string channel.
void fill_velocities(NoteEventList& notes, const MultiChannelAudio& strings);

// Binary cache of an encoded input, bit-exact on reload.
void write_midi_cache(const std::filesystem::path& path, const StringwiseMidiInput& x);
StringwiseMidiInput read_midi_cache(const std::filesystem::path& path);

}  // namespace hexsynth
