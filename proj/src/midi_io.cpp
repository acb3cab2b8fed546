#include "hexsynth/midi_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <sstream>

#include "hexsynth/binary_io.hpp"
#include "hexsynth/features.hpp"
#include "json.hpp"

namespace hexsynth {

using nlohmann::json;

std::string describe(const NoteEvent& n) {
  std::ostringstream os;
  os << "note(string " << n.string_index << ", " << n.onset_s << "-" << n.offset_s << " s, pitch " << n.pitch_midi
     << ")";
  return os.str();
}

void validate_and_sort(NoteEventList& notes) {
  for (const auto& n : notes) {
    if (n.string_index < 0 || n.string_index >= kNumStrings)
      throw ValidationError(describe(n) + ": string index outside [0, 6)");
    if (!std::isfinite(n.onset_s) || !std::isfinite(n.offset_s) || !std::isfinite(n.pitch_midi))
      throw ValidationError(describe(n) + ": non-finite field");
    if (n.onset_s < 0.0) throw ValidationError(describe(n) + ": negative onset");
    if (!(n.offset_s > n.onset_s)) throw ValidationError(describe(n) + ": offset must be after onset");
    if (n.velocity && !(*n.velocity >= 0.0 && *n.velocity <= 1.0))
      throw ValidationError(describe(n) + ": velocity outside [0, 1]");
  }
  std::stable_sort(notes.begin(), notes.end(), [](const NoteEvent& a, const NoteEvent& b) {
    if (a.string_index != b.string_index) return a.string_index < b.string_index;
    return a.onset_s < b.onset_s;
  });
  for (std::size_t i = 1; i < notes.size(); ++i) {
    const auto& a = notes[i - 1];
    const auto& b = notes[i];
    if (a.string_index == b.string_index && b.onset_s < a.offset_s)
      throw ValidationError("overlapping notes on the same string: " + describe(a) + " and " + describe(b));
  }
}

NoteEventList parse_note_events_jsonl(std::string_view text) {
  NoteEventList notes;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) {
      if (end == text.size()) break;
      continue;
    }
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("malformed note record: ") + e.what(), line_no);
    }
    if (!rec.is_object()) throw ParseError("note record must be a JSON object", line_no);
    NoteEvent n;
    try {
      const auto& s = rec.at("string");
      if (!s.is_number_integer()) throw ParseError("\"string\" must be an integer", line_no);
      n.string_index = s.get<int>();
      n.onset_s = rec.at("onset").get<double>();
      n.offset_s = rec.at("offset").get<double>();
      n.pitch_midi = rec.at("pitch").get<double>();
      if (auto it = rec.find("velocity"); it != rec.end() && !it->is_null()) n.velocity = it->get<double>();
    } catch (const json::exception& e) {
      throw ParseError(std::string("malformed note record: ") + e.what(), line_no);
    }
    notes.push_back(n);
    if (end == text.size()) break;
  }
  validate_and_sort(notes);
  return notes;
}

namespace {

class SmfReader {
 public:
  explicit SmfReader(std::span<const unsigned char> b) : b_(b) {}

  bool done() const { return pos_ >= b_.size(); }
  std::size_t pos() const { return pos_; }
  void seek(std::size_t p) { pos_ = p; }

  std::uint8_t u8() {
    need(1);
    return b_[pos_++];
  }
  std::uint8_t peek() const {
    if (pos_ >= b_.size()) throw ParseError("MIDI: unexpected end of data");
    return b_[pos_];
  }
  std::uint32_t be(int n) {
    std::uint32_t v = 0;
    for (int i = 0; i < n; ++i) v = (v << 8) | u8();
    return v;
  }
  std::uint32_t varlen() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      const std::uint8_t c = u8();
      v = (v << 7) | (c & 0x7F);
      if (!(c & 0x80)) return v;
    }
    throw ParseError("MIDI: variable-length quantity too long at byte " + std::to_string(pos_));
  }
  std::string tag() {
    need(4);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), 4);
    pos_ += 4;
    return s;
  }
  void skip(std::size_t n) {
    need(n);
    pos_ += n;
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw ParseError("MIDI: unexpected end of data at byte " + std::to_string(pos_));
  }
  std::span<const unsigned char> b_;
  std::size_t pos_ = 0;
};

struct RawEvent {
  std::uint64_t tick;
  int order;  // stable order within a track
  std::uint8_t status;
  std::uint8_t d1;
  std::uint8_t d2;
};

struct TempoChange {
  std::uint64_t tick;
  double us_per_quarter;
};

class TempoMap {
 public:
  TempoMap(std::vector<TempoChange> changes, int division) : division_(division) {
    std::stable_sort(changes.begin(), changes.end(), [](auto& a, auto& b) { return a.tick < b.tick; });
    double secs = 0.0;
    std::uint64_t tick = 0;
    double tempo = 500000.0;
    for (const auto& c : changes) {
      secs += static_cast<double>(c.tick - tick) * tempo / (1e6 * division_);
      tick = c.tick;
      tempo = c.us_per_quarter;
      points_.push_back({tick, secs, tempo});
    }
    if (points_.empty() || points_.front().tick != 0) points_.insert(points_.begin(), {0, 0.0, 500000.0});
  }

  double seconds(std::uint64_t tick) const {
    auto it = std::upper_bound(points_.begin(), points_.end(), tick, [](std::uint64_t t, const Point& p) {
      return t < p.tick;
    });
    const Point& p = *std::prev(it);
    return p.secs + static_cast<double>(tick - p.tick) * p.tempo / (1e6 * division_);
  }

 private:
  struct Point {
    std::uint64_t tick;
    double secs;
    double tempo;
  };
  int division_;
  std::vector<Point> points_;
};

struct TrackData {
  std::vector<RawEvent> events;
  bool has_notes = false;
};

TrackData read_track(SmfReader& r, std::size_t end, std::vector<TempoChange>& tempos) {
  TrackData td;
  std::uint64_t tick = 0;
  std::uint8_t running = 0;
  int order = 0;
  while (r.pos() < end) {
    tick += r.varlen();
    std::uint8_t status = r.peek();
    if (status & 0x80) {
      r.u8();
    } else {
      if (running == 0) throw ParseError("MIDI: data byte without running status at byte " + std::to_string(r.pos()));
      status = running;
    }
    if (status == 0xFF) {
      const std::uint8_t type = r.u8();
      const std::uint32_t len = r.varlen();
      if (type == 0x51 && len == 3) {
        tempos.push_back({tick, static_cast<double>(r.be(3))});
      } else {
        r.skip(len);
      }
      if (type == 0x2F) break;
      continue;
    }
    if (status == 0xF0 || status == 0xF7) {
      r.skip(r.varlen());
      continue;
    }
    running = status;
    const std::uint8_t kind = status & 0xF0;
    const std::uint8_t d1 = r.u8();
    const std::uint8_t d2 = (kind == 0xC0 || kind == 0xD0) ? 0 : r.u8();
    if (kind == 0x80 || kind == 0x90) td.has_notes = true;
    td.events.push_back({tick, order++, status, d1, d2});
  }
  r.seek(end);
  return td;
}

// Converts one monophonic track into note segments on `string`.
void track_to_notes(const TrackData& td, int string, const TempoMap& tempo, NoteEventList& out) {
  std::array<double, 16> bend{};            // semitones
  std::array<double, 16> bend_range;        // semitones
  std::array<int, 16> rpn_msb, rpn_lsb;
  bend_range.fill(2.0);
  rpn_msb.fill(127);
  rpn_lsb.fill(127);

  struct Active {
    int key = -1;
    int channel = 0;
    double velocity = 0.0;
    double start = 0.0;
  } active;

  auto close = [&](double t) {
    if (active.key < 0) return;
    if (t > active.start) {
      NoteEvent n;
      n.string_index = string;
      n.onset_s = active.start;
      n.offset_s = t;
      n.pitch_midi = active.key + bend[active.channel];
      n.velocity = active.velocity;
      out.push_back(n);
    }
  };

  for (const auto& e : td.events) {
    const double t = tempo.seconds(e.tick);
    const int ch = e.status & 0x0F;
    const std::uint8_t kind = e.status & 0xF0;
    if (kind == 0x90 && e.d2 > 0) {
      close(t);
      active = {e.d1, ch, e.d2 / 127.0, t};
    } else if (kind == 0x80 || (kind == 0x90 && e.d2 == 0)) {
      if (active.key == e.d1 && active.channel == ch) {
        close(t);
        active.key = -1;
      }
    } else if (kind == 0xE0) {
      const int value = (e.d2 << 7) | e.d1;
      const double semis = (value - 8192) / 8192.0 * bend_range[ch];
      if (active.key >= 0 && active.channel == ch && semis != bend[ch]) {
        close(t);
        active.start = t;
      }
      bend[ch] = semis;
    } else if (kind == 0xB0) {
      if (e.d1 == 101) rpn_msb[ch] = e.d2;
      if (e.d1 == 100) rpn_lsb[ch] = e.d2;
      if (e.d1 == 6 && rpn_msb[ch] == 0 && rpn_lsb[ch] == 0) bend_range[ch] = e.d2;
    }
  }
  if (active.key >= 0) {
    const double t = td.events.empty() ? active.start : tempo.seconds(td.events.back().tick);
    close(t);
  }
}

}  // namespace

NoteEventList parse_standard_midi(std::span<const unsigned char> bytes) {
  SmfReader r(bytes);
  if (r.tag() != "MThd") throw ParseError("MIDI: missing MThd header");
  const std::uint32_t header_len = r.be(4);
  if (header_len < 6) throw ParseError("MIDI: short header");
  r.be(2);  // format
  const std::uint32_t n_tracks = r.be(2);
  const std::uint32_t division = r.be(2);
  r.skip(header_len - 6);
  if (division & 0x8000) throw ParseError("MIDI: SMPTE time division is not supported");
  if (division == 0) throw ParseError("MIDI: zero time division");

  std::vector<TempoChange> tempos;
  std::vector<TrackData> tracks;
  while (!r.done() && tracks.size() < n_tracks) {
    const std::string tag = r.tag();
    const std::uint32_t len = r.be(4);
    const std::size_t end = r.pos() + len;
    if (end > bytes.size()) throw ParseError("MIDI: track chunk overruns file");
    if (tag != "MTrk") {
      r.seek(end);
      continue;
    }
    tracks.push_back(read_track(r, end, tempos));
  }

  std::size_t first = 0;
  if (tracks.size() == kNumStrings + 1 && !tracks.front().has_notes) first = 1;
  if (tracks.size() - first > kNumStrings) {
    for (std::size_t i = first + kNumStrings; i < tracks.size(); ++i)
      if (tracks[i].has_notes)
        throw ParseError("MIDI: more than 6 note tracks; expected one track per string");
  }

  const TempoMap tempo(tempos, static_cast<int>(division));
  NoteEventList notes;
  for (std::size_t i = first; i < tracks.size() && i - first < static_cast<std::size_t>(kNumStrings); ++i)
    track_to_notes(tracks[i], static_cast<int>(i - first), tempo, notes);
  validate_and_sort(notes);
  return notes;
}

NoteEventList parse_note_events(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open note file: " + path.string());
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (data.size() >= 4 && data.compare(0, 4, "MThd") == 0)
    return parse_standard_midi({reinterpret_cast<const unsigned char*>(data.data()), data.size()});
  return parse_note_events_jsonl(data);
}

std::string serialize_note_events(const NoteEventList& notes) {
  std::string out;
  for (const auto& n : notes) {
    json rec = {{"string", n.string_index}, {"onset", n.onset_s}, {"offset", n.offset_s}, {"pitch", n.pitch_midi}};
    if (n.velocity) rec["velocity"] = *n.velocity;
    out += rec.dump();
    out += '\n';
  }
  return out;
}

void write_note_events(const std::filesystem::path& path, const NoteEventList& notes) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write note file: " + path.string());
  os << serialize_note_events(notes);
  if (!os) throw IoError("failed writing note file: " + path.string());
}

// ---- string-wise encoding ---------------------------------------------------

StringwiseMidiInput StringwiseMidiInput::silent(Eigen::Index n_frames) {
  StringwiseMidiInput x;
  x.n_frames = n_frames;
  const auto n = static_cast<std::size_t>(kNumStrings * n_frames);
  x.pitch_bin.assign(n, -1);
  x.vel_bin.assign(n, -1);
  x.pitch_midi.assign(n, std::numeric_limits<double>::quiet_NaN());
  return x;
}

Mat StringwiseMidiInput::x_pitch() const {
  Mat m = Mat::Zero(kNumStrings * n_frames, kPitchBins);
  for (std::size_t i = 0; i < pitch_bin.size(); ++i)
    if (pitch_bin[i] >= 0) m(static_cast<Eigen::Index>(i), pitch_bin[i]) = 1.0;
  return m;
}

Mat StringwiseMidiInput::x_vel() const {
  Mat m = Mat::Zero(kNumStrings * n_frames, kVelBins);
  for (std::size_t i = 0; i < vel_bin.size(); ++i)
    if (vel_bin[i] >= 0) m(static_cast<Eigen::Index>(i), vel_bin[i]) = 1.0;
  return m;
}

Mat StringwiseMidiInput::string_one_hot() { return Mat::Identity(kNumStrings, kNumStrings); }

StringwiseMidiInput StringwiseMidiInput::slice(Eigen::Index start, Eigen::Index count) const {
  if (start < 0 || count < 0) throw ShapeError("midi input: negative slice");
  StringwiseMidiInput out = silent(count);
  out.frame_rate_hz = frame_rate_hz;
  for (Eigen::Index s = 0; s < kNumStrings; ++s)
    for (Eigen::Index t = 0; t < count && start + t < n_frames; ++t) {
      const auto src = static_cast<std::size_t>(row_of(s, start + t, n_frames));
      const auto dst = static_cast<std::size_t>(row_of(s, t, count));
      out.pitch_bin[dst] = pitch_bin[src];
      out.vel_bin[dst] = vel_bin[src];
      out.pitch_midi[dst] = pitch_midi[src];
    }
  return out;
}

StringwiseMidiInput StringwiseMidiInput::permute_strings(std::span<const int> perm) const {
  if (perm.size() != kNumStrings) throw ShapeError("string permutation must have 6 entries");
  StringwiseMidiInput out = *this;
  for (Eigen::Index s = 0; s < kNumStrings; ++s)
    for (Eigen::Index t = 0; t < n_frames; ++t) {
      const auto src = static_cast<std::size_t>(row_of(perm[s], t, n_frames));
      const auto dst = static_cast<std::size_t>(row_of(s, t, n_frames));
      out.pitch_bin[dst] = pitch_bin[src];
      out.vel_bin[dst] = vel_bin[src];
      out.pitch_midi[dst] = pitch_midi[src];
    }
  return out;
}

bool StringwiseMidiInput::operator==(const StringwiseMidiInput& o) const {
  if (n_frames != o.n_frames || pitch_bin != o.pitch_bin || vel_bin != o.vel_bin || frame_rate_hz != o.frame_rate_hz)
    return false;
  for (std::size_t i = 0; i < pitch_midi.size(); ++i) {
    const double a = pitch_midi[i], b = o.pitch_midi[i];
    if (!(a == b || (std::isnan(a) && std::isnan(b)))) return false;
  }
  return true;
}

StringwiseMidiInput encode_stringwise(const NoteEventList& notes, double duration_s) {
  if (!(duration_s >= 0.0)) throw RangeError("encode: negative duration");
  const auto n_frames = static_cast<Eigen::Index>(std::llround(duration_s * kFrameRate));
  StringwiseMidiInput x = StringwiseMidiInput::silent(n_frames);
  constexpr double kSlack = 1e-9;
  for (const auto& n : notes) {
    if (n.string_index < 0 || n.string_index >= kNumStrings) throw ValidationError(describe(n) + ": bad string index");
    if (n.onset_s < 0.0 || n.offset_s > duration_s + kSlack)
      throw RangeError(describe(n) + " does not fit within " + std::to_string(duration_s) + " s");
    const double hz = hz_from_midi(n.pitch_midi);
    if (!(hz >= kMinF0Hz && hz < kMaxF0Hz))
      throw RangeError(describe(n) + ": pitch outside the [35 Hz, 1200 Hz) range");
    if (!n.velocity) throw ValidationError(describe(n) + ": velocity missing; fill it with velocity_proxy first");
    const int pbin = quantize(scale_f0_midi(n.pitch_midi), kPitchBins);
    const int vbin = quantize(*n.velocity, kVelBins);
    const auto t0 = std::max<Eigen::Index>(0, static_cast<Eigen::Index>(std::floor(n.onset_s * kFrameRate)));
    const auto t1 = std::min<Eigen::Index>(n_frames, static_cast<Eigen::Index>(std::ceil(n.offset_s * kFrameRate)) + 1);
    for (Eigen::Index t = t0; t < t1; ++t) {
      const double center = static_cast<double>(t) / kFrameRate;
      if (center < n.onset_s || center >= n.offset_s) continue;
      const auto i = static_cast<std::size_t>(row_of(n.string_index, t, n_frames));
      x.pitch_bin[i] = pbin;
      x.vel_bin[i] = vbin;
      x.pitch_midi[i] = n.pitch_midi;
    }
  }
  return x;
}

double velocity_proxy(const AudioBuffer& string_audio, const NoteEvent& note) {
  const double duration = string_audio.duration_s();
  if (note.onset_s < 0.0 || note.offset_s > duration + 1e-9 || !(note.offset_s > note.onset_s))
    throw RangeError(describe(note) + " lies outside the audio (" + std::to_string(duration) + " s)");
  const auto total = static_cast<std::ptrdiff_t>(frames_for_samples(string_audio.size()));
  if (total == 0) return 0.0;
  auto first = static_cast<std::ptrdiff_t>(std::ceil(note.onset_s * kFrameRate));
  auto last = static_cast<std::ptrdiff_t>(std::ceil(note.offset_s * kFrameRate));  // exclusive
  while (last > first && static_cast<double>(last - 1) / kFrameRate >= note.offset_s) --last;
  if (last <= first) {
    // No frame center inside the note; use the nearest frame.
    first = static_cast<std::ptrdiff_t>(std::llround(note.onset_s * kFrameRate));
    last = first + 1;
  }
  first = std::clamp<std::ptrdiff_t>(first, 0, total - 1);
  last = std::clamp<std::ptrdiff_t>(last, first + 1, total);
  const auto db = loudness_db(string_audio, static_cast<std::size_t>(first), static_cast<std::size_t>(last - first));
  double peak = 0.0;
  for (double v : db) peak = std::max(peak, scale_loudness(v));
  return std::clamp(peak, 0.0, 1.0);
}

void fill_velocities(NoteEventList& notes, const MultiChannelAudio& strings) {
  for (auto& n : notes) {
    if (n.velocity) continue;
    if (static_cast<std::size_t>(n.string_index) >= strings.num_channels())
      throw ShapeError(describe(n) + ": no audio channel for this string");
    n.velocity = velocity_proxy(strings.channel(static_cast<std::size_t>(n.string_index)), n);
  }
}

namespace {
constexpr std::uint32_t kMidiCacheVersion = 1;
}

void write_midi_cache(const std::filesystem::path& path, const StringwiseMidiInput& x) {
  binio::Writer w(path);
  w.put_bytes("HXMI");
  w.put<std::uint32_t>(kMidiCacheVersion);
  w.put<std::uint32_t>(kNumStrings);
  w.put<std::uint64_t>(static_cast<std::uint64_t>(x.n_frames));
  w.put<double>(x.frame_rate_hz);
  w.put_array<int>(x.pitch_bin);
  w.put_array<int>(x.vel_bin);
  w.put_array<double>(x.pitch_midi);
  w.finish();
}

StringwiseMidiInput read_midi_cache(const std::filesystem::path& path) {
  binio::Reader r(path);
  r.expect_magic("HXMI");
  if (r.get<std::uint32_t>() != kMidiCacheVersion) throw IoError("unsupported MIDI cache version in " + path.string());
  if (r.get<std::uint32_t>() != kNumStrings) throw IoError("MIDI cache string count mismatch in " + path.string());
  StringwiseMidiInput x;
  x.n_frames = static_cast<Eigen::Index>(r.get<std::uint64_t>());
  x.frame_rate_hz = r.get<double>();
  const auto n = static_cast<std::size_t>(kNumStrings * x.n_frames);
  x.pitch_bin = r.get_array<int>(n);
  x.vel_bin = r.get_array<int>(n);
  x.pitch_midi = r.get_array<double>(n);
  return x;
}

}  // namespace hexsynth
