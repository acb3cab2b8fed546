#include <cmath>
#include <fstream>
#include <random>

#include "doctest.h"
#include "hexsynth/features.hpp"
#include "hexsynth/midi_io.hpp"
#include "test_util.hpp"

using namespace hexsynth;

namespace {

NoteEvent note(int s, double on, double off, double pitch, std::optional<double> vel = 0.5) {
  NoteEvent n;
  n.string_index = s;
  n.onset_s = on;
  n.offset_s = off;
  n.pitch_midi = pitch;
  n.velocity = vel;
  return n;
}

// Minimal format-1 SMF writer used to exercise the parser.
class SmfBuilder {
 public:
  explicit SmfBuilder(int division = 480) : division_(division) {}

  struct Track {
    std::vector<unsigned char> bytes;
    std::uint32_t last_tick = 0;
    void event(std::uint32_t tick, std::initializer_list<unsigned char> data) {
      varlen(tick - last_tick);
      last_tick = tick;
      bytes.insert(bytes.end(), data);
    }
    void varlen(std::uint32_t v) {
      unsigned char buf[4];
      int n = 0;
      buf[n++] = v & 0x7F;
      while (v >>= 7) buf[n++] = 0x80 | (v & 0x7F);
      while (n) bytes.push_back(buf[--n]);
    }
  };

  Track& add_track() { return tracks_.emplace_back(); }

  std::vector<unsigned char> build() {
    std::vector<unsigned char> out = {'M', 'T', 'h', 'd', 0, 0, 0, 6, 0, 1};
    out.push_back(static_cast<unsigned char>(tracks_.size() >> 8));
    out.push_back(static_cast<unsigned char>(tracks_.size() & 0xFF));
    out.push_back(static_cast<unsigned char>(division_ >> 8));
    out.push_back(static_cast<unsigned char>(division_ & 0xFF));
    for (auto& t : tracks_) {
      t.event(t.last_tick, {0xFF, 0x2F, 0x00});
      out.insert(out.end(), {'M', 'T', 'r', 'k'});
      const auto len = static_cast<std::uint32_t>(t.bytes.size());
      for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<unsigned char>(len >> s));
      out.insert(out.end(), t.bytes.begin(), t.bytes.end());
    }
    return out;
  }

 private:
  int division_;
  std::vector<Track> tracks_;
};

}  // namespace

TEST_CASE("parse_note_events from JSON lines") {
  const auto dir = testutil::temp_dir("midi_io");
  SUBCASE("empty file") {
    std::ofstream(dir / "e.jsonl").close();
    CHECK(parse_note_events(dir / "e.jsonl").empty());
  }
  SUBCASE("single record round trip") {
    std::ofstream(dir / "one.jsonl") << R"({"string": 0, "onset": 0.0, "offset": 1.0, "pitch": 64.0, "velocity": 0.5})"
                                     << "\n";
    const auto notes = parse_note_events(dir / "one.jsonl");
    REQUIRE(notes.size() == 1);
    CHECK(notes[0] == note(0, 0.0, 1.0, 64.0, 0.5));
  }
  SUBCASE("velocity is optional") {
    std::ofstream(dir / "nv.jsonl") << R"({"string": 2, "onset": 0.5, "offset": 1.0, "pitch": 52.25})" << "\n";
    const auto notes = parse_note_events(dir / "nv.jsonl");
    REQUIRE(notes.size() == 1);
    CHECK(!notes[0].velocity.has_value());
  }
  SUBCASE("overlap on one string is rejected, naming both notes") {
    std::ofstream(dir / "ov.jsonl") << R"({"string": 1, "onset": 0.0, "offset": 1.0, "pitch": 60})" << "\n"
                                    << R"({"string": 1, "onset": 0.5, "offset": 1.5, "pitch": 62})" << "\n";
    try {
      parse_note_events(dir / "ov.jsonl");
      FAIL("expected a validation error");
    } catch (const ValidationError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("0-1 s") != std::string::npos);
      CHECK(msg.find("0.5-1.5 s") != std::string::npos);
    }
  }
  SUBCASE("malformed record reports its line") {
    std::ofstream(dir / "bad.jsonl") << R"({"string": 1, "onset": 0.0, "offset": 1.0, "pitch": 60})" << "\n\n"
                                     << R"({"string": 1, "onset": oops})" << "\n";
    try {
      parse_note_events(dir / "bad.jsonl");
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(e.line() == 3);
    }
  }
  SUBCASE("missing field and bad string index") {
    CHECK_THROWS_AS(parse_note_events_jsonl(R"({"string": 1, "onset": 0.0, "pitch": 60})"), ParseError);
    CHECK_THROWS_AS(parse_note_events_jsonl(R"({"string": 6, "onset": 0.0, "offset": 1, "pitch": 60})"),
                    ValidationError);
    CHECK_THROWS_AS(parse_note_events_jsonl(R"({"string": 0, "onset": 1.0, "offset": 1, "pitch": 60})"),
                    ValidationError);
  }
  SUBCASE("sorted by string then onset") {
    const auto notes = parse_note_events_jsonl(
        "{\"string\": 3, \"onset\": 1.0, \"offset\": 2.0, \"pitch\": 60}\n"
        "{\"string\": 0, \"onset\": 2.0, \"offset\": 3.0, \"pitch\": 40}\n"
        "{\"string\": 3, \"onset\": 0.0, \"offset\": 1.0, \"pitch\": 61}\n");
    REQUIRE(notes.size() == 3);
    CHECK(notes[0].string_index == 0);
    CHECK(notes[1].onset_s == 0.0);
    CHECK(notes[2].onset_s == 1.0);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("standard MIDI with per-string tracks and pitch bends") {
  SmfBuilder smf(480);
  auto& conductor = smf.add_track();
  conductor.event(0, {0xFF, 0x51, 0x03, 0x07, 0xA1, 0x20});  // 120 bpm
  for (int s = 0; s < 6; ++s) {
    auto& t = smf.add_track();
    if (s == 1) {
      t.event(0, {0x90, 45, 127});
      t.event(480, {0x80, 45, 0});  // 0.5 s
    }
    if (s == 4) {
      t.event(480, {0x90, 59, 64});
      t.event(960, {0xE0, 0x00, 0x60});  // +1 semitone (range 2) at 1.0 s
      t.event(1440, {59, 0});             // running-status note off at 1.5 s
    }
  }
  const auto bytes = smf.build();
  const auto notes = parse_standard_midi(bytes);
  REQUIRE(notes.size() == 3);
  CHECK(notes[0] == note(1, 0.0, 0.5, 45.0, 1.0));
  CHECK(notes[1] == note(4, 0.5, 1.0, 59.0, 64.0 / 127.0));
  CHECK(notes[2] == note(4, 1.0, 1.5, 60.0, 64.0 / 127.0));

  SUBCASE("file dispatch by header") {
    const auto dir = testutil::temp_dir("smf");
    std::ofstream(dir / "x.mid", std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()),
                                                         static_cast<std::streamsize>(bytes.size()));
    CHECK(parse_note_events(dir / "x.mid") == notes);
    std::filesystem::remove_all(dir);
  }
  SUBCASE("truncated data is a parse error") {
    std::vector<unsigned char> cut(bytes.begin(), bytes.begin() + 40);
    CHECK_THROWS_AS(parse_standard_midi(cut), ParseError);
  }
}

TEST_CASE("encode_stringwise") {
  SUBCASE("silence") {
    const auto x = encode_stringwise({}, 1.0);
    CHECK(x.n_frames == 128);
    const Mat xp = x.x_pitch();
    CHECK(xp.rows() == 6 * 128);
    CHECK(xp.cols() == 305);
    CHECK(xp.sum() == 0.0);
    CHECK(x.x_vel().cols() == 64);
  }
  SUBCASE("constant note on string 2") {
    const auto x = encode_stringwise({note(2, 0.0, 1.0, 50.0)}, 1.0);
    const Mat xp = x.x_pitch();
    CHECK(xp.sum() == 128.0);
    const int bin = x.pitch_bin[static_cast<std::size_t>(row_of(2, 0, 128))];
    for (Eigen::Index t = 0; t < 128; ++t) {
      CHECK(xp(row_of(2, t, 128), bin) == 1.0);
      CHECK(x.vel_bin[static_cast<std::size_t>(row_of(2, t, 128))] == 32);
    }
  }
  SUBCASE("440 Hz lands in the MIDI-spaced bin") {
    const auto x = encode_stringwise({note(0, 0.0, 0.5, 69.0)}, 0.5);
    // floor(0.716158672 * 305) from a 30-digit evaluation.
    CHECK(x.pitch_bin[0] == 218);
  }
  SUBCASE("half-open frame membership at frame centers") {
    // Frame t is active iff onset <= t/128 < offset.
    const auto x = encode_stringwise({note(5, 10.0 / 128, 20.0 / 128, 60.0)}, 0.25);
    for (Eigen::Index t = 0; t < x.n_frames; ++t) CHECK(x.active(5, t) == (t >= 10 && t < 20));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(encode_stringwise({note(0, 0.0, 0.5, 20.0)}, 1.0), RangeError);
    CHECK_THROWS_AS(encode_stringwise({note(0, 0.0, 0.5, 86.5)}, 1.0), RangeError);
    CHECK_THROWS_AS(encode_stringwise({note(0, 0.0, 2.0, 60.0)}, 1.0), RangeError);
    CHECK_THROWS_AS(encode_stringwise({note(0, 0.0, 0.5, 60.0, std::nullopt)}, 1.0), ValidationError);
  }
}

namespace {

NoteEventList random_notes(std::mt19937_64& rng, double duration) {
  // Onsets and offsets on a 1/1024 s grid so shifted times stay exact.
  std::uniform_int_distribution<int> len(8, 200), gap(0, 100), pitch(30, 84), vel(0, 127);
  NoteEventList notes;
  for (int s = 0; s < 6; ++s) {
    int t = gap(rng);
    while (true) {
      const int l = len(rng);
      if ((t + l) / 1024.0 > duration) break;
      notes.push_back(note(s, t / 1024.0, (t + l) / 1024.0, pitch(rng) + 0.25 * (vel(rng) % 3), vel(rng) / 127.0));
      t += l + gap(rng);
    }
  }
  return notes;
}

}  // namespace

TEST_CASE("encoding properties over random note lists") {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    auto notes = random_notes(rng, 2.0);
    validate_and_sort(notes);
    const auto x = encode_stringwise(notes, 2.0);

    // At most one hot pitch bin per (string, frame); velocity where pitch is.
    const Mat xp = x.x_pitch(), xv = x.x_vel();
    for (Eigen::Index r = 0; r < xp.rows(); ++r) {
      const double s = xp.row(r).sum();
      CHECK((s == 0.0 || s == 1.0));
      CHECK(xv.row(r).sum() == s);
    }

    // parse(serialize(events)) encodes identically.
    const auto reparsed = parse_note_events_jsonl(serialize_note_events(notes));
    CHECK(reparsed == notes);
    CHECK(encode_stringwise(reparsed, 2.0) == x);

    // Shifting by k frames shifts the encoding by k frames.
    const int k = 1 + trial % 7;
    auto shifted = notes;
    for (auto& n : shifted) {
      n.onset_s += k / 128.0;
      n.offset_s += k / 128.0;
    }
    const auto xs = encode_stringwise(shifted, 2.0 + k / 128.0);
    for (int s = 0; s < 6; ++s)
      for (Eigen::Index t = 0; t < x.n_frames; ++t) {
        const auto a = static_cast<std::size_t>(row_of(s, t, x.n_frames));
        const auto b = static_cast<std::size_t>(row_of(s, t + k, xs.n_frames));
        CHECK(x.pitch_bin[a] == xs.pitch_bin[b]);
        CHECK(x.vel_bin[a] == xs.vel_bin[b]);
      }
  }
}

TEST_CASE("string-wise input helpers") {
  auto x = encode_stringwise({note(1, 0.0, 0.5, 45.0), note(3, 0.25, 0.5, 62.0)}, 0.5);
  SUBCASE("slice pads with inactive frames") {
    const auto s = x.slice(32, 64);
    CHECK(s.n_frames == 64);
    CHECK(s.active(1, 0));
    CHECK(!s.active(1, 40));
  }
  SUBCASE("permutation") {
    const std::array<int, 6> perm = {3, 0, 1, 2, 5, 4};
    const auto p = x.permute_strings(perm);
    CHECK(p.active(0, 40));
    CHECK(p.active(2, 10));
    CHECK(!p.active(1, 10));
  }
  SUBCASE("string identity") { CHECK(StringwiseMidiInput::string_one_hot() == Mat::Identity(6, 6)); }
  SUBCASE("cache round trip") {
    const auto dir = testutil::temp_dir("midicache");
    write_midi_cache(dir / "m.bin", x);
    CHECK(read_midi_cache(dir / "m.bin") == x);
    std::filesystem::remove_all(dir);
  }
}

TEST_CASE("velocity_proxy") {
  const NoteEvent n = note(0, 0.1, 0.9, 60.0, std::nullopt);
  SUBCASE("silence floor") { CHECK(velocity_proxy(AudioBuffer(48000), n) == 0.0); }
  SUBCASE("full-scale broadband is near the ceiling") {
    CHECK(velocity_proxy(testutil::white_noise(1.0, 1.0, 9), n) > 0.85);
  }
  SUBCASE("monotone in amplitude") {
    const double loud = velocity_proxy(testutil::sine(1000.0, 0.5, 1.0), n);
    const double soft = velocity_proxy(testutil::sine(1000.0, 0.25, 1.0), n);
    CHECK(loud > soft);
    // Direct loudness: 20 log10(2) dB apart on the 80 dB scale.
    CHECK(loud - soft == doctest::Approx(6.0206 / 80.0).epsilon(0.01));
  }
  SUBCASE("note outside the audio") {
    CHECK_THROWS_AS(velocity_proxy(AudioBuffer(24000), n), RangeError);
  }
  SUBCASE("fill_velocities uses the matching string channel") {
    MultiChannelAudio strings;
    strings.channels.assign(6, std::vector<double>(48000, 0.0));
    strings.channels[2] = testutil::sine(1000.0, 0.5, 1.0).samples;
    NoteEventList notes = {note(0, 0.1, 0.5, 60.0, std::nullopt), note(2, 0.1, 0.5, 60.0, std::nullopt),
                           note(2, 0.6, 0.9, 60.0, 0.25)};
    fill_velocities(notes, strings);
    CHECK(*notes[0].velocity == 0.0);
    CHECK(*notes[1].velocity > 0.9);
    CHECK(*notes[2].velocity == 0.25);
  }
}
