#include "hexsynth/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "hexsynth/features.hpp"

namespace hexsynth {

std::vector<CatalogEntry> read_catalog(const std::filesystem::path& corpus_dir) {
  const auto path = corpus_dir / "catalog.json";
  if (!std::filesystem::exists(path)) {
    if (!std::filesystem::is_directory(corpus_dir)) throw IoError("corpus directory not found: " + corpus_dir.string());
    return {};
  }
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  if (!j.is_array()) throw ParseError(path.string() + ": expected an array of recordings");
  std::vector<CatalogEntry> out;
  for (const auto& r : j) {
    try {
      out.push_back({r.at("id").get<std::string>(), r.at("player").get<std::string>(),
                     r.at("progression").get<std::string>(), r.at("style").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ": " + e.what());
    }
  }
  return out;
}

void write_catalog(const std::filesystem::path& corpus_dir, const std::vector<CatalogEntry>& catalog) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& e : catalog)
    j.push_back({{"id", e.id}, {"player", e.player}, {"progression", e.progression}, {"style", e.style}});
  std::filesystem::create_directories(corpus_dir);
  std::ofstream out(corpus_dir / "catalog.json");
  out << j.dump(1) << '\n';
  if (!out) throw IoError("cannot write catalog in " + corpus_dir.string());
}

std::vector<CatalogEntry> guitarset_shaped_catalog() {
  const char* styles[] = {"BN", "Funk", "Jazz", "Rock", "SS"};
  const char* progressions[] = {"1", "2", "3"};
  std::vector<CatalogEntry> out;
  for (int p = 0; p < 6; ++p)
    for (const char* prog : progressions)
      for (const char* style : styles)
        for (const char* tempo : {"slow", "fast"})
          for (const char* mode : {"comp", "solo"}) {
            const std::string player = "0" + std::to_string(p);
            out.push_back({player + "_" + style + prog + "-" + tempo + "_" + mode, player, prog, style});
          }
  return out;
}

RecordingFiles recording_files(const std::filesystem::path& corpus_dir, const std::string& id) {
  const auto d = corpus_dir / id;
  return {d / "mix.wav", d / "strings.wav", d / "notes.jsonl"};
}

SourceRecording load_source_recording(const std::filesystem::path& corpus_dir, const std::string& id) {
  const RecordingFiles f = recording_files(corpus_dir, id);
  for (const auto& p : {f.mix, f.strings, f.notes})
    if (!std::filesystem::exists(p)) throw IoError(id + ": missing " + p.filename().string());
  SourceRecording rec;
  rec.id = id;
  rec.strings = read_wav(f.strings);
  if (rec.strings.num_channels() != kNumStrings)
    throw ShapeError(id + ": strings.wav must have 6 channels, found " + std::to_string(rec.strings.num_channels()));
  rec.mix = read_wav_mono(f.mix);
  if (rec.mix.size() != rec.strings.num_samples())
    throw ShapeError(id + ": mix.wav and strings.wav differ in length");
  rec.notes = parse_note_events(f.notes);
  return rec;
}

void write_source_recording(const std::filesystem::path& corpus_dir, const SourceRecording& rec) {
  const RecordingFiles f = recording_files(corpus_dir, rec.id);
  std::filesystem::create_directories(f.mix.parent_path());
  write_wav(f.mix, rec.mix);
  write_wav(f.strings, rec.strings);
  write_note_events(f.notes, rec.notes);
}

// ---- synthetic material ------------------------------------------------------------

std::vector<double> pluck(double hz, double velocity, double duration_s, std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(std::llround(duration_s * kSampleRate));
  std::vector<double> out(n, 0.0);
  const double gain = 0.3 * velocity;
  for (int k = 1; k * hz < 0.45 * kSampleRate && k <= 40; ++k) {
    const double amp = gain / std::pow(k, 1.3);
    const double decay = 2.0 + 0.6 * k;
    const double w = 2.0 * std::numbers::pi * k * hz / kSampleRate;
    for (std::size_t i = 0; i < n; ++i) {
      const double t = static_cast<double>(i) / kSampleRate;
      out[i] += amp * std::exp(-decay * t) * std::sin(w * static_cast<double>(i));
    }
  }
  // pick noise and a short release so notes end without a click
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const std::size_t attack = std::min<std::size_t>(n, 96);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / kSampleRate;
    out[i] += 0.05 * gain * u(rng) * std::exp(-t * 60.0);
    if (i < attack) out[i] *= static_cast<double>(i) / attack;
  }
  const std::size_t release = std::min<std::size_t>(n, 480);
  for (std::size_t i = 0; i < release; ++i) out[n - 1 - i] *= static_cast<double>(i) / release;
  return out;
}

SourceRecording synthetic_recording(const std::string& id, std::uint64_t seed, const SyntheticConfig& cfg) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto n = static_cast<std::size_t>(std::llround(cfg.duration_s * kFrameRate)) * kHopSamples;
  SourceRecording rec;
  rec.id = id;
  rec.strings.channels.assign(kNumStrings, std::vector<double>(n, 0.0));
  for (int s = 0; s < kNumStrings; ++s) {
    if (u(rng) >= cfg.string_activity) continue;
    double t = cfg.max_gap_s * u(rng);
    while (true) {
      const double len = cfg.min_note_s + (cfg.max_note_s - cfg.min_note_s) * u(rng);
      if (t + len > cfg.duration_s) break;
      const int fret = static_cast<int>(u(rng) * 13.0);
      const double vel = 0.4 + 0.6 * u(rng);
      NoteEvent note{s, t, t + len, static_cast<double>(kOpenStringMidi[s] + fret), vel};
      const auto samples = pluck(hz_from_midi(note.pitch_midi), vel, len, rng());
      const auto first = static_cast<std::size_t>(std::llround(t * kSampleRate));
      auto& ch = rec.strings.channels[s];
      for (std::size_t i = 0; i < samples.size() && first + i < n; ++i) ch[first + i] += samples[i];
      rec.notes.push_back(note);
      t += len + cfg.max_gap_s * u(rng);
    }
  }
  rec.mix = AudioBuffer(n);
  for (const auto& ch : rec.strings.channels)
    for (std::size_t i = 0; i < n; ++i) rec.mix.samples[i] += ch[i];
  validate_and_sort(rec.notes);
  return rec;
}

std::vector<CatalogEntry> write_demo_corpus(const std::filesystem::path& corpus_dir, int n_recordings,
                                            std::uint64_t seed, const SyntheticConfig& cfg) {
  if (n_recordings < 0) throw ConfigError("negative recording count");
  const char* styles[] = {"BN", "Funk", "Jazz", "Rock", "SS"};
  std::vector<CatalogEntry> catalog;
  for (int i = 0; i < n_recordings; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "demo_%03d", i);
    write_source_recording(corpus_dir, synthetic_recording(id, seed * 1000003u + static_cast<std::uint64_t>(i), cfg));
    catalog.push_back({id, "0" + std::to_string(i % 6), std::to_string(1 + (i / 6) % 3), styles[(i / 18) % 5]});
  }
  write_catalog(corpus_dir, catalog);
  return catalog;
}

}  // namespace hexsynth
