#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "hexsynth/eval.hpp"
#include "hexsynth/gradcheck.hpp"
#include "hexsynth/models.hpp"
#include "hexsynth/training.hpp"

namespace hexsynth::cli {

inline constexpr const char* kToolVersion = "0.1.0";

using Logger = std::function<void(const std::string&)>;

// One per command invocation, written next to its outputs.
struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  std::string config_path;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::uint64_t seed = 0;
  std::string tool_version = kToolVersion;
  std::string timestamp;  // UTC, ISO 8601
  nlohmann::json details = nlohmann::json::object();

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
  void write(const std::filesystem::path& path) const;
};

std::string utc_timestamp();

// Recorded in every manifest written afterwards.
void set_command_line(std::vector<std::string> argv);

// --out, then $HEXSYNTH_CACHE, then ./cache
std::filesystem::path cache_root(const std::optional<std::filesystem::path>& explicit_dir);

// ---- extract ------------------------------------------------------------------------

struct ExtractOptions {
  std::filesystem::path corpus;
  std::filesystem::path out;
  int jobs = 1;
  bool force = false;
};

struct ExtractResult {
  std::vector<std::string> extracted;
  std::vector<std::string> skipped;  // cache already up to date
  std::vector<std::pair<std::string, std::string>> failures;  // id, reason

  bool ok() const { return failures.empty(); }
};

// Per recording: <out>/<id>/{features.hxft, midi.hxmi, source.json}. A cache
// entry is reused while the sizes and modification times of its sources match.
ExtractResult cmd_extract(const ExtractOptions& opt, const Logger& log = {});

// Cached features and MIDI joined with the mixture audio, trimmed to whole frames.
Recording load_cached_recording(const std::filesystem::path& corpus, const std::filesystem::path& cache,
                                const std::string& id);

// ---- split --------------------------------------------------------------------------

DatasetSplit cmd_split(const std::filesystem::path& corpus, const std::filesystem::path& out, std::uint64_t seed,
                       const SplitConfig& cfg = {});

// ---- train --------------------------------------------------------------------------

struct TrainCommand {
  TrainSystem system = TrainSystem::kSyn;
  std::filesystem::path corpus;
  std::filesystem::path cache;
  std::filesystem::path split;
  std::filesystem::path out;  // run directory
  std::optional<std::filesystem::path> config;
  std::string preset = "desk";
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> syn_checkpoint;
  bool resume = false;
  // Applied after the config file.
  std::optional<int> max_epochs;
  std::optional<long long> max_steps;
  std::optional<double> excerpt_s;
};

// The config file is {"train": {...}, "model": {...}}; absent keys keep the
// defaults of the system and the chosen preset.
std::pair<TrainConfig, ModelConfig> resolve_train_config(const TrainCommand& cmd);

// Writes best.hxck, the training state and manifest.json into cmd.out.
TrainResult cmd_train(const TrainCommand& cmd, const Logger& log = {});

// ---- render and eval ----------------------------------------------------------------

struct RenderCommand {
  std::filesystem::path checkpoint;
  std::optional<std::filesystem::path> syn_checkpoint;
  std::filesystem::path corpus;
  std::filesystem::path cache;
  std::vector<std::string> ids;               // explicit recordings, or
  std::optional<std::filesystem::path> split; // with subset
  std::string subset = "test";
  std::optional<std::filesystem::path> notes; // a bare note file instead (MIDI-driven systems)
  std::filesystem::path out;
  std::uint64_t seed = 0;
  int jobs = 1;
};

// Writes <id>.wav (mixture) and <id>.strings.wav (6 channels) per recording.
std::vector<std::filesystem::path> cmd_render(const RenderCommand& cmd, const Logger& log = {});

struct EvalCommand {
  RenderCommand render;
  bool plots = true;
};

// Renders every selected recording and scores it against the natural audio;
// writes report.json, the per-recording renders and F0 plots.
EvalReport cmd_eval(const EvalCommand& cmd, const Logger& log = {});

// ---- checks -------------------------------------------------------------------------

struct GradcheckResult {
  GradcheckReport synthesis;
  GradcheckReport audio;
  bool passed() const { return synthesis.passed() && audio.passed(); }
};
GradcheckResult cmd_gradcheck(const GradcheckConfig& cfg, const std::optional<std::filesystem::path>& out);

BleedReport cmd_bleed(const BleedConfig& cfg, std::uint64_t seed, const std::optional<std::filesystem::path>& out);

}  // namespace hexsynth::cli
