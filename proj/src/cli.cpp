#include "hexsynth/cli.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

#include "hexsynth/corpus.hpp"
#include "hexsynth/features.hpp"
#include "hexsynth/midi_io.hpp"
#include "hexsynth/pipeline.hpp"

namespace hexsynth::cli {

namespace fs = std::filesystem;

// ---- manifests ------------------------------------------------------------------

nlohmann::json RunManifest::to_json() const {
  return {{"command", command},   {"argv", argv},        {"config_path", config_path},
          {"inputs", inputs},     {"outputs", outputs},  {"seed", seed},
          {"tool_version", tool_version}, {"timestamp", timestamp}, {"details", details}};
}

RunManifest RunManifest::from_json(const nlohmann::json& j) {
  RunManifest m;
  m.command = j.at("command").get<std::string>();
  m.argv = j.value("argv", std::vector<std::string>{});
  m.config_path = j.value("config_path", std::string());
  m.inputs = j.value("inputs", std::vector<std::string>{});
  m.outputs = j.value("outputs", std::vector<std::string>{});
  m.seed = j.value("seed", std::uint64_t{0});
  m.tool_version = j.value("tool_version", std::string());
  m.timestamp = j.value("timestamp", std::string());
  m.details = j.value("details", nlohmann::json::object());
  return m;
}

void RunManifest::write(const fs::path& path) const {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  out << to_json().dump(2) << '\n';
  if (!out) throw IoError("cannot write manifest " + path.string());
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

fs::path cache_root(const std::optional<fs::path>& explicit_dir) {
  if (explicit_dir) return *explicit_dir;
  if (const char* env = std::getenv("HEXSYNTH_CACHE"); env && *env) return env;
  return "cache";
}

namespace {
std::vector<std::string>& command_line() {
  static std::vector<std::string> argv;
  return argv;
}
}  // namespace

void set_command_line(std::vector<std::string> argv) { command_line() = std::move(argv); }

namespace {

RunManifest manifest(const std::string& command, std::uint64_t seed) {
  RunManifest m;
  m.command = command;
  m.argv = command_line();
  m.seed = seed;
  m.timestamp = utc_timestamp();
  return m;
}

// Sibling manifest for a file output: split.json -> split.manifest.json
fs::path manifest_for_file(const fs::path& out) {
  fs::path p = out;
  return p.replace_extension(".manifest.json");
}

void write_json_file(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out) throw IoError("cannot write " + path.string());
}

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

// Runs work(i) for i in [0, n) on up to jobs threads.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& work) {
  const auto threads = static_cast<std::size_t>(std::max(1, jobs));
  if (threads == 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) work(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::exception_ptr first;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(threads, n); ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          work(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!first) first = std::current_exception();
          next = n;
        }
      }
    });
  for (auto& th : pool) th.join();
  if (first) std::rethrow_exception(first);
}

Logger locked(const Logger& log, std::mutex& mu) {
  return [&log, &mu](const std::string& s) {
    if (!log) return;
    std::lock_guard<std::mutex> lock(mu);
    log(s);
  };
}

nlohmann::json file_stamp(const fs::path& p) {
  if (!fs::exists(p)) throw IoError("missing " + p.filename().string() + " (" + p.string() + ")");
  return {{"size", fs::file_size(p)},
          {"mtime", static_cast<long long>(fs::last_write_time(p).time_since_epoch().count())}};
}

struct CachePaths {
  fs::path dir, features, midi, source;
};

CachePaths cache_paths(const fs::path& cache, const std::string& id) {
  const fs::path d = cache / id;
  return {d, d / "features.hxft", d / "midi.hxmi", d / "source.json"};
}

}  // namespace

// ---- extract ----------------------------------------------------------------------

ExtractResult cmd_extract(const ExtractOptions& opt, const Logger& log) {
  const auto catalog = read_catalog(opt.corpus);
  fs::create_directories(opt.out);
  enum class Outcome { kExtracted, kSkipped, kFailed };
  std::vector<Outcome> outcome(catalog.size(), Outcome::kFailed);
  std::vector<std::string> reason(catalog.size());
  std::mutex mu;
  const Logger say = locked(log, mu);

  parallel_for(catalog.size(), opt.jobs, [&](std::size_t i) {
    const std::string& id = catalog[i].id;
    try {
      const RecordingFiles files = recording_files(opt.corpus, id);
      const nlohmann::json stamp = {{"version", 1},
                                    {"mix", file_stamp(files.mix)},
                                    {"strings", file_stamp(files.strings)},
                                    {"notes", file_stamp(files.notes)}};
      const CachePaths cp = cache_paths(opt.out, id);
      if (!opt.force && fs::exists(cp.source) && fs::exists(cp.features) && fs::exists(cp.midi)) {
        try {
          if (read_json_file(cp.source) == stamp) {
            outcome[i] = Outcome::kSkipped;
            return;
          }
        } catch (const Error&) {
          // unreadable stamp: extract again
        }
      }
      const Recording rec = prepare_recording(load_source_recording(opt.corpus, id));
      fs::create_directories(cp.dir);
      fs::remove(cp.source);
      write_feature_cache(cp.features, rec.features);
      write_midi_cache(cp.midi, rec.midi);
      write_json_file(cp.source, stamp);  // last, so an interrupted entry is redone
      outcome[i] = Outcome::kExtracted;
      say("extracted " + id);
    } catch (const std::exception& e) {
      reason[i] = e.what();
      say("failed " + id + ": " + e.what());
    }
  });

  ExtractResult result;
  for (std::size_t i = 0; i < catalog.size(); ++i) switch (outcome[i]) {
      case Outcome::kExtracted: result.extracted.push_back(catalog[i].id); break;
      case Outcome::kSkipped: result.skipped.push_back(catalog[i].id); break;
      case Outcome::kFailed: result.failures.emplace_back(catalog[i].id, reason[i]); break;
    }

  RunManifest m = manifest("extract", 0);
  m.inputs = {opt.corpus.string()};
  m.outputs = {opt.out.string()};
  m.details = {{"extracted", result.extracted}, {"skipped", result.skipped}, {"failures", nlohmann::json::array()}};
  for (const auto& [id, why] : result.failures) m.details["failures"].push_back({{"id", id}, {"reason", why}});
  m.write(opt.out / "manifest.json");
  return result;
}

Recording load_cached_recording(const fs::path& corpus, const fs::path& cache, const std::string& id) {
  const CachePaths cp = cache_paths(cache, id);
  if (!fs::exists(cp.features) || !fs::exists(cp.midi) || !fs::exists(cp.source))
    throw IoError("no cached features for '" + id + "' under " + cache.string() + ": run 'hexsynth extract' first");
  Recording rec;
  rec.id = id;
  rec.features = read_feature_cache(cp.features);
  rec.midi = read_midi_cache(cp.midi);
  rec.audio = read_wav_mono(recording_files(corpus, id).mix);
  const auto n = static_cast<std::size_t>(rec.features.n_frames()) * kHopSamples;
  if (rec.audio.size() < n || rec.midi.n_frames != rec.features.n_frames())
    throw ShapeError("cache for '" + id + "' does not match its audio: run 'hexsynth extract --force'");
  rec.audio.samples.resize(n);
  return rec;
}

// ---- split --------------------------------------------------------------------------

DatasetSplit cmd_split(const fs::path& corpus, const fs::path& out, std::uint64_t seed, const SplitConfig& cfg) {
  const DatasetSplit split = split_dataset(read_catalog(corpus), seed, cfg);
  write_json_file(out, split.to_json());
  RunManifest m = manifest("split", seed);
  m.inputs = {(corpus / "catalog.json").string()};
  m.outputs = {out.string()};
  m.details = {{"test_fraction", cfg.test_fraction},
               {"val_fraction", cfg.val_fraction},
               {"sizes", {{"train", split.train.size()}, {"val", split.val.size()}, {"test", split.test.size()}}}};
  m.write(manifest_for_file(out));
  return split;
}

// ---- train --------------------------------------------------------------------------

namespace {

ModelKind kind_for(TrainSystem system) {
  switch (system) {
    case TrainSystem::kSyn: return ModelKind::kDecoder;
    case TrainSystem::kRg: return ModelKind::kControlRg;
    case TrainSystem::kCl: return ModelKind::kControlCl;
    case TrainSystem::kJt: return ModelKind::kControlJt;
    case TrainSystem::kUnified: return ModelKind::kUnified;
  }
  throw ConfigError("unknown system");
}

std::vector<Recording> load_all(const fs::path& corpus, const fs::path& cache, const std::vector<std::string>& ids) {
  std::vector<Recording> out;
  for (const auto& id : ids) out.push_back(load_cached_recording(corpus, cache, id));
  return out;
}

Checkpoint load_synthesis_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("synthesis checkpoint " + path.string() + " does not exist");
  Checkpoint ck = read_checkpoint(path);
  if (ck.system != "syn") throw ConfigError(path.string() + " holds a '" + ck.system + "' model, not a synthesis model");
  return ck;
}

}  // namespace

std::pair<TrainConfig, ModelConfig> resolve_train_config(const TrainCommand& cmd) {
  TrainConfig tc = TrainConfig::preset(cmd.system);
  ModelConfig mc = ModelConfig::preset_named(cmd.preset, kind_for(cmd.system));
  if (cmd.config) {
    const nlohmann::json j = read_json_file(*cmd.config);
    if (!j.is_object()) throw ConfigError(cmd.config->string() + ": expected a JSON object");
    for (const auto& [key, _] : j.items())
      if (key != "train" && key != "model") throw ConfigError(cmd.config->string() + ": unknown section '" + key + "'");
    if (j.contains("train")) tc = TrainConfig::from_json(j["train"], tc);
    if (j.contains("model")) {
      nlohmann::json merged = mc.to_json();
      merged.merge_patch(j["model"]);
      mc = ModelConfig::from_json(merged);
    }
  }
  if (cmd.seed) tc.seed = *cmd.seed;
  if (cmd.max_epochs) tc.max_epochs = *cmd.max_epochs;
  if (cmd.max_steps) tc.max_steps = *cmd.max_steps;
  if (cmd.excerpt_s) tc.excerpt_s = *cmd.excerpt_s;
  tc.validate();
  mc.validate();
  return {tc, mc};
}

TrainResult cmd_train(const TrainCommand& cmd, const Logger& log) {
  std::optional<Checkpoint> pretrained;
  if (cmd.system == TrainSystem::kJt) {
    if (!cmd.syn_checkpoint)
      throw ConfigError(
          "joint training needs a pre-trained synthesis model: pass the checkpoint written by 'train syn' "
          "with --syn-checkpoint");
    pretrained = load_synthesis_checkpoint(*cmd.syn_checkpoint);
  }
  const auto [tc, mc] = resolve_train_config(cmd);
  if (!fs::exists(cmd.split)) throw IoError("split file " + cmd.split.string() + " does not exist: run 'hexsynth split'");
  const DatasetSplit split = DatasetSplit::from_json(read_json_file(cmd.split));
  if (split.train.empty()) throw ConfigError(cmd.split.string() + " has no training recordings");

  TrainData data;
  data.train = load_all(cmd.corpus, cmd.cache, split.train);
  data.val = load_all(cmd.corpus, cmd.cache, split.val);

  TrainOptions options;
  options.run_dir = cmd.out;
  options.resume = cmd.resume;
  options.log = log;
  TrainResult result = train(cmd.system, data, tc, mc, pretrained ? &*pretrained : nullptr, options);

  RunManifest m = manifest("train " + to_string(cmd.system), tc.seed);
  m.config_path = cmd.config ? cmd.config->string() : "";
  m.inputs = {cmd.corpus.string(), cmd.cache.string(), cmd.split.string()};
  if (cmd.syn_checkpoint) m.inputs.push_back(cmd.syn_checkpoint->string());
  m.outputs = {(cmd.out / "best.hxck").string(), (cmd.out / "last.hxck").string(),
               (cmd.out / "metrics.jsonl").string()};
  m.details = {{"system", to_string(cmd.system)},
               {"preset", cmd.preset},
               {"train", tc.to_json()},
               {"model", mc.to_json()},
               {"epochs", result.history.size()},
               {"early_stopped", result.early_stopped},
               {"best_validation_loss", result.best.validation_loss},
               {"parameters", result.best.n_parameters()}};
  m.write(cmd.out / "manifest.json");
  return result;
}

// ---- render and eval ----------------------------------------------------------------

namespace {

struct Item {
  std::string id;
  Conditioning conditioning;
  std::optional<Recording> recording;  // corpus items only
};

std::vector<std::string> selected_ids(const RenderCommand& cmd) {
  if (!cmd.ids.empty()) return cmd.ids;
  if (!cmd.split) throw ConfigError("choose recordings: list ids, or pass --split with --subset");
  const DatasetSplit split = DatasetSplit::from_json(read_json_file(*cmd.split));
  if (cmd.subset == "test") return split.test;
  if (cmd.subset == "val") return split.val;
  if (cmd.subset == "train") return split.train;
  throw ConfigError("subset must be train, val or test");
}

Item notes_item(const fs::path& path) {
  NoteEventList notes = parse_note_events(path);
  double end = 0.0;
  for (const auto& n : notes) {
    if (!n.velocity) throw ConfigError(path.string() + ": rendering bare notes needs a velocity on every note");
    end = std::max(end, n.offset_s);
  }
  const double duration = std::ceil(end * kFrameRate - 1e-9) / kFrameRate;
  if (duration <= 0.0) throw ConfigError(path.string() + ": no notes to render");
  Item item;
  item.id = path.stem().string();
  item.conditioning.midi = encode_stringwise(notes, duration);
  return item;
}

struct Systems {
  Checkpoint checkpoint;
  std::optional<Checkpoint> synthesis;
};

Systems load_systems(const RenderCommand& cmd) {
  Systems s;
  if (!fs::exists(cmd.checkpoint)) throw IoError("checkpoint " + cmd.checkpoint.string() + " does not exist");
  s.checkpoint = read_checkpoint(cmd.checkpoint);
  if (cmd.syn_checkpoint) s.synthesis = load_synthesis_checkpoint(*cmd.syn_checkpoint);
  Renderer probe(s.checkpoint, s.synthesis ? &*s.synthesis : nullptr);  // fails early on missing prerequisites
  return s;
}

void write_render(const fs::path& out, const std::string& id, const SynthOutput& audio) {
  write_wav(out / (id + ".wav"), audio.mixture);
  MultiChannelAudio strings;
  for (const auto& s : audio.strings) strings.channels.push_back(s.samples);
  write_wav(out / (id + ".strings.wav"), strings);
}

std::vector<double> masked_midi(const Mat& f0_unit, int s, const std::function<bool(Eigen::Index)>& keep) {
  std::vector<double> v = contour_midi(f0_unit, s);
  for (std::size_t t = 0; t < v.size(); ++t)
    if (!keep(static_cast<Eigen::Index>(t))) v[t] = std::nan("");
  return v;
}

}  // namespace

std::vector<fs::path> cmd_render(const RenderCommand& cmd, const Logger& log) {
  const Systems systems = load_systems(cmd);
  std::vector<Item> items;
  if (cmd.notes) {
    items.push_back(notes_item(*cmd.notes));
  } else {
    for (const auto& id : selected_ids(cmd)) {
      Item it;
      it.id = id;
      Recording rec = load_cached_recording(cmd.corpus, cmd.cache, id);
      it.conditioning = {rec.midi, rec.features};
      items.push_back(std::move(it));
    }
  }
  fs::create_directories(cmd.out);
  std::mutex mu;
  const Logger say = locked(log, mu);
  parallel_for(items.size(), cmd.jobs, [&](std::size_t i) {
    Renderer r(systems.checkpoint, systems.synthesis ? &*systems.synthesis : nullptr);
    write_render(cmd.out, items[i].id, r.render(items[i].conditioning, mix_seed(cmd.seed, i)));
    say("rendered " + items[i].id);
  });

  std::vector<fs::path> outputs;
  for (const auto& it : items) outputs.push_back(cmd.out / (it.id + ".wav"));
  RunManifest m = manifest("render", cmd.seed);
  m.inputs = {cmd.checkpoint.string()};
  if (cmd.syn_checkpoint) m.inputs.push_back(cmd.syn_checkpoint->string());
  if (cmd.notes) m.inputs.push_back(cmd.notes->string());
  for (const auto& it : items) {
    m.outputs.push_back((cmd.out / (it.id + ".wav")).string());
    m.outputs.push_back((cmd.out / (it.id + ".strings.wav")).string());
  }
  m.details = {{"system", systems.checkpoint.system}};
  m.write(cmd.out / "manifest.json");
  return outputs;
}

EvalReport cmd_eval(const EvalCommand& cmd, const Logger& log) {
  const RenderCommand& rc = cmd.render;
  if (rc.notes) throw ConfigError("evaluation needs corpus recordings with natural audio, not a bare note file");
  const Systems systems = load_systems(rc);
  const std::vector<std::string> ids = selected_ids(rc);
  fs::create_directories(rc.out);
  if (cmd.plots) fs::create_directories(rc.out / "plots");

  EvalReport report;
  report.system = systems.checkpoint.system;
  report.checkpoint = rc.checkpoint.string();
  report.split = !rc.ids.empty() ? "explicit" : rc.subset;
  report.recordings.resize(ids.size());
  std::mutex mu;
  const Logger say = locked(log, mu);

  parallel_for(ids.size(), rc.jobs, [&](std::size_t i) {
    const std::string& id = ids[i];
    const Recording rec = load_cached_recording(rc.corpus, rc.cache, id);
    MultiChannelAudio natural = read_wav(recording_files(rc.corpus, id).strings);
    if (natural.num_channels() != kNumStrings) throw ShapeError(id + ": strings.wav needs 6 channels");
    for (auto& ch : natural.channels) ch.resize(rec.audio.size());

    Renderer r(systems.checkpoint, systems.synthesis ? &*systems.synthesis : nullptr);
    const Conditioning cond{rec.midi, rec.features};
    const SynthOutput out = r.render(cond, mix_seed(rc.seed, i));
    write_render(rc.out, id, out);
    MultiChannelAudio rendered;
    for (const auto& s : out.strings) rendered.channels.push_back(s.samples);

    RecordingEval& ev = report.recordings[i];
    ev.id = id;
    const WindowedMssl w = eval_mssl(rec.audio, out.mixture);
    ev.mssl_windows = w.windows;
    ev.mssl_mean = w.mean;
    ev.crepe_acc = pitch_accuracy(rendered, rec.midi, PitchReference::kEstimated, &natural);
    ev.midi_acc = pitch_accuracy(rendered, rec.midi, PitchReference::kMidi);

    if (cmd.plots) {
      int best = 0;
      long long most = -1;
      for (int s = 0; s < kNumStrings; ++s) {
        long long n = 0;
        for (Eigen::Index t = 0; t < rec.midi.n_frames; ++t) n += rec.midi.active(s, t);
        if (n > most) most = n, best = s;
      }
      const ControlFeatures pred = r.controls(cond);
      const auto active = [&](Eigen::Index t) { return rec.midi.active(best, t); };
      const auto voiced = [&](Eigen::Index t) { return rec.features.l(best, t) * rec.features.p(best, t) > 0.0; };
      plot_f0_comparison(rc.out / "plots" / (id + ".svg"),
                         {{report.system, masked_midi(pred.f0, best, active)}},
                         masked_midi(rec.features.f0, best, voiced), rec.midi, best);
    }
    say("evaluated " + id);
  });
  report.aggregate();
  write_json_file(rc.out / "report.json", report.to_json());
  std::ofstream(rc.out / "table.txt", std::ios::trunc) << report.table();

  RunManifest m = manifest("eval", rc.seed);
  m.inputs = {rc.checkpoint.string(), rc.corpus.string(), rc.cache.string()};
  if (rc.syn_checkpoint) m.inputs.push_back(rc.syn_checkpoint->string());
  if (rc.split) m.inputs.push_back(rc.split->string());
  m.outputs = {(rc.out / "report.json").string(), (rc.out / "table.txt").string()};
  m.details = {{"system", report.system}, {"recordings", ids.size()}};
  m.write(rc.out / "manifest.json");
  return report;
}

// ---- checks -------------------------------------------------------------------------

GradcheckResult cmd_gradcheck(const GradcheckConfig& cfg, const std::optional<fs::path>& out) {
  GradcheckResult r{gradcheck_synthesis(cfg), gradcheck_audio(cfg)};
  if (out) {
    write_json_file(*out, {{"synthesis", r.synthesis.to_json()}, {"audio", r.audio.to_json()}, {"passed", r.passed()}});
    RunManifest m = manifest("gradcheck", cfg.seed);
    m.outputs = {out->string()};
    m.details = {{"clip_s", cfg.clip_s}, {"coordinates", cfg.coordinates}, {"step", cfg.step},
                 {"tolerance", cfg.tolerance}};
    m.write(manifest_for_file(*out));
  }
  return r;
}

BleedReport cmd_bleed(const BleedConfig& cfg, std::uint64_t seed, const std::optional<fs::path>& out) {
  const BleedReport r = bleed_experiment(seed, cfg);
  if (out) {
    write_json_file(*out, r.to_json());
    RunManifest m = manifest("bleed", seed);
    m.outputs = {out->string()};
    m.details = {{"corruption_rate", cfg.corruption_rate}, {"steps", cfg.steps}, {"n_train", cfg.n_train},
                 {"n_test", cfg.n_test}};
    m.write(manifest_for_file(*out));
  }
  return r;
}

}  // namespace hexsynth::cli
