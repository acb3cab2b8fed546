#include "hexsynth/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <random>
#include <sstream>

#include "hexsynth/losses.hpp"
#include "hexsynth/training.hpp"

namespace hexsynth {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Round half to even, independent of the current rounding mode.
double semitone(double midi) {
  const double r = std::round(midi);
  if (std::abs(midi - std::trunc(midi)) == 0.5) return 2.0 * std::round(midi / 2.0);
  return r;
}
}  // namespace

// ---- spectral distance ------------------------------------------------------------

WindowedMssl eval_mssl(const AudioBuffer& natural, const AudioBuffer& rendered, double window_s) {
  if (natural.size() != rendered.size())
    throw ShapeError("eval_mssl: natural and rendered audio differ in length (" + std::to_string(natural.size()) +
                     " vs " + std::to_string(rendered.size()) + " samples)");
  if (!(window_s > 0.0)) throw ConfigError("eval_mssl: window must be positive");
  const auto w = static_cast<std::size_t>(std::llround(window_s * natural.sample_rate));
  WindowedMssl out;
  if (natural.size() == 0) return out;
  const std::size_t n = natural.size() < w ? 1 : natural.size() / w;
  const std::size_t len = natural.size() < w ? natural.size() : w;
  for (std::size_t i = 0; i < n; ++i)
    out.windows.push_back(mssl(natural.view().subspan(i * len, len), rendered.view().subspan(i * len, len)));
  double sum = 0.0;
  for (double v : out.windows) sum += v;
  out.mean = sum / static_cast<double>(out.windows.size());
  return out;
}

// ---- pitch accuracy -----------------------------------------------------------------

std::vector<std::vector<double>> estimate_semitones(const MultiChannelAudio& strings) {
  if (strings.num_channels() != kNumStrings) throw ShapeError("expected 6 string channels");
  std::vector<std::vector<double>> out;
  for (int s = 0; s < kNumStrings; ++s) {
    const PitchContour pc = estimate_f0_periodicity(strings.channel(s));
    std::vector<double> semis(pc.f0_hz.size(), kNaN);
    for (std::size_t t = 0; t < semis.size(); ++t)
      if (std::isfinite(pc.f0_hz[t]) && pc.f0_hz[t] > 0.0) semis[t] = semitone(midi_from_hz(pc.f0_hz[t]));
    out.push_back(std::move(semis));
  }
  return out;
}

namespace {

std::optional<double> compare(const std::vector<std::vector<double>>& est, const StringwiseMidiInput& midi,
                              const std::vector<std::vector<double>>* ref) {
  const Eigen::Index T = midi.n_frames;
  long long kept = 0, hit = 0;
  for (int s = 0; s < kNumStrings; ++s)
    for (Eigen::Index t = 0; t < T; ++t) {
      if (!midi.active(s, t)) continue;
      ++kept;
      const double want = ref ? (*ref)[s][static_cast<std::size_t>(t)]
                              : semitone(midi.pitch_midi[static_cast<std::size_t>(row_of(s, t, T))]);
      hit += est[s][static_cast<std::size_t>(t)] == want;
    }
  if (kept == 0) return std::nullopt;
  return static_cast<double>(hit) / static_cast<double>(kept);
}

void check_frames(const std::vector<std::vector<double>>& est, const StringwiseMidiInput& midi, const char* what) {
  if (est.front().size() != static_cast<std::size_t>(midi.n_frames))
    throw ShapeError(std::string(what) + " spans " + std::to_string(est.front().size()) + " frames but the MIDI input " +
                     std::to_string(midi.n_frames));
}

}  // namespace

std::optional<double> pitch_accuracy(const MultiChannelAudio& rendered, const StringwiseMidiInput& midi,
                                     PitchReference reference, const MultiChannelAudio* natural) {
  const auto est = estimate_semitones(rendered);
  check_frames(est, midi, "rendered audio");
  if (reference == PitchReference::kMidi) return compare(est, midi, nullptr);
  if (!natural) throw ConfigError("estimated-pitch accuracy needs the natural string audio");
  const auto ref = estimate_semitones(*natural);
  check_frames(ref, midi, "natural audio");
  return compare(est, midi, &ref);
}

std::vector<double> contour_midi(const Mat& f0_unit, int string_index) {
  if (f0_unit.rows() != kNumStrings || string_index < 0 || string_index >= kNumStrings)
    throw ShapeError("expected a (6, T) contour and a string in 0..5");
  std::vector<double> out(static_cast<std::size_t>(f0_unit.cols()));
  for (Eigen::Index t = 0; t < f0_unit.cols(); ++t)
    out[static_cast<std::size_t>(t)] = unscale_f0_midi(f0_unit(string_index, t));
  return out;
}

std::optional<double> contour_pitch_accuracy(const Mat& f0_unit, const StringwiseMidiInput& midi) {
  if (f0_unit.cols() != midi.n_frames) throw ShapeError("contour and MIDI input differ in frame count");
  std::vector<std::vector<double>> est;
  for (int s = 0; s < kNumStrings; ++s) {
    auto m = contour_midi(f0_unit, s);
    for (double& v : m) v = semitone(v);
    est.push_back(std::move(m));
  }
  return compare(est, midi, nullptr);
}

// ---- plots ------------------------------------------------------------------------

namespace {
constexpr double kPlotW = 900, kPlotH = 420, kLeft = 60, kRight = 160, kTop = 20, kBottom = 40;

std::string polyline_points(const std::vector<double>& midi, double duration, double lo, double hi) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  const double w = kPlotW - kLeft - kRight, h = kPlotH - kTop - kBottom;
  bool open = false;
  for (std::size_t t = 0; t < midi.size(); ++t) {
    if (!std::isfinite(midi[t])) {
      if (open) os << ';';
      open = false;
      continue;
    }
    const double x = kLeft + w * (static_cast<double>(t) / kFrameRate) / duration;
    const double y = kTop + h * (hi - midi[t]) / (hi - lo);
    if (open) os << ' ';
    os << x << ',' << y;
    open = true;
  }
  std::string s = os.str();
  if (!s.empty() && s.back() == ';') s.pop_back();
  return s;
}

std::vector<double> midi_row(const StringwiseMidiInput& midi, int s) {
  std::vector<double> out(static_cast<std::size_t>(midi.n_frames));
  for (Eigen::Index t = 0; t < midi.n_frames; ++t)
    out[static_cast<std::size_t>(t)] = midi.pitch_midi[static_cast<std::size_t>(row_of(s, t, midi.n_frames))];
  return out;
}
}  // namespace

F0Plot f0_plot(const std::vector<F0Curve>& predictions, const std::vector<double>& target_midi,
               const StringwiseMidiInput& midi, int string_index) {
  if (string_index < 0 || string_index >= kNumStrings) throw RangeError("string index must be in 0..5");
  const auto T = static_cast<std::size_t>(midi.n_frames);
  if (target_midi.size() != T) throw ShapeError("target contour and MIDI input differ in frame count");
  for (const auto& c : predictions)
    if (c.midi.size() != T) throw ShapeError("prediction '" + c.label + "' differs in frame count");

  std::vector<std::pair<std::string, std::vector<double>>> all;
  for (const auto& c : predictions) all.emplace_back(c.label, c.midi);
  all.emplace_back("target", target_midi);
  all.emplace_back("MIDI", midi_row(midi, string_index));
  for (int n : {string_index - 1, string_index + 1})
    if (n >= 0 && n < kNumStrings) all.emplace_back("MIDI string " + std::to_string(n), midi_row(midi, n));

  F0Plot plot;
  plot.duration_s = std::max(static_cast<double>(T) / kFrameRate, 1.0 / kFrameRate);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& [label, v] : all)
    for (double x : v)
      if (std::isfinite(x)) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
      }
  if (!std::isfinite(lo)) lo = 40.0, hi = 80.0;
  plot.midi_low = std::floor(lo) - 2.0;
  plot.midi_high = std::ceil(hi) + 2.0;
  for (const auto& [label, v] : all)
    plot.series.push_back({label, polyline_points(v, plot.duration_s, plot.midi_low, plot.midi_high)});
  return plot;
}

std::string F0Plot::to_svg() const {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  const double w = kPlotW - kLeft - kRight, h = kPlotH - kTop - kBottom;
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kPlotW << "\" height=\"" << kPlotH << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<g stroke=\"black\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<line x1=\"" << kLeft << "\" y1=\"" << kTop + h << "\" x2=\"" << kLeft + w << "\" y2=\"" << kTop + h << "\"/>\n";
  os << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kTop + h << "\"/>\n";
  const double step = duration_s > 20 ? 5.0 : 1.0;
  for (double t = 0.0; t <= duration_s + 1e-9; t += step) {
    const double x = kLeft + w * t / duration_s;
    os << "<text stroke=\"none\" x=\"" << x << "\" y=\"" << kTop + h + 15 << "\" text-anchor=\"middle\">" << t
       << "</text>\n";
  }
  for (double m = std::ceil(midi_low / 5.0) * 5.0; m <= midi_high; m += 5.0) {
    const double y = kTop + h * (midi_high - m) / (midi_high - midi_low);
    os << "<text stroke=\"none\" x=\"" << kLeft - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << m
       << "</text>\n";
  }
  os << "<text stroke=\"none\" x=\"" << kLeft + w / 2 << "\" y=\"" << kPlotH - 6
     << "\" text-anchor=\"middle\">time (s)</text>\n";
  os << "<text stroke=\"none\" x=\"14\" y=\"" << kTop + h / 2 << "\" transform=\"rotate(-90 14 " << kTop + h / 2
     << ")\" text-anchor=\"middle\">MIDI pitch</text>\n</g>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* color = colors[i % 7];
    const bool dashed = series[i].label.rfind("MIDI", 0) == 0;
    std::istringstream runs(series[i].points);
    std::string run;
    while (std::getline(runs, run, ';'))
      os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\""
         << (dashed ? " stroke-dasharray=\"4 3\"" : "") << " points=\"" << run << "\"/>\n";
    const double ly = kTop + 14.0 * static_cast<double>(i + 1);
    os << "<line x1=\"" << kLeft + w + 10 << "\" y1=\"" << ly << "\" x2=\"" << kLeft + w + 30 << "\" y2=\"" << ly
       << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << kLeft + w + 35 << "\" y=\"" << ly + 4
       << "\" font-family=\"sans-serif\" font-size=\"11\">" << series[i].label << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

void plot_f0_comparison(const std::filesystem::path& path, const std::vector<F0Curve>& predictions,
                        const std::vector<double>& target_midi, const StringwiseMidiInput& midi, int string_index) {
  std::ofstream out(path, std::ios::trunc);
  out << f0_plot(predictions, target_midi, midi, string_index).to_svg();
  if (!out) throw IoError("cannot write plot " + path.string());
}

// ---- reports --------------------------------------------------------------------

void EvalReport::aggregate() {
  double sum = 0.0, crepe = 0.0, midi = 0.0;
  int nc = 0, nm = 0;
  for (const auto& r : recordings) {
    sum += r.mssl_mean;
    if (r.crepe_acc) crepe += *r.crepe_acc, ++nc;
    if (r.midi_acc) midi += *r.midi_acc, ++nm;
  }
  mssl_mean = recordings.empty() ? 0.0 : sum / static_cast<double>(recordings.size());
  crepe_acc = nc ? std::optional<double>(crepe / nc) : std::nullopt;
  midi_acc = nm ? std::optional<double>(midi / nm) : std::nullopt;
}

namespace {
nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }
std::string fmt(const std::optional<double>& v, int precision) {
  if (!v) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << *v;
  return os.str();
}
}  // namespace

nlohmann::json EvalReport::to_json() const {
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : recordings)
    recs.push_back({{"id", r.id},
                    {"mssl_windows", r.mssl_windows},
                    {"mssl_mean", r.mssl_mean},
                    {"crepe_acc", opt(r.crepe_acc)},
                    {"midi_acc", opt(r.midi_acc)}});
  return {{"system", system},           {"checkpoint", checkpoint},    {"split", split},
          {"mssl_mean", mssl_mean},     {"crepe_acc", opt(crepe_acc)}, {"midi_acc", opt(midi_acc)},
          {"recordings", recs}};
}

std::string EvalReport::table() const {
  std::ostringstream os;
  os << std::left << std::setw(12) << "system" << std::right << std::setw(10) << "MSSL" << std::setw(12) << "CREPE acc."
     << std::setw(11) << "MIDI acc." << '\n';
  os << std::left << std::setw(12) << system << std::right << std::setw(10) << fmt(mssl_mean, 2) << std::setw(12)
     << fmt(crepe_acc, 2) << std::setw(11) << fmt(midi_acc, 2) << '\n';
  return os.str();
}

// ---- bleed experiment --------------------------------------------------------------

nlohmann::json BleedReport::to_json() const {
  return {{"corruption_rate", corruption_rate},
          {"rg_accuracy", rg_accuracy},
          {"cl_accuracy", cl_accuracy},
          {"test_frames", test_frames}};
}

namespace {

constexpr int kBleedStrings[2] = {2, 3};

struct BleedClip {
  Excerpt clean;
  Excerpt corrupted;
};

BleedClip make_bleed_clip(const std::string& id, double seconds, double rate, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto T = static_cast<Eigen::Index>(std::llround(seconds * kFrameRate));
  const double duration = static_cast<double>(T) / kFrameRate;

  NoteEventList notes;
  std::vector<std::vector<double>> pitch(2, std::vector<double>(static_cast<std::size_t>(T), kNaN));
  for (int k = 0; k < 2; ++k) {
    const int s = kBleedStrings[k];
    double t = 0.05 * u(rng);
    while (true) {
      const double len = 0.2 + 0.4 * u(rng);
      if (t + len > duration) break;
      const auto f0 = static_cast<std::size_t>(std::ceil(t * kFrameRate));
      const auto f1 = std::min(static_cast<std::size_t>(T), static_cast<std::size_t>(std::ceil((t + len) * kFrameRate)));
      double p = 0.0;
      bool ok = false;
      for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
        p = kOpenStringMidi[s] + std::floor(13.0 * u(rng));
        ok = true;
        if (k == 1)
          for (std::size_t f = f0; f < f1; ++f)
            if (std::isfinite(pitch[0][f]) && std::abs(pitch[0][f] - p) < 3.0) ok = false;
      }
      if (ok) {
        notes.push_back({s, t, t + len, p, 0.5 + 0.4 * u(rng)});
        for (std::size_t f = f0; f < f1; ++f) pitch[k][f] = p;
      }
      t += len + 0.1 * u(rng);
    }
  }
  validate_and_sort(notes);

  BleedClip clip;
  clip.clean.id = id;
  clip.clean.midi = encode_stringwise(notes, duration);
  ControlFeatures f(T);
  f.f0.setZero();
  f.l.setZero();
  f.p.setZero();
  f.c.setZero();
  for (int k = 0; k < 2; ++k) {
    const int s = kBleedStrings[k];
    for (Eigen::Index t = 0; t < T; ++t) {
      if (!clip.clean.midi.active(s, t)) continue;
      const double m = clip.clean.midi.pitch_midi[static_cast<std::size_t>(row_of(s, t, T))];
      pitch[k][static_cast<std::size_t>(t)] = m;
      f.f0(s, t) = scale_f0_midi(m);
      f.l(s, t) = 0.6 + 0.2 * u(rng);
      f.p(s, t) = 0.9;
      f.c(s, t) = 0.1 + 0.002 * (m - 40.0);
    }
    for (Eigen::Index t = 0; t < T; ++t)
      if (!clip.clean.midi.active(s, t)) pitch[k][static_cast<std::size_t>(t)] = kNaN;
  }
  clip.clean.features = f;

  // Bleed bursts: while both strings sound, the target of one jumps to the
  // other's pitch.
  clip.corrupted = clip.clean;
  for (int k = 0; k < 2; ++k) {
    const int s = kBleedStrings[k];
    const auto& other = pitch[1 - k];
    std::vector<Eigen::Index> eligible;
    for (Eigen::Index t = 0; t < T; ++t)
      if (clip.clean.midi.active(s, t) && std::isfinite(other[static_cast<std::size_t>(t)])) eligible.push_back(t);
    const auto want = static_cast<std::size_t>(std::llround(rate * static_cast<double>(eligible.size())));
    std::vector<bool> hit(static_cast<std::size_t>(T), false);
    std::size_t done = 0;
    for (int guard = 0; done < want && guard < 10000; ++guard) {
      const Eigen::Index start = eligible[static_cast<std::size_t>(u(rng) * static_cast<double>(eligible.size()))];
      const auto len = 4 + static_cast<Eigen::Index>(12.0 * u(rng));
      for (Eigen::Index t = start; t < std::min(T, start + len) && done < want; ++t) {
        const auto ti = static_cast<std::size_t>(t);
        if (hit[ti] || !std::isfinite(other[ti]) || !clip.clean.midi.active(s, t)) continue;
        hit[ti] = true;
        clip.corrupted.features.f0(s, t) = scale_f0_midi(other[ti]);
        ++done;
      }
    }
  }
  return clip;
}

Mat predicted_f0(TrainSystem system, Model& m, const StringwiseMidiInput& x) {
  if (system == TrainSystem::kRg) return control_forward_rg(m, x).f0;
  return argmax_decode(control_forward_cl(m, x).f0, x.n_frames);
}

}  // namespace

BleedReport bleed_experiment(std::uint64_t seed, const BleedConfig& cfg) {
  if (!(cfg.corruption_rate >= 0.0 && cfg.corruption_rate < 0.5))
    throw ConfigError("bleed corruption rate must lie in [0, 0.5)");
  if (cfg.n_train < 1 || cfg.n_test < 1 || cfg.steps < 0 || cfg.batch_size < 1)
    throw ConfigError("bleed experiment needs at least one training and one test clip");
  std::mt19937_64 rng(seed);
  std::vector<Excerpt> train_set, test_set;
  for (int i = 0; i < cfg.n_train; ++i)
    train_set.push_back(make_bleed_clip("train" + std::to_string(i), cfg.clip_s, cfg.corruption_rate, rng).corrupted);
  for (int i = 0; i < cfg.n_test; ++i)
    test_set.push_back(make_bleed_clip("test" + std::to_string(i), cfg.clip_s, cfg.corruption_rate, rng).clean);

  BleedReport report;
  report.corruption_rate = cfg.corruption_rate;
  for (const auto& ex : test_set)
    for (int s : kBleedStrings)
      for (Eigen::Index t = 0; t < ex.midi.n_frames; ++t) report.test_frames += ex.midi.active(s, t);

  for (TrainSystem system : {TrainSystem::kRg, TrainSystem::kCl}) {
    TrainConfig tc = TrainConfig::preset(system);
    tc.learning_rate = cfg.learning_rate;
    tc.seed = seed;
    Trainer tr(system, tc, cfg.model);
    std::mt19937_64 pick(seed + 17);
    std::uniform_int_distribution<std::size_t> which(0, train_set.size() - 1);
    std::vector<Excerpt> batch(static_cast<std::size_t>(cfg.batch_size));
    for (int step = 0; step < cfg.steps; ++step) {
      for (auto& b : batch) b = train_set[which(pick)];
      tr.step(batch);
    }
    long long hit = 0, kept = 0;
    for (const auto& ex : test_set) {
      const Mat f0 = predicted_f0(system, tr.model("control"), ex.midi);
      const auto acc = contour_pitch_accuracy(f0, ex.midi);
      long long n = 0;
      for (int s = 0; s < kNumStrings; ++s)
        for (Eigen::Index t = 0; t < ex.midi.n_frames; ++t) n += ex.midi.active(s, t);
      if (acc) {
        hit += std::llround(*acc * static_cast<double>(n));
        kept += n;
      }
    }
    const double acc = kept ? static_cast<double>(hit) / static_cast<double>(kept) : 0.0;
    (system == TrainSystem::kRg ? report.rg_accuracy : report.cl_accuracy) = acc;
  }
  return report;
}

}  // namespace hexsynth
