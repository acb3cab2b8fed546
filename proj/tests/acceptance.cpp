// Acceptance run: one PASS/FAIL line per criterion. Pass criterion names as
// arguments to run a subset.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "hexsynth/cli.hpp"
#include "hexsynth/corpus.hpp"
#include "hexsynth/dsp_synth.hpp"
#include "hexsynth/eval.hpp"
#include "hexsynth/fft.hpp"
#include "hexsynth/gradcheck.hpp"
#include "hexsynth/losses.hpp"
#include "hexsynth/pipeline.hpp"
#include "hexsynth/training.hpp"
#include "test_util.hpp"

using namespace hexsynth;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---- gradient oracle ---------------------------------------------------------------

Outcome gradient_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  GradcheckConfig cfg;
  cfg.clip_s = 0.25;
  cfg.coordinates = 20;
  cfg.step = 1e-3;
  cfg.tolerance = 1e-3;
  const GradcheckReport r = gradcheck_synthesis(cfg);
  const double secs = seconds_since(t0);
  std::string detail;
  bool counts = true;
  for (const char* g : {"H", "a", "N", "ir"}) {
    long long n = 0;
    for (const auto& e : r.entries) n += e.group == g;
    counts = counts && n >= 20;
    detail += fmt("%s %.1e (%lld)  ", g, r.max_error(g), n);
  }
  detail += fmt("in %.0f s", secs);
  return {r.passed() && counts && secs < 120.0, detail};
}

// ---- synthesis fidelity ------------------------------------------------------------

Outcome synthesis_fidelity() {
  const Eigen::Index T = 128;  // 1 s: 1 Hz bins
  Mat h1 = Mat::Zero(T, kNumHarmonics);
  h1.col(0).setOnes();
  const std::vector<double> a(T, 0.5);
  const auto tone = harmonic_synth(std::vector<double>(T, scale_f0(440.0)), h1, a);
  std::vector<double> mag;
  for (const auto& c : rfft(tone.samples)) mag.push_back(std::abs(c));
  const auto peak = std::max_element(mag.begin(), mag.end()) - mag.begin();
  double other = 0.0;
  for (std::size_t k = 0; k < mag.size(); ++k)
    if (k != 440) other = std::max(other, mag[k]);
  const double db = 20.0 * std::log10(mag[440] / other);

  // At 13 kHz every harmonic above the fundamental is at or past Nyquist.
  const auto high = harmonic_synth_hz(std::vector<double>(T, 13000.0), Mat::Constant(T, kNumHarmonics, 1.0), a);
  std::vector<double> hm;
  for (const auto& c : rfft(high.samples)) hm.push_back(std::abs(c));
  double leak = 0.0;
  for (std::size_t k = 0; k < hm.size(); ++k)
    if (k != 13000) leak = std::max(leak, hm[k]);
  const double high_db = 20.0 * std::log10(hm[13000] / std::max(leak, 1e-300));
  return {peak == 440 && db >= 40.0 && high_db >= 40.0,
          fmt("peak %ld Hz, others %.0f dB down; 13 kHz: others %.0f dB down", static_cast<long>(peak), db, high_db)};
}

// ---- loss identities ---------------------------------------------------------------

ControlFeatures random_features(Eigen::Index T, std::uint64_t seed) {
  ControlFeatures f(T);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 0.999);
  for (Mat* m : {&f.f0, &f.l, &f.p, &f.c})
    for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = u(rng);
  return f;
}

Mat one_hot(const std::vector<int>& bins, int n) {
  Mat m = Mat::Zero(static_cast<Eigen::Index>(bins.size()), n);
  for (std::size_t r = 0; r < bins.size(); ++r) m(static_cast<Eigen::Index>(r), bins[r]) = 1.0;
  return m;
}

ControlProbabilities perfect(const ControlFeatures& t) {
  const auto q = quantize_features(t);
  return {one_hot(q.f0, kPitchBins), one_hot(q.l, kFeatureBins), one_hot(q.p, kFeatureBins), one_hot(q.c, kFeatureBins)};
}

Mat random_probs(Eigen::Index rows, int bins, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.01, 1.0);
  Mat m(rows, bins);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  for (Eigen::Index r = 0; r < rows; ++r) m.row(r) /= m.row(r).sum();
  return m;
}

Outcome loss_identities() {
  const Eigen::Index T = 32;
  const ControlFeatures target = random_features(T, 1);
  std::mt19937_64 rng(2);
  bool ok = true;
  std::string detail;

  const auto rg0 = loss_regression(target, target);
  const auto cl0 = loss_classification(perfect(target), target);
  ok = ok && rg0.total == 0.0 && cl0.total == 0.0;
  detail += fmt("matching: rg %g, cl %g; ", rg0.total, cl0.total);

  // Zero loudness removes the f0, p and c terms; zero periodicity the f0 term.
  ControlFeatures silent = target;
  silent.l.setZero();
  const auto rgw = loss_regression(random_features(T, 3), silent);
  ControlFeatures unvoiced = target;
  unvoiced.p.setZero();
  const auto rgp = loss_regression(random_features(T, 4), unvoiced);
  ControlProbabilities noisy{random_probs(6 * T, kPitchBins, rng), random_probs(6 * T, kFeatureBins, rng),
                             random_probs(6 * T, kFeatureBins, rng), random_probs(6 * T, kFeatureBins, rng)};
  const auto clw = loss_classification(noisy, silent);
  const auto clp = loss_classification(noisy, unvoiced);
  const bool weights = rgw.components.at("f0") == 0.0 && rgw.components.at("p") == 0.0 &&
                       rgw.components.at("c") == 0.0 && rgp.components.at("f0") == 0.0 &&
                       clw.components.at("f0") == 0.0 && clw.components.at("p") == 0.0 &&
                       clw.components.at("c") == 0.0 && clp.components.at("f0") == 0.0 &&
                       rgw.components.at("l") > 0.0 && clw.components.at("l") > 0.0;
  ok = ok && weights;
  detail += std::string("zero-weight terms ") + (weights ? "exactly 0; " : "NONZERO; ");

  // One string predicts uniform loudness everywhere: T log 64.
  ControlFeatures loud = target;
  loud.l.setOnes();
  ControlProbabilities u = perfect(loud);
  u.l.topRows(T).setConstant(1.0 / kFeatureBins);
  const double got = loss_classification(u, loud).components.at("l");
  const double want = static_cast<double>(T) * std::log(64.0);
  const double rel = std::abs(got - want) / want;
  ok = ok && rel < 1e-12;
  detail += fmt("uniform %.6f vs T log 64 = %.6f", got, want);
  return {ok, detail};
}

// ---- quantization ------------------------------------------------------------------

Outcome quantization() {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  bool ok = true;
  std::string detail;
  for (int n : {kPitchBins, kFeatureBins}) {
    const double half = 0.5 / n;
    double worst = 0.0;
    for (int i = 0; i < 10000; ++i) {
      const double v = u(rng);
      worst = std::max(worst, std::abs(dequantize(quantize(v, n), n) - v));
    }
    const bool ends = quantize(0.0, n) == 0 && quantize(1.0, n) == n - 1;
    ok = ok && worst <= half && ends;
    detail += fmt("%d bins: max error %.3e <= %.3e, ends %s; ", n, worst, half, ends ? "ok" : "WRONG");
  }
  return {ok, detail};
}

// ---- overfit -------------------------------------------------------------------------

Outcome overfit_oracle() {
  SyntheticConfig sc;
  sc.duration_s = 2.0;
  const Recording clip = prepare_recording(synthetic_recording("overfit", 21, sc));
  bool ok = true;
  std::string detail;
  for (TrainSystem system : {TrainSystem::kUnified, TrainSystem::kSyn}) {
    const auto t0 = std::chrono::steady_clock::now();
    TrainConfig tc = TrainConfig::preset(system);
    tc.seed = 1;
    const OverfitResult r = overfit(system, clip, tc, ModelConfig::desk(), 2000, 0.5);
    const double secs = seconds_since(t0);
    ok = ok && r.reached && secs < 900.0;
    detail += fmt("%s: %.1f -> %.1f (%.0f%%) in %lld steps, %.0f s; ", to_string(system).c_str(), r.initial(),
                  r.curve.back(), 100.0 * (1.0 - r.curve.back() / r.initial()), r.steps, secs);
  }
  return {ok, detail};
}

// ---- bleed -------------------------------------------------------------------------

Outcome bleed() {
  const auto t0 = std::chrono::steady_clock::now();
  BleedConfig cfg;
  cfg.corruption_rate = 0.3;
  const BleedReport r = bleed_experiment(1, cfg);
  const double secs = seconds_since(t0);
  const double gap = r.cl_accuracy - r.rg_accuracy;
  return {r.cl_accuracy >= r.rg_accuracy && gap >= 0.1 && secs < 1800.0,
          fmt("rate 0.3: cl %.3f, rg %.3f, gap %.3f over %lld frames, %.0f s", r.cl_accuracy, r.rg_accuracy, gap,
              r.test_frames, secs)};
}

// ---- rendering -----------------------------------------------------------------------

Outcome rendering() {
  bool ok = true;
  std::string detail;

  const auto src = testutil::harmonic_tone(196.0, 0.5, 21.0);
  const auto copy = render_windowed(21 * kFrameRate, [&](Eigen::Index start, Eigen::Index frames, std::size_t) {
    const auto first = src.samples.begin() + start * kHopSamples;
    return AudioBuffer(std::vector<double>(first, first + frames * kHopSamples));
  });
  const bool identical = copy.samples == src.samples;
  ok = ok && identical;
  detail += std::string("overlapping copies ") + (identical ? "reproduce the input; " : "DIFFER; ");

  const RenderPlan plan = plan_windows(12 * kFrameRate);
  const auto stepped = render_windowed(12 * kFrameRate, [](Eigen::Index, Eigen::Index frames, std::size_t k) {
    return AudioBuffer(std::vector<double>(static_cast<std::size_t>(frames) * kHopSamples, k == 0 ? 0.0 : 1.0));
  });
  std::size_t blended = 0, first_blend = stepped.size();
  for (std::size_t i = 0; i < stepped.size(); ++i)
    if (stepped.samples[i] != 0.0 && stepped.samples[i] != 1.0) {
      ++blended;
      first_blend = std::min(first_blend, i);
    }
  // A 4800-sample linear fade from 0 to 1 starting at 0 leaves 4799 strictly mixed samples.
  const bool one_fade = plan.windows.size() == 2 && plan.crossfades.size() == 1 && plan.crossfades[0].length == 4800 &&
                        plan.crossfades[0].start_sample == 6u * kSampleRate && blended == 4799 &&
                        first_blend == 6u * kSampleRate + 1 && stepped.size() == 12u * kSampleRate;
  ok = ok && one_fade;
  detail += fmt("12 s: %zu windows, %zu crossfade(s) of %zu samples; ", plan.windows.size(), plan.crossfades.size(),
                plan.crossfades.empty() ? std::size_t{0} : plan.crossfades[0].length);

  SyntheticConfig sc;
  sc.duration_s = 8.0;
  const Recording rec = prepare_recording(synthetic_recording("render8", 5, sc));
  TrainConfig tc = TrainConfig::preset(TrainSystem::kSyn);
  tc.seed = 2;
  Renderer r(Trainer(TrainSystem::kSyn, tc, ModelConfig::desk()).checkpoint());
  const Conditioning cond{rec.midi, rec.features};
  const SynthOutput whole = r.render(cond, 4);
  const SynthOutput once = r.synthesize_once(cond, mix_seed(4, 0));
  bool same = whole.mixture.samples == once.mixture.samples && whole.mixture.size() == 384000;
  for (int s = 0; s < kNumStrings; ++s) same = same && whole.strings[s].samples == once.strings[s].samples;
  ok = ok && same;
  detail += std::string("8 s render ") + (same ? "equals one synthesis pass" : "DIFFERS from one synthesis pass");
  return {ok, detail};
}

// ---- split integrity -----------------------------------------------------------------

Outcome split_integrity() {
  const auto catalog = guitarset_shaped_catalog();
  const DatasetSplit s = split_dataset(catalog, 0);
  std::map<std::string, std::string> group;
  for (const auto& e : catalog) group[e.id] = e.group();
  std::set<std::string> test_groups, dev_groups;
  for (const auto& id : s.test) test_groups.insert(group[id]);
  for (const auto* part : {&s.train, &s.val})
    for (const auto& id : *part) dev_groups.insert(group[id]);
  std::size_t shared = 0;
  for (const auto& g : test_groups) shared += dev_groups.count(g);
  const bool sizes = catalog.size() == 360 && s.test.size() == 36 && s.val.size() == 18 && s.train.size() == 306;
  return {sizes && shared == 0, fmt("%zu items: test %zu, val %zu, train %zu; %zu groups shared", catalog.size(),
                                    s.test.size(), s.val.size(), s.train.size(), shared)};
}

// ---- determinism ---------------------------------------------------------------------

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / ("hexsynth_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  SyntheticConfig sc;
  sc.duration_s = 1.0;
  write_demo_corpus(root / "corpus", 20, 8, sc);
  if (!cli::cmd_extract({root / "corpus", root / "cache", 1, false}).ok()) return {false, "extraction failed"};
  cli::cmd_split(root / "corpus", root / "split.json", 1);

  const auto command = [&](TrainSystem system, const std::string& run) {
    cli::TrainCommand tc;
    tc.system = system;
    tc.corpus = root / "corpus";
    tc.cache = root / "cache";
    tc.split = root / "split.json";
    tc.out = root / run;
    tc.seed = 17;
    tc.max_epochs = 2;
    tc.excerpt_s = 0.5;
    if (system == TrainSystem::kJt) tc.syn_checkpoint = root / "syn_a" / "best.hxck";
    return tc;
  };
  bool ok = true;
  std::string detail;
  for (TrainSystem system :
       {TrainSystem::kSyn, TrainSystem::kRg, TrainSystem::kCl, TrainSystem::kJt, TrainSystem::kUnified}) {
    const std::string name = to_string(system);
    cli::cmd_train(command(system, name + "_a"));
    cli::cmd_train(command(system, name + "_b"));
    const std::string a = testutil::read_file(root / (name + "_a") / "best.hxck");
    const std::string b = testutil::read_file(root / (name + "_b") / "best.hxck");
    const bool same = !a.empty() && a == b;
    ok = ok && same;
    detail += name + (same ? " identical; " : " DIFFERENT; ");
  }
  fs::remove_all(root);
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient-oracle", gradient_oracle}, {"synthesis-fidelity", synthesis_fidelity},
      {"loss-identities", loss_identities}, {"quantization", quantization},
      {"overfit", overfit_oracle},          {"bleed", bleed},
      {"rendering", rendering},             {"split-integrity", split_integrity},
      {"determinism", determinism}};
  const std::set<std::string> only(argv + 1, argv + argc);
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    if (!only.empty() && !only.count(name)) continue;
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    while (!o.detail.empty() && (o.detail.back() == ' ' || o.detail.back() == ';')) o.detail.pop_back();
    std::printf("%s %-18s %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
