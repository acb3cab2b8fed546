#include "hexsynth/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <random>

#include "hexsynth/dsp_synth.hpp"
#include "hexsynth/features.hpp"
#include "hexsynth/losses.hpp"

namespace hexsynth {

double relative_error(double analytic, double numeric) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  return scale == 0.0 ? 0.0 : std::abs(analytic - numeric) / scale;
}

double GradcheckReport::max_error(const std::string& group) const {
  double worst = 0.0;
  for (const auto& e : entries)
    if (group.empty() || e.group == group) worst = std::max(worst, e.rel_error);
  return worst;
}

bool GradcheckReport::passed() const { return !entries.empty() && max_error() < tolerance; }

nlohmann::json GradcheckReport::to_json() const {
  nlohmann::json groups = nlohmann::json::object();
  for (const auto& e : entries) {
    auto& g = groups[e.group];
    if (g.is_null()) g = {{"coordinates", 0}, {"max_rel_error", 0.0}};
    g["coordinates"] = g.value("coordinates", 0) + 1;
    g["max_rel_error"] = std::max(g.value("max_rel_error", 0.0), e.rel_error);
  }
  return {{"tolerance", tolerance}, {"passed", passed()}, {"groups", groups}};
}

namespace {

// Ridders' extrapolation of central differences, starting at step h and
// shrinking by 1.4 per stage; stops once the error estimate grows.
double ridders(const std::function<double(double)>& f, double h) {
  constexpr int kStages = 12;
  constexpr double kShrink = 1.4, kShrink2 = kShrink * kShrink, kSafe = 2.0;
  double a[kStages][kStages];
  a[0][0] = (f(h) - f(-h)) / (2 * h);
  double best = a[0][0], err = std::numeric_limits<double>::max();
  for (int i = 1; i < kStages; ++i) {
    h /= kShrink;
    a[0][i] = (f(h) - f(-h)) / (2 * h);
    double fac = kShrink2;
    for (int j = 1; j <= i; ++j) {
      a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
      fac *= kShrink2;
      const double e = std::max(std::abs(a[j][i] - a[j - 1][i]), std::abs(a[j][i] - a[j - 1][i - 1]));
      if (e <= err) {
        err = e;
        best = a[j][i];
      }
    }
    if (std::abs(a[i][i] - a[i - 1][i - 1]) >= kSafe * err) break;
  }
  return best;
}

struct Problem {
  SynthesisParams params;
  Mat f0;
  ReverbBank reverb;
  AudioBuffer target;
  std::uint64_t noise_seed;
};

// Every string sounds a slowly gliding tone. The target is silence: with a
// sounding target the linear magnitude term has a kink wherever a bin crosses
// the target magnitude, and steps of 1e-3 straddle many of them.
Problem make_problem(Eigen::Index T, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  Problem pr;
  pr.f0.resize(kNumStrings, T);
  for (int s = 0; s < kNumStrings; ++s)
    for (Eigen::Index t = 0; t < T; ++t) pr.f0(s, t) = scale_f0(82.4 * std::pow(1.335, s) * (1.0 + 0.002 * t));
  pr.params = SynthesisParams::zeros(T);
  for (Mat* m : {&pr.params.H, &pr.params.a, &pr.params.N})
    for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = u(rng);
  pr.params.a *= 0.3;
  pr.params.N *= 0.05;
  pr.reverb = ReverbBank::random_init(rng());
  pr.noise_seed = rng();
  pr.target = AudioBuffer(static_cast<std::size_t>(T) * kHopSamples);
  return pr;
}

}  // namespace

GradcheckReport gradcheck_synthesis(const GradcheckConfig& cfg) {
  std::mt19937_64 rng(cfg.seed ^ 0x6A09E667F3BCC908ULL);
  const auto T = std::max<Eigen::Index>(1, std::llround(cfg.clip_s * kFrameRate));
  Problem pr = make_problem(T, rng);
  const auto loss = [&](const SynthesisParams& p, const ReverbBank& r) {
    return mssl(pr.target, synthesize(p, pr.f0, r, pr.noise_seed).mixture);
  };
  const AudioBuffer out = synthesize(pr.params, pr.f0, pr.reverb, pr.noise_seed).mixture;
  std::vector<double> g(out.size());
  mssl_with_grad(pr.target.samples, out.samples, g);
  const SynthGrad grad = synthesize_backward(pr.params, pr.f0, pr.reverb, pr.noise_seed, g);

  GradcheckReport report;
  report.tolerance = cfg.tolerance;
  const double h = cfg.step;
  std::uniform_int_distribution<long long> pick(0, 1LL << 40);
  const auto check = [&](const std::string& name, Mat* field, const Mat& analytic) {
    for (int i = 0; i < cfg.coordinates; ++i) {
      const Eigen::Index idx = pick(rng) % analytic.size();
      const double keep = field->data()[idx];
      const double fd = ridders(
          [&](double d) {
            field->data()[idx] = keep + d;
            const double v = loss(pr.params, pr.reverb);
            field->data()[idx] = keep;
            return v;
          },
          h);
      report.entries.push_back({name, idx, analytic.data()[idx], fd, relative_error(analytic.data()[idx], fd)});
    }
  };
  check("H", &pr.params.H, grad.dH);
  check("a", &pr.params.a, grad.da);
  check("N", &pr.params.N, grad.dN);
  check("ir", &pr.reverb.ir, grad.d_ir);
  return report;
}

GradcheckReport gradcheck_audio(const GradcheckConfig& cfg) {
  std::mt19937_64 rng(cfg.seed ^ 0xBB67AE8584CAA73BULL);
  const auto n = static_cast<std::size_t>(0.1 * kSampleRate);
  std::normal_distribution<double> nd(0.0, 0.2);
  std::vector<double> y(n), y_hat(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / kSampleRate;
    y[i] = 0.4 * std::sin(2 * std::numbers::pi * 330.0 * t) + 0.1 * nd(rng);
    y_hat[i] = 0.3 * std::sin(2 * std::numbers::pi * 311.0 * t) + 0.1 * nd(rng);
  }
  std::vector<double> grad(n);
  mssl_with_grad(y, y_hat, grad);
  GradcheckReport report;
  report.tolerance = cfg.tolerance;
  const double h = 1e-6;  // raw samples: a unit-scale step would leave the linear regime
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  for (int i = 0; i < cfg.coordinates; ++i) {
    const std::size_t idx = pick(rng);
    auto p = y_hat, m = y_hat;
    p[idx] += h;
    m[idx] -= h;
    const double fd = (mssl(std::span<const double>(y), p) - mssl(std::span<const double>(y), m)) / (2 * h);
    report.entries.push_back({"audio", static_cast<long long>(idx), grad[idx], fd, relative_error(grad[idx], fd)});
  }
  return report;
}

}  // namespace hexsynth
