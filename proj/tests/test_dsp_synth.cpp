#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "hexsynth/dsp_synth.hpp"
#include "hexsynth/features.hpp"
#include "hexsynth/fft.hpp"
#include "test_util.hpp"

using namespace hexsynth;

namespace {

std::vector<double> magnitudes(const std::vector<double>& x) {
  std::vector<double> m;
  for (const auto& c : rfft(x)) m.push_back(std::abs(c));
  return m;
}

Mat one_hot_h(Eigen::Index T, int k) {
  Mat H = Mat::Zero(T, kNumHarmonics);
  H.col(k).setOnes();
  return H;
}

double inner(const std::vector<double>& a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST_CASE("upsample_controls") {
  const std::vector<double> two{0.0, 1.0};
  const auto up = upsample_controls(two);
  CHECK(up.size() == 750);
  CHECK(up[0] == 0.0);
  CHECK(up[187] == doctest::Approx(0.5).epsilon(1.0 / 375));
  CHECK(up[375] == 1.0);
  CHECK(up[749] == 1.0);
  for (std::size_t n = 1; n < up.size(); ++n) CHECK(up[n] >= up[n - 1]);

  const std::vector<double> flat(10, 0.3);
  for (double v : upsample_controls(flat)) CHECK(v == 0.3);

  Mat m(3, 2);
  m << 0, 10, 1, 20, 2, 30;
  const Mat u = upsample_controls(m);
  CHECK(u.rows() == 1125);
  CHECK(u(375 + 75, 0) == doctest::Approx(1.2));
  CHECK(u(375 + 75, 1) == doctest::Approx(22.0));
}

TEST_CASE("harmonic_synth fidelity") {
  const Eigen::Index T = 128;  // 1 s, 1 Hz FFT bins
  SUBCASE("440 Hz fundamental only") {
    const std::vector<double> f0(T, scale_f0(440.0));
    const std::vector<double> a(T, 0.5);
    const auto out = harmonic_synth(f0, one_hot_h(T, 0), a);
    REQUIRE(out.size() == 48000);
    const auto mag = magnitudes(out.samples);
    const auto peak = std::max_element(mag.begin(), mag.end()) - mag.begin();
    CHECK(peak == 440);
    // 0.5 amplitude sine over N samples gives |X| = 0.25 N.
    CHECK(mag[440] == doctest::Approx(0.25 * 48000).epsilon(1e-4));
    CHECK(testutil::dft_magnitude(out.samples, 440) == doctest::Approx(mag[440]).epsilon(1e-9));
    double worst = 0.0;
    for (std::size_t k = 0; k < mag.size(); ++k)
      if (k != 440) worst = std::max(worst, mag[k]);
    CHECK(20.0 * std::log10(mag[440] / worst) >= 40.0);
  }
  SUBCASE("anti-alias mask at 13 kHz keeps only the fundamental") {
    const std::vector<double> f0(T, 13000.0);
    const std::vector<double> a(T, 0.5);
    const Mat H = Mat::Constant(T, kNumHarmonics, 1.0);
    const auto out = harmonic_synth_hz(f0, H, a);
    for (std::size_t n = 0; n < out.size(); ++n)
      CHECK(out.samples[n] == doctest::Approx(0.5 * std::sin(2.0 * std::numbers::pi * 13000.0 * (n + 1) / 48000.0))
                                  .epsilon(1e-9)
                                  .scale(1.0));
    const auto mag = magnitudes(out.samples);
    for (std::size_t k = 0; k < mag.size(); ++k)
      if (k != 13000) CHECK(mag[k] < 1e-6 * mag[13000]);
  }
  SUBCASE("silence and amplitude bound") {
    const std::vector<double> f0(T, scale_f0(110.0));
    for (double v : harmonic_synth(f0, Mat::Constant(T, kNumHarmonics, 1.0), std::vector<double>(T, 0.0)).samples)
      CHECK(v == 0.0);
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Mat H(T, kNumHarmonics);
    std::vector<double> a(T);
    for (Eigen::Index i = 0; i < H.size(); ++i) H.data()[i] = u(rng);
    for (auto& v : a) v = 0.8 * u(rng);
    const double amax = *std::max_element(a.begin(), a.end());
    for (double v : harmonic_synth(f0, H, a).samples) CHECK(std::abs(v) <= amax + 1e-12);
  }
  SUBCASE("harmonic k sits at k times f0") {
    const std::vector<double> f0(T, 100.0);
    const auto out = harmonic_synth_hz(f0, one_hot_h(T, 6), std::vector<double>(T, 0.5));
    const auto mag = magnitudes(out.samples);
    CHECK(std::max_element(mag.begin(), mag.end()) - mag.begin() == 700);
  }
}

TEST_CASE("noise_synth") {
  const Eigen::Index T = 256;
  const std::size_t n = T * kHopSamples;
  SUBCASE("zero bands are silent") {
    for (double v : noise_synth(Mat::Zero(T, 128), n, 1).samples) CHECK(v == 0.0);
  }
  SUBCASE("flat unit response reproduces the noise source") {
    const auto out = noise_synth(Mat::Ones(T, 128), n, 9);
    const auto src = white_noise(n, 9);
    double err = 0.0;
    for (std::size_t i = 0; i < n; ++i) err = std::max(err, std::abs(out.samples[i] - src[i]));
    CHECK(err < 1e-12);
  }
  SUBCASE("flat bands have equal power within 3 dB") {
    const auto mag = magnitudes(noise_synth(Mat::Ones(T, 128), n, 4).samples);
    const double bins_per_band = static_cast<double>(mag.size() - 1) / 128.0;
    std::vector<double> power(128, 0.0);
    for (std::size_t k = 1; k < mag.size(); ++k)
      power[std::min<std::size_t>(127, static_cast<std::size_t>((k - 1) / bins_per_band))] += mag[k] * mag[k];
    const double avg = testutil::mean(power);
    for (double p : power) CHECK(std::abs(10.0 * std::log10(p / avg)) <= 3.0);
  }
  SUBCASE("top band only is high-pass") {
    Mat N = Mat::Zero(T, 128);
    N.col(127).setOnes();
    const auto mag = magnitudes(noise_synth(N, n, 5).samples);
    const double hz_per_bin = 48000.0 / static_cast<double>(n);
    double low = 0.0, high = 0.0;
    for (std::size_t k = 0; k < mag.size(); ++k) {
      const double f = k * hz_per_bin;
      if (f < 12000.0) low += mag[k] * mag[k];
      if (f > 18000.0) high += mag[k] * mag[k];
    }
    CHECK(10.0 * std::log10(high / low) >= 30.0);
  }
  SUBCASE("seeded determinism") {
    Mat N = Mat::Constant(T, 128, 0.3);
    CHECK(noise_synth(N, n, 42).samples == noise_synth(N, n, 42).samples);
    CHECK(noise_synth(N, n, 42).samples != noise_synth(N, n, 43).samples);
  }
}

TEST_CASE("reverb_apply") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  AudioBuffer dry(3000);
  for (auto& v : dry.samples) v = u(rng);
  std::vector<double> ir(kReverbLength);
  for (auto& v : ir) v = 0.01 * u(rng);

  SUBCASE("matches direct convolution") {
    const auto out = reverb_apply(dry, ir);
    double max_ref = 0.0, max_err = 0.0;
    for (std::size_t t = 0; t < dry.size(); ++t) {
      double acc = dry.samples[t];
      for (std::size_t j = 0; j <= t; ++j) acc += dry.samples[t - j] * ir[j];
      max_ref = std::max(max_ref, std::abs(acc));
      max_err = std::max(max_err, std::abs(acc - out.samples[t]));
    }
    CHECK(max_err / max_ref < 1e-6);
  }
  SUBCASE("identities") {
    CHECK(reverb_apply(dry, std::vector<double>(kReverbLength, 0.0)).samples == dry.samples);
    std::vector<double> delta(kReverbLength, 0.0);
    delta[0] = 1.0;
    const auto twice = reverb_apply(dry, delta);
    for (std::size_t t = 0; t < dry.size(); ++t) CHECK(twice.samples[t] == doctest::Approx(2.0 * dry.samples[t]));
    delta[0] = 0.0;
    delta[375] = 1.0;
    const auto shifted = reverb_apply(dry, delta);
    for (std::size_t t = 0; t < dry.size(); ++t) {
      const double expect = dry.samples[t] + (t >= 375 ? dry.samples[t - 375] : 0.0);
      CHECK(shifted.samples[t] == doctest::Approx(expect).scale(1.0).epsilon(1e-12));
    }
  }
  SUBCASE("backward matches finite differences") {
    std::vector<double> g(dry.size());
    for (auto& v : g) v = u(rng);
    const auto rg = reverb_backward(dry.samples, ir, g);
    const auto loss = [&](const AudioBuffer& d, const std::vector<double>& h) { return inner(reverb_apply(d, h).samples, g); };
    for (std::size_t idx : {0u, 17u, 1500u, 2999u}) {
      AudioBuffer p = dry, m = dry;
      p.samples[idx] += 1e-3;
      m.samples[idx] -= 1e-3;
      CHECK(rg.d_dry[idx] == doctest::Approx((loss(p, ir) - loss(m, ir)) / 2e-3).epsilon(1e-6));
    }
    for (std::size_t idx : {0u, 1u, 2000u, 2999u}) {
      auto p = ir, m = ir;
      p[idx] += 1e-3;
      m[idx] -= 1e-3;
      CHECK(rg.d_ir[idx] == doctest::Approx((loss(dry, p) - loss(dry, m)) / 2e-3).epsilon(1e-6));
    }
    CHECK(rg.d_ir[5000] == 0.0);  // beyond the clip length
  }
}

TEST_CASE("mix_voices") {
  std::vector<AudioBuffer> v(6, AudioBuffer(100));
  v[2] = testutil::sine(440.0, 0.3, 100.0 / 48000.0);
  CHECK(mix_voices(v).samples == v[2].samples);
  std::rotate(v.begin(), v.begin() + 2, v.end());
  CHECK(mix_voices(v).samples == v[0].samples);
  v[1] = v[0];
  for (auto& x : v[1].samples) x = -x;
  for (double x : mix_voices(v).samples) CHECK(x == 0.0);
  v[3] = AudioBuffer(99);
  CHECK_THROWS_AS(mix_voices(v), ShapeError);
}

TEST_CASE("synthesize and its gradient") {
  const Eigen::Index T = 32;  // 0.25 s
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  SynthesisParams p = SynthesisParams::zeros(T);
  for (Mat* m : {&p.H, &p.a, &p.N})
    for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = u(rng);
  p.a *= 0.3;
  p.N *= 0.05;
  Mat f0(6, T);
  for (int s = 0; s < 6; ++s)
    for (Eigen::Index t = 0; t < T; ++t) f0(s, t) = scale_f0(82.4 * std::pow(1.335, s) * (1.0 + 0.002 * t));
  ReverbBank rv = ReverbBank::random_init(5);

  SUBCASE("mixture is the sum of the string channels") {
    const auto out = synthesize(p, f0, rv, 1);
    REQUIRE(out.strings.size() == 6);
    CHECK(out.mixture.size() == static_cast<std::size_t>(T) * kHopSamples);
    CHECK(out.mixture.samples == mix_voices(out.strings).samples);
    const auto zero = synthesize(SynthesisParams::zeros(T), f0, ReverbBank::zeros(), 1);
    for (double v : zero.mixture.samples) CHECK(v == 0.0);
  }
  SUBCASE("one active string") {
    SynthesisParams q = SynthesisParams::zeros(T);
    q.H.middleRows(4 * T, T) = p.H.middleRows(4 * T, T);
    q.a.row(4) = p.a.row(4);
    const auto out = synthesize(q, f0, rv, 1);
    CHECK(out.mixture.samples == out.strings[4].samples);
  }
  SUBCASE("shape errors") {
    CHECK_THROWS_AS(synthesize(p, Mat::Zero(6, T - 1), rv, 1), ShapeError);
    SynthesisParams bad = p;
    bad.a(0, 0) = -1.0;
    CHECK_THROWS_AS(synthesize(bad, f0, rv, 1), ValidationError);
  }
  SUBCASE("analytic gradient matches central differences") {
    const std::size_t n = static_cast<std::size_t>(T) * kHopSamples;
    std::vector<double> g(n);
    std::uniform_real_distribution<double> gu(-1.0, 1.0);
    for (auto& v : g) v = gu(rng);
    const auto loss = [&](const SynthesisParams& q, const ReverbBank& r) { return inner(synthesize(q, f0, r, 7).mixture.samples, g); };
    const SynthGrad grad = synthesize_backward(p, f0, rv, 7, g);
    const double h = 1e-3;
    std::uniform_int_distribution<Eigen::Index> pick(0, 1 << 30);
    const auto check = [&](Mat SynthesisParams::*field, const Mat& analytic) {
      for (int i = 0; i < 5; ++i) {
        const Eigen::Index idx = pick(rng) % analytic.size();
        SynthesisParams plus = p, minus = p;
        (plus.*field).data()[idx] += h;
        (minus.*field).data()[idx] -= h;
        const double fd = (loss(plus, rv) - loss(minus, rv)) / (2 * h);
        const double an = analytic.data()[idx];
        CAPTURE(idx);
        CHECK(std::abs(fd - an) <= 1e-3 * std::max({std::abs(fd), std::abs(an), 1e-6}));
      }
    };
    check(&SynthesisParams::H, grad.dH);
    check(&SynthesisParams::a, grad.da);
    check(&SynthesisParams::N, grad.dN);
    for (int i = 0; i < 5; ++i) {
      const Eigen::Index idx = pick(rng) % grad.d_ir.size();
      ReverbBank plus = rv, minus = rv;
      plus.ir.data()[idx] += h;
      minus.ir.data()[idx] -= h;
      const double fd = (loss(p, plus) - loss(p, minus)) / (2 * h);
      CHECK(std::abs(fd - grad.d_ir.data()[idx]) <= 1e-3 * std::max({std::abs(fd), 1e-6}));
    }
  }
}

TEST_CASE("windowed rendering") {
  SUBCASE("12 s has two windows and one 4800-sample crossfade") {
    const auto plan = plan_windows(12 * 128);
    REQUIRE(plan.windows.size() == 2);
    CHECK(plan.windows[0].start_frame == 0);
    CHECK(plan.windows[0].n_frames == 1024);
    CHECK(plan.windows[1].start_frame == 512);
    CHECK(plan.windows[1].n_frames == 1024);
    REQUIRE(plan.crossfades.size() == 1);
    CHECK(plan.crossfades[0].start_sample == 6 * 48000);
    CHECK(plan.crossfades[0].length == 4800);
    CHECK(plan.total_samples == 12 * 48000);
  }
  SUBCASE("short and partial recordings") {
    CHECK(plan_windows(5 * 128).windows.size() == 1);
    CHECK(plan_windows(8 * 128).windows.size() == 1);
    const auto p = plan_windows(13 * 128);
    CHECK(p.windows.size() == 3);
    CHECK(p.windows[2].n_frames == 5 * 128);
  }
  SUBCASE("constant windows assemble to a constant") {
    const auto out = render_windowed(21 * 128, [](Eigen::Index, Eigen::Index frames, std::size_t) {
      AudioBuffer b(static_cast<std::size_t>(frames) * kHopSamples);
      std::fill(b.samples.begin(), b.samples.end(), 0.37);
      return b;
    });
    CHECK(out.size() == 21u * 48000);
    for (double v : out.samples) CHECK(v == 0.37);
  }
  SUBCASE("identical overlapping content reproduces the source") {
    const auto src = testutil::harmonic_tone(196.0, 0.5, 12.0);
    const auto out = render_windowed(12 * 128, [&](Eigen::Index start, Eigen::Index frames, std::size_t) {
      const auto first = src.samples.begin() + start * kHopSamples;
      return AudioBuffer(std::vector<double>(first, first + frames * kHopSamples));
    });
    CHECK(out.samples == src.samples);
  }
  SUBCASE("8 s equals single-window synthesis and the crossfade is linear") {
    const auto one = testutil::white_noise(0.5, 8.0, 3);
    const auto out = render_windowed(8 * 128, [&](Eigen::Index, Eigen::Index, std::size_t) { return one; });
    CHECK(out.samples == one.samples);

    const auto mixed = render_windowed(12 * 128, [](Eigen::Index, Eigen::Index frames, std::size_t k) {
      AudioBuffer b(static_cast<std::size_t>(frames) * kHopSamples);
      std::fill(b.samples.begin(), b.samples.end(), k == 0 ? 0.0 : 1.0);
      return b;
    });
    CHECK(mixed.samples[6 * 48000 - 1] == 0.0);
    CHECK(mixed.samples[6 * 48000] == 0.0);
    CHECK(mixed.samples[6 * 48000 + 2400] == doctest::Approx(0.5));
    CHECK(mixed.samples[6 * 48000 + 4800] == 1.0);
  }
}
