#include "hexsynth/dsp_synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "hexsynth/features.hpp"
#include "hexsynth/fft.hpp"

namespace hexsynth {
namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr int kNoiseSegment = 2 * kHopSamples;                // 750
constexpr int kNoiseFft = 2048;
constexpr int kNoisePad = (kNoiseFft - kNoiseSegment) / 2;   // 649
constexpr int kNoiseBins = kNoiseFft / 2 + 1;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t string_seed(std::uint64_t seed, int string) {
  return splitmix64(seed * 7919u + static_cast<std::uint64_t>(string) + 1);
}

// Frame index and interpolation weight for sample n.
struct Interp {
  Eigen::Index lo;
  Eigen::Index hi;
  double alpha;
};

Interp interp_at(std::size_t n, Eigen::Index n_frames) {
  const auto lo = static_cast<Eigen::Index>(n / kHopSamples);
  if (lo + 1 >= n_frames) return {n_frames - 1, n_frames - 1, 0.0};
  return {lo, lo + 1, static_cast<double>(n % kHopSamples) / kHopSamples};
}

// Anti-aliased, normalized, a-scaled harmonic amplitudes per frame, plus the
// normalized distribution used by the backward pass.
struct HarmonicTables {
  Mat amp;   // (T, K)
  Mat dist;  // (T, K) masked H / sum
  std::vector<double> mask_sum;
  std::vector<int> n_active;  // harmonics below Nyquist per frame
  std::vector<double> f0_hz;
};

HarmonicTables harmonic_tables(std::span<const double> f0_hz, const Mat& H, std::span<const double> a) {
  const auto T = static_cast<Eigen::Index>(f0_hz.size());
  if (H.rows() != T || H.cols() != kNumHarmonics || static_cast<Eigen::Index>(a.size()) != T)
    throw ShapeError("harmonic_synth: expected H (T, 128) and a (T) matching f0");
  HarmonicTables tab;
  tab.amp = Mat::Zero(T, kNumHarmonics);
  tab.dist = Mat::Zero(T, kNumHarmonics);
  tab.mask_sum.assign(T, 0.0);
  tab.n_active.assign(T, 0);
  tab.f0_hz.resize(T);
  for (Eigen::Index t = 0; t < T; ++t) {
    const double hz = f0_hz[t];
    if (!(hz > 0.0) || !std::isfinite(hz)) throw RangeError("harmonic_synth: f0 must be positive and finite");
    tab.f0_hz[t] = hz;
    int active = 0;
    while (active < kNumHarmonics && (active + 1) * hz < kNyquistHz) ++active;
    tab.n_active[t] = active;
    double sum = 0.0;
    for (int k = 0; k < active; ++k) sum += H(t, k);
    tab.mask_sum[t] = sum;
    if (sum <= 0.0) continue;
    for (int k = 0; k < active; ++k) {
      tab.dist(t, k) = H(t, k) / sum;
      tab.amp(t, k) = a[t] * tab.dist(t, k);
    }
  }
  return tab;
}

// Instantaneous phase of the fundamental, wrapped to [0, 2 pi).
std::vector<double> fundamental_phase(const std::vector<double>& f0_hz) {
  const auto f = upsample_controls(f0_hz);
  std::vector<double> phase(f.size());
  double acc = 0.0;
  for (std::size_t n = 0; n < f.size(); ++n) {
    acc += kTwoPi * f[n] / kSampleRate;
    acc = std::fmod(acc, kTwoPi);
    phase[n] = acc;
  }
  return phase;
}

// Fills s[k] = sin((k + 1) phi) for k < count.
inline void harmonic_sines(double phi, int count, double* s) {
  if (count <= 0) return;
  const double s1 = std::sin(phi);
  const double c2 = 2.0 * std::cos(phi);
  double prev = 0.0, cur = s1;
  for (int k = 0; k < count; ++k) {
    s[k] = cur;
    const double next = c2 * cur - prev;
    prev = cur;
    cur = next;
  }
}

const std::vector<double>& noise_window() {
  static const std::vector<double> w = [] {
    std::vector<double> v(kNoiseSegment);
    for (int j = 0; j < kNoiseSegment; ++j) v[j] = 0.5 - 0.5 * std::cos(kTwoPi * j / kNoiseSegment);
    return v;
  }();
  return w;
}

// Band b is centered at (b + 0.5) * 187.5 Hz; FFT bin k maps to a linear
// blend of its two neighbouring bands.
struct BandWeight {
  int lo;
  int hi;
  double w_hi;
};

const std::vector<BandWeight>& band_weights() {
  static const std::vector<BandWeight> table = [] {
    std::vector<BandWeight> out(kNoiseBins);
    const double band_width = kNyquistHz / kNumNoiseBands;
    for (int k = 0; k < kNoiseBins; ++k) {
      const double freq = static_cast<double>(k) * kSampleRate / kNoiseFft;
      const double pos = freq / band_width - 0.5;
      if (pos <= 0.0) {
        out[k] = {0, 0, 0.0};
      } else if (pos >= kNumNoiseBands - 1) {
        out[k] = {kNumNoiseBands - 1, kNumNoiseBands - 1, 0.0};
      } else {
        const int lo = static_cast<int>(std::floor(pos));
        out[k] = {lo, lo + 1, pos - lo};
      }
    }
    return out;
  }();
  return table;
}

void band_response(const Mat& N, Eigen::Index frame, std::vector<double>& resp) {
  const auto& bw = band_weights();
  for (int k = 0; k < kNoiseBins; ++k)
    resp[k] = (1.0 - bw[k].w_hi) * N(frame, bw[k].lo) + bw[k].w_hi * N(frame, bw[k].hi);
}

// Windowed noise segment for segment index f (covering samples
// [(f - 1) * 375, (f + 1) * 375)), placed at offset kNoisePad of the FFT buffer.
void noise_segment(const std::vector<double>& noise, Eigen::Index f, std::vector<double>& buf) {
  std::fill(buf.begin(), buf.end(), 0.0);
  const auto& w = noise_window();
  const std::ptrdiff_t start = (static_cast<std::ptrdiff_t>(f) - 1) * kHopSamples;
  const auto n = static_cast<std::ptrdiff_t>(noise.size());
  for (int j = 0; j < kNoiseSegment; ++j) {
    const std::ptrdiff_t idx = start + j;
    if (idx >= 0 && idx < n) buf[kNoisePad + j] = w[j] * noise[idx];
  }
}

}  // namespace

// ---- parameter containers ---------------------------------------------------

SynthesisParams SynthesisParams::zeros(Eigen::Index n_frames) {
  SynthesisParams p;
  p.H = Mat::Zero(kNumStrings * n_frames, kNumHarmonics);
  p.a = Mat::Zero(kNumStrings, n_frames);
  p.N = Mat::Zero(kNumStrings * n_frames, kNumNoiseBands);
  return p;
}

void SynthesisParams::validate() const {
  const Eigen::Index T = n_frames();
  if (a.rows() != kNumStrings || H.rows() != kNumStrings * T || H.cols() != kNumHarmonics ||
      N.rows() != kNumStrings * T || N.cols() != kNumNoiseBands)
    throw ShapeError("synthesis params: inconsistent shapes");
  for (const Mat* m : {&H, &a, &N}) {
    if (!m->allFinite()) throw ValidationError("synthesis params: non-finite values");
    if (m->size() > 0 && m->minCoeff() < 0.0) throw ValidationError("synthesis params: negative values");
  }
}

SynthesisParams SynthesisParams::slice(Eigen::Index start, Eigen::Index count) const {
  const Eigen::Index T = n_frames();
  if (start < 0 || count < 0 || start + count > T) throw ShapeError("synthesis params: slice out of range");
  SynthesisParams out = zeros(count);
  out.a = a.middleCols(start, count);
  for (int s = 0; s < kNumStrings; ++s) {
    out.H.middleRows(s * count, count) = H.middleRows(s * T + start, count);
    out.N.middleRows(s * count, count) = N.middleRows(s * T + start, count);
  }
  return out;
}

ReverbBank ReverbBank::zeros() { return {Mat::Zero(kNumStrings, kReverbLength)}; }

ReverbBank ReverbBank::random_init(std::uint64_t seed) {
  ReverbBank r = zeros();
  std::mt19937_64 rng(seed);
  for (Eigen::Index i = 0; i < r.ir.size(); ++i)
    r.ir.data()[i] = 1e-4 * (2.0 * ((rng() >> 11) * 0x1.0p-53) - 1.0);
  return r;
}

void ReverbBank::validate() const {
  if (ir.rows() != kNumStrings || ir.cols() != kReverbLength) throw ShapeError("reverb: expected (6, 12000)");
  if (!ir.allFinite()) throw ValidationError("reverb: non-finite impulse response");
}

// ---- controls ---------------------------------------------------------------

std::vector<double> upsample_controls(std::span<const double> frames) {
  const auto T = static_cast<Eigen::Index>(frames.size());
  std::vector<double> out(frames.size() * kHopSamples);
  for (std::size_t n = 0; n < out.size(); ++n) {
    const Interp ip = interp_at(n, T);
    out[n] = frames[ip.lo] + ip.alpha * (frames[ip.hi] - frames[ip.lo]);
  }
  return out;
}

Mat upsample_controls(const Mat& frames) {
  const Eigen::Index T = frames.rows();
  Mat out(T * kHopSamples, frames.cols());
  for (Eigen::Index n = 0; n < out.rows(); ++n) {
    const Interp ip = interp_at(static_cast<std::size_t>(n), T);
    out.row(n) = frames.row(ip.lo) + ip.alpha * (frames.row(ip.hi) - frames.row(ip.lo));
  }
  return out;
}

// ---- harmonic oscillators ---------------------------------------------------

std::vector<double> f0_unit_to_hz(std::span<const double> f0_unit) {
  std::vector<double> hz(f0_unit.size());
  for (std::size_t t = 0; t < hz.size(); ++t) hz[t] = unscale_f0(f0_unit[t]);
  return hz;
}

AudioBuffer harmonic_synth(std::span<const double> f0_unit, const Mat& H, std::span<const double> a) {
  return harmonic_synth_hz(f0_unit_to_hz(f0_unit), H, a);
}

HarmonicGrad harmonic_synth_backward(std::span<const double> f0_unit, const Mat& H, std::span<const double> a,
                                     std::span<const double> grad_out) {
  return harmonic_synth_backward_hz(f0_unit_to_hz(f0_unit), H, a, grad_out);
}

AudioBuffer harmonic_synth_hz(std::span<const double> f0_hz, const Mat& H, std::span<const double> a) {
  const auto T = static_cast<Eigen::Index>(f0_hz.size());
  const HarmonicTables tab = harmonic_tables(f0_hz, H, a);
  const auto phase = fundamental_phase(tab.f0_hz);
  AudioBuffer out(phase.size());
  std::vector<double> s(kNumHarmonics);
  for (std::size_t n = 0; n < phase.size(); ++n) {
    const Interp ip = interp_at(n, T);
    const int count = std::max(tab.n_active[ip.lo], tab.n_active[ip.hi]);
    harmonic_sines(phase[n], count, s.data());
    const double* lo = tab.amp.row(ip.lo).data();
    const double* hi = tab.amp.row(ip.hi).data();
    double acc_lo = 0.0, acc_hi = 0.0;
    for (int k = 0; k < count; ++k) {
      acc_lo += lo[k] * s[k];
      acc_hi += hi[k] * s[k];
    }
    out.samples[n] = acc_lo + ip.alpha * (acc_hi - acc_lo);
  }
  return out;
}

HarmonicGrad harmonic_synth_backward_hz(std::span<const double> f0_hz, const Mat& H, std::span<const double> a,
                                        std::span<const double> grad_out) {
  const auto T = static_cast<Eigen::Index>(f0_hz.size());
  const HarmonicTables tab = harmonic_tables(f0_hz, H, a);
  const auto phase = fundamental_phase(tab.f0_hz);
  if (grad_out.size() != phase.size()) throw ShapeError("harmonic_synth_backward: gradient length mismatch");

  Mat d_amp = Mat::Zero(T, kNumHarmonics);
  std::vector<double> s(kNumHarmonics);
  for (std::size_t n = 0; n < phase.size(); ++n) {
    const double g = grad_out[n];
    if (g == 0.0) continue;
    const Interp ip = interp_at(n, T);
    const int count = std::max(tab.n_active[ip.lo], tab.n_active[ip.hi]);
    harmonic_sines(phase[n], count, s.data());
    const double g_lo = g * (1.0 - ip.alpha), g_hi = g * ip.alpha;
    double* dlo = d_amp.row(ip.lo).data();
    double* dhi = d_amp.row(ip.hi).data();
    if (ip.lo == ip.hi) {
      for (int k = 0; k < count; ++k) dlo[k] += g * s[k];
    } else {
      for (int k = 0; k < count; ++k) {
        dlo[k] += g_lo * s[k];
        dhi[k] += g_hi * s[k];
      }
    }
  }

  // amp_k = a * H_k / S over unmasked k, S = sum of unmasked H.
  HarmonicGrad grad{Mat::Zero(T, kNumHarmonics), std::vector<double>(T, 0.0)};
  for (Eigen::Index t = 0; t < T; ++t) {
    const int active = tab.n_active[t];
    const double sum = tab.mask_sum[t];
    if (sum <= 0.0) continue;
    double dot = 0.0;
    for (int k = 0; k < active; ++k) dot += d_amp(t, k) * tab.dist(t, k);
    grad.da[t] = dot;
    const double scale = a[t] / sum;
    for (int k = 0; k < active; ++k) grad.dH(t, k) = scale * (d_amp(t, k) - dot);
  }
  return grad;
}

// ---- filtered noise ---------------------------------------------------------

std::vector<double> white_noise(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<double> out(n);
  for (auto& v : out) v = 2.0 * ((rng() >> 11) * 0x1.0p-53) - 1.0;
  return out;
}

AudioBuffer noise_synth(const Mat& N, std::size_t n_samples, std::uint64_t seed) {
  const Eigen::Index T = N.rows();
  if (N.cols() != kNumNoiseBands) throw ShapeError("noise_synth: expected 128 bands");
  AudioBuffer out(n_samples);
  if (T == 0 || n_samples == 0) return out;
  const auto noise = white_noise(n_samples, seed);
  std::vector<double> buf(kNoiseFft), resp(kNoiseBins), y(kNoiseFft);
  std::vector<Complex> spec(kNoiseBins);
  const Eigen::Index segments = static_cast<Eigen::Index>((n_samples + kHopSamples - 1) / kHopSamples) + 1;
  for (Eigen::Index f = 0; f < segments; ++f) {
    const Eigen::Index frame = std::min(f, T - 1);
    if (N.row(frame).isZero(0.0)) continue;
    noise_segment(noise, f, buf);
    rfft(buf, spec);
    band_response(N, frame, resp);
    for (int k = 0; k < kNoiseBins; ++k) spec[k] *= resp[k] / kNoiseFft;
    irfft_unnormalized(spec, y);
    const std::ptrdiff_t origin = (static_cast<std::ptrdiff_t>(f) - 1) * kHopSamples - kNoisePad;
    for (int i = 0; i < kNoiseFft; ++i) {
      const std::ptrdiff_t idx = origin + i;
      if (idx >= 0 && idx < static_cast<std::ptrdiff_t>(n_samples)) out.samples[idx] += y[i];
    }
  }
  return out;
}

Mat noise_synth_backward(const Mat& N, std::size_t n_samples, std::uint64_t seed, std::span<const double> grad_out) {
  const Eigen::Index T = N.rows();
  if (grad_out.size() != n_samples) throw ShapeError("noise_synth_backward: gradient length mismatch");
  Mat dN = Mat::Zero(T, kNumNoiseBands);
  if (T == 0 || n_samples == 0) return dN;
  const auto noise = white_noise(n_samples, seed);
  const auto& bw = band_weights();
  std::vector<double> buf(kNoiseFft), gbuf(kNoiseFft);
  std::vector<Complex> spec(kNoiseBins), gspec(kNoiseBins);
  const Eigen::Index segments = static_cast<Eigen::Index>((n_samples + kHopSamples - 1) / kHopSamples) + 1;
  for (Eigen::Index f = 0; f < segments; ++f) {
    const Eigen::Index frame = std::min(f, T - 1);
    const std::ptrdiff_t origin = (static_cast<std::ptrdiff_t>(f) - 1) * kHopSamples - kNoisePad;
    bool any = false;
    for (int i = 0; i < kNoiseFft; ++i) {
      const std::ptrdiff_t idx = origin + i;
      gbuf[i] = (idx >= 0 && idx < static_cast<std::ptrdiff_t>(n_samples)) ? grad_out[idx] : 0.0;
      any = any || gbuf[i] != 0.0;
    }
    if (!any) continue;
    noise_segment(noise, f, buf);
    rfft(buf, spec);
    rfft(gbuf, gspec);
    // y = irfft(R * X) / n  =>  dL/dR_k = c_k Re(X_k conj(G_k)) / n.
    for (int k = 0; k < kNoiseBins; ++k) {
      const double c = (k == 0 || k == kNoiseBins - 1) ? 1.0 : 2.0;
      const double d_resp = c * (spec[k] * std::conj(gspec[k])).real() / kNoiseFft;
      dN(frame, bw[k].lo) += (1.0 - bw[k].w_hi) * d_resp;
      if (bw[k].w_hi != 0.0) dN(frame, bw[k].hi) += bw[k].w_hi * d_resp;
    }
  }
  return dN;
}

// ---- reverb -----------------------------------------------------------------

AudioBuffer reverb_apply(const AudioBuffer& dry, std::span<const double> ir) {
  AudioBuffer out = dry;
  if (dry.size() == 0 || ir.empty()) return out;
  const auto wet = fft_convolve(dry.samples, ir);
  for (std::size_t n = 0; n < out.size(); ++n) out.samples[n] += wet[n];
  return out;
}

ReverbGrad reverb_backward(std::span<const double> dry, std::span<const double> ir, std::span<const double> grad_out) {
  const std::size_t n = dry.size();
  if (grad_out.size() != n) throw ShapeError("reverb_backward: gradient length mismatch");
  ReverbGrad g{std::vector<double>(grad_out.begin(), grad_out.end()), std::vector<double>(ir.size(), 0.0)};
  if (n == 0 || ir.empty()) return g;
  std::vector<double> rev(grad_out.rbegin(), grad_out.rend());
  // d_dry[t] += sum_j g[t + j] ir[j];  d_ir[j] = sum_u g[u + j] dry[u].
  const auto c_ir = fft_convolve(rev, ir);
  for (std::size_t t = 0; t < n; ++t) g.d_dry[t] += c_ir[n - 1 - t];
  const auto c_dry = fft_convolve(rev, dry);
  for (std::size_t j = 0; j < ir.size() && j < n; ++j) g.d_ir[j] = c_dry[n - 1 - j];
  return g;
}

// ---- voices -----------------------------------------------------------------

AudioBuffer mix_voices(std::span<const AudioBuffer> per_string) {
  if (per_string.empty()) return AudioBuffer();
  AudioBuffer out(per_string.front().size(), per_string.front().sample_rate);
  for (const auto& v : per_string) {
    if (v.size() != out.size()) throw ShapeError("mix_voices: voices differ in length");
    for (std::size_t n = 0; n < out.size(); ++n) out.samples[n] += v.samples[n];
  }
  return out;
}

namespace {

void check_synth_shapes(const SynthesisParams& params, const Mat& f0_unit, const ReverbBank& reverb) {
  params.validate();
  reverb.validate();
  if (f0_unit.rows() != kNumStrings || f0_unit.cols() != params.n_frames())
    throw ShapeError("synthesize: f0 must be (6, n_frames)");
}

Mat string_rows(const Mat& m, int s, Eigen::Index T) { return m.middleRows(s * T, T); }

}  // namespace

SynthOutput synthesize(const SynthesisParams& params, const Mat& f0_unit, const ReverbBank& reverb,
                       std::uint64_t noise_seed) {
  check_synth_shapes(params, f0_unit, reverb);
  const Eigen::Index T = params.n_frames();
  const std::size_t n_samples = static_cast<std::size_t>(T) * kHopSamples;
  SynthOutput out;
  out.strings.reserve(kNumStrings);
  for (int s = 0; s < kNumStrings; ++s) {
    const RowVec f0 = f0_unit.row(s);
    const RowVec a = params.a.row(s);
    AudioBuffer dry = harmonic_synth({f0.data(), static_cast<std::size_t>(T)}, string_rows(params.H, s, T),
                                     {a.data(), static_cast<std::size_t>(T)});
    const AudioBuffer noise = noise_synth(string_rows(params.N, s, T), n_samples, string_seed(noise_seed, s));
    for (std::size_t n = 0; n < n_samples; ++n) dry.samples[n] += noise.samples[n];
    const RowVec ir = reverb.ir.row(s);
    out.strings.push_back(reverb_apply(dry, {ir.data(), static_cast<std::size_t>(ir.size())}));
  }
  out.mixture = mix_voices(out.strings);
  return out;
}

SynthGrad synthesize_backward(const SynthesisParams& params, const Mat& f0_unit, const ReverbBank& reverb,
                              std::uint64_t noise_seed, std::span<const double> grad_mixture) {
  check_synth_shapes(params, f0_unit, reverb);
  const Eigen::Index T = params.n_frames();
  const std::size_t n_samples = static_cast<std::size_t>(T) * kHopSamples;
  if (grad_mixture.size() != n_samples) throw ShapeError("synthesize_backward: gradient length mismatch");
  SynthGrad g{Mat::Zero(params.H.rows(), params.H.cols()), Mat::Zero(kNumStrings, T),
              Mat::Zero(params.N.rows(), params.N.cols()), Mat::Zero(kNumStrings, kReverbLength)};
  for (int s = 0; s < kNumStrings; ++s) {
    const RowVec f0 = f0_unit.row(s);
    const RowVec a = params.a.row(s);
    const std::span<const double> f0s{f0.data(), static_cast<std::size_t>(T)};
    const std::span<const double> as{a.data(), static_cast<std::size_t>(T)};
    const Mat Hs = string_rows(params.H, s, T);
    const Mat Ns = string_rows(params.N, s, T);
    const std::uint64_t seed = string_seed(noise_seed, s);

    AudioBuffer dry = harmonic_synth(f0s, Hs, as);
    const AudioBuffer noise = noise_synth(Ns, n_samples, seed);
    for (std::size_t n = 0; n < n_samples; ++n) dry.samples[n] += noise.samples[n];
    const RowVec ir = reverb.ir.row(s);
    const ReverbGrad rg = reverb_backward(dry.samples, {ir.data(), static_cast<std::size_t>(ir.size())}, grad_mixture);
    g.d_ir.row(s) = Eigen::Map<const RowVec>(rg.d_ir.data(), kReverbLength);

    const HarmonicGrad hg = harmonic_synth_backward(f0s, Hs, as, rg.d_dry);
    g.dH.middleRows(s * T, T) = hg.dH;
    g.da.row(s) = Eigen::Map<const RowVec>(hg.da.data(), T);
    g.dN.middleRows(s * T, T) = noise_synth_backward(Ns, n_samples, seed, rg.d_dry);
  }
  return g;
}

// ---- windowed rendering -------------------------------------------------------

RenderPlan plan_windows(Eigen::Index total_frames, const RenderConfig& cfg) {
  const auto window = static_cast<Eigen::Index>(std::llround(cfg.window_s * kFrameRate));
  const auto hop = static_cast<Eigen::Index>(std::llround(cfg.hop_s * kFrameRate));
  if (window <= 0 || hop <= 0 || hop > window) throw ConfigError("render: need 0 < hop <= window");
  RenderPlan plan;
  plan.total_samples = static_cast<std::size_t>(total_frames) * kHopSamples;
  if (total_frames <= window) {
    plan.windows.push_back({0, total_frames});
    return plan;
  }
  const Eigen::Index n_windows = 1 + (total_frames - window + hop - 1) / hop;
  const auto xfade_len = static_cast<std::size_t>(std::llround(cfg.crossfade_s * kSampleRate));
  const auto xfade_local = static_cast<std::size_t>(std::llround((cfg.hop_s + cfg.crossfade_offset_s) * kSampleRate));
  for (Eigen::Index k = 0; k < n_windows; ++k) {
    const Eigen::Index start = k * hop;
    plan.windows.push_back({start, std::min(window, total_frames - start)});
    if (k > 0) {
      const std::size_t prev_start = static_cast<std::size_t>((k - 1) * hop) * kHopSamples;
      plan.crossfades.push_back({prev_start + xfade_local, xfade_len});
    }
  }
  for (std::size_t k = 0; k < plan.crossfades.size(); ++k) {
    const auto& xf = plan.crossfades[k];
    const std::size_t next_start = static_cast<std::size_t>(plan.windows[k + 1].start_frame) * kHopSamples;
    const std::size_t prev_end =
        static_cast<std::size_t>(plan.windows[k].start_frame + plan.windows[k].n_frames) * kHopSamples;
    if (xf.start_sample < next_start || xf.start_sample + xf.length > prev_end)
      throw ConfigError("render: crossfade must lie inside the window overlap");
  }
  return plan;
}

AudioBuffer render_windowed(Eigen::Index total_frames, const WindowSynth& synth, const RenderConfig& cfg) {
  const RenderPlan plan = plan_windows(total_frames, cfg);
  AudioBuffer out(plan.total_samples);
  for (std::size_t k = 0; k < plan.windows.size(); ++k) {
    const auto& w = plan.windows[k];
    const AudioBuffer audio = synth(w.start_frame, w.n_frames, k);
    const std::size_t expected = static_cast<std::size_t>(w.n_frames) * kHopSamples;
    if (audio.size() != expected) throw ShapeError("render: window synthesizer returned the wrong length");
    const std::size_t offset = static_cast<std::size_t>(w.start_frame) * kHopSamples;
    std::size_t from = 0;
    if (k > 0) {
      const auto& xf = plan.crossfades[k - 1];
      for (std::size_t i = 0; i < xf.length; ++i) {
        const std::size_t n = xf.start_sample + i;
        const double alpha = static_cast<double>(i) / static_cast<double>(xf.length);
        out.samples[n] += alpha * (audio.samples[n - offset] - out.samples[n]);
      }
      from = xf.start_sample + xf.length - offset;
    }
    for (std::size_t i = from; i < audio.size(); ++i) out.samples[offset + i] = audio.samples[i];
  }
  return out;
}

}  // namespace hexsynth
