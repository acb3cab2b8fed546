#include "hexsynth/features.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "hexsynth/binary_io.hpp"
#include "hexsynth/fft.hpp"

namespace hexsynth {
namespace {

const double kMidiMin = 69.0 + 12.0 * std::log2(kMinF0Hz / 440.0);
const double kMidiMax = 69.0 + 12.0 * std::log2(kMaxF0Hz / 440.0);

constexpr double kSilencePower = 1e-20;
constexpr double kSilenceMagnitude = 1e-9;

std::vector<double> hann(int n) {
  std::vector<double> w(n);
  for (int i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);
  return w;
}

const std::vector<double>& analysis_window() {
  static const std::vector<double> w = hann(kAnalysisWindow);
  return w;
}

// Samples [center - len/2, center + len/2), zero outside the buffer.
void copy_frame(const AudioBuffer& audio, std::ptrdiff_t center, std::span<double> out) {
  const auto len = static_cast<std::ptrdiff_t>(out.size());
  const std::ptrdiff_t start = center - len / 2;
  const auto n = static_cast<std::ptrdiff_t>(audio.size());
  for (std::ptrdiff_t j = 0; j < len; ++j) {
    const std::ptrdiff_t idx = start + j;
    out[j] = (idx >= 0 && idx < n) ? audio.samples[idx] : 0.0;
  }
}

// Spectrum of the Hann-windowed frame centered on frame t.
std::vector<Complex> frame_spectrum(const AudioBuffer& audio, std::size_t t) {
  const auto& w = analysis_window();
  std::vector<double> buf(kAnalysisWindow);
  copy_frame(audio, static_cast<std::ptrdiff_t>(t) * kHopSamples, buf);
  for (int j = 0; j < kAnalysisWindow; ++j) buf[j] *= w[j];
  return rfft(buf);
}

void check_rate(const AudioBuffer& audio) {
  if (audio.sample_rate != kSampleRate)
    throw ValidationError("feature extraction expects 48 kHz audio, got " + std::to_string(audio.sample_rate));
}

void write_mat(binio::Writer& w, const Mat& m) { w.put_array<double>({m.data(), static_cast<std::size_t>(m.size())}); }

Mat read_mat(binio::Reader& r, Eigen::Index rows, Eigen::Index cols) {
  auto v = r.get_array<double>(static_cast<std::size_t>(rows * cols));
  return Eigen::Map<Mat>(v.data(), rows, cols);
}

Mat one_hot(const std::vector<int>& bins, int n_bins) {
  Mat m = Mat::Zero(static_cast<Eigen::Index>(bins.size()), n_bins);
  for (std::size_t i = 0; i < bins.size(); ++i) m(static_cast<Eigen::Index>(i), bins[i]) = 1.0;
  return m;
}

}  // namespace

double midi_from_hz(double hz) { return 69.0 + 12.0 * std::log2(hz / 440.0); }
double hz_from_midi(double midi) { return 440.0 * std::exp2((midi - 69.0) / 12.0); }

double scale_f0_midi(double midi) { return (midi - kMidiMin) / (kMidiMax - kMidiMin); }
double unscale_f0_midi(double unit) { return kMidiMin + unit * (kMidiMax - kMidiMin); }
double unscale_f0(double unit) { return hz_from_midi(unscale_f0_midi(unit)); }
double f0_unit_per_semitone() { return 1.0 / (kMidiMax - kMidiMin); }

double scale_f0(double hz) {
  if (!(hz >= kMinF0Hz && hz <= kMaxF0Hz))
    throw RangeError("F0 " + std::to_string(hz) + " Hz outside [35, 1200] Hz");
  if (hz == kMinF0Hz) return 0.0;
  if (hz == kMaxF0Hz) return 1.0;
  return scale_f0_midi(midi_from_hz(hz));
}

double scale_loudness(double db) { return (std::clamp(db, -80.0, 0.0) + 80.0) / 80.0; }

double scale_centroid(double centroid_hz, double sample_rate) { return centroid_hz / (sample_rate / 2.0); }

int quantize(double value, int n_bins) {
  if (n_bins < 1) throw RangeError("quantize: n_bins must be >= 1");
  if (!(value >= 0.0)) throw RangeError("quantize: value " + std::to_string(value) + " is negative");
  const double scaled = std::floor(value * n_bins);
  if (scaled >= n_bins - 1) return n_bins - 1;
  return static_cast<int>(scaled);
}

double dequantize(int bin, int n_bins) {
  if (bin < 0 || bin >= n_bins)
    throw RangeError("dequantize: bin " + std::to_string(bin) + " outside [0, " + std::to_string(n_bins) + ")");
  return (bin + 0.5) / n_bins;
}

double a_weighting_db(double f) {
  if (f <= 0.0) return -std::numeric_limits<double>::infinity();
  const double f2 = f * f;
  const double c1 = 20.598997 * 20.598997, c2 = 107.65265 * 107.65265, c3 = 737.86223 * 737.86223,
               c4 = 12194.217 * 12194.217;
  const double ra = c4 * f2 * f2 / ((f2 + c1) * std::sqrt((f2 + c2) * (f2 + c3)) * (f2 + c4));
  return 20.0 * std::log10(ra) + 2.0;
}

std::size_t frames_for_samples(std::size_t n_samples) { return n_samples / kHopSamples; }

std::vector<double> loudness_db(const AudioBuffer& audio) {
  return loudness_db(audio, 0, frames_for_samples(audio.size()));
}

std::vector<double> loudness_db(const AudioBuffer& audio, std::size_t first, std::size_t count) {
  check_rate(audio);
  static const std::vector<double> weights = [] {
    std::vector<double> g(kAnalysisWindow / 2 + 1);
    for (std::size_t k = 0; k < g.size(); ++k) {
      const double f = static_cast<double>(k) * kSampleRate / kAnalysisWindow;
      g[k] = k == 0 ? 0.0 : std::pow(10.0, a_weighting_db(f) / 10.0);
    }
    return g;
  }();
  // One-sided spectral power of a unit-amplitude sinusoid under the window.
  static const double reference = [] {
    double s = 0.0;
    for (double v : analysis_window()) s += v * v;
    return s * kAnalysisWindow / 4.0;
  }();

  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto spec = frame_spectrum(audio, first + i);
    double power = 0.0;
    for (std::size_t k = 0; k < spec.size(); ++k) power += std::norm(spec[k]) * weights[k];
    const double db = 10.0 * std::log10(power / reference + kSilencePower);
    out[i] = std::clamp(db, -80.0, 0.0);
  }
  return out;
}

std::vector<double> extract_loudness(const AudioBuffer& audio) {
  auto db = loudness_db(audio);
  for (double& v : db) v = scale_loudness(v);
  return db;
}

std::vector<double> extract_centroid(const AudioBuffer& audio) {
  check_rate(audio);
  const std::size_t n_frames = frames_for_samples(audio.size());
  std::vector<double> out(n_frames);
  for (std::size_t t = 0; t < n_frames; ++t) {
    const auto spec = frame_spectrum(audio, t);
    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < spec.size(); ++k) {
      const double mag = std::abs(spec[k]);
      num += mag * static_cast<double>(k) * kSampleRate / kAnalysisWindow;
      den += mag;
    }
    out[t] = den < kSilenceMagnitude ? 0.0 : std::clamp(scale_centroid(num / den, kSampleRate), 0.0, 1.0);
  }
  return out;
}

PitchContour estimate_f0_periodicity(const AudioBuffer& audio) {
  check_rate(audio);
  constexpr int kWindow = kAnalysisWindow;
  constexpr int kFft = 2 * kWindow;
  constexpr double kKeyThreshold = 0.9;
  const int min_lag = static_cast<int>(std::floor(kSampleRate / kMaxF0Hz));
  const int max_lag = static_cast<int>(std::ceil(kSampleRate / kMinF0Hz));

  const std::size_t n_frames = frames_for_samples(audio.size());
  PitchContour out;
  out.f0_hz.resize(n_frames);
  out.f0_unit.resize(n_frames);
  out.periodicity.resize(n_frames);

  std::vector<double> x(kWindow), padded(kFft), acf(kFft), nsdf(max_lag + 2);
  for (std::size_t t = 0; t < n_frames; ++t) {
    copy_frame(audio, static_cast<std::ptrdiff_t>(t) * kHopSamples, x);
    double energy = 0.0;
    for (double v : x) energy += v * v;
    if (energy < kSilencePower * kWindow) {
      out.f0_hz[t] = kMinF0Hz;
      out.f0_unit[t] = 0.0;
      out.periodicity[t] = 0.0;
      continue;
    }

    std::fill(padded.begin(), padded.end(), 0.0);
    std::copy(x.begin(), x.end(), padded.begin());
    auto spec = rfft(padded);
    for (auto& v : spec) v = std::norm(v);
    irfft_unnormalized(spec, acf);

    // nsdf(tau) = 2 r(tau) / m(tau) with m the summed energy of both overlaps.
    double m = 2.0 * energy;
    for (int tau = 0; tau <= max_lag + 1; ++tau) {
      if (tau > 0) m -= x[tau - 1] * x[tau - 1] + x[kWindow - tau] * x[kWindow - tau];
      const double r = acf[tau] / kFft;
      nsdf[tau] = m > kSilencePower ? std::clamp(2.0 * r / m, -1.0, 1.0) : 0.0;
    }

    // Key maxima: the largest value in each positive lobe after the first
    // negative-going zero crossing.
    std::vector<int> keys;
    int tau = 1;
    while (tau <= max_lag && nsdf[tau] > 0.0) ++tau;
    while (tau <= max_lag) {
      while (tau <= max_lag && nsdf[tau] <= 0.0) ++tau;
      if (tau > max_lag) break;
      int best = tau;
      for (; tau <= max_lag && nsdf[tau] > 0.0; ++tau)
        if (nsdf[tau] > nsdf[best]) best = tau;
      if (best >= min_lag && nsdf[best + 1] <= nsdf[best]) keys.push_back(best);
    }

    int chosen = -1;
    if (!keys.empty()) {
      double top = 0.0;
      for (int k : keys) top = std::max(top, nsdf[k]);
      for (int k : keys)
        if (nsdf[k] >= kKeyThreshold * top) {
          chosen = k;
          break;
        }
    } else {
      chosen = min_lag;
      for (int k = min_lag; k <= max_lag; ++k)
        if (nsdf[k] > nsdf[chosen]) chosen = k;
    }

    double lag = chosen;
    double peak = nsdf[chosen];
    if (chosen > 0 && chosen <= max_lag) {
      const double a = nsdf[chosen - 1], b = nsdf[chosen], c = nsdf[chosen + 1];
      const double denom = a - 2.0 * b + c;
      if (denom < 0.0) {
        const double shift = std::clamp(0.5 * (a - c) / denom, -0.5, 0.5);
        lag = chosen + shift;
        peak = b - 0.25 * (a - c) * shift;
      }
    }
    const double hz = std::clamp(static_cast<double>(kSampleRate) / lag, kMinF0Hz, kMaxF0Hz);
    out.f0_hz[t] = hz;
    out.f0_unit[t] = std::min(scale_f0(hz), std::nextafter(1.0, 0.0));
    out.periodicity[t] = std::clamp(peak, 0.0, 1.0);
  }
  return out;
}

ControlFeatures::ControlFeatures(Eigen::Index n_frames)
    : f0(Mat::Zero(kNumStrings, n_frames)),
      l(Mat::Zero(kNumStrings, n_frames)),
      p(Mat::Zero(kNumStrings, n_frames)),
      c(Mat::Zero(kNumStrings, n_frames)) {}

void ControlFeatures::validate() const {
  const Eigen::Index t = n_frames();
  for (const Mat* m : {&f0, &l, &p, &c}) {
    if (m->rows() != kNumStrings || m->cols() != t) throw ValidationError("control features: inconsistent shapes");
    if (!m->allFinite()) throw ValidationError("control features: non-finite values");
    if (m->size() > 0 && (m->minCoeff() < 0.0 || m->maxCoeff() > 1.0))
      throw ValidationError("control features: values outside [0, 1]");
  }
}

ControlFeatures ControlFeatures::slice(Eigen::Index start, Eigen::Index count) const {
  if (start < 0 || count < 0 || start + count > n_frames()) throw ShapeError("control features: slice out of range");
  ControlFeatures out;
  out.f0 = f0.middleCols(start, count);
  out.l = l.middleCols(start, count);
  out.p = p.middleCols(start, count);
  out.c = c.middleCols(start, count);
  return out;
}

Mat QuantizedControlFeatures::one_hot_f0() const { return one_hot(f0, kPitchBins); }
Mat QuantizedControlFeatures::one_hot_l() const { return one_hot(l, kFeatureBins); }
Mat QuantizedControlFeatures::one_hot_p() const { return one_hot(p, kFeatureBins); }
Mat QuantizedControlFeatures::one_hot_c() const { return one_hot(c, kFeatureBins); }

QuantizedControlFeatures quantize_features(const ControlFeatures& f) {
  QuantizedControlFeatures q;
  q.n_frames = f.n_frames();
  const auto n = static_cast<std::size_t>(kNumStrings * q.n_frames);
  q.f0.resize(n);
  q.l.resize(n);
  q.p.resize(n);
  q.c.resize(n);
  for (Eigen::Index s = 0; s < kNumStrings; ++s)
    for (Eigen::Index t = 0; t < q.n_frames; ++t) {
      const auto i = static_cast<std::size_t>(row_of(s, t, q.n_frames));
      q.f0[i] = quantize(f.f0(s, t), kPitchBins);
      q.l[i] = quantize(f.l(s, t), kFeatureBins);
      q.p[i] = quantize(f.p(s, t), kFeatureBins);
      q.c[i] = quantize(f.c(s, t), kFeatureBins);
    }
  return q;
}

void extract_string_features(const AudioBuffer& audio, int string, ControlFeatures& out) {
  const auto l = extract_loudness(audio);
  const auto c = extract_centroid(audio);
  const auto pitch = estimate_f0_periodicity(audio);
  const auto n = std::min<Eigen::Index>(out.n_frames(), static_cast<Eigen::Index>(l.size()));
  for (Eigen::Index t = 0; t < n; ++t) {
    out.l(string, t) = l[t];
    out.c(string, t) = c[t];
    out.f0(string, t) = pitch.f0_unit[t];
    out.p(string, t) = pitch.periodicity[t];
  }
}

ControlFeatures extract_features(const MultiChannelAudio& strings) {
  if (strings.num_channels() != kNumStrings)
    throw ShapeError("expected 6 string channels, got " + std::to_string(strings.num_channels()));
  ControlFeatures f(static_cast<Eigen::Index>(frames_for_samples(strings.num_samples())));
  for (int s = 0; s < kNumStrings; ++s) extract_string_features(strings.channel(s), s, f);
  return f;
}

namespace {
constexpr std::uint32_t kFeatureCacheVersion = 1;
}

void write_feature_cache(const std::filesystem::path& path, const ControlFeatures& f) {
  binio::Writer w(path);
  w.put_bytes("HXFC");
  w.put<std::uint32_t>(kFeatureCacheVersion);
  w.put<std::uint32_t>(kNumStrings);
  w.put<std::uint64_t>(static_cast<std::uint64_t>(f.n_frames()));
  w.put<double>(kFrameRate);
  for (const Mat* m : {&f.f0, &f.l, &f.p, &f.c}) write_mat(w, *m);
  w.finish();
}

ControlFeatures read_feature_cache(const std::filesystem::path& path) {
  binio::Reader r(path);
  r.expect_magic("HXFC");
  const auto version = r.get<std::uint32_t>();
  if (version != kFeatureCacheVersion) throw IoError("unsupported feature cache version in " + path.string());
  const auto strings = r.get<std::uint32_t>();
  const auto frames = static_cast<Eigen::Index>(r.get<std::uint64_t>());
  const auto rate = r.get<double>();
  if (strings != kNumStrings || rate != kFrameRate) throw IoError("feature cache shape mismatch in " + path.string());
  ControlFeatures f;
  f.f0 = read_mat(r, kNumStrings, frames);
  f.l = read_mat(r, kNumStrings, frames);
  f.p = read_mat(r, kNumStrings, frames);
  f.c = read_mat(r, kNumStrings, frames);
  return f;
}

}  // namespace hexsynth
