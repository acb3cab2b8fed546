#include "hexsynth/losses.hpp"

#include <cmath>
#include <numbers>

#include "hexsynth/fft.hpp"

namespace hexsynth {

void LossBreakdown::add(const std::string& name, double value) {
  components[name] = value;
  total = 0.0;
  for (const auto& [k, v] : components) total += v;
}

nlohmann::json LossBreakdown::to_json() const {
  nlohmann::json j;
  j["total"] = total;
  j["components"] = components;
  return j;
}

nlohmann::json LossBreakdown::to_json(long long step) const {
  nlohmann::json j = to_json();
  j["step"] = step;
  return j;
}

// ---- MSSL -------------------------------------------------------------------

std::size_t stft_frames(std::size_t n, int window) {
  const auto w = static_cast<std::size_t>(window);
  const std::size_t hop = std::max<std::size_t>(1, w / 4);
  if (n <= w) return 1;
  return 1 + (n - w + hop - 1) / hop;
}

namespace {

const std::vector<double>& hann(int w) {
  thread_local std::map<int, std::vector<double>> cache;
  auto it = cache.find(w);
  if (it != cache.end()) return it->second;
  std::vector<double> v(static_cast<std::size_t>(w));
  for (int j = 0; j < w; ++j) v[j] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * j / w);
  return cache.emplace(w, std::move(v)).first->second;
}

double sign(double x) { return (x > 0.0) - (x < 0.0); }

double mssl_impl(std::span<const double> y, std::span<const double> y_hat, double* grad, const MsslConfig& cfg) {
  if (y.size() != y_hat.size()) throw ShapeError("mssl: signals differ in length");
  if (cfg.window_sizes.empty()) throw ConfigError("mssl: no window sizes");
  const std::size_t n = y.size();
  if (grad) std::fill(grad, grad + n, 0.0);
  double total = 0.0;
  for (const int w : cfg.window_sizes) {
    if (w < 2) throw ConfigError("mssl: window sizes must be at least 2");
    const auto& win = hann(w);
    const std::size_t hop = std::max(1, w / 4);
    const std::size_t frames = stft_frames(n, w);
    const std::size_t bins = static_cast<std::size_t>(w) / 2 + 1;
    const double inv_count = 1.0 / static_cast<double>(frames * bins);
    std::vector<double> a(w), b(w), back(w);
    std::vector<Complex> A(bins), B(bins), Y(bins);
    double scale_sum = 0.0;
    for (std::size_t f = 0; f < frames; ++f) {
      const std::size_t start = f * hop;
      for (int j = 0; j < w; ++j) {
        const std::size_t idx = start + j;
        a[j] = idx < n ? win[j] * y[idx] : 0.0;
        b[j] = idx < n ? win[j] * y_hat[idx] : 0.0;
      }
      rfft(a, A);
      rfft(b, B);
      bool any_grad = false;
      for (std::size_t k = 0; k < bins; ++k) {
        const double ma = std::abs(A[k]), mb = std::abs(B[k]);
        const double dlin = mb - ma;
        const double dlog = std::log(mb + cfg.eps) - std::log(ma + cfg.eps);
        scale_sum += std::abs(dlin) + std::abs(dlog);
        if (!grad) continue;
        const double g_mag = (sign(dlin) + sign(dlog) / (mb + cfg.eps)) * inv_count;
        if (mb > 0.0 && g_mag != 0.0) {
          // d|B|/db_j = Re(conj(B) e^{-i theta}) / |B|, folded into a c2r inverse.
          const bool edge = k == 0 || (w % 2 == 0 && k == bins - 1);
          Y[k] = B[k] * (g_mag / mb) * (edge ? 1.0 : 0.5);
          any_grad = true;
        } else {
          Y[k] = 0.0;
        }
      }
      if (!grad || !any_grad) continue;
      irfft_unnormalized(Y, back);
      for (int j = 0; j < w; ++j) {
        const std::size_t idx = start + j;
        if (idx < n) grad[idx] += win[j] * back[j];
      }
    }
    total += scale_sum * inv_count;
  }
  return total;
}

}  // namespace

double mssl(std::span<const double> y, std::span<const double> y_hat, const MsslConfig& cfg) {
  return mssl_impl(y, y_hat, nullptr, cfg);
}

double mssl(const AudioBuffer& y, const AudioBuffer& y_hat, const MsslConfig& cfg) {
  return mssl_impl(y.samples, y_hat.samples, nullptr, cfg);
}

double mssl_with_grad(std::span<const double> y, std::span<const double> y_hat, std::span<double> grad,
                      const MsslConfig& cfg) {
  if (grad.size() != y_hat.size()) throw ShapeError("mssl: gradient buffer has the wrong length");
  return mssl_impl(y, y_hat, grad.data(), cfg);
}

// ---- regression -------------------------------------------------------------

namespace {

void check_same_shape(const ControlFeatures& a, const ControlFeatures& b) {
  if (a.n_frames() != b.n_frames() || a.f0.rows() != b.f0.rows()) throw ShapeError("loss: feature shapes differ");
}

double reduce_scale(Reduction r, Eigen::Index n_frames) {
  return r == Reduction::kMean ? 1.0 / static_cast<double>(kNumStrings * std::max<Eigen::Index>(1, n_frames)) : 1.0;
}

}  // namespace

LossBreakdown loss_regression(const ControlFeatures& pred, const ControlFeatures& target, Reduction reduction,
                              ControlFeatures* grad) {
  check_same_shape(pred, target);
  const double s = reduce_scale(reduction, target.n_frames());
  const Mat& l = target.l;
  const Mat w_f0 = l.cwiseProduct(target.p);
  const Mat e_f0 = pred.f0 - target.f0, e_l = pred.l - target.l, e_p = pred.p - target.p, e_c = pred.c - target.c;
  LossBreakdown out;
  out.add("f0", s * (e_f0.array().square() * w_f0.array()).sum());
  out.add("l", s * e_l.array().square().sum());
  out.add("p", s * (e_p.array().square() * l.array()).sum());
  out.add("c", s * (e_c.array().square() * l.array()).sum());
  if (grad) {
    *grad = ControlFeatures(target.n_frames());
    grad->f0 = 2.0 * s * e_f0.cwiseProduct(w_f0);
    grad->l = 2.0 * s * e_l;
    grad->p = 2.0 * s * e_p.cwiseProduct(l);
    grad->c = 2.0 * s * e_c.cwiseProduct(l);
  }
  return out;
}

// ---- classification ---------------------------------------------------------

void ControlProbabilities::validate(double tol) const {
  const Eigen::Index rows = f0.rows();
  if (rows % kNumStrings != 0 || f0.cols() != kPitchBins || l.rows() != rows || p.rows() != rows ||
      c.rows() != rows || l.cols() != kFeatureBins || p.cols() != kFeatureBins || c.cols() != kFeatureBins)
    throw ShapeError("probabilities: inconsistent shapes");
  for (const Mat* m : {&f0, &l, &p, &c}) {
    if (!m->allFinite() || (m->size() > 0 && (m->minCoeff() < 0.0 || m->maxCoeff() > 1.0 + tol)))
      throw ValidationError("probabilities: entries outside [0, 1]");
    for (Eigen::Index r = 0; r < rows; ++r)
      if (std::abs(m->row(r).sum() - 1.0) > tol)
        throw ValidationError("probabilities: row " + std::to_string(r) + " does not sum to 1");
  }
}

namespace {

// -sum_r w_r log(max(P[r, bin_r], floor)); gradient only touches the target bins.
double weighted_nll(const Mat& probs, const std::vector<int>& bins, const Mat& weight, double scale, Mat* grad) {
  if (grad) *grad = Mat::Zero(probs.rows(), probs.cols());
  const Eigen::Index T = weight.cols();
  double sum = 0.0;
  for (Eigen::Index s = 0; s < kNumStrings; ++s)
    for (Eigen::Index t = 0; t < T; ++t) {
      const Eigen::Index r = row_of(s, t, T);
      const double w = weight(s, t);
      if (w == 0.0) continue;
      const double raw = probs(r, bins[static_cast<std::size_t>(r)]);
      const double p = std::max(raw, kLogProbFloor);
      sum -= w * std::log(p);
      if (grad && raw > kLogProbFloor) (*grad)(r, bins[static_cast<std::size_t>(r)]) = -scale * w / p;
    }
  return scale * sum;
}

}  // namespace

double loss_f0_classification(const Mat& f0_probs, const ControlFeatures& target, Reduction reduction, Mat* grad) {
  const Eigen::Index T = target.n_frames();
  if (f0_probs.rows() != kNumStrings * T || f0_probs.cols() != kPitchBins)
    throw ShapeError("loss: F0 probabilities must be (6T, 305)");
  std::vector<int> bins(static_cast<std::size_t>(kNumStrings * T));
  for (Eigen::Index s = 0; s < kNumStrings; ++s)
    for (Eigen::Index t = 0; t < T; ++t) bins[static_cast<std::size_t>(row_of(s, t, T))] = quantize(target.f0(s, t), kPitchBins);
  const Mat w = target.l.cwiseProduct(target.p);
  return weighted_nll(f0_probs, bins, w, reduce_scale(reduction, T), grad);
}

LossBreakdown loss_classification(const ControlProbabilities& pred, const ControlFeatures& target, Reduction reduction,
                                  ControlProbabilities* grad) {
  pred.validate();
  const Eigen::Index T = target.n_frames();
  if (pred.n_frames() != T) throw ShapeError("loss: probability and target frame counts differ");
  const QuantizedControlFeatures q = quantize_features(target);
  const double s = reduce_scale(reduction, T);
  const Mat ones = Mat::Ones(kNumStrings, T);
  LossBreakdown out;
  if (grad) *grad = ControlProbabilities{};
  out.add("f0", weighted_nll(pred.f0, q.f0, target.l.cwiseProduct(target.p), s, grad ? &grad->f0 : nullptr));
  out.add("l", weighted_nll(pred.l, q.l, ones, s, grad ? &grad->l : nullptr));
  out.add("p", weighted_nll(pred.p, q.p, target.l, s, grad ? &grad->p : nullptr));
  out.add("c", weighted_nll(pred.c, q.c, target.l, s, grad ? &grad->c : nullptr));
  return out;
}

LossBreakdown loss_joint(double f0_component, const AudioBuffer& y, const AudioBuffer& y_hat, const MsslConfig& cfg) {
  LossBreakdown out;
  out.add("f0", f0_component);
  out.add("mssl", mssl(y, y_hat, cfg));
  return out;
}

LossBreakdown loss_unified(double f0_component, const AudioBuffer& y, const AudioBuffer& y_hat, const MsslConfig& cfg) {
  return loss_joint(f0_component, y, y_hat, cfg);
}

}  // namespace hexsynth
