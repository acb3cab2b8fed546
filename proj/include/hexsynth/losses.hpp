#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "hexsynth/audio.hpp"
#include "hexsynth/features.hpp"
#include "hexsynth/tensor.hpp"

namespace hexsynth {

struct LossBreakdown {
  double total = 0.0;
  std::map<std::string, double> components;

  void add(const std::string& name, double value);
  nlohmann::json to_json() const;
  nlohmann::json to_json(long long step) const;
};

enum class Reduction { kSum, kMean };

// ---- multi-scale spectral loss ------------------------------------------------

struct MsslConfig {
  std::vector<int> window_sizes{192, 384, 768, 1526, 3072, 6144, 12288};
  double eps = 1e-7;
};

// Sum over window sizes of the mean absolute difference of linear and log
// STFT magnitudes (Hann window, hop w/4, FFT size w). Frames start at 0 and
// the tail is zero padded, so every sample is covered.
double mssl(std::span<const double> y, std::span<const double> y_hat, const MsslConfig& cfg = {});
double mssl(const AudioBuffer& y, const AudioBuffer& y_hat, const MsslConfig& cfg = {});

// Also writes d mssl / d y_hat into grad (same length as y_hat).
double mssl_with_grad(std::span<const double> y, std::span<const double> y_hat, std::span<double> grad,
                      const MsslConfig& cfg = {});

// Number of STFT frames used for a signal of n samples at window w.
std::size_t stft_frames(std::size_t n, int window);

// ---- control-feature losses -------------------------------------------------

// Squared errors: f0 weighted by target l*p, p and c by target l, l unweighted.
LossBreakdown loss_regression(const ControlFeatures& pred, const ControlFeatures& target,
                              Reduction reduction = Reduction::kSum, ControlFeatures* grad = nullptr);

// Per-bin probabilities, one row per (string, frame).
struct ControlProbabilities {
  Mat f0;  // (6T, 305)
  Mat l;   // (6T, 64)
  Mat p;
  Mat c;

  Eigen::Index n_frames() const { return f0.rows() / kNumStrings; }
  void validate(double tol = 1e-4) const;  // rows sum to one, entries in [0, 1]
};

inline constexpr double kLogProbFloor = 1e-7;

// Weighted negative log probability of the target bins; target bins and
// weights come from the continuous target features.
LossBreakdown loss_classification(const ControlProbabilities& pred, const ControlFeatures& target,
                                  Reduction reduction = Reduction::kSum, ControlProbabilities* grad = nullptr);

// The F0 term alone: -sum l p log P(target bin). grad is (6T, 305).
double loss_f0_classification(const Mat& f0_probs, const ControlFeatures& target,
                              Reduction reduction = Reduction::kSum, Mat* grad = nullptr);

// F0 classification term plus MSSL; components are exactly {f0, mssl}.
LossBreakdown loss_joint(double f0_component, const AudioBuffer& y, const AudioBuffer& y_hat,
                         const MsslConfig& cfg = {});
LossBreakdown loss_unified(double f0_component, const AudioBuffer& y, const AudioBuffer& y_hat,
                           const MsslConfig& cfg = {});

}  // namespace hexsynth
