#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace hexsynth {

struct GradcheckConfig {
  double clip_s = 0.25;
  int coordinates = 20;  // per parameter group
  double step = 1e-3;
  double tolerance = 1e-3;  // relative
  std::uint64_t seed = 0;
};

struct GradcheckEntry {
  std::string group;  // H, a, N, ir, audio
  long long index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double tolerance = 0.0;

  double max_error(const std::string& group = "") const;
  bool passed() const;
  nlohmann::json to_json() const;
};

// |a - n| / max(|a|, |n|), zero when both vanish.
double relative_error(double analytic, double numeric);

// Extrapolated central differences (first step cfg.step) of the multi-scale
// spectral loss of the synthesizer output against silence, with respect to H,
// a, N and the reverb IRs.
GradcheckReport gradcheck_synthesis(const GradcheckConfig& cfg = {});

// The loss between two different 0.1 s signals with respect to the raw
// samples of one, plain central differences with a 1e-6 step.
GradcheckReport gradcheck_audio(const GradcheckConfig& cfg = {});

}  // namespace hexsynth
