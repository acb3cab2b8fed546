#pragma once

#include <cmath>
#include <complex>
#include <unistd.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "hexsynth/audio.hpp"
#include "hexsynth/common.hpp"

namespace testutil {

inline hexsynth::AudioBuffer sine(double hz, double amp, double seconds, double phase = 0.0) {
  const auto n = static_cast<std::size_t>(std::llround(seconds * hexsynth::kSampleRate));
  hexsynth::AudioBuffer a(n);
  for (std::size_t i = 0; i < n; ++i)
    a.samples[i] = amp * std::sin(2.0 * std::numbers::pi * hz * i / hexsynth::kSampleRate + phase);
  return a;
}

// Sum of the first `n_harmonics` partials with 1/k amplitudes, peak ~ amp.
inline hexsynth::AudioBuffer harmonic_tone(double hz, double amp, double seconds, int n_harmonics = 8) {
  const auto n = static_cast<std::size_t>(std::llround(seconds * hexsynth::kSampleRate));
  hexsynth::AudioBuffer a(n);
  for (int k = 1; k <= n_harmonics; ++k) {
    if (k * hz >= hexsynth::kNyquistHz) break;
    for (std::size_t i = 0; i < n; ++i)
      a.samples[i] += amp / (k * 1.5) * std::sin(2.0 * std::numbers::pi * k * hz * i / hexsynth::kSampleRate);
  }
  return a;
}

inline hexsynth::AudioBuffer white_noise(double amp, double seconds, std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(std::llround(seconds * hexsynth::kSampleRate));
  std::mt19937_64 rng(seed);
  hexsynth::AudioBuffer a(n);
  for (auto& v : a.samples) v = amp * (2.0 * ((rng() >> 11) * 0x1.0p-53) - 1.0);
  return a;
}

// Naive DFT magnitude at an integer bin, for checks independent of FFTW.
inline double dft_magnitude(const std::vector<double>& x, std::size_t bin) {
  std::complex<double> acc;
  const double n = static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    acc += x[i] * std::polar(1.0, -2.0 * std::numbers::pi * bin * i / n);
  return std::abs(acc);
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("hexsynth_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

template <typename T>
double mean(const std::vector<T>& v, std::size_t from = 0, std::size_t to = SIZE_MAX) {
  to = std::min(to, v.size());
  double s = 0.0;
  for (std::size_t i = from; i < to; ++i) s += v[i];
  return s / static_cast<double>(to - from);
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace testutil
