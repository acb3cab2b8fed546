#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace hexsynth {

inline constexpr int kNumStrings = 6;
inline constexpr int kSampleRate = 48000;
inline constexpr int kFrameRate = 128;
inline constexpr int kHopSamples = kSampleRate / kFrameRate;  // 375
inline constexpr int kPitchBins = 305;
inline constexpr int kVelBins = 64;
inline constexpr int kFeatureBins = 64;
inline constexpr int kNumHarmonics = 128;
inline constexpr int kNumNoiseBands = 128;
inline constexpr int kReverbLength = kSampleRate / 4;  // 0.25 s
inline constexpr double kMinF0Hz = 35.0;
inline constexpr double kMaxF0Hz = 1200.0;
inline constexpr double kNyquistHz = kSampleRate / 2.0;

static_assert(kHopSamples * kFrameRate == kSampleRate);

// Error hierarchy. Every failure surfaced by the library derives from Error.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public Error {
 public:
  explicit ParseError(const std::string& what) : Error(what), line_(0) {}
  ParseError(const std::string& what, std::size_t line)
      : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

// Derives an independent seed from a seed and a counter (splitmix64 finalizer).
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a * 0x9E3779B97F4A7C15ull + b + 0x632BE59BD9B4E019ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace hexsynth
