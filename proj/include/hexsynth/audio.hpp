#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "hexsynth/common.hpp"

namespace hexsynth {

// Mono waveform.
struct AudioBuffer {
  std::vector<double> samples;
  int sample_rate = kSampleRate;

  AudioBuffer() = default;
  explicit AudioBuffer(std::size_t n, int sr = kSampleRate) : samples(n, 0.0), sample_rate(sr) {}
  AudioBuffer(std::vector<double> s, int sr = kSampleRate) : samples(std::move(s)), sample_rate(sr) {}

  std::size_t size() const { return samples.size(); }
  double duration_s() const { return static_cast<double>(samples.size()) / sample_rate; }
  std::span<const double> view() const { return samples; }
};

// Planar multi-channel audio (one vector per channel, equal lengths).
struct MultiChannelAudio {
  std::vector<std::vector<double>> channels;
  int sample_rate = kSampleRate;

  std::size_t num_channels() const { return channels.size(); }
  std::size_t num_samples() const { return channels.empty() ? 0 : channels.front().size(); }
  AudioBuffer channel(std::size_t c) const { return AudioBuffer(channels.at(c), sample_rate); }
};

enum class WavFormat { kPcm16, kFloat32 };

// Reads PCM 8/16/24/32-bit integer or IEEE float 32/64-bit WAV files.
MultiChannelAudio read_wav(const std::filesystem::path& path);
// Reads a WAV file and requires it to be mono.
AudioBuffer read_wav_mono(const std::filesystem::path& path);

void write_wav(const std::filesystem::path& path, const MultiChannelAudio& audio,
               WavFormat format = WavFormat::kFloat32);
void write_wav(const std::filesystem::path& path, const AudioBuffer& audio,
               WavFormat format = WavFormat::kFloat32);

// Throws ValidationError when any sample is NaN or infinite.
void require_finite(std::span<const double> samples, const char* what);

}  // namespace hexsynth
