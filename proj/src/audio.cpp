#include "hexsynth/audio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

namespace hexsynth {
namespace {

static_assert(std::endian::native == std::endian::little, "WAV I/O assumes a little-endian host");

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

template <typename T>
T load(const unsigned char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

template <typename T>
void put(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

}  // namespace

MultiChannelAudio read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open WAV file: " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto fail = [&](const std::string& why) { return IoError("invalid WAV file " + path.string() + ": " + why); };
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw fail("missing RIFF/WAVE header");

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    const auto len = load<std::uint32_t>(chunk + 4);
    const std::size_t body = pos + 8;
    if (body + len > bytes.size()) {
      // Tolerate a truncated data chunk written by streaming recorders.
      if (std::memcmp(chunk, "data", 4) != 0) throw fail("chunk overruns file");
    }
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (len < 16) throw fail("short fmt chunk");
      format = load<std::uint16_t>(chunk + 8);
      channels = load<std::uint16_t>(chunk + 10);
      rate = load<std::uint32_t>(chunk + 12);
      bits = load<std::uint16_t>(chunk + 22);
      if (format == kFormatExtensible && len >= 40) format = load<std::uint16_t>(chunk + 32);
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = chunk + 8;
      data_len = std::min<std::size_t>(len, bytes.size() - body);
    }
    pos = body + len + (len & 1u);
  }
  if (channels == 0 || rate == 0) throw fail("missing fmt chunk");
  if (data == nullptr) throw fail("missing data chunk");
  if (format != kFormatPcm && format != kFormatFloat) throw fail("unsupported sample format");
  if (format == kFormatFloat && bits != 32 && bits != 64) throw fail("unsupported float width");
  if (format == kFormatPcm && bits != 8 && bits != 16 && bits != 24 && bits != 32) throw fail("unsupported PCM width");

  const std::size_t bytes_per_sample = bits / 8;
  const std::size_t frame_bytes = bytes_per_sample * channels;
  const std::size_t n = data_len / frame_bytes;
  MultiChannelAudio out;
  out.sample_rate = static_cast<int>(rate);
  out.channels.assign(channels, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < channels; ++c) {
      const unsigned char* p = data + i * frame_bytes + c * bytes_per_sample;
      double v = 0.0;
      if (format == kFormatFloat) {
        v = bits == 32 ? static_cast<double>(load<float>(p)) : load<double>(p);
      } else {
        switch (bits) {
          case 8: v = (static_cast<int>(p[0]) - 128) / 128.0; break;
          case 16: v = load<std::int16_t>(p) / 32768.0; break;
          case 24: {
            std::int32_t s = static_cast<std::int32_t>(p[0] | (p[1] << 8) | (p[2] << 16));
            if (s & 0x800000) s -= 0x1000000;
            v = s / 8388608.0;
            break;
          }
          default: v = load<std::int32_t>(p) / 2147483648.0; break;
        }
      }
      out.channels[c][i] = v;
    }
  }
  for (const auto& ch : out.channels) require_finite(ch, "WAV samples");
  return out;
}

AudioBuffer read_wav_mono(const std::filesystem::path& path) {
  MultiChannelAudio a = read_wav(path);
  if (a.num_channels() != 1)
    throw IoError("expected mono WAV, got " + std::to_string(a.num_channels()) + " channels: " + path.string());
  return AudioBuffer(std::move(a.channels[0]), a.sample_rate);
}

void write_wav(const std::filesystem::path& path, const MultiChannelAudio& audio, WavFormat format) {
  const std::size_t channels = audio.num_channels();
  if (channels == 0) throw ShapeError("write_wav: no channels");
  const std::size_t n = audio.num_samples();
  for (const auto& ch : audio.channels)
    if (ch.size() != n) throw ShapeError("write_wav: channel length mismatch");

  const std::uint16_t bits = format == WavFormat::kPcm16 ? 16 : 32;
  const std::uint16_t tag = format == WavFormat::kPcm16 ? kFormatPcm : kFormatFloat;
  const std::uint32_t block = static_cast<std::uint32_t>(channels * bits / 8);
  const std::uint32_t data_len = static_cast<std::uint32_t>(n * block);

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write WAV file: " + path.string());
  os.write("RIFF", 4);
  put<std::uint32_t>(os, 36 + data_len);
  os.write("WAVE", 4);
  os.write("fmt ", 4);
  put<std::uint32_t>(os, 16);
  put<std::uint16_t>(os, tag);
  put<std::uint16_t>(os, static_cast<std::uint16_t>(channels));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(audio.sample_rate));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(audio.sample_rate) * block);
  put<std::uint16_t>(os, static_cast<std::uint16_t>(block));
  put<std::uint16_t>(os, bits);
  os.write("data", 4);
  put<std::uint32_t>(os, data_len);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < channels; ++c) {
      const double v = audio.channels[c][i];
      if (format == WavFormat::kPcm16) {
        const double clipped = std::clamp(v, -1.0, 32767.0 / 32768.0);
        put<std::int16_t>(os, static_cast<std::int16_t>(std::lround(clipped * 32768.0)));
      } else {
        put<float>(os, static_cast<float>(v));
      }
    }
  }
  if (!os) throw IoError("failed writing WAV file: " + path.string());
}

void write_wav(const std::filesystem::path& path, const AudioBuffer& audio, WavFormat format) {
  MultiChannelAudio m;
  m.sample_rate = audio.sample_rate;
  m.channels.push_back(audio.samples);
  write_wav(path, m, format);
}

void require_finite(std::span<const double> samples, const char* what) {
  for (double v : samples)
    if (!std::isfinite(v)) throw ValidationError(std::string(what) + " contain non-finite values");
}

}  // namespace hexsynth
