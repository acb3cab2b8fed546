#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>

#include "hexsynth/dsp_synth.hpp"
#include "hexsynth/features.hpp"
#include "hexsynth/midi_io.hpp"
#include "hexsynth/models.hpp"
#include "hexsynth/training.hpp"

namespace hexsynth {

struct Conditioning {
  StringwiseMidiInput midi;
  std::optional<ControlFeatures> features;  // ground truth; the synthesis model renders from these
};

// Turns conditioning into audio with one trained system. Holds its own copy
// of the networks, so separate instances may render concurrently.
class Renderer {
 public:
  // synthesis supplies the decoder and reverb for rg and cl.
  explicit Renderer(const Checkpoint& checkpoint, const Checkpoint* synthesis = nullptr);

  TrainSystem system() const { return system_; }

  // Control features fed to the decoder; for the unified model only f0 is set.
  ControlFeatures controls(const Conditioning& c);
  // Synthesis of one stretch of conditioning, without windowing.
  SynthOutput synthesize_once(const Conditioning& c, std::uint64_t noise_seed);
  // Full recording in overlapping windows joined by crossfades; the mixture
  // and every string are assembled the same way.
  SynthOutput render(const Conditioning& c, std::uint64_t noise_seed, const RenderConfig& cfg = {});

 private:
  TrainSystem system_;
  std::map<std::string, Model> models_;
  ReverbBank reverb_;
};

Conditioning slice(const Conditioning& c, Eigen::Index start, Eigen::Index count);

}  // namespace hexsynth
