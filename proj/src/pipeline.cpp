#include "hexsynth/pipeline.hpp"

#include <vector>

namespace hexsynth {

Conditioning slice(const Conditioning& c, Eigen::Index start, Eigen::Index count) {
  Conditioning out;
  out.midi = c.midi.slice(start, count);
  if (c.features) out.features = c.features->slice(start, count);
  return out;
}

Renderer::Renderer(const Checkpoint& checkpoint, const Checkpoint* synthesis)
    : system_(train_system_from_string(checkpoint.system)) {
  const auto need = [](const Checkpoint& ck, const std::string& role, const std::string& what) {
    if (!ck.models.count(role)) throw ConfigError(what + " has no '" + role + "' network");
    return ck.model(role);
  };
  const std::string name = "checkpoint of system '" + checkpoint.system + "'";
  const Checkpoint* source = &checkpoint;
  switch (system_) {
    case TrainSystem::kSyn: models_.emplace("decoder", need(checkpoint, "decoder", name)); break;
    case TrainSystem::kRg:
    case TrainSystem::kCl:
      if (!synthesis)
        throw ConfigError("rendering '" + checkpoint.system +
                          "' needs the synthesis checkpoint written by 'train syn' (--syn-checkpoint)");
      models_.emplace("control", need(checkpoint, "control", name));
      models_.emplace("decoder", need(*synthesis, "decoder", "synthesis checkpoint"));
      source = synthesis;
      break;
    case TrainSystem::kJt:
      models_.emplace("control", need(checkpoint, "control", name));
      models_.emplace("decoder", need(checkpoint, "decoder", name));
      break;
    case TrainSystem::kUnified: models_.emplace("unified", need(checkpoint, "unified", name)); break;
  }
  if (!source->reverb) throw ConfigError((source == &checkpoint ? name : "synthesis checkpoint") + " has no reverb");
  reverb_ = *source->reverb;
}

ControlFeatures Renderer::controls(const Conditioning& c) {
  switch (system_) {
    case TrainSystem::kSyn:
      if (!c.features) throw ConfigError("the synthesis model renders from extracted control features");
      return *c.features;
    case TrainSystem::kRg: return control_forward_rg(models_.at("control"), c.midi);
    case TrainSystem::kCl: return decode_probabilities(control_forward_cl(models_.at("control"), c.midi));
    case TrainSystem::kJt: return control_forward_jt(models_.at("control"), c.midi).features;
    case TrainSystem::kUnified: {
      ControlFeatures f(c.midi.n_frames);
      f.f0 = unified_forward(models_.at("unified"), c.midi).f0_unit;
      return f;
    }
  }
  throw ConfigError("unknown system");
}

SynthOutput Renderer::synthesize_once(const Conditioning& c, std::uint64_t noise_seed) {
  if (system_ == TrainSystem::kUnified) {
    const UnifiedOutput u = unified_forward(models_.at("unified"), c.midi);
    return synthesize(u.params, u.f0_unit, reverb_, noise_seed);
  }
  const ControlFeatures f = controls(c);
  return synthesize(decoder_forward(models_.at("decoder"), f), f.f0, reverb_, noise_seed);
}

SynthOutput Renderer::render(const Conditioning& c, std::uint64_t noise_seed, const RenderConfig& cfg) {
  const Eigen::Index T = c.midi.n_frames;
  if (c.features && c.features->n_frames() != T) throw ShapeError("MIDI input and control features differ in length");
  const RenderPlan plan = plan_windows(T, cfg);
  std::vector<std::optional<SynthOutput>> cache(plan.windows.size());
  const auto window = [&](Eigen::Index start, Eigen::Index count, std::size_t k) -> const SynthOutput& {
    if (!cache[k]) cache[k] = synthesize_once(slice(c, start, count), mix_seed(noise_seed, k));
    return *cache[k];
  };
  SynthOutput out;
  out.mixture = render_windowed(
      T, [&](Eigen::Index s, Eigen::Index n, std::size_t k) { return window(s, n, k).mixture; }, cfg);
  for (int str = 0; str < kNumStrings; ++str)
    out.strings.push_back(render_windowed(
        T,
        [&](Eigen::Index s, Eigen::Index n, std::size_t k) { return window(s, n, k).strings[static_cast<std::size_t>(str)]; },
        cfg));
  return out;
}

}  // namespace hexsynth
