#pragma once

#include <filesystem>
#include <map>
#include <array>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "hexsynth/dsp_synth.hpp"
#include "hexsynth/features.hpp"
#include "hexsynth/losses.hpp"
#include "hexsynth/midi_io.hpp"
#include "hexsynth/nn.hpp"

namespace hexsynth {

enum class ModelKind { kControlRg, kControlCl, kControlJt, kDecoder, kUnified };

std::string to_string(ModelKind kind);
ModelKind model_kind_from_string(const std::string& name);

struct ModelConfig {
  std::string preset = "desk";
  int hidden_size = 64;
  int n_recurrent_layers = 2;
  int n_attention_heads = 4;
  // Cross-string attention also follows the last recurrent layer.
  bool attention_after_last = false;
  int n_pitch_bins = kPitchBins;
  int n_vel_bins = kVelBins;
  int k_bins = kFeatureBins;
  int n_harmonics = kNumHarmonics;
  int n_noise_bands = kNumNoiseBands;
  std::uint64_t seed = 0;

  static ModelConfig desk();
  // Layer counts chosen per network to approach the published sizes.
  static ModelConfig paper(ModelKind kind);
  static ModelConfig preset_named(const std::string& name, ModelKind kind);

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

// One network: its kind, configuration and named parameters.
class Model {
 public:
  Model(ModelKind kind, ModelConfig config);

  ModelKind kind() const { return kind_; }
  const ModelConfig& config() const { return config_; }
  nn::ParameterStore& params() { return params_; }
  const nn::ParameterStore& params() const { return params_; }
  std::size_t n_parameters() const { return params_.n_scalars(); }

 private:
  ModelKind kind_;
  ModelConfig config_;
  nn::ParameterStore params_;
};

// Default canonical ordering 0..5; a permutation relabels which string
// identity each row of the input carries.
using StringIds = std::array<int, kNumStrings>;
inline constexpr StringIds kCanonicalStrings{0, 1, 2, 3, 4, 5};

// ---- tape-level graphs, used by training ----------------------------------------

struct ControlGraph {
  nn::Id f0;  // rg: (6T, 1) sigmoid; cl, jt: (6T, 305) probabilities
  nn::Id l;   // rg/jt: (6T, 1) sigmoid; cl: (6T, 64) probabilities
  nn::Id p;
  nn::Id c;
};

struct SynthGraph {
  nn::Id H;  // (6T, 128)
  nn::Id a;  // (6T, 1)
  nn::Id N;  // (6T, 128)
};

struct UnifiedGraph {
  nn::Id f0;  // (6T, 305) probabilities
  SynthGraph synth;
};

ControlGraph build_control(nn::Tape& tape, Model& model, const StringwiseMidiInput& x,
                           const StringIds& ids = kCanonicalStrings);
// features: (6T, 4) node with columns f0, l, p, c.
SynthGraph build_decoder(nn::Tape& tape, Model& model, nn::Id features, Eigen::Index n_frames,
                         const StringIds& ids = kCanonicalStrings);
UnifiedGraph build_unified(nn::Tape& tape, Model& model, const StringwiseMidiInput& x,
                           const StringIds& ids = kCanonicalStrings);

// (6T, 1) column <-> (6, T) contour
Mat column_to_contour(const Mat& column, Eigen::Index n_frames);
Mat contour_to_column(const Mat& contour);
// (6T, 4) decoder input from contours.
Mat features_to_columns(const ControlFeatures& f);
SynthesisParams synth_params_from(const nn::Tape& tape, const SynthGraph& g, Eigen::Index n_frames);

// ---- value-level forwards -------------------------------------------------------

ControlFeatures control_forward_rg(Model& model, const StringwiseMidiInput& x, const StringIds& ids = kCanonicalStrings);
ControlProbabilities control_forward_cl(Model& model, const StringwiseMidiInput& x,
                                        const StringIds& ids = kCanonicalStrings);

struct JointControlOutput {
  Mat f0_probs;               // (6T, 305)
  ControlFeatures features;   // f0 argmax-decoded, l/p/c continuous
};
JointControlOutput control_forward_jt(Model& model, const StringwiseMidiInput& x,
                                      const StringIds& ids = kCanonicalStrings);

SynthesisParams decoder_forward(Model& model, const ControlFeatures& ctrl, const StringIds& ids = kCanonicalStrings);

struct UnifiedOutput {
  Mat f0_probs;    // (6T, 305)
  Mat f0_unit;     // (6, T) argmax-decoded
  SynthesisParams params;
};
UnifiedOutput unified_forward(Model& model, const StringwiseMidiInput& x, const StringIds& ids = kCanonicalStrings);

// Per (string, frame) bin center of the most probable bin; ties go to the
// lower bin.
Mat argmax_decode(const Mat& probs, Eigen::Index n_frames);
// Argmax-decoded contours for every head of a classification model.
ControlFeatures decode_probabilities(const ControlProbabilities& probs);

// ---- checkpoints ----------------------------------------------------------------

struct Checkpoint {
  std::string system;                   // syn, rg, cl, jt, unified
  std::map<std::string, Model> models;  // role -> network, e.g. "control", "decoder"
  std::optional<ReverbBank> reverb;
  long long training_step = 0;
  double validation_loss = 0.0;
  nlohmann::json extra = nlohmann::json::object();

  Model& model(const std::string& role);
  const Model& model(const std::string& role) const;
  std::size_t n_parameters() const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace hexsynth
