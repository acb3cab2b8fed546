#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "hexsynth/corpus.hpp"
#include "hexsynth/features.hpp"
#include "hexsynth/losses.hpp"
#include "hexsynth/midi_io.hpp"
#include "hexsynth/models.hpp"

namespace hexsynth {

enum class TrainSystem { kSyn, kRg, kCl, kJt, kUnified };

std::string to_string(TrainSystem system);
TrainSystem train_system_from_string(const std::string& name);

struct TrainConfig {
  double learning_rate = 1e-4;
  double adam_beta1 = 0.99;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double lr_decay = 0.99;  // per epoch
  int patience = 5;        // epochs without validation improvement
  double excerpt_s = 8.0;
  int batch_size = 2;
  int max_epochs = 100;
  long long max_steps = 0;  // 0: unlimited
  double clip_norm = 3.0;   // global gradient norm; 0 disables
  Reduction reduction = Reduction::kSum;
  // jt only: keep the pre-trained decoder and reverb fixed.
  bool freeze_synthesis = false;
  std::uint64_t seed = 0;

  // 3e-4 for the synthesis model, 1e-4 otherwise.
  static TrainConfig preset(TrainSystem system);
  void validate() const;
  double lr_at_epoch(int epoch) const;
  nlohmann::json to_json() const;
  // Keys absent from j keep their value in base.
  static TrainConfig from_json(const nlohmann::json& j, TrainConfig base);
};

// ---- dataset split ----------------------------------------------------------------

struct SplitConfig {
  double test_fraction = 0.1;
  double val_fraction = 0.05;
};

struct DatasetSplit {
  std::vector<std::string> train, val, test;
  std::map<std::string, std::string> aliases;  // player -> alias

  nlohmann::json to_json() const;
  static DatasetSplit from_json(const nlohmann::json& j);
};

// Test recordings are drawn as whole (player, progression, style) groups,
// balancing the factors; validation and training share the remaining groups.
DatasetSplit split_dataset(const std::vector<CatalogEntry>& catalog, std::uint64_t seed, const SplitConfig& cfg = {});

// ---- excerpts -----------------------------------------------------------------------

// Aligned training material for one recording.
struct Recording {
  std::string id;
  StringwiseMidiInput midi;
  ControlFeatures features;
  AudioBuffer audio;

  Eigen::Index n_frames() const { return features.n_frames(); }
};

struct Excerpt {
  std::string id;
  Eigen::Index frame_start = 0;
  StringwiseMidiInput midi;
  ControlFeatures features;
  AudioBuffer audio;  // n_frames * 375 samples starting at frame_start * 375

  Eigen::Index n_frames() const { return features.n_frames(); }
};

// Fills missing velocities, encodes the MIDI input and extracts the control
// features; everything is trimmed to whole 375-sample frames.
Recording prepare_recording(SourceRecording src);

Eigen::Index excerpt_frames(double excerpt_s);
Excerpt excerpt_at(const Recording& rec, Eigen::Index frame_start, Eigen::Index n_frames);
// Uniform frame offset; nullopt when the recording is shorter than the excerpt.
std::optional<Excerpt> sample_excerpt(const Recording& rec, double excerpt_s, std::mt19937_64& rng);

// ---- trainer ----------------------------------------------------------------------

enum class LossTerms { kAll, kF0Only, kAudioOnly };

// Owns the networks, reverb and optimizer state of one training run.
class Trainer {
 public:
  // pretrained supplies the decoder and reverb for jt and is required there.
  Trainer(TrainSystem system, TrainConfig config, const ModelConfig& model_config,
          const Checkpoint* pretrained = nullptr);

  TrainSystem system() const { return system_; }
  const TrainConfig& config() const { return config_; }

  // Loss of one excerpt; when with_grad, adds scale * gradient into the
  // parameter gradients.
  LossBreakdown forward(const Excerpt& ex, std::uint64_t noise_seed, bool with_grad, double scale = 1.0,
                        LossTerms terms = LossTerms::kAll);
  // Mean loss over the batch and one optimizer update at the current rate.
  LossBreakdown step(std::span<const Excerpt> batch);
  LossBreakdown evaluate(const Excerpt& ex);

  void zero_grad();
  void set_epoch(int epoch) { epoch_ = epoch; }
  int epoch() const { return epoch_; }
  double learning_rate() const { return config_.lr_at_epoch(epoch_); }
  long long steps() const { return steps_; }

  Model& model(const std::string& role);
  nn::ParameterStore& store(const std::string& role);
  std::vector<std::string> roles() const;

  Checkpoint checkpoint() const;
  void save_optimizer(const std::filesystem::path& path) const;
  void load_state(const Checkpoint& ckpt, const std::filesystem::path& optimizer_path);

 private:
  ReverbBank reverb() const;
  void add_reverb_grad(const Mat& d_ir, double scale);

  TrainSystem system_;
  TrainConfig config_;
  std::map<std::string, Model> models_;
  nn::ParameterStore reverb_;
  bool has_reverb_ = false;
  std::map<std::string, nn::Adam> adam_;
  int epoch_ = 0;
  long long steps_ = 0;
};

// ---- runs -----------------------------------------------------------------------

struct TrainData {
  std::vector<Recording> train;
  std::vector<Recording> val;
};

struct EpochMetrics {
  int epoch = 0;
  long long step = 0;
  double learning_rate = 0.0;
  LossBreakdown train;
  double val_loss = 0.0;

  nlohmann::json to_json() const;
};

struct TrainOptions {
  // config.json, metrics.jsonl, best.hxck and the resume state live here.
  std::optional<std::filesystem::path> run_dir;
  bool resume = false;
  std::function<void(const std::string&)> log;
};

struct TrainResult {
  Checkpoint best;
  std::vector<EpochMetrics> history;
  bool early_stopped = false;
};

// Epochs of one random excerpt per training recording, LR decay per epoch,
// early stopping on the validation loss. Returns the best-validation state.
TrainResult train(TrainSystem system, const TrainData& data, const TrainConfig& config,
                  const ModelConfig& model_config, const Checkpoint* pretrained = nullptr,
                  const TrainOptions& options = {});

TrainResult train_synthesis(const TrainData& data, const TrainConfig& config, const ModelConfig& model_config,
                            const TrainOptions& options = {});
TrainResult train_control(const TrainData& data, const TrainConfig& config, const ModelConfig& model_config,
                          TrainSystem mode, const TrainOptions& options = {});
TrainResult train_joint(const TrainData& data, const TrainConfig& config, const ModelConfig& model_config,
                        const Checkpoint& synthesis, const TrainOptions& options = {});
TrainResult train_unified(const TrainData& data, const TrainConfig& config, const ModelConfig& model_config,
                          const TrainOptions& options = {});

// Fraction of frames with an active MIDI note and target l * p > 0 whose most
// probable pitch bin is the target bin; 1 when no frame qualifies.
double f0_top1_accuracy(const Mat& f0_probs, const ControlFeatures& target, const StringwiseMidiInput& midi);

struct OverfitResult {
  std::vector<double> curve;  // loss before each update
  long long steps = 0;
  bool reached = false;

  double initial() const { return curve.front(); }
  double best() const;
};

// Repeated updates on one whole clip until the loss falls to
// target_fraction of its step-0 value or max_steps updates are spent.
OverfitResult overfit(TrainSystem system, const Recording& clip, const TrainConfig& config,
                      const ModelConfig& model_config, long long max_steps = 2000, double target_fraction = 0.5,
                      const Checkpoint* pretrained = nullptr);

}  // namespace hexsynth
