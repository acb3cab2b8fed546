#include "hexsynth/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "hexsynth/binary_io.hpp"
#include "hexsynth/dsp_synth.hpp"

namespace hexsynth {

namespace {

constexpr std::uint64_t kEvalNoiseSalt = 0xE7A1;

LossBreakdown average(const std::vector<LossBreakdown>& items) {
  LossBreakdown out;
  if (items.empty()) return out;
  std::map<std::string, double> sums;
  for (const auto& lb : items)
    for (const auto& [k, v] : lb.components) sums[k] += v;
  for (const auto& [k, v] : sums) out.add(k, v / static_cast<double>(items.size()));
  return out;
}

void check_finite(const LossBreakdown& lb, long long step) {
  if (std::isfinite(lb.total)) return;
  std::ostringstream os;
  os << "loss became non-finite at step " << step << ":";
  for (const auto& [k, v] : lb.components) os << ' ' << k << '=' << v;
  throw DivergenceError(os.str());
}

Mat scaled(const Mat& m, double s) { return m * s; }

}  // namespace

std::string to_string(TrainSystem system) {
  switch (system) {
    case TrainSystem::kSyn: return "syn";
    case TrainSystem::kRg: return "rg";
    case TrainSystem::kCl: return "cl";
    case TrainSystem::kJt: return "jt";
    case TrainSystem::kUnified: return "unified";
  }
  return "?";
}

TrainSystem train_system_from_string(const std::string& name) {
  for (TrainSystem s : {TrainSystem::kSyn, TrainSystem::kRg, TrainSystem::kCl, TrainSystem::kJt, TrainSystem::kUnified})
    if (to_string(s) == name) return s;
  throw ConfigError("unknown system '" + name + "' (expected syn, rg, cl, jt or unified)");
}

// ---- config -------------------------------------------------------------------

TrainConfig TrainConfig::preset(TrainSystem system) {
  TrainConfig c;
  c.learning_rate = system == TrainSystem::kSyn ? 3e-4 : 1e-4;
  return c;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !(lr_decay > 0.0) || !(adam_eps > 0.0))
    throw ConfigError("train config: learning rate, decay and epsilon must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
    throw ConfigError("train config: Adam betas must lie in [0, 1)");
  if (patience < 1) throw ConfigError("train config: patience must be at least 1");
  if (batch_size < 1) throw ConfigError("train config: batch size must be at least 1");
  if (max_epochs < 0 || max_steps < 0) throw ConfigError("train config: negative epoch or step limit");
  if (!(excerpt_s > 0.0) || excerpt_frames(excerpt_s) < 1) throw ConfigError("train config: excerpt too short");
  if (!(clip_norm >= 0.0)) throw ConfigError("train config: clip norm must be non-negative");
}

double TrainConfig::lr_at_epoch(int epoch) const { return learning_rate * std::pow(lr_decay, epoch); }

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate},
          {"adam_beta1", adam_beta1},
          {"adam_beta2", adam_beta2},
          {"adam_eps", adam_eps},
          {"lr_decay", lr_decay},
          {"patience", patience},
          {"excerpt_s", excerpt_s},
          {"batch_size", batch_size},
          {"max_epochs", max_epochs},
          {"max_steps", max_steps},
          {"clip_norm", clip_norm},
          {"reduction", reduction == Reduction::kSum ? "sum" : "mean"},
          {"freeze_synthesis", freeze_synthesis},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, TrainConfig c) {
  try {
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.lr_decay = j.value("lr_decay", c.lr_decay);
    c.patience = j.value("patience", c.patience);
    c.excerpt_s = j.value("excerpt_s", c.excerpt_s);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.freeze_synthesis = j.value("freeze_synthesis", c.freeze_synthesis);
    c.seed = j.value("seed", c.seed);
    if (j.contains("reduction")) {
      const auto r = j.at("reduction").get<std::string>();
      if (r != "sum" && r != "mean") throw ConfigError("train config: reduction must be sum or mean");
      c.reduction = r == "sum" ? Reduction::kSum : Reduction::kMean;
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---- split --------------------------------------------------------------------

nlohmann::json DatasetSplit::to_json() const {
  return {{"train", train}, {"val", val}, {"test", test}, {"aliases", aliases}};
}

DatasetSplit DatasetSplit::from_json(const nlohmann::json& j) {
  DatasetSplit s;
  try {
    s.train = j.at("train").get<std::vector<std::string>>();
    s.val = j.at("val").get<std::vector<std::string>>();
    s.test = j.at("test").get<std::vector<std::string>>();
    s.aliases = j.value("aliases", std::map<std::string, std::string>{});
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("split file: ") + e.what());
  }
  return s;
}

DatasetSplit split_dataset(const std::vector<CatalogEntry>& catalog, std::uint64_t seed, const SplitConfig& cfg) {
  if (!(cfg.test_fraction >= 0.0) || !(cfg.val_fraction >= 0.0) || cfg.test_fraction + cfg.val_fraction > 1.0)
    throw ConfigError("split fractions must be non-negative and sum to at most 1");
  const auto n = static_cast<double>(catalog.size());
  const auto n_test = static_cast<std::size_t>(std::llround(cfg.test_fraction * n));
  const auto n_val = static_cast<std::size_t>(std::llround(cfg.val_fraction * n));
  if (catalog.empty() || n_test + n_val >= catalog.size() || (cfg.test_fraction > 0.0 && n_test == 0) ||
      (cfg.val_fraction > 0.0 && n_val == 0))
    throw ConfigError("catalog of " + std::to_string(catalog.size()) + " recordings is too small for the split");
  {
    std::set<std::string> ids;
    for (const auto& e : catalog)
      if (!ids.insert(e.id).second) throw ConfigError("duplicate recording id '" + e.id + "' in catalog");
  }

  std::mt19937_64 rng(mix_seed(seed, 0x5B117));
  DatasetSplit split;
  // Aliases hide player identity in every downstream artifact.
  std::vector<std::string> players;
  for (const auto& e : catalog)
    if (std::find(players.begin(), players.end(), e.player) == players.end()) players.push_back(e.player);
  std::vector<std::size_t> alias_order(players.size());
  std::iota(alias_order.begin(), alias_order.end(), 0);
  std::shuffle(alias_order.begin(), alias_order.end(), rng);
  for (std::size_t i = 0; i < players.size(); ++i)
    split.aliases[players[i]] = "performer_" + std::to_string(alias_order[i]);

  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < catalog.size(); ++i) groups[catalog[i].group()].push_back(i);
  std::vector<std::string> keys;
  for (const auto& [k, v] : groups) keys.push_back(k);
  std::shuffle(keys.begin(), keys.end(), rng);

  // Greedy balanced pick: prefer groups whose alias, progression and style are
  // least represented in the test set so far.
  std::map<std::string, int> used_player, used_prog, used_style;
  std::vector<bool> taken(keys.size(), false);
  std::set<std::size_t> test_rows;
  while (test_rows.size() < n_test) {
    int best = -1;
    int best_score = std::numeric_limits<int>::max();
    for (std::size_t k = 0; k < keys.size(); ++k) {
      if (taken[k] || test_rows.size() + groups[keys[k]].size() > n_test) continue;
      const CatalogEntry& e = catalog[groups[keys[k]].front()];
      const int score = used_player[split.aliases[e.player]] + used_prog[e.progression] + used_style[e.style];
      if (score < best_score) {
        best_score = score;
        best = static_cast<int>(k);
      }
    }
    if (best < 0) break;
    taken[static_cast<std::size_t>(best)] = true;
    const auto& rows = groups[keys[static_cast<std::size_t>(best)]];
    const CatalogEntry& e = catalog[rows.front()];
    ++used_player[split.aliases[e.player]];
    ++used_prog[e.progression];
    ++used_style[e.style];
    test_rows.insert(rows.begin(), rows.end());
  }

  std::vector<std::size_t> dev;
  for (std::size_t i = 0; i < catalog.size(); ++i)
    if (!test_rows.count(i)) dev.push_back(i);
  std::shuffle(dev.begin(), dev.end(), rng);
  std::set<std::size_t> val_rows(dev.begin(), dev.begin() + static_cast<std::ptrdiff_t>(std::min(n_val, dev.size())));

  for (std::size_t i = 0; i < catalog.size(); ++i) {
    if (test_rows.count(i))
      split.test.push_back(catalog[i].id);
    else if (val_rows.count(i))
      split.val.push_back(catalog[i].id);
    else
      split.train.push_back(catalog[i].id);
  }
  return split;
}

// ---- recordings and excerpts ------------------------------------------------------

Recording prepare_recording(SourceRecording src) {
  if (src.strings.num_channels() != kNumStrings) throw ShapeError(src.id + ": expected 6 string channels");
  const auto T = static_cast<Eigen::Index>(frames_for_samples(src.strings.num_samples()));
  const double duration = static_cast<double>(T) / kFrameRate;
  const auto n = static_cast<std::size_t>(T) * kHopSamples;
  for (auto& ch : src.strings.channels) ch.resize(n);
  src.mix.samples.resize(n);

  NoteEventList notes;
  for (NoteEvent note : src.notes) {
    if (note.onset_s >= duration) continue;
    note.offset_s = std::min(note.offset_s, duration);
    notes.push_back(note);
  }
  fill_velocities(notes, src.strings);

  Recording rec;
  rec.id = src.id;
  rec.midi = encode_stringwise(notes, duration);
  rec.features = extract_features(src.strings);
  rec.audio = std::move(src.mix);
  return rec;
}

Eigen::Index excerpt_frames(double excerpt_s) {
  return static_cast<Eigen::Index>(std::llround(excerpt_s * kFrameRate));
}

Excerpt excerpt_at(const Recording& rec, Eigen::Index frame_start, Eigen::Index n_frames) {
  if (frame_start < 0 || n_frames < 1 || frame_start + n_frames > rec.n_frames())
    throw RangeError(rec.id + ": excerpt outside the recording");
  if (rec.midi.n_frames != rec.n_frames() ||
      rec.audio.size() < static_cast<std::size_t>(rec.n_frames()) * kHopSamples)
    throw ShapeError(rec.id + ": MIDI, features and audio are not aligned");
  Excerpt ex;
  ex.id = rec.id;
  ex.frame_start = frame_start;
  ex.midi = rec.midi.slice(frame_start, n_frames);
  ex.features = rec.features.slice(frame_start, n_frames);
  const auto first = static_cast<std::size_t>(frame_start) * kHopSamples;
  const auto count = static_cast<std::size_t>(n_frames) * kHopSamples;
  ex.audio = AudioBuffer(std::vector<double>(rec.audio.samples.begin() + static_cast<std::ptrdiff_t>(first),
                                             rec.audio.samples.begin() + static_cast<std::ptrdiff_t>(first + count)));
  return ex;
}

std::optional<Excerpt> sample_excerpt(const Recording& rec, double excerpt_s, std::mt19937_64& rng) {
  const Eigen::Index E = excerpt_frames(excerpt_s);
  if (rec.n_frames() < E) return std::nullopt;
  std::uniform_int_distribution<Eigen::Index> offset(0, rec.n_frames() - E);
  return excerpt_at(rec, offset(rng), E);
}

// ---- trainer ----------------------------------------------------------------------

Trainer::Trainer(TrainSystem system, TrainConfig config, const ModelConfig& model_config, const Checkpoint* pretrained)
    : system_(system), config_(std::move(config)) {
  config_.validate();
  ModelConfig mc = model_config;
  mc.seed = config_.seed;
  switch (system_) {
    case TrainSystem::kSyn: models_.emplace("decoder", Model(ModelKind::kDecoder, mc)); break;
    case TrainSystem::kRg: models_.emplace("control", Model(ModelKind::kControlRg, mc)); break;
    case TrainSystem::kCl: models_.emplace("control", Model(ModelKind::kControlCl, mc)); break;
    case TrainSystem::kJt:
      if (!pretrained || !pretrained->models.count("decoder") || !pretrained->reverb)
        throw ConfigError(
            "joint training needs a pre-trained synthesis model: pass the checkpoint written by 'train syn' "
            "(--syn-checkpoint)");
      models_.emplace("control", Model(ModelKind::kControlJt, mc));
      models_.emplace("decoder", pretrained->model("decoder"));
      break;
    case TrainSystem::kUnified: models_.emplace("unified", Model(ModelKind::kUnified, mc)); break;
  }
  has_reverb_ = system_ == TrainSystem::kSyn || system_ == TrainSystem::kJt || system_ == TrainSystem::kUnified;
  if (has_reverb_) {
    auto& ir = reverb_.add("reverb.ir", kNumStrings, kReverbLength);
    ir.value = system_ == TrainSystem::kJt ? pretrained->reverb->ir : ReverbBank::random_init(mix_seed(config_.seed, 0x2E7)).ir;
  }
  const nn::AdamConfig ac{config_.adam_beta1, config_.adam_beta2, config_.adam_eps};
  for (const auto& role : roles()) adam_.emplace(role, nn::Adam(ac));
}

std::vector<std::string> Trainer::roles() const {
  std::vector<std::string> out;
  for (const auto& [role, m] : models_) out.push_back(role);
  if (has_reverb_) out.push_back("reverb");
  return out;
}

Model& Trainer::model(const std::string& role) {
  auto it = models_.find(role);
  if (it == models_.end()) throw ConfigError("trainer has no '" + role + "' network");
  return it->second;
}

nn::ParameterStore& Trainer::store(const std::string& role) {
  if (role == "reverb" && has_reverb_) return reverb_;
  auto it = models_.find(role);
  if (it == models_.end()) throw ConfigError("trainer has no '" + role + "' parameters");
  return it->second.params();
}

ReverbBank Trainer::reverb() const { return ReverbBank{reverb_.at("reverb.ir").value}; }

void Trainer::add_reverb_grad(const Mat& d_ir, double scale) {
  auto& p = reverb_.at("reverb.ir");
  if (p.grad.size() == 0) p.grad = Mat::Zero(p.value.rows(), p.value.cols());
  p.grad += scale * d_ir;
}

void Trainer::zero_grad() {
  for (const auto& role : roles()) store(role).zero_grad();
}

LossBreakdown Trainer::forward(const Excerpt& ex, std::uint64_t noise_seed, bool with_grad, double scale,
                               LossTerms terms) {
  const Eigen::Index T = ex.n_frames();
  if (ex.midi.n_frames != T) throw ShapeError(ex.id + ": MIDI and feature frame counts differ");
  const Reduction red = config_.reduction;
  LossBreakdown out;
  nn::Tape tape;
  std::vector<std::pair<nn::Id, Mat>> seeds;

  auto audio_term = [&](const SynthGraph& sg, const Mat& f0_unit) {
    if (terms == LossTerms::kF0Only) return;
    if (ex.audio.size() != static_cast<std::size_t>(T) * kHopSamples)
      throw ShapeError(ex.id + ": audio does not span the excerpt frames");
    const SynthesisParams params = synth_params_from(tape, sg, T);
    const ReverbBank rv = reverb();
    const SynthOutput synth = synthesize(params, f0_unit, rv, noise_seed);
    if (!with_grad) {
      out.add("mssl", mssl(ex.audio, synth.mixture));
      return;
    }
    std::vector<double> g(synth.mixture.size());
    out.add("mssl", mssl_with_grad(ex.audio.samples, synth.mixture.samples, g));
    const SynthGrad sgd = synthesize_backward(params, f0_unit, rv, noise_seed, g);
    seeds.emplace_back(sg.H, scaled(sgd.dH, scale));
    seeds.emplace_back(sg.a, scaled(contour_to_column(sgd.da), scale));
    seeds.emplace_back(sg.N, scaled(sgd.dN, scale));
    add_reverb_grad(sgd.d_ir, scale);
  };
  auto f0_term = [&](nn::Id probs) {
    if (terms == LossTerms::kAudioOnly) return;
    Mat g;
    out.add("f0", loss_f0_classification(tape.value(probs), ex.features, red, with_grad ? &g : nullptr));
    if (with_grad) seeds.emplace_back(probs, scaled(g, scale));
  };

  switch (system_) {
    case TrainSystem::kRg: {
      const ControlGraph g = build_control(tape, models_.at("control"), ex.midi);
      ControlFeatures pred(T);
      pred.f0 = column_to_contour(tape.value(g.f0), T);
      pred.l = column_to_contour(tape.value(g.l), T);
      pred.p = column_to_contour(tape.value(g.p), T);
      pred.c = column_to_contour(tape.value(g.c), T);
      ControlFeatures grad;
      out = loss_regression(pred, ex.features, red, with_grad ? &grad : nullptr);
      if (with_grad) {
        seeds.emplace_back(g.f0, scaled(contour_to_column(grad.f0), scale));
        seeds.emplace_back(g.l, scaled(contour_to_column(grad.l), scale));
        seeds.emplace_back(g.p, scaled(contour_to_column(grad.p), scale));
        seeds.emplace_back(g.c, scaled(contour_to_column(grad.c), scale));
      }
      break;
    }
    case TrainSystem::kCl: {
      const ControlGraph g = build_control(tape, models_.at("control"), ex.midi);
      const ControlProbabilities pred{tape.value(g.f0), tape.value(g.l), tape.value(g.p), tape.value(g.c)};
      ControlProbabilities grad;
      out = loss_classification(pred, ex.features, red, with_grad ? &grad : nullptr);
      if (with_grad) {
        seeds.emplace_back(g.f0, scaled(grad.f0, scale));
        seeds.emplace_back(g.l, scaled(grad.l, scale));
        seeds.emplace_back(g.p, scaled(grad.p, scale));
        seeds.emplace_back(g.c, scaled(grad.c, scale));
      }
      break;
    }
    case TrainSystem::kSyn: {
      const SynthGraph sg =
          build_decoder(tape, models_.at("decoder"), tape.constant(features_to_columns(ex.features)), T);
      audio_term(sg, ex.features.f0);
      break;
    }
    case TrainSystem::kJt: {
      const ControlGraph g = build_control(tape, models_.at("control"), ex.midi);
      // The decoder sees the argmax-decoded pitch as a constant, so audio
      // gradients never reach the pitch head.
      const Mat f0 = argmax_decode(tape.value(g.f0), T);
      f0_term(g.f0);
      const nn::Id in = nn::concat_cols(tape, {tape.constant(contour_to_column(f0)), g.l, g.p, g.c});
      audio_term(build_decoder(tape, models_.at("decoder"), in, T), f0);
      break;
    }
    case TrainSystem::kUnified: {
      const UnifiedGraph ug = build_unified(tape, models_.at("unified"), ex.midi);
      const Mat f0 = argmax_decode(tape.value(ug.f0), T);
      f0_term(ug.f0);
      audio_term(ug.synth, f0);
      break;
    }
  }
  check_finite(out, steps_);
  if (with_grad && !seeds.empty()) tape.backward(seeds);
  return out;
}

LossBreakdown Trainer::step(std::span<const Excerpt> batch) {
  if (batch.empty()) throw ConfigError("empty training batch");
  zero_grad();
  std::vector<LossBreakdown> losses;
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i)
    losses.push_back(forward(batch[i], mix_seed(mix_seed(config_.seed, static_cast<std::uint64_t>(steps_)), i), true,
                             scale));

  const bool frozen = system_ == TrainSystem::kJt && config_.freeze_synthesis;
  std::vector<std::string> trainable;
  for (const auto& role : roles())
    if (!(frozen && (role == "decoder" || role == "reverb"))) trainable.push_back(role);

  double sq = 0.0;
  for (const auto& role : trainable) sq += std::pow(store(role).grad_norm(), 2);
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw DivergenceError("gradient norm became non-finite at step " + std::to_string(steps_));
  if (config_.clip_norm > 0.0 && norm > config_.clip_norm) {
    const double f = config_.clip_norm / norm;
    for (const auto& role : trainable)
      for (nn::Parameter* p : store(role).all())
        if (p->grad.size()) p->grad *= f;
  }
  const double lr = learning_rate();
  for (const auto& role : trainable) adam_.at(role).step(store(role), lr);
  ++steps_;
  return average(losses);
}

LossBreakdown Trainer::evaluate(const Excerpt& ex) { return forward(ex, mix_seed(config_.seed, kEvalNoiseSalt), false); }

Checkpoint Trainer::checkpoint() const {
  Checkpoint ck;
  ck.system = to_string(system_);
  ck.models = models_;
  if (has_reverb_) ck.reverb = reverb();
  ck.training_step = steps_;
  ck.extra = {{"epoch", epoch_}};
  return ck;
}

namespace {
constexpr std::uint32_t kOptimizerVersion = 1;

void put_string(binio::Writer& w, const std::string& s) {
  w.put<std::uint64_t>(s.size());
  w.put_bytes(s);
}

std::string get_string(binio::Reader& r) {
  const auto n = r.get<std::uint64_t>();
  if (n > (1u << 20)) throw IoError("corrupt optimizer state");
  return r.get_bytes(n);
}
}  // namespace

void Trainer::save_optimizer(const std::filesystem::path& path) const {
  binio::Writer w(path);
  w.put_bytes("HXOP");
  w.put<std::uint32_t>(kOptimizerVersion);
  w.put<std::uint64_t>(adam_.size());
  for (const auto& [role, adam] : adam_) {
    put_string(w, role);
    w.put<std::int64_t>(adam.steps());
    auto& moments = const_cast<nn::Adam&>(adam).moments();
    w.put<std::uint64_t>(moments.size());
    for (const auto& [name, mv] : moments) {
      put_string(w, name);
      w.put<std::uint64_t>(static_cast<std::uint64_t>(mv.first.rows()));
      w.put<std::uint64_t>(static_cast<std::uint64_t>(mv.first.cols()));
      w.put_array<double>({mv.first.data(), static_cast<std::size_t>(mv.first.size())});
      w.put_array<double>({mv.second.data(), static_cast<std::size_t>(mv.second.size())});
    }
  }
  w.finish();
}

void Trainer::load_state(const Checkpoint& ckpt, const std::filesystem::path& optimizer_path) {
  if (ckpt.system != to_string(system_))
    throw ConfigError("cannot resume a '" + ckpt.system + "' run as '" + to_string(system_) + "'");
  for (auto& [role, m] : models_) {
    const Model& src = ckpt.model(role);
    for (nn::Parameter* p : m.params().all()) {
      const Mat& v = src.params().at(p->name).value;
      if (v.rows() != p->value.rows() || v.cols() != p->value.cols())
        throw ConfigError("resume state does not match the model configuration");
      p->value = v;
    }
  }
  if (has_reverb_) {
    if (!ckpt.reverb) throw ConfigError("resume state lacks the reverb");
    reverb_.at("reverb.ir").value = ckpt.reverb->ir;
  }
  steps_ = ckpt.training_step;
  epoch_ = ckpt.extra.value("epoch", 0);

  binio::Reader r(optimizer_path);
  r.expect_magic("HXOP");
  if (r.get<std::uint32_t>() != kOptimizerVersion) throw IoError("unsupported optimizer state version");
  const auto n = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < n; ++i) {
    const std::string role = get_string(r);
    auto it = adam_.find(role);
    if (it == adam_.end()) throw IoError("optimizer state names unknown parameters '" + role + "'");
    it->second.set_steps(r.get<std::int64_t>());
    auto& moments = it->second.moments();
    moments.clear();
    const auto count = r.get<std::uint64_t>();
    for (std::uint64_t k = 0; k < count; ++k) {
      const std::string name = get_string(r);
      const auto rows = static_cast<Eigen::Index>(r.get<std::uint64_t>());
      const auto cols = static_cast<Eigen::Index>(r.get<std::uint64_t>());
      const auto size = static_cast<std::size_t>(rows * cols);
      const auto m = r.get_array<double>(size);
      const auto v = r.get_array<double>(size);
      moments[name] = {Eigen::Map<const Mat>(m.data(), rows, cols), Eigen::Map<const Mat>(v.data(), rows, cols)};
    }
  }
}

// ---- runs -----------------------------------------------------------------------

nlohmann::json EpochMetrics::to_json() const {
  return {{"epoch", epoch}, {"step", step}, {"learning_rate", learning_rate}, {"train", train.to_json()},
          {"val_loss", val_loss}};
}

namespace {

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out) throw IoError("cannot write " + path.string());
}

double validation_loss(Trainer& tr, const std::vector<Recording>& recs, Eigen::Index E) {
  double sum = 0.0;
  for (const auto& rec : recs) sum += tr.evaluate(excerpt_at(rec, 0, std::min(E, rec.n_frames()))).total;
  return sum / static_cast<double>(recs.size());
}

}  // namespace

TrainResult train(TrainSystem system, const TrainData& data, const TrainConfig& config,
                  const ModelConfig& model_config, const Checkpoint* pretrained, const TrainOptions& options) {
  config.validate();
  auto log = options.log ? options.log : [](const std::string& m) { std::cerr << m << '\n'; };
  if (data.train.empty()) throw ConfigError("no training recordings");
  const std::vector<Recording>& val = data.val.empty() ? data.train : data.val;
  if (data.val.empty()) log("warning: no validation recordings; validating on the training set");

  Trainer tr(system, config, model_config, pretrained);
  std::mt19937_64 rng(mix_seed(config.seed, 0xDA7A));
  const Eigen::Index E = excerpt_frames(config.excerpt_s);

  TrainResult result;
  double best_val = std::numeric_limits<double>::infinity();
  int bad_epochs = 0;
  int first_epoch = 0;
  bool have_best = false;

  std::optional<std::filesystem::path> dir = options.run_dir;
  if (dir) {
    std::filesystem::create_directories(*dir);
    const nlohmann::json snapshot = {{"system", to_string(system)},
                                     {"train", config.to_json()},
                                     {"model", model_config.to_json()},
                                     {"pretrained", pretrained != nullptr}};
    if (options.resume && std::filesystem::exists(*dir / "last.hxck")) {
      const Checkpoint last = read_checkpoint(*dir / "last.hxck");
      tr.load_state(last, *dir / "optimizer.bin");
      first_epoch = tr.epoch();
      best_val = last.extra.value("best_val", best_val);
      bad_epochs = last.extra.value("bad_epochs", 0);
      std::istringstream(last.extra.value("rng", std::string())) >> rng;
      if (std::filesystem::exists(*dir / "best.hxck")) {
        result.best = read_checkpoint(*dir / "best.hxck");
        have_best = true;
      }
      log("resuming " + to_string(system) + " at epoch " + std::to_string(first_epoch));
      if (bad_epochs >= config.patience) {
        result.early_stopped = true;
        first_epoch = config.max_epochs;
      }
    } else {
      write_json(*dir / "config.json", snapshot);
      std::ofstream(*dir / "metrics.jsonl", std::ios::trunc);
    }
  }

  for (int epoch = first_epoch; epoch < config.max_epochs; ++epoch) {
    tr.set_epoch(epoch);
    std::vector<std::size_t> order(data.train.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<Excerpt> excerpts;
    for (std::size_t i : order) {
      auto ex = sample_excerpt(data.train[i], config.excerpt_s, rng);
      if (ex)
        excerpts.push_back(std::move(*ex));
      else
        log("warning: " + data.train[i].id + " is shorter than the excerpt length; skipped");
    }
    if (excerpts.empty()) throw ConfigError("every training recording is shorter than the excerpt length");

    std::vector<LossBreakdown> losses;
    bool step_limit = false;
    for (std::size_t b = 0; b < excerpts.size(); b += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t len = std::min<std::size_t>(static_cast<std::size_t>(config.batch_size), excerpts.size() - b);
      losses.push_back(tr.step(std::span<const Excerpt>(excerpts.data() + b, len)));
      if (config.max_steps > 0 && tr.steps() >= config.max_steps) {
        step_limit = true;
        break;
      }
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.step = tr.steps();
    m.learning_rate = tr.learning_rate();
    m.train = average(losses);
    m.val_loss = validation_loss(tr, val, E);
    if (!std::isfinite(m.val_loss)) throw DivergenceError("validation loss became non-finite at epoch " + std::to_string(epoch));
    result.history.push_back(m);
    tr.set_epoch(epoch + 1);

    if (m.val_loss < best_val) {
      best_val = m.val_loss;
      bad_epochs = 0;
      result.best = tr.checkpoint();
      result.best.validation_loss = m.val_loss;
      have_best = true;
      if (dir) write_checkpoint(*dir / "best.hxck", result.best);
    } else {
      ++bad_epochs;
    }

    if (dir) {
      std::ofstream(*dir / "metrics.jsonl", std::ios::app) << m.to_json().dump() << '\n';
      Checkpoint last = tr.checkpoint();
      last.validation_loss = m.val_loss;
      std::ostringstream rs;
      rs << rng;
      last.extra["best_val"] = best_val;
      last.extra["bad_epochs"] = bad_epochs;
      last.extra["rng"] = rs.str();
      tr.save_optimizer(*dir / "optimizer.bin");
      write_checkpoint(*dir / "last.hxck", last);
    }
    log(to_string(system) + " epoch " + std::to_string(epoch) + " train " + std::to_string(m.train.total) + " val " +
        std::to_string(m.val_loss));

    if (bad_epochs >= config.patience) {
      result.early_stopped = true;
      break;
    }
    if (step_limit) break;
  }

  if (!have_best) {
    result.best = tr.checkpoint();
    result.best.validation_loss = validation_loss(tr, val, E);
    if (dir) write_checkpoint(*dir / "best.hxck", result.best);
  }
  return result;
}

TrainResult train_synthesis(const TrainData& data, const TrainConfig& config, const ModelConfig& model_config,
                            const TrainOptions& options) {
  return train(TrainSystem::kSyn, data, config, model_config, nullptr, options);
}

TrainResult train_control(const TrainData& data, const TrainConfig& config, const ModelConfig& model_config,
                          TrainSystem mode, const TrainOptions& options) {
  if (mode != TrainSystem::kRg && mode != TrainSystem::kCl) throw ConfigError("control training mode must be rg or cl");
  return train(mode, data, config, model_config, nullptr, options);
}

TrainResult train_joint(const TrainData& data, const TrainConfig& config, const ModelConfig& model_config,
                        const Checkpoint& synthesis, const TrainOptions& options) {
  return train(TrainSystem::kJt, data, config, model_config, &synthesis, options);
}

TrainResult train_unified(const TrainData& data, const TrainConfig& config, const ModelConfig& model_config,
                          const TrainOptions& options) {
  return train(TrainSystem::kUnified, data, config, model_config, nullptr, options);
}

double f0_top1_accuracy(const Mat& f0_probs, const ControlFeatures& target, const StringwiseMidiInput& midi) {
  const Eigen::Index T = target.n_frames();
  if (f0_probs.rows() != kNumStrings * T || midi.n_frames != T)
    throw ShapeError("f0 probabilities do not match the target frames");
  const QuantizedControlFeatures q = quantize_features(target);
  long long kept = 0, hit = 0;
  for (Eigen::Index s = 0; s < kNumStrings; ++s)
    for (Eigen::Index t = 0; t < T; ++t) {
      if (!midi.active(s, t) || !(target.l(s, t) * target.p(s, t) > 0.0)) continue;
      const Eigen::Index r = row_of(s, t, T);
      Eigen::Index best = 0;
      for (Eigen::Index b = 1; b < f0_probs.cols(); ++b)
        if (f0_probs(r, b) > f0_probs(r, best)) best = b;
      ++kept;
      hit += best == q.f0[static_cast<std::size_t>(r)];
    }
  return kept ? static_cast<double>(hit) / static_cast<double>(kept) : 1.0;
}

double OverfitResult::best() const { return *std::min_element(curve.begin(), curve.end()); }

OverfitResult overfit(TrainSystem system, const Recording& clip, const TrainConfig& config,
                      const ModelConfig& model_config, long long max_steps, double target_fraction,
                      const Checkpoint* pretrained) {
  Trainer tr(system, config, model_config, pretrained);
  const Excerpt ex = excerpt_at(clip, 0, clip.n_frames());
  OverfitResult r;
  // curve[k] is the loss after k updates.
  for (long long k = 0; k <= max_steps; ++k) {
    r.curve.push_back(tr.step(std::span<const Excerpt>(&ex, 1)).total);
    r.steps = k;
    if (k > 0 && r.curve.back() <= target_fraction * r.curve.front()) {
      r.reached = true;
      break;
    }
  }
  return r;
}

}  // namespace hexsynth
