#include "hexsynth/models.hpp"

#include <cmath>

#include "hexsynth/binary_io.hpp"

namespace hexsynth {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

bool has_midi_input(ModelKind k) { return k != ModelKind::kDecoder; }

std::string rnn_name(int i) { return "rnn" + std::to_string(i); }
std::string att_name(int i) { return "att" + std::to_string(i); }

bool has_attention(const ModelConfig& c, int layer) {
  return layer + 1 < c.n_recurrent_layers || c.attention_after_last;
}

// Heads read the recurrent output next to the input embedding.
Eigen::Index head_width(const ModelConfig& c) { return 3 * c.hidden_size; }

struct Head {
  const char* name;
  int width;
};

std::vector<Head> heads_for(ModelKind kind, const ModelConfig& c) {
  switch (kind) {
    case ModelKind::kControlRg: return {{"head.ctrl", 4}};
    case ModelKind::kControlCl:
      return {{"head.f0", c.n_pitch_bins}, {"head.l", c.k_bins}, {"head.p", c.k_bins}, {"head.c", c.k_bins}};
    case ModelKind::kControlJt: return {{"head.f0", c.n_pitch_bins}, {"head.lpc", 3}};
    case ModelKind::kDecoder: return {{"head.H", c.n_harmonics}, {"head.a", 1}, {"head.N", c.n_noise_bands}};
    case ModelKind::kUnified:
      return {{"head.f0", c.n_pitch_bins}, {"head.H", c.n_harmonics}, {"head.a", 1}, {"head.N", c.n_noise_bands}};
  }
  throw ConfigError("unknown model kind");
}

std::uint64_t kind_salt(ModelKind k) { return static_cast<std::uint64_t>(k) + 1; }

}  // namespace

std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::kControlRg: return "control_rg";
    case ModelKind::kControlCl: return "control_cl";
    case ModelKind::kControlJt: return "control_jt";
    case ModelKind::kDecoder: return "decoder";
    case ModelKind::kUnified: return "unified";
  }
  return "?";
}

ModelKind model_kind_from_string(const std::string& name) {
  for (ModelKind k : {ModelKind::kControlRg, ModelKind::kControlCl, ModelKind::kControlJt, ModelKind::kDecoder,
                      ModelKind::kUnified})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown model kind '" + name + "'");
}

// ---- config -------------------------------------------------------------------

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper(ModelKind kind) {
  ModelConfig c;
  c.preset = "paper";
  c.hidden_size = 512;
  c.n_attention_heads = 8;
  c.attention_after_last = true;
  switch (kind) {
    case ModelKind::kDecoder: c.n_recurrent_layers = 2; break;
    case ModelKind::kUnified: c.n_recurrent_layers = 9; break;
    default: c.n_recurrent_layers = 5; break;
  }
  return c;
}

ModelConfig ModelConfig::preset_named(const std::string& name, ModelKind kind) {
  if (name == "desk") return desk();
  if (name == "paper") return paper(kind);
  throw ConfigError("unknown preset '" + name + "' (expected desk or paper)");
}

void ModelConfig::validate() const {
  if (hidden_size <= 0 || n_recurrent_layers <= 0 || n_attention_heads <= 0 || n_pitch_bins <= 0 ||
      n_vel_bins <= 0 || k_bins <= 0 || n_harmonics <= 0 || n_noise_bands <= 0)
    throw ConfigError("model config: all sizes must be positive");
  if ((2 * hidden_size) % n_attention_heads != 0)
    throw ConfigError("model config: 2 * hidden_size must be divisible by the head count");
  if (n_pitch_bins != kPitchBins || n_vel_bins != kVelBins || k_bins != kFeatureBins || n_harmonics != kNumHarmonics ||
      n_noise_bands != kNumNoiseBands)
    throw ConfigError("model config: bin counts are fixed by the feature and synthesis definitions");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"preset", preset},
          {"hidden_size", hidden_size},
          {"n_recurrent_layers", n_recurrent_layers},
          {"n_attention_heads", n_attention_heads},
          {"attention_after_last", attention_after_last},
          {"n_pitch_bins", n_pitch_bins},
          {"n_vel_bins", n_vel_bins},
          {"k_bins", k_bins},
          {"n_harmonics", n_harmonics},
          {"n_noise_bands", n_noise_bands},
          {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.preset = j.value("preset", c.preset);
    c.hidden_size = j.value("hidden_size", c.hidden_size);
    c.n_recurrent_layers = j.value("n_recurrent_layers", c.n_recurrent_layers);
    c.n_attention_heads = j.value("n_attention_heads", c.n_attention_heads);
    c.attention_after_last = j.value("attention_after_last", c.attention_after_last);
    c.n_pitch_bins = j.value("n_pitch_bins", c.n_pitch_bins);
    c.n_vel_bins = j.value("n_vel_bins", c.n_vel_bins);
    c.k_bins = j.value("k_bins", c.k_bins);
    c.n_harmonics = j.value("n_harmonics", c.n_harmonics);
    c.n_noise_bands = j.value("n_noise_bands", c.n_noise_bands);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---- model --------------------------------------------------------------------

Model::Model(ModelKind kind, ModelConfig config) : kind_(kind), config_(std::move(config)) {
  config_.validate();
  const Eigen::Index H = config_.hidden_size;
  if (has_midi_input(kind_)) {
    params_.add("in.pitch", config_.n_pitch_bins, H);
    params_.add("in.vel", config_.n_vel_bins, H);
    params_.add("in.string", kNumStrings, H);
    params_.add("in.b", 1, H);
  } else {
    nn::LinearLayer{"in", 4 + kNumStrings, H}.declare(params_);
  }
  for (int i = 0; i < config_.n_recurrent_layers; ++i) {
    nn::BiLstmLayer{rnn_name(i), i == 0 ? H : 2 * H, H}.declare(params_);
    if (has_attention(config_, i))
      nn::StringAttentionLayer{att_name(i), 2 * H, config_.n_attention_heads}.declare(params_);
  }
  for (const Head& h : heads_for(kind_, config_)) nn::LinearLayer{h.name, head_width(config_), h.width}.declare(params_);

  params_.init_uniform_fan_in(config_.seed * 0x9E3779B97F4A7C15ull + kind_salt(kind_));
  // One-hot rows have a fan-in of one.
  if (has_midi_input(kind_))
    for (const char* name : {"in.pitch", "in.vel", "in.string"}) {
      auto& p = params_.at(name);
      p.value *= std::sqrt(static_cast<double>(p.value.rows()));
    }
  for (int i = 0; i < config_.n_recurrent_layers; ++i)
    nn::BiLstmLayer{rnn_name(i), i == 0 ? H : 2 * H, H}.init_forget_bias(params_, 1.0);
}

// ---- graphs -------------------------------------------------------------------

namespace {

std::vector<int> string_index_rows(const StringIds& ids, Eigen::Index T) {
  std::vector<int> rows(static_cast<std::size_t>(kNumStrings * T));
  for (int s = 0; s < kNumStrings; ++s) {
    if (ids[s] < 0 || ids[s] >= kNumStrings) throw ShapeError("string ids must lie in 0..5");
    for (Eigen::Index t = 0; t < T; ++t) rows[static_cast<std::size_t>(row_of(s, t, T))] = ids[s];
  }
  return rows;
}

nn::Id trunk(nn::Tape& tape, Model& m, const nn::Id in) {
  const ModelConfig& c = m.config();
  nn::Id h = in;
  const Eigen::Index H = c.hidden_size;
  for (int i = 0; i < c.n_recurrent_layers; ++i) {
    h = nn::BiLstmLayer{rnn_name(i), i == 0 ? H : 2 * H, H}(tape, m.params(), h, kNumStrings);
    if (has_attention(c, i))
      h = nn::StringAttentionLayer{att_name(i), 2 * H, c.n_attention_heads}(tape, m.params(), h, kNumStrings);
  }
  return nn::concat_cols(tape, {h, in});
}

nn::Id midi_embedding(nn::Tape& tape, Model& m, const StringwiseMidiInput& x, const StringIds& ids) {
  const Eigen::Index T = x.n_frames;
  if (x.pitch_bin.size() != static_cast<std::size_t>(kNumStrings * T) || x.vel_bin.size() != x.pitch_bin.size())
    throw ShapeError("model input: MIDI tensors do not match the frame count");
  auto& ps = m.params();
  const nn::Id pitch = nn::embed(tape, tape.param(ps.at("in.pitch")), x.pitch_bin);
  const nn::Id vel = nn::embed(tape, tape.param(ps.at("in.vel")), x.vel_bin);
  const nn::Id str = nn::embed(tape, tape.param(ps.at("in.string")), string_index_rows(ids, T));
  const nn::Id bias = nn::embed(tape, tape.param(ps.at("in.b")), std::vector<int>(static_cast<std::size_t>(kNumStrings * T), 0));
  return nn::add(tape, nn::add(tape, pitch, vel), nn::add(tape, str, bias));
}

nn::Id head(nn::Tape& tape, Model& m, nn::Id h, const char* name, Eigen::Index width) {
  return nn::LinearLayer{name, head_width(m.config()), width}(tape, m.params(), h);
}

void require_kind(const Model& m, std::initializer_list<ModelKind> kinds) {
  for (ModelKind k : kinds)
    if (m.kind() == k) return;
  throw ConfigError("model of kind " + to_string(m.kind()) + " cannot be used here");
}

SynthGraph synth_heads(nn::Tape& tape, Model& m, nn::Id h) {
  const ModelConfig& c = m.config();
  return {nn::exp_sigmoid(tape, head(tape, m, h, "head.H", c.n_harmonics)),
          nn::exp_sigmoid(tape, head(tape, m, h, "head.a", 1)),
          nn::exp_sigmoid(tape, head(tape, m, h, "head.N", c.n_noise_bands))};
}

}  // namespace

ControlGraph build_control(nn::Tape& tape, Model& m, const StringwiseMidiInput& x, const StringIds& ids) {
  require_kind(m, {ModelKind::kControlRg, ModelKind::kControlCl, ModelKind::kControlJt});
  const nn::Id h = trunk(tape, m, midi_embedding(tape, m, x, ids));
  const ModelConfig& c = m.config();
  switch (m.kind()) {
    case ModelKind::kControlRg: {
      const nn::Id out = nn::sigmoid(tape, head(tape, m, h, "head.ctrl", 4));
      return {nn::slice_cols(tape, out, 0, 1), nn::slice_cols(tape, out, 1, 1), nn::slice_cols(tape, out, 2, 1),
              nn::slice_cols(tape, out, 3, 1)};
    }
    case ModelKind::kControlCl:
      return {nn::softmax_rows(tape, head(tape, m, h, "head.f0", c.n_pitch_bins)),
              nn::softmax_rows(tape, head(tape, m, h, "head.l", c.k_bins)),
              nn::softmax_rows(tape, head(tape, m, h, "head.p", c.k_bins)),
              nn::softmax_rows(tape, head(tape, m, h, "head.c", c.k_bins))};
    default: {
      const nn::Id f0 = nn::softmax_rows(tape, head(tape, m, h, "head.f0", c.n_pitch_bins));
      const nn::Id lpc = nn::sigmoid(tape, head(tape, m, h, "head.lpc", 3));
      return {f0, nn::slice_cols(tape, lpc, 0, 1), nn::slice_cols(tape, lpc, 1, 1), nn::slice_cols(tape, lpc, 2, 1)};
    }
  }
}

SynthGraph build_decoder(nn::Tape& tape, Model& m, nn::Id features, Eigen::Index n_frames, const StringIds& ids) {
  require_kind(m, {ModelKind::kDecoder});
  const Mat& f = tape.value(features);
  if (f.rows() != kNumStrings * n_frames || f.cols() != 4) throw ShapeError("decoder input must be (6T, 4)");
  Mat onehot = Mat::Zero(kNumStrings * n_frames, kNumStrings);
  const auto rows = string_index_rows(ids, n_frames);
  for (std::size_t r = 0; r < rows.size(); ++r) onehot(static_cast<Eigen::Index>(r), rows[r]) = 1.0;
  const nn::Id in = nn::concat_cols(tape, {features, tape.constant(std::move(onehot))});
  const nn::Id h = trunk(tape, m, nn::LinearLayer{"in", 4 + kNumStrings, m.config().hidden_size}(tape, m.params(), in));
  return synth_heads(tape, m, h);
}

UnifiedGraph build_unified(nn::Tape& tape, Model& m, const StringwiseMidiInput& x, const StringIds& ids) {
  require_kind(m, {ModelKind::kUnified});
  const nn::Id h = trunk(tape, m, midi_embedding(tape, m, x, ids));
  const nn::Id f0 = nn::softmax_rows(tape, head(tape, m, h, "head.f0", m.config().n_pitch_bins));
  return {f0, synth_heads(tape, m, h)};
}

Mat column_to_contour(const Mat& column, Eigen::Index n_frames) {
  if (column.cols() != 1 || column.rows() != kNumStrings * n_frames) throw ShapeError("expected a (6T, 1) column");
  return Eigen::Map<const Mat>(column.data(), kNumStrings, n_frames);
}

Mat contour_to_column(const Mat& contour) {
  if (contour.rows() != kNumStrings) throw ShapeError("expected a (6, T) contour");
  return Eigen::Map<const Mat>(contour.data(), contour.size(), 1);
}

Mat features_to_columns(const ControlFeatures& f) {
  Mat out(kNumStrings * f.n_frames(), 4);
  out.col(0) = contour_to_column(f.f0);
  out.col(1) = contour_to_column(f.l);
  out.col(2) = contour_to_column(f.p);
  out.col(3) = contour_to_column(f.c);
  return out;
}

SynthesisParams synth_params_from(const nn::Tape& tape, const SynthGraph& g, Eigen::Index n_frames) {
  SynthesisParams p;
  p.H = tape.value(g.H);
  p.a = column_to_contour(tape.value(g.a), n_frames);
  p.N = tape.value(g.N);
  return p;
}

// ---- value-level forwards -------------------------------------------------------

ControlFeatures control_forward_rg(Model& m, const StringwiseMidiInput& x, const StringIds& ids) {
  require_kind(m, {ModelKind::kControlRg});
  nn::Tape tape;
  const ControlGraph g = build_control(tape, m, x, ids);
  ControlFeatures out(x.n_frames);
  out.f0 = column_to_contour(tape.value(g.f0), x.n_frames);
  out.l = column_to_contour(tape.value(g.l), x.n_frames);
  out.p = column_to_contour(tape.value(g.p), x.n_frames);
  out.c = column_to_contour(tape.value(g.c), x.n_frames);
  return out;
}

ControlProbabilities control_forward_cl(Model& m, const StringwiseMidiInput& x, const StringIds& ids) {
  require_kind(m, {ModelKind::kControlCl});
  nn::Tape tape;
  const ControlGraph g = build_control(tape, m, x, ids);
  return {tape.value(g.f0), tape.value(g.l), tape.value(g.p), tape.value(g.c)};
}

JointControlOutput control_forward_jt(Model& m, const StringwiseMidiInput& x, const StringIds& ids) {
  require_kind(m, {ModelKind::kControlJt});
  nn::Tape tape;
  const ControlGraph g = build_control(tape, m, x, ids);
  JointControlOutput out{tape.value(g.f0), ControlFeatures(x.n_frames)};
  out.features.f0 = argmax_decode(out.f0_probs, x.n_frames);
  out.features.l = column_to_contour(tape.value(g.l), x.n_frames);
  out.features.p = column_to_contour(tape.value(g.p), x.n_frames);
  out.features.c = column_to_contour(tape.value(g.c), x.n_frames);
  return out;
}

SynthesisParams decoder_forward(Model& m, const ControlFeatures& ctrl, const StringIds& ids) {
  nn::Tape tape;
  const SynthGraph g = build_decoder(tape, m, tape.constant(features_to_columns(ctrl)), ctrl.n_frames(), ids);
  return synth_params_from(tape, g, ctrl.n_frames());
}

UnifiedOutput unified_forward(Model& m, const StringwiseMidiInput& x, const StringIds& ids) {
  nn::Tape tape;
  const UnifiedGraph g = build_unified(tape, m, x, ids);
  UnifiedOutput out;
  out.f0_probs = tape.value(g.f0);
  out.f0_unit = argmax_decode(out.f0_probs, x.n_frames);
  out.params = synth_params_from(tape, g.synth, x.n_frames);
  return out;
}

Mat argmax_decode(const Mat& probs, Eigen::Index n_frames) {
  if (probs.rows() != kNumStrings * n_frames || probs.cols() == 0) throw ShapeError("argmax_decode: expected (6T, B)");
  const int bins = static_cast<int>(probs.cols());
  Mat out(kNumStrings, n_frames);
  for (Eigen::Index s = 0; s < kNumStrings; ++s)
    for (Eigen::Index t = 0; t < n_frames; ++t) {
      const Eigen::Index r = row_of(s, t, n_frames);
      int best = 0;
      for (int b = 1; b < bins; ++b)
        if (probs(r, b) > probs(r, best)) best = b;
      out(s, t) = dequantize(best, bins);
    }
  return out;
}

ControlFeatures decode_probabilities(const ControlProbabilities& probs) {
  const Eigen::Index T = probs.n_frames();
  ControlFeatures f(T);
  f.f0 = argmax_decode(probs.f0, T);
  f.l = argmax_decode(probs.l, T);
  f.p = argmax_decode(probs.p, T);
  f.c = argmax_decode(probs.c, T);
  return f;
}

// ---- checkpoints ----------------------------------------------------------------

Model& Checkpoint::model(const std::string& role) {
  auto it = models.find(role);
  if (it == models.end()) throw ConfigError("checkpoint has no '" + role + "' network");
  return it->second;
}

const Model& Checkpoint::model(const std::string& role) const {
  auto it = models.find(role);
  if (it == models.end()) throw ConfigError("checkpoint has no '" + role + "' network");
  return it->second;
}

std::size_t Checkpoint::n_parameters() const {
  std::size_t n = reverb ? static_cast<std::size_t>(reverb->ir.size()) : 0;
  for (const auto& [role, m] : models) n += m.n_parameters();
  return n;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json header;
  header["system"] = ckpt.system;
  header["extra"] = ckpt.extra;
  header["reverb"] = ckpt.reverb.has_value();
  header["models"] = nlohmann::json::array();
  for (const auto& [role, m] : ckpt.models) {
    nlohmann::json tensors = nlohmann::json::array();
    for (const nn::Parameter* p : m.params().all())
      tensors.push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}});
    header["models"].push_back({{"role", role}, {"kind", to_string(m.kind())}, {"config", m.config().to_json()},
                                {"tensors", tensors}});
  }
  const std::string text = header.dump();

  const auto tmp = path.string() + ".tmp";
  {
    binio::Writer w(tmp);
    w.put_bytes("HXCK");
    w.put<std::uint32_t>(kCheckpointVersion);
    w.put<std::uint64_t>(text.size());
    w.put_bytes(text);
    w.put<std::int64_t>(ckpt.training_step);
    w.put<double>(ckpt.validation_loss);
    for (const auto& [role, m] : ckpt.models)
      for (const nn::Parameter* p : m.params().all())
        w.put_array<double>({p->value.data(), static_cast<std::size_t>(p->value.size())});
    if (ckpt.reverb) w.put_array<double>({ckpt.reverb->ir.data(), static_cast<std::size_t>(ckpt.reverb->ir.size())});
    w.finish();
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  binio::Reader r(path);
  r.expect_magic("HXCK");
  if (r.get<std::uint32_t>() != kCheckpointVersion) throw IoError("unsupported checkpoint version in " + path.string());
  const auto len = r.get<std::uint64_t>();
  if (len > (1u << 26)) throw IoError("corrupt checkpoint header in " + path.string());
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.get_bytes(len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  Checkpoint ckpt;
  ckpt.system = header.at("system").get<std::string>();
  ckpt.extra = header.value("extra", nlohmann::json::object());
  ckpt.training_step = r.get<std::int64_t>();
  ckpt.validation_loss = r.get<double>();
  for (const auto& jm : header.at("models")) {
    Model m(model_kind_from_string(jm.at("kind")), ModelConfig::from_json(jm.at("config")));
    const auto params = m.params().all();
    const auto& tensors = jm.at("tensors");
    if (tensors.size() != params.size()) throw IoError("checkpoint tensors do not match the configuration");
    for (std::size_t i = 0; i < params.size(); ++i) {
      nn::Parameter* p = params[i];
      if (tensors[i].at("name") != p->name || tensors[i].at("rows") != p->value.rows() ||
          tensors[i].at("cols") != p->value.cols())
        throw IoError("checkpoint tensor '" + p->name + "' does not match the configuration");
      const auto data = r.get_array<double>(static_cast<std::size_t>(p->value.size()));
      p->value = Eigen::Map<const Mat>(data.data(), p->value.rows(), p->value.cols());
    }
    ckpt.models.emplace(jm.at("role").get<std::string>(), std::move(m));
  }
  if (header.at("reverb").get<bool>()) {
    ReverbBank rv = ReverbBank::zeros();
    const auto data = r.get_array<double>(static_cast<std::size_t>(rv.ir.size()));
    rv.ir = Eigen::Map<const Mat>(data.data(), rv.ir.rows(), rv.ir.cols());
    ckpt.reverb = rv;
  }
  return ckpt;
}

}  // namespace hexsynth
