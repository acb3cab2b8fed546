#include <cmath>

#include "doctest.h"
#include "hexsynth/models.hpp"
#include "test_util.hpp"

using namespace hexsynth;

namespace {

StringwiseMidiInput toy_input(Eigen::Index T) {
  const double d = static_cast<double>(T) / kFrameRate;
  NoteEventList notes{{0, 0.0, 0.6 * d, 40.0, 0.5}, {2, 0.1 * d, 0.9 * d, 55.0, 0.8}, {5, 0.2 * d, 0.7 * d, 71.3, 0.3}};
  validate_and_sort(notes);
  auto x = encode_stringwise(notes, d);
  REQUIRE(x.n_frames == T);
  return x;
}

ModelConfig tiny() {
  ModelConfig c;
  c.hidden_size = 8;
  c.n_attention_heads = 2;
  c.seed = 3;
  return c;
}

ControlFeatures toy_features(Eigen::Index T) {
  ControlFeatures f(T);
  for (Eigen::Index s = 0; s < 6; ++s)
    for (Eigen::Index t = 0; t < T; ++t) {
      f.f0(s, t) = 0.1 + 0.1 * s + 0.002 * t;
      f.l(s, t) = 0.5 + 0.3 * std::sin(0.3 * t + s);
      f.p(s, t) = 0.4;
      f.c(s, t) = 0.05 * s;
    }
  return f;
}

double max_abs(const Mat& m) { return m.cwiseAbs().maxCoeff(); }

}  // namespace

TEST_CASE("model kinds and configs round trip") {
  for (ModelKind k : {ModelKind::kControlRg, ModelKind::kControlCl, ModelKind::kControlJt, ModelKind::kDecoder,
                      ModelKind::kUnified})
    CHECK(model_kind_from_string(to_string(k)) == k);
  CHECK_THROWS_AS(model_kind_from_string("gan"), ConfigError);
  ModelConfig c = ModelConfig::paper(ModelKind::kUnified);
  CHECK(ModelConfig::from_json(c.to_json()) == c);
  CHECK_THROWS_AS(ModelConfig::preset_named("huge", ModelKind::kDecoder), ConfigError);
  c.n_attention_heads = 7;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("output shapes and probability rows") {
  const Eigen::Index T = 12;
  const auto x = toy_input(T);

  Model rg(ModelKind::kControlRg, tiny());
  const ControlFeatures f = control_forward_rg(rg, x);
  CHECK(f.f0.rows() == 6);
  CHECK(f.f0.cols() == T);
  CHECK(f.l.minCoeff() > 0.0);
  CHECK(f.c.maxCoeff() < 1.0);

  Model cl(ModelKind::kControlCl, tiny());
  const ControlProbabilities pr = control_forward_cl(cl, x);
  CHECK(pr.f0.cols() == kPitchBins);
  CHECK(pr.l.cols() == kFeatureBins);
  for (const Mat* m : {&pr.f0, &pr.l, &pr.p, &pr.c}) {
    CHECK(m->rows() == 6 * T);
    CHECK(max_abs(m->rowwise().sum().array() - 1.0) < 1e-12);
  }
  CHECK_NOTHROW(pr.validate());

  Model jt(ModelKind::kControlJt, tiny());
  const JointControlOutput j = control_forward_jt(jt, x);
  CHECK(j.f0_probs.cols() == kPitchBins);
  CHECK(j.features.f0 == argmax_decode(j.f0_probs, T));

  Model dec(ModelKind::kDecoder, tiny());
  const SynthesisParams sp = decoder_forward(dec, toy_features(T));
  CHECK(sp.H.rows() == 6 * T);
  CHECK(sp.H.cols() == kNumHarmonics);
  CHECK(sp.N.cols() == kNumNoiseBands);
  CHECK(sp.a.rows() == 6);
  CHECK(sp.a.cols() == T);
  CHECK(sp.H.minCoeff() >= 1e-7);
  CHECK(sp.a.maxCoeff() <= 2.0 + 1e-7);
  CHECK_NOTHROW(sp.validate());

  Model uni(ModelKind::kUnified, tiny());
  const UnifiedOutput u = unified_forward(uni, x);
  CHECK(max_abs(u.f0_probs.rowwise().sum().array() - 1.0) < 1e-12);
  CHECK(u.f0_unit.rows() == 6);
  CHECK(u.params.N.rows() == 6 * T);

  CHECK_THROWS_AS(control_forward_cl(rg, x), ConfigError);
  CHECK_THROWS_AS(unified_forward(dec, x), ConfigError);
}

TEST_CASE("string permutation equivariance") {
  const Eigen::Index T = 10;
  const auto x = toy_input(T);
  const StringIds perm{3, 5, 0, 1, 4, 2};
  const auto xp = x.permute_strings(perm);

  Model cl(ModelKind::kControlCl, tiny());
  const auto a = control_forward_cl(cl, x);
  const auto b = control_forward_cl(cl, xp, perm);
  for (int s = 0; s < 6; ++s)
    CHECK(max_abs(b.f0.middleRows(s * T, T) - a.f0.middleRows(perm[s] * T, T)) < 1e-12);

  Model dec(ModelKind::kDecoder, tiny());
  const ControlFeatures f = toy_features(T);
  ControlFeatures fp(T);
  for (int s = 0; s < 6; ++s) {
    fp.f0.row(s) = f.f0.row(perm[s]);
    fp.l.row(s) = f.l.row(perm[s]);
    fp.p.row(s) = f.p.row(perm[s]);
    fp.c.row(s) = f.c.row(perm[s]);
  }
  const auto pa = decoder_forward(dec, f);
  const auto pb = decoder_forward(dec, fp, perm);
  for (int s = 0; s < 6; ++s) {
    CHECK(max_abs(pb.H.middleRows(s * T, T) - pa.H.middleRows(perm[s] * T, T)) < 1e-12);
    CHECK(max_abs(pb.a.row(s) - pa.a.row(perm[s])) < 1e-12);
  }

  // Without the identity relabelling the string embedding makes the outputs differ.
  const auto c = control_forward_cl(cl, xp);
  CHECK(max_abs(c.f0.middleRows(0, T) - a.f0.middleRows(perm[0] * T, T)) > 1e-9);
}

TEST_CASE("initialisation is seeded") {
  Model a(ModelKind::kUnified, tiny()), b(ModelKind::kUnified, tiny());
  for (const auto* p : a.params().all()) CHECK(p->value == b.params().at(p->name).value);
  ModelConfig other = tiny();
  other.seed = 4;
  Model c(ModelKind::kUnified, other);
  CHECK(c.params().at("head.f0.W").value != a.params().at("head.f0.W").value);
  // forget gate bias starts at one
  const Mat& bias = a.params().at("rnn0.fwd.b").value;
  CHECK(bias.block(0, 8, 1, 8).isConstant(1.0));
}

TEST_CASE("argmax decoding") {
  Mat p = Mat::Zero(6, 4);
  p(0, 2) = 0.5;
  p(0, 3) = 0.5;  // tie goes to the lower bin
  for (int r = 1; r < 6; ++r) p(r, 3) = 1.0;
  const Mat d = argmax_decode(p, 1);
  CHECK(d(0, 0) == doctest::Approx(dequantize(2, 4)));
  CHECK(d(1, 0) == doctest::Approx(dequantize(3, 4)));
  CHECK_THROWS_AS(argmax_decode(p, 2), ShapeError);
}

TEST_CASE("mssl gradient does not reach the pitch head") {
  const Eigen::Index T = 6;
  const auto x = toy_input(T);
  Model uni(ModelKind::kUnified, tiny());
  uni.params().zero_grad();
  nn::Tape tape;
  const UnifiedGraph g = build_unified(tape, uni, x);
  const Mat seed = Mat::Ones(6 * T, kNumHarmonics);
  tape.backward({{g.synth.H, seed}});
  CHECK(uni.params().at("head.f0.W").grad.isZero(0.0));
  CHECK(uni.params().at("head.H.W").grad.norm() > 0.0);
  CHECK(uni.params().at("rnn0.fwd.Wx").grad.norm() > 0.0);
}

TEST_CASE("checkpoints round trip bit-exactly") {
  const auto dir = testutil::temp_dir("ckpt");
  Checkpoint ck;
  ck.system = "jt";
  ck.models.emplace("control", Model(ModelKind::kControlJt, tiny()));
  ck.models.emplace("decoder", Model(ModelKind::kDecoder, tiny()));
  ck.reverb = ReverbBank::random_init(5);
  ck.training_step = 1234;
  ck.validation_loss = 0.1 + 1e-17;
  ck.extra = {{"note", "x"}};
  write_checkpoint(dir / "a.hxck", ck);
  const Checkpoint r = read_checkpoint(dir / "a.hxck");
  CHECK(r.system == "jt");
  CHECK(r.training_step == 1234);
  CHECK(r.validation_loss == ck.validation_loss);
  CHECK(r.extra == ck.extra);
  REQUIRE(r.reverb);
  CHECK(r.reverb->ir == ck.reverb->ir);
  CHECK(r.n_parameters() == ck.n_parameters());
  for (const auto& [role, m] : ck.models) {
    const Model& o = r.model(role);
    CHECK(o.kind() == m.kind());
    CHECK(o.config() == m.config());
    for (const auto* p : m.params().all()) CHECK(o.params().at(p->name).value == p->value);
  }
  write_checkpoint(dir / "b.hxck", r);
  CHECK(testutil::read_file(dir / "a.hxck") == testutil::read_file(dir / "b.hxck"));
  CHECK_THROWS_AS(r.model("unified"), ConfigError);
  CHECK_THROWS_AS(read_checkpoint(dir / "missing.hxck"), IoError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("paper-size parameter counts") {
  const std::size_t control = Model(ModelKind::kControlCl, ModelConfig::paper(ModelKind::kControlCl)).n_parameters();
  const std::size_t decoder = Model(ModelKind::kDecoder, ModelConfig::paper(ModelKind::kDecoder)).n_parameters();
  const std::size_t unified = Model(ModelKind::kUnified, ModelConfig::paper(ModelKind::kUnified)).n_parameters();
  MESSAGE("control " << control << ", decoder " << decoder << ", unified " << unified);
  CHECK(control > 30'000'000);
  CHECK(decoder > 10'000'000);
  CHECK(unified > control);
}
