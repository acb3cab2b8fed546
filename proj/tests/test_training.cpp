#include <cmath>
#include <set>

#include "doctest.h"
#include "hexsynth/training.hpp"
#include "test_util.hpp"

using namespace hexsynth;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.hidden_size = 8;
  c.n_attention_heads = 2;
  return c;
}

TrainConfig quick(TrainSystem s) {
  TrainConfig c = TrainConfig::preset(s);
  c.excerpt_s = 0.25;
  c.batch_size = 2;
  c.max_epochs = 3;
  c.seed = 11;
  return c;
}

Recording clip(std::uint64_t seed, double seconds) {
  SyntheticConfig sc;
  sc.duration_s = seconds;
  sc.min_note_s = 0.1;
  sc.max_note_s = 0.3;
  sc.max_gap_s = 0.05;
  sc.string_activity = 1.0;
  return prepare_recording(synthetic_recording("r" + std::to_string(seed), seed, sc));
}

TrainData small_data() {
  TrainData d;
  d.train = {clip(1, 0.5), clip(2, 0.4), clip(3, 0.6)};
  d.val = {clip(4, 0.3)};
  return d;
}

}  // namespace

TEST_CASE("train config presets, schedule and json") {
  CHECK(TrainConfig::preset(TrainSystem::kSyn).learning_rate == 3e-4);
  for (auto s : {TrainSystem::kRg, TrainSystem::kCl, TrainSystem::kJt, TrainSystem::kUnified})
    CHECK(TrainConfig::preset(s).learning_rate == 1e-4);
  const TrainConfig c = TrainConfig::preset(TrainSystem::kSyn);
  CHECK(c.adam_beta1 == 0.99);
  CHECK(c.patience == 5);
  CHECK(c.lr_at_epoch(0) == 3e-4);
  CHECK(c.lr_at_epoch(10) == doctest::Approx(3e-4 * std::pow(0.99, 10)).epsilon(1e-14));
  const TrainConfig r = TrainConfig::from_json(c.to_json(), {});
  CHECK(r.to_json() == c.to_json());
  CHECK_THROWS_AS(TrainConfig::from_json({{"patience", 0}}, {}), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"learning_rate", -1.0}}, {}), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"reduction", "max"}}, {}), ConfigError);
  for (auto s : {TrainSystem::kSyn, TrainSystem::kRg, TrainSystem::kCl, TrainSystem::kJt, TrainSystem::kUnified})
    CHECK(train_system_from_string(to_string(s)) == s);
  CHECK_THROWS_AS(train_system_from_string("gan"), ConfigError);
}

TEST_CASE("dataset split") {
  const auto catalog = guitarset_shaped_catalog();
  REQUIRE(catalog.size() == 360);
  const DatasetSplit s = split_dataset(catalog, 3);
  CHECK(s.test.size() == 36);
  CHECK(s.val.size() == 18);
  CHECK(s.train.size() == 306);

  std::map<std::string, std::string> group;
  for (const auto& e : catalog) group[e.id] = e.group();
  std::set<std::string> test_groups, dev_groups, all;
  for (const auto& id : s.test) test_groups.insert(group[id]);
  for (const auto& id : s.train) dev_groups.insert(group[id]);
  for (const auto& id : s.val) dev_groups.insert(group[id]);
  for (const auto& g : test_groups) CHECK(dev_groups.count(g) == 0);
  for (const auto* part : {&s.train, &s.val, &s.test}) all.insert(part->begin(), part->end());
  CHECK(all.size() == 360);

  // Test groups spread over the factors.
  std::set<std::string> players, styles, progs;
  for (const auto& id : s.test)
    for (const auto& e : catalog)
      if (e.id == id) {
        players.insert(e.player);
        styles.insert(e.style);
        progs.insert(e.progression);
      }
  CHECK(players.size() == 6);
  CHECK(styles.size() == 5);
  CHECK(progs.size() == 3);
  CHECK(s.aliases.size() == 6);

  CHECK(split_dataset(catalog, 3).to_json() == s.to_json());
  CHECK(split_dataset(catalog, 4).test != s.test);
  CHECK(DatasetSplit::from_json(s.to_json()).test == s.test);

  SUBCASE("one recording per group, half and half") {
    std::vector<CatalogEntry> one;
    for (int i = 0; i < 20; ++i) one.push_back({"x" + std::to_string(i), "p" + std::to_string(i % 4), "1", std::to_string(i)});
    const DatasetSplit h = split_dataset(one, 1, {0.5, 0.0});
    CHECK(h.test.size() == 10);
    CHECK(h.train.size() == 10);
    std::set<std::string> tg;
    for (const auto& id : h.test) tg.insert(id);
    for (const auto& id : h.train) CHECK(tg.count(id) == 0);
  }
  CHECK_THROWS_AS(split_dataset({{"a", "p", "1", "s"}}, 0), ConfigError);
  CHECK_THROWS_AS(split_dataset({}, 0), ConfigError);
}

TEST_CASE("excerpt sampling") {
  const Recording rec = clip(5, 1.0);
  REQUIRE(rec.n_frames() == 128);
  REQUIRE(rec.audio.size() == 128u * 375u);
  std::mt19937_64 rng(1);
  std::set<Eigen::Index> starts;
  for (int i = 0; i < 50; ++i) {
    const auto ex = sample_excerpt(rec, 0.25, rng);
    REQUIRE(ex);
    CHECK(ex->n_frames() == 32);
    CHECK(ex->midi.n_frames == 32);
    CHECK(ex->audio.size() == 32u * 375u);
    const auto first = static_cast<std::size_t>(ex->frame_start) * 375;
    CHECK(ex->audio.samples.front() == rec.audio.samples[first]);
    CHECK(ex->audio.samples.back() == rec.audio.samples[first + 32 * 375 - 1]);
    CHECK(ex->features.l(2, 0) == rec.features.l(2, ex->frame_start));
    starts.insert(ex->frame_start);
  }
  CHECK(starts.size() > 20);
  CHECK(*starts.rbegin() <= 96);

  // whole-length excerpt always starts at 0
  for (int i = 0; i < 5; ++i) CHECK(sample_excerpt(rec, 1.0, rng)->frame_start == 0);
  CHECK_FALSE(sample_excerpt(rec, 1.5, rng));

  const Recording eight = clip(6, 8.0);
  const auto ex = sample_excerpt(eight, 8.0, rng);
  REQUIRE(ex);
  CHECK(ex->frame_start == 0);
  CHECK(ex->n_frames() == 1024);
  CHECK(ex->audio.size() == 384000u);
}

TEST_CASE("joint training needs a synthesis checkpoint") {
  try {
    Trainer tr(TrainSystem::kJt, quick(TrainSystem::kJt), tiny());
    FAIL("expected an error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("pre-trained synthesis model") != std::string::npos);
  }
}

TEST_CASE("gradient barrier at the decoded pitch") {
  const Recording rec = clip(7, 0.25);
  const Excerpt ex = excerpt_at(rec, 0, rec.n_frames());

  Trainer syn(TrainSystem::kSyn, quick(TrainSystem::kSyn), tiny());
  const Checkpoint pre = syn.checkpoint();
  for (TrainSystem s : {TrainSystem::kJt, TrainSystem::kUnified}) {
    CAPTURE(to_string(s));
    Trainer tr(s, quick(s), tiny(), &pre);
    const std::string role = s == TrainSystem::kJt ? "control" : "unified";
    tr.zero_grad();
    const LossBreakdown all = tr.forward(ex, 5, true);
    CHECK(all.components.size() == 2);
    CHECK(all.components.count("f0") == 1);
    CHECK(all.components.count("mssl") == 1);
    const Mat g_all = tr.store(role).at("head.f0.W").grad;
    const Mat g_trunk = tr.store(role).at("rnn0.fwd.Wx").grad;
    tr.zero_grad();
    tr.forward(ex, 5, true, 1.0, LossTerms::kF0Only);
    CHECK(tr.store(role).at("head.f0.W").grad == g_all);
    // the trunk does receive audio gradients
    CHECK((tr.store(role).at("rnn0.fwd.Wx").grad - g_trunk).norm() > 0.0);
    tr.zero_grad();
    tr.forward(ex, 5, true, 1.0, LossTerms::kAudioOnly);
    CHECK(tr.store(role).at("head.f0.W").grad.isZero(0.0));
  }
}

TEST_CASE("regression at the target gives zero loss and gradient") {
  const Recording rec = clip(8, 0.25);
  ControlFeatures grad;
  const LossBreakdown lb = loss_regression(rec.features, rec.features, Reduction::kSum, &grad);
  CHECK(lb.total == 0.0);
  for (const Mat* m : {&grad.f0, &grad.l, &grad.p, &grad.c}) CHECK(m->isZero(0.0));
}

TEST_CASE("non-finite loss aborts") {
  Recording rec = clip(9, 0.25);
  Excerpt ex = excerpt_at(rec, 0, rec.n_frames());
  ex.audio.samples[100] = std::nan("");
  Trainer tr(TrainSystem::kSyn, quick(TrainSystem::kSyn), tiny());
  CHECK_THROWS_AS(tr.step(std::span<const Excerpt>(&ex, 1)), DivergenceError);
}

TEST_CASE("runs are reproducible, resumable and keep the best epoch") {
  const TrainData data = small_data();
  const auto dir = testutil::temp_dir("train");
  for (TrainSystem s : {TrainSystem::kRg, TrainSystem::kCl, TrainSystem::kSyn}) {
    CAPTURE(to_string(s));
    TrainConfig c = quick(s);
    c.max_epochs = 4;
    c.patience = 10;
    const auto a = dir / (to_string(s) + "_a");
    const auto b = dir / (to_string(s) + "_b");
    const auto log = [](const std::string&) {};
    const TrainResult ra = train(s, data, c, tiny(), nullptr, {a, false, log});
    train(s, data, c, tiny(), nullptr, {b, false, log});
    CHECK(testutil::read_file(a / "best.hxck") == testutil::read_file(b / "best.hxck"));
    CHECK(testutil::read_file(a / "last.hxck") == testutil::read_file(b / "last.hxck"));
    CHECK(std::filesystem::exists(a / "config.json"));
    REQUIRE(ra.history.size() == 4);
    CHECK(ra.history[1].learning_rate == doctest::Approx(c.lr_at_epoch(1)));

    // best checkpoint is no worse than any later epoch
    const double best = ra.best.validation_loss;
    for (const auto& m : ra.history) CHECK(best <= m.val_loss);

    // two epochs plus a resume to four equals four straight epochs
    const auto r = dir / (to_string(s) + "_r");
    TrainConfig two = c;
    two.max_epochs = 2;
    train(s, data, two, tiny(), nullptr, {r, false, log});
    train(s, data, c, tiny(), nullptr, {r, true, log});
    CHECK(testutil::read_file(a / "last.hxck") == testutil::read_file(r / "last.hxck"));
    CHECK(testutil::read_file(a / "best.hxck") == testutil::read_file(r / "best.hxck"));
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("early stopping with patience") {
  TrainData data = small_data();
  TrainConfig c = quick(TrainSystem::kRg);
  c.learning_rate = 0.5;  // far too large: validation stops improving quickly
  c.adam_beta1 = 0.0;
  c.patience = 2;
  c.max_epochs = 60;
  const TrainResult r = train(TrainSystem::kRg, data, c, tiny(), nullptr, {std::nullopt, false, [](const std::string&) {}});
  CHECK(r.early_stopped);
  CHECK(r.history.size() < 60);
  const double best = r.best.validation_loss;
  for (const auto& m : r.history) CHECK(best <= m.val_loss);
}

TEST_CASE("classification overfits the pitch of one clip") {
  const Recording rec = clip(12, 1.0);
  TrainConfig c = TrainConfig::preset(TrainSystem::kCl);
  c.learning_rate = 1e-3;
  c.seed = 2;
  Trainer tr(TrainSystem::kCl, c, ModelConfig::desk());
  const Excerpt ex = excerpt_at(rec, 0, rec.n_frames());
  for (int i = 0; i < 150; ++i) tr.step(std::span<const Excerpt>(&ex, 1));
  const double acc = f0_top1_accuracy(control_forward_cl(tr.model("control"), ex.midi).f0, ex.features, ex.midi);
  MESSAGE("top-1 pitch accuracy " << acc);
  CHECK(acc >= 0.95);
}
