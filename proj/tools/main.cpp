// Command-line front end: hexsynth <command> [options]
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "hexsynth/cli.hpp"
#include "hexsynth/corpus.hpp"

using namespace hexsynth;
namespace fs = std::filesystem;

namespace {

void say(const std::string& s) { std::cerr << s << '\n'; }

template <typename T>
std::optional<T> opt_if(const CLI::Option* o, const T& v) {
  return o->count() ? std::optional<T>(v) : std::nullopt;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Guitar synthesis from string-wise MIDI"};
  app.require_subcommand(1);
  app.set_version_flag("--version", cli::kToolVersion);

  std::uint64_t seed = 0;
  int jobs = 1;
  std::optional<std::string> cache_dir;
  const auto add_cache = [&](CLI::App* sub) {
    sub->add_option("--cache", cache_dir, "feature cache root (default $HEXSYNTH_CACHE, then ./cache)");
  };

  // demo-corpus
  auto* demo = app.add_subcommand("demo-corpus", "write a small synthetic corpus");
  fs::path demo_out;
  int demo_count = 12;
  double demo_duration = 2.0;
  demo->add_option("--out", demo_out, "corpus directory")->required();
  demo->add_option("--count", demo_count, "recordings")->check(CLI::PositiveNumber);
  demo->add_option("--duration", demo_duration, "seconds per recording")->check(CLI::PositiveNumber);
  demo->add_option("--seed", seed);

  // extract
  auto* extract = app.add_subcommand("extract", "extract control features and MIDI input for every recording");
  fs::path corpus;
  std::optional<std::string> out_opt;
  bool force = false;
  extract->add_option("corpus", corpus)->required();
  extract->add_option("--out", out_opt, "cache directory (default $HEXSYNTH_CACHE, then ./cache)");
  extract->add_option("--jobs", jobs)->check(CLI::PositiveNumber);
  extract->add_flag("--force", force, "recompute up-to-date entries");

  // split
  auto* split = app.add_subcommand("split", "split a corpus into train, validation and test recordings");
  fs::path split_out;
  SplitConfig split_cfg;
  split->add_option("corpus", corpus)->required();
  split->add_option("--out", split_out)->required();
  split->add_option("--seed", seed);
  split->add_option("--test-fraction", split_cfg.test_fraction);
  split->add_option("--val-fraction", split_cfg.val_fraction);

  // train
  auto* train = app.add_subcommand("train", "train one system");
  cli::TrainCommand tc;
  std::string system_name, preset = "desk";
  std::optional<std::string> config_path, syn_ckpt;
  int max_epochs = 0;
  long long max_steps = 0;
  double excerpt = 0;
  train->add_option("system", system_name)->required()->check(CLI::IsMember({"syn", "rg", "cl", "jt", "unified"}));
  train->add_option("--corpus", tc.corpus)->required();
  train->add_option("--split", tc.split)->required();
  train->add_option("--out", tc.out, "run directory")->required();
  add_cache(train);
  train->add_option("--config", config_path, "JSON with optional 'train' and 'model' sections");
  train->add_option("--preset", preset)->check(CLI::IsMember({"desk", "paper"}));
  auto* train_seed = train->add_option("--seed", seed);
  train->add_option("--syn-checkpoint", syn_ckpt, "synthesis checkpoint (required for jt)");
  train->add_flag("--resume", tc.resume, "continue from the run directory's last state");
  auto* o_epochs = train->add_option("--max-epochs", max_epochs)->check(CLI::PositiveNumber);
  auto* o_steps = train->add_option("--max-steps", max_steps)->check(CLI::NonNegativeNumber);
  auto* o_excerpt = train->add_option("--excerpt", excerpt, "excerpt seconds")->check(CLI::PositiveNumber);

  // render / eval
  cli::RenderCommand rc;
  std::optional<std::string> split_path, notes_path;
  bool no_plots = false;
  const auto render_options = [&](CLI::App* sub) {
    sub->add_option("checkpoint", rc.checkpoint)->required();
    sub->add_option("ids", rc.ids, "recording ids (default: --split with --subset)");
    sub->add_option("--corpus", rc.corpus);
    sub->add_option("--out", rc.out)->required();
    add_cache(sub);
    sub->add_option("--split", split_path);
    sub->add_option("--subset", rc.subset)->check(CLI::IsMember({"train", "val", "test"}));
    sub->add_option("--syn-checkpoint", syn_ckpt, "synthesis checkpoint (required for rg and cl)");
    sub->add_option("--seed", seed, "noise seed");
    sub->add_option("--jobs", jobs)->check(CLI::PositiveNumber);
  };
  auto* render = app.add_subcommand("render", "render recordings or a note file to WAV");
  render_options(render);
  render->add_option("--notes", notes_path, "JSON-lines note file with velocities");
  auto* eval = app.add_subcommand("eval", "render and score held-out recordings");
  render_options(eval);
  eval->add_flag("--no-plots", no_plots);

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "compare analytic gradients with finite differences");
  GradcheckConfig gc;
  gradcheck->add_option("--out", out_opt, "JSON report");
  gradcheck->add_option("--seed", seed);
  gradcheck->add_option("--coordinates", gc.coordinates)->check(CLI::PositiveNumber);

  // bleed
  auto* bleed = app.add_subcommand("bleed", "string-bleed experiment: regression versus classification pitch");
  BleedConfig bc;
  bleed->add_option("--rate", bc.corruption_rate, "fraction of corrupted frames");
  bleed->add_option("--steps", bc.steps);
  bleed->add_option("--seed", seed);
  bleed->add_option("--out", out_opt, "JSON report");

  CLI11_PARSE(app, argc, argv);
  cli::set_command_line(std::vector<std::string>(argv, argv + argc));

  try {
    if (*demo) {
      SyntheticConfig sc;
      sc.duration_s = demo_duration;
      const auto catalog = write_demo_corpus(demo_out, demo_count, seed, sc);
      std::cout << "wrote " << catalog.size() << " recordings to " << demo_out.string() << '\n';
      return 0;
    }
    if (*extract) {
      const auto r = cli::cmd_extract({corpus, cli::cache_root(out_opt ? std::optional<fs::path>(*out_opt) : std::nullopt),
                                       jobs, force},
                                      say);
      std::cout << r.extracted.size() << " extracted, " << r.skipped.size() << " up to date, " << r.failures.size()
                << " failed\n";
      for (const auto& [id, why] : r.failures) std::cerr << "  " << id << ": " << why << '\n';
      return r.ok() ? 0 : 1;
    }
    if (*split) {
      const auto s = cli::cmd_split(corpus, split_out, seed, split_cfg);
      std::cout << "train " << s.train.size() << ", val " << s.val.size() << ", test " << s.test.size() << '\n';
      return 0;
    }
    if (*train) {
      tc.system = train_system_from_string(system_name);
      tc.cache = cli::cache_root(cache_dir ? std::optional<fs::path>(*cache_dir) : std::nullopt);
      if (config_path) tc.config = *config_path;
      tc.preset = preset;
      tc.seed = opt_if<std::uint64_t>(train_seed, seed);
      if (syn_ckpt) tc.syn_checkpoint = *syn_ckpt;
      tc.max_epochs = opt_if(o_epochs, max_epochs);
      tc.max_steps = opt_if(o_steps, max_steps);
      tc.excerpt_s = opt_if(o_excerpt, excerpt);
      const auto r = cli::cmd_train(tc, say);
      std::cout << "best validation loss " << r.best.validation_loss << " after " << r.history.size()
                << " epochs; checkpoint " << (tc.out / "best.hxck").string() << '\n';
      return 0;
    }
    if (*render || *eval) {
      rc.cache = cli::cache_root(cache_dir ? std::optional<fs::path>(*cache_dir) : std::nullopt);
      if (split_path) rc.split = *split_path;
      if (notes_path) rc.notes = *notes_path;
      if (syn_ckpt) rc.syn_checkpoint = *syn_ckpt;
      rc.seed = seed;
      rc.jobs = jobs;
      if (*render) {
        for (const auto& p : cli::cmd_render(rc, say)) std::cout << p.string() << '\n';
      } else {
        std::cout << cli::cmd_eval({rc, !no_plots}, say).table();
      }
      return 0;
    }
    if (*gradcheck) {
      gc.seed = seed;
      const auto r = cli::cmd_gradcheck(gc, out_opt ? std::optional<fs::path>(*out_opt) : std::nullopt);
      for (const auto& g : {"H", "a", "N", "ir"})
        std::cout << "synthesis " << g << ": max relative error " << r.synthesis.max_error(g) << '\n';
      std::cout << "audio: max relative error " << r.audio.max_error() << '\n';
      std::cout << (r.passed() ? "PASS" : "FAIL") << '\n';
      return r.passed() ? 0 : 1;
    }
    if (*bleed) {
      const auto r = cli::cmd_bleed(bc, seed, out_opt ? std::optional<fs::path>(*out_opt) : std::nullopt);
      std::cout << r.to_json().dump(2) << '\n';
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
