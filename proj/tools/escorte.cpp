#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "escorte/action/action.hpp"
#include "escorte/config.hpp"
#include "escorte/control/control.hpp"
#include "escorte/error.hpp"
#include "escorte/harness/io.hpp"
#include "escorte/harness/pipeline.hpp"
#include "escorte/num/checkpoint.hpp"
#include "escorte/reid/reid.hpp"
#include "escorte/sim/world.hpp"

namespace fs = std::filesystem;
using namespace escorte;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

KeyValueConfig load_optional(const std::string& path) {
  return path.empty() ? KeyValueConfig{} : KeyValueConfig::load(path);
}

std::vector<const sim::Sequence*> select(const std::vector<sim::Sequence>& all, sim::Split split) {
  std::vector<const sim::Sequence*> out;
  for (const auto& s : all)
    if (s.split == split) out.push_back(&s);
  if (out.empty()) throw ConfigError("corpus has no " + std::string(sim::to_string(split)) + " sequences");
  return out;
}

reid::EmbeddingModel load_reid(const std::string& path) {
  return reid::EmbeddingModel::from_checkpoint(num::load_checkpoint(path));
}

action::ActionModel load_action(const std::string& path) {
  return action::ActionModel::from_checkpoint(num::load_checkpoint(path));
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open " + path + " for writing");
  out << text;
  if (!out) throw ConfigError("failed writing " + path);
}

nlohmann::ordered_json latency_json(const harness::LatencyReport& r) {
  return {{"w", r.w},     {"t_r", r.t_r}, {"t_f", r.t_f},
          {"t_a", r.t_a}, {"t_i", r.t_i}, {"alpha_as_prose", r.alpha_as_prose},
          {"frames", r.frames}};
}

struct GenerateArgs {
  std::string spec, out;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
};

int run_generate(const GenerateArgs& a) {
  const KeyValueConfig cfg = load_optional(a.spec);
  sim::GenerateConfig g = sim::GenerateConfig::from_config(cfg);
  if (a.seed) g.spec.seed = *a.seed;
  const sim::Corpus corpus = sim::generate_corpus(g.spec, g.counts, g.spec.seed, a.threads);
  harness::save_corpus(corpus.sequences, a.out);
  std::cerr << "wrote " << corpus.sequences.size() << " sequences to " << a.out << "\n";
  return kExitOk;
}

struct TrainArgs {
  std::string corpus, config, out, reid;
  std::optional<std::uint64_t> seed;
};

int run_train_reid(const TrainArgs& a) {
  const KeyValueConfig cfg = load_optional(a.config);
  reid::ReidTrainConfig rc = reid::ReidTrainConfig::from_config(cfg);
  if (a.seed) rc.seed = *a.seed;
  const auto all = harness::load_corpus(a.corpus);
  const auto train = select(all, sim::Split::Train);
  if (!cfg.has("input_dim")) rc.dims.input = train.front()->feature_dim;
  num::Rng rng(rc.seed);
  const auto result = reid::train_reid(harness::triplet_pools(train), rc, rng);
  num::save_checkpoint(result.model.to_checkpoint(), a.out);
  std::cerr << "re-ID loss " << result.loss_history.front() << " -> "
            << result.loss_history.back() << "\n";
  return kExitOk;
}

int run_train_action(const TrainArgs& a) {
  const KeyValueConfig cfg = load_optional(a.config);
  action::ActionTrainConfig ac = action::ActionTrainConfig::from_config(cfg);
  if (a.seed) ac.seed = *a.seed;
  const std::string reid_path = a.reid.empty() ? cfg.get_string("reid", "") : a.reid;
  if (reid_path.empty()) throw ConfigError("train-action needs a re-ID checkpoint (--reid or key reid)");
  const auto reid_model = load_reid(reid_path);
  if (!cfg.has("d")) ac.model.dim = harness::subject_vector_dim(reid_model, ac.model.input);
  const auto all = harness::load_corpus(a.corpus);
  const auto set = harness::action_training_set(select(all, sim::Split::Train), reid_model,
                                                ac.model.input);
  num::Rng rng(ac.seed);
  const auto result = action::train_action(set, ac, rng);
  num::save_checkpoint(result.model.to_checkpoint(), a.out);
  std::cerr << "action loss " << result.loss_history.front() << " -> "
            << result.loss_history.back() << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string reid, action, corpus, report, config, split = "test";
  double threshold = reid::kDefaultThreshold;
  std::size_t threads = 1;
  bool latency = false;
};

int run_evaluate(const EvalArgs& a) {
  const KeyValueConfig cfg = load_optional(a.config);
  const auto reid_model = load_reid(a.reid);
  const auto action_model = load_action(a.action);
  const auto all = harness::load_corpus(a.corpus);
  harness::EvalReport rep = harness::evaluate_joint(
      reid_model, action_model, select(all, sim::parse_split(a.split)), {a.threshold, a.threads});
  if (a.latency) {
    harness::LatencyConfig lc;
    lc.alpha_as_prose = cfg.get_bool("latency.alpha_as_prose", false);
    num::Rng rng(1);
    rep.latency = harness::measure_latency(reid_model, action_model, rng, lc);
  }
  write_text(a.report, rep.to_json() + "\n");
  return kExitOk;
}

struct BenchArgs {
  std::string reid, action, config, report;
  std::size_t frames = 300, windows = 30;
  double fps = 30.0;
  bool alpha_as_prose = false;
};

int run_bench(const BenchArgs& a) {
  const KeyValueConfig cfg = load_optional(a.config);
  harness::LatencyConfig lc;
  lc.frames = a.frames;
  lc.windows = a.windows;
  lc.fps = a.fps;
  lc.alpha_as_prose = a.alpha_as_prose || cfg.get_bool("latency.alpha_as_prose", false);
  num::Rng rng(1);
  const auto r = harness::measure_latency(load_reid(a.reid), load_action(a.action), rng, lc);
  nlohmann::ordered_json j = latency_json(r);
  j["real_time"] = r.t_r <= r.t_f;
  write_text(a.report, j.dump() + "\n");
  return kExitOk;
}

struct ControlArgs {
  std::string corpus, reid, action, log, config, split = "test";
  double threshold = reid::kDefaultThreshold;
};

int run_control_sim(const ControlArgs& a) {
  const KeyValueConfig cfg = load_optional(a.config);
  const control::ControlConfig cc = control::ControlConfig::from_config(cfg);
  const auto reid_model = load_reid(a.reid);
  const auto action_model = load_action(a.action);
  const auto& ac = action_model.config();
  if (harness::subject_vector_dim(reid_model, ac.input) != ac.dim)
    throw ConfigError("re-ID and action checkpoints do not fit together");
  const auto all = harness::load_corpus(a.corpus);
  std::string out;
  for (const sim::Sequence* seq : select(all, sim::parse_split(a.split))) {
    if (seq->feature_dim != reid_model.dims().input)
      throw ConfigError("sequence " + seq->id + " does not match the re-ID model");
    const harness::Matcher match = harness::embedding_matcher(reid_model, *seq, a.threshold);
    action::WindowBuffer window(ac.window, ac.dim);
    control::Controller ctl(cc);
    const double dt = 1.0 / seq->fps;
    for (const auto& f : seq->frames) {
      const auto pick = match(f);
      if (pick) {
        window.push(harness::subject_vector(reid_model, f.detections[*pick], ac.input));
      } else {
        window.push_absent();
      }
      const auto pred = action_model.predict(window, f.frame);
      const control::Observation obs = control::observe(pred);
      const control::RobotCommand cmd = ctl.step(obs, dt);
      nlohmann::ordered_json j;
      j["seq_id"] = seq->id;
      j["frame"] = f.frame;
      j["t"] = f.t;
      j["truth"] = action::to_string(f.action);
      j["observation"] = control::to_string(obs);
      j["state"] = control::to_string(ctl.status().state);
      j["speed"] = cmd.speed;
      j["prompt"] = control::to_string(cmd.prompt);
      j["terminate"] = cmd.terminate;
      out += j.dump() + "\n";
      if (cmd.terminate) break;
    }
  }
  write_text(a.log, out);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Escort robot perception and control toolkit"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Simulate a labelled corpus");
  g->add_option("--spec", gen.spec, "Scenario config (key = value)");
  g->add_option("--out", gen.out, "Output corpus directory")->required();
  g->add_option("--seed", gen.seed, "Overrides the config seed");
  g->add_option("--threads", gen.threads, "Worker threads")->check(CLI::PositiveNumber);

  TrainArgs tr;
  auto* r = app.add_subcommand("train-reid", "Train the re-ID embedding on the train split");
  r->add_option("--corpus", tr.corpus, "Corpus directory")->required();
  r->add_option("--config", tr.config, "Training config (key = value)");
  r->add_option("--out", tr.out, "Output checkpoint")->required();
  r->add_option("--seed", tr.seed, "Overrides the config seed");

  TrainArgs ta;
  auto* t = app.add_subcommand("train-action", "Train the action model on the train split");
  t->add_option("--corpus", ta.corpus, "Corpus directory")->required();
  t->add_option("--config", ta.config, "Training config (key = value)");
  t->add_option("--out", ta.out, "Output checkpoint")->required();
  t->add_option("--reid", ta.reid, "Re-ID checkpoint used to embed subject detections");
  t->add_option("--seed", ta.seed, "Overrides the config seed");

  EvalArgs ev;
  auto* e = app.add_subcommand("evaluate", "Run the joint pipeline on a split and report metrics");
  e->add_option("--reid", ev.reid, "Re-ID checkpoint")->required();
  e->add_option("--action", ev.action, "Action checkpoint")->required();
  e->add_option("--corpus", ev.corpus, "Corpus directory")->required();
  e->add_option("--report", ev.report, "Report file (default stdout)");
  e->add_option("--config", ev.config, "Config (latency.alpha_as_prose)");
  e->add_option("--split", ev.split, "train, dev or test");
  e->add_option("--threshold", ev.threshold, "Match distance threshold");
  e->add_option("--threads", ev.threads, "Worker threads")->check(CLI::PositiveNumber);
  e->add_flag("--latency", ev.latency, "Also measure latency");

  BenchArgs be;
  auto* b = app.add_subcommand("bench", "Measure per-frame re-ID and per-window action latency");
  b->add_option("--reid", be.reid, "Re-ID checkpoint")->required();
  b->add_option("--action", be.action, "Action checkpoint")->required();
  b->add_option("--config", be.config, "Config (latency.alpha_as_prose)");
  b->add_option("--report", be.report, "Report file (default stdout)");
  b->add_option("--frames", be.frames, "Re-ID timing samples")->check(CLI::PositiveNumber);
  b->add_option("--windows", be.windows, "Action timing samples")->check(CLI::PositiveNumber);
  b->add_option("--fps", be.fps, "Camera frame rate")->check(CLI::PositiveNumber);
  b->add_flag("--alpha-as-prose", be.alpha_as_prose, "Flip the pipelining gate");

  ControlArgs co;
  auto* c = app.add_subcommand("control-sim", "Replay sequences through perception and control");
  c->add_option("--corpus", co.corpus, "Corpus directory")->required();
  c->add_option("--reid", co.reid, "Re-ID checkpoint")->required();
  c->add_option("--action", co.action, "Action checkpoint")->required();
  c->add_option("--log", co.log, "Command log (default stdout)");
  c->add_option("--config", co.config, "Control config (control.* keys)");
  c->add_option("--split", co.split, "train, dev or test");
  c->add_option("--threshold", co.threshold, "Match distance threshold");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return kExitUsage;
  }

  try {
    if (*g) return run_generate(gen);
    if (*r) return run_train_reid(tr);
    if (*t) return run_train_action(ta);
    if (*e) return run_evaluate(ev);
    if (*b) return run_bench(be);
    if (*c) return run_control_sim(co);
  } catch (const NumericError& ex) {
    std::cerr << "numeric failure: " << ex.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
