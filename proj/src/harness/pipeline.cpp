#include "escorte/harness/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <thread>

#include <json.hpp>

#include "escorte/error.hpp"
#include "escorte/log.hpp"

namespace escorte::harness {

using action::ActionPrediction;
using action::ActionState;

Vector geometry_features(const sim::Detection& det) {
  const double cx = det.center_x() - sim::kImageWidth / 2.0;
  const double depth = sim::kFocalPx * sim::kPersonHeightM / det.h;
  return {(depth - 2.0) / 2.0, cx / (sim::kImageWidth / 2.0), det.h / 360.0 - 1.0, cx / det.h};
}

Vector subject_vector(const Vector& representation, const sim::Detection& det) {
  Vector out = representation;
  const Vector g = geometry_features(det);
  out.insert(out.end(), g.begin(), g.end());
  return out;
}

Vector subject_vector(const reid::EmbeddingModel& model, const sim::Detection& det,
                      action::InputMode mode) {
  return subject_vector(mode == action::InputMode::Embedding ? model.embed(det.feature) : det.feature,
                        det);
}

std::size_t subject_vector_dim(const reid::EmbeddingModel& model, action::InputMode mode) {
  return (mode == action::InputMode::Embedding ? model.dims().embed : model.dims().input) +
         kGeometryDims;
}

std::vector<reid::TripletPool> triplet_pools(const std::vector<const sim::Sequence*>& sequences) {
  std::vector<reid::TripletPool> pools;
  for (const sim::Sequence* seq : sequences) {
    reid::TripletPool pool;
    pool.identity = seq->id;
    for (const auto& f : seq->frames) {
      for (const auto& d : f.detections) {
        if (d.subject) {
          pool.positives.push_back({f.frame, d.feature});
        } else {
          pool.negatives.push_back(d.feature);
        }
      }
    }
    pools.push_back(std::move(pool));
  }
  return pools;
}

std::vector<action::LabeledSequence> action_training_set(
    const std::vector<const sim::Sequence*>& sequences, const reid::EmbeddingModel& model,
    action::InputMode mode) {
  std::vector<action::LabeledSequence> out;
  out.reserve(sequences.size());
  for (const sim::Sequence* seq : sequences) {
    action::LabeledSequence ls;
    for (const auto& f : seq->frames) {
      const sim::Detection* s = f.subject();
      if (s) {
        ls.inputs.push_back(subject_vector(model, *s, mode));
      } else {
        ls.inputs.push_back(std::nullopt);
      }
      ls.labels.push_back(f.action);
    }
    out.push_back(std::move(ls));
  }
  return out;
}

namespace {

struct SequenceResult {
  std::size_t frames = 0;
  std::size_t visible = 0;
  std::size_t reid_correct = 0;
  std::size_t joint_frames = 0;
  std::size_t joint_correct = 0;
  std::vector<ActionPrediction> predictions;
  std::vector<ActionState> truths;
};

SequenceResult evaluate_sequence(const sim::Sequence& seq, const MatcherFactory& factory,
                                 const SubjectEncoder& encoder,
                                 const StreamClassifier& classifier) {
  SequenceResult r;
  const Matcher match = factory(seq);
  std::vector<std::optional<Vector>> stream;
  std::vector<std::uint8_t> identified(seq.frames.size(), 0);
  stream.reserve(seq.frames.size());
  for (std::size_t k = 0; k < seq.frames.size(); ++k) {
    const sim::FrameRecord& f = seq.frames[k];
    const std::optional<std::size_t> pick = match(f);
    if (pick && *pick >= f.detections.size()) {
      throw ContractError("matcher returned detection " + std::to_string(*pick) + " of " +
                          std::to_string(f.detections.size()));
    }
    stream.push_back(pick ? std::optional<Vector>(encoder(f.detections[*pick])) : std::nullopt);
    ++r.frames;
    if (f.subject_visible()) {
      ++r.visible;
      if (pick && f.detections[*pick].subject) {
        identified[k] = 1;
        ++r.reid_correct;
      }
    }
  }
  r.predictions = classifier(seq, stream);
  for (const auto& p : r.predictions) {
    if (p.frame >= seq.frames.size()) throw ContractError("prediction for a frame past the sequence");
    const sim::FrameRecord& f = seq.frames[p.frame];
    r.truths.push_back(f.action);
    if (f.subject_visible()) {
      ++r.joint_frames;
      if (identified[p.frame] && p.state == f.action) ++r.joint_correct;
    }
  }
  return r;
}

double ratio(std::size_t num, std::size_t den, const char* what) {
  if (den == 0) {
    warn(std::string(what) + " has no frames to evaluate");
    return 0.0;
  }
  return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

EvalReport evaluate(const std::vector<const sim::Sequence*>& sequences,
                    const MatcherFactory& matcher, const SubjectEncoder& encoder,
                    const StreamClassifier& classifier, std::size_t threads) {
  if (sequences.empty()) throw ConfigError("evaluation split is empty");
  std::vector<SequenceResult> results(sequences.size());
  threads = std::max<std::size_t>(1, std::min(threads, sequences.size()));
  auto work = [&](std::size_t first) {
    for (std::size_t i = first; i < sequences.size(); i += threads)
      results[i] = evaluate_sequence(*sequences[i], matcher, encoder, classifier);
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t);
    for (auto& th : pool) th.join();
  }

  EvalReport rep;
  rep.sequences = sequences.size();
  std::size_t reid_correct = 0, joint_correct = 0;
  std::vector<ActionState> preds, truths;
  std::array<std::vector<double>, action::kNumClasses> scores;
  for (const auto& r : results) {
    rep.frames += r.frames;
    rep.subject_visible_frames += r.visible;
    reid_correct += r.reid_correct;
    rep.joint_frames += r.joint_frames;
    joint_correct += r.joint_correct;
    for (std::size_t i = 0; i < r.predictions.size(); ++i) {
      preds.push_back(r.predictions[i].state);
      truths.push_back(r.truths[i]);
      for (std::size_t c = 0; c < action::kNumClasses; ++c)
        scores[c].push_back(r.predictions[i].probabilities[c]);
    }
  }
  rep.predicted_frames = preds.size();
  rep.confusion = confusion_matrix(preds, truths);
  std::vector<double> defined;
  for (std::size_t c = 0; c < action::kNumClasses; ++c) {
    std::vector<std::uint8_t> positives(truths.size());
    for (std::size_t i = 0; i < truths.size(); ++i) positives[i] = action::index_of(truths[i]) == c;
    rep.per_class_ap[c] = average_precision(scores[c], positives);
    if (rep.per_class_ap[c]) defined.push_back(*rep.per_class_ap[c]);
  }
  if (defined.empty()) {
    warn("no class has positives; mAP reported as 0");
  } else {
    rep.map = mean_ap(defined);
  }
  rep.reid_precision = ratio(reid_correct, rep.subject_visible_frames, "re-identification");
  rep.joint_precision = ratio(joint_correct, rep.joint_frames, "joint precision");
  return rep;
}

Matcher embedding_matcher(const reid::EmbeddingModel& model, const sim::Sequence& seq,
                          double threshold) {
  std::optional<reid::ReferenceAnchor> anchor;
  for (const auto& f : seq.frames) {
    if (const sim::Detection* s = f.subject()) {
      anchor = reid::make_reference(model, s->feature, f.frame);
      break;
    }
  }
  return [&model, anchor, threshold](const sim::FrameRecord& f) -> std::optional<std::size_t> {
    if (!anchor) return std::nullopt;
    std::vector<Vector> features;
    features.reserve(f.detections.size());
    for (const auto& d : f.detections) features.push_back(d.feature);
    return reid::match_features(*anchor, model, features, threshold).subject;
  };
}

EvalReport evaluate_joint(const reid::EmbeddingModel& reid_model,
                          const action::ActionModel& action_model,
                          const std::vector<const sim::Sequence*>& sequences,
                          const EvalConfig& config) {
  for (const sim::Sequence* seq : sequences) {
    if (seq->feature_dim != reid_model.dims().input) {
      throw ConfigError("sequence " + seq->id + " has feature_dim " +
                        std::to_string(seq->feature_dim) + " but the re-ID model expects " +
                        std::to_string(reid_model.dims().input));
    }
  }
  const action::InputMode mode = action_model.config().input;
  const std::size_t need = subject_vector_dim(reid_model, mode);
  if (action_model.config().dim != need) {
    throw ConfigError("action model dim " + std::to_string(action_model.config().dim) +
                      " does not match the subject vector size " + std::to_string(need));
  }
  const double threshold = config.threshold;
  return evaluate(
      sequences,
      [&](const sim::Sequence& seq) { return embedding_matcher(reid_model, seq, threshold); },
      [&](const sim::Detection& d) { return subject_vector(reid_model, d, mode); },
      [&](const sim::Sequence&, const std::vector<std::optional<Vector>>& stream) {
        return action::detect_stream(action_model, stream);
      },
      config.threads);
}

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Vector random_unit(std::size_t dim, num::Rng& rng) {
  Vector v(dim);
  double norm = 0.0;
  for (double& x : v) {
    x = rng.normal();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

}  // namespace

LatencyReport measure_latency(const reid::EmbeddingModel& reid_model,
                              const action::ActionModel& action_model, num::Rng& rng,
                              const LatencyConfig& config) {
  if (config.frames == 0 || config.windows == 0 || !(config.fps > 0.0)) {
    throw ConfigError("latency measurement needs frames, windows and fps > 0");
  }
  using clock = std::chrono::steady_clock;
  const std::size_t in = reid_model.dims().input;
  const reid::ReferenceAnchor anchor = reid::make_reference(reid_model, random_unit(in, rng), 0);
  double sink = 0.0;

  std::vector<double> reid_times;
  reid_times.reserve(config.frames);
  for (std::size_t i = 0; i < config.frames; ++i) {
    std::vector<Vector> candidates;
    for (std::size_t c = 0; c < config.candidates; ++c) candidates.push_back(random_unit(in, rng));
    const auto t0 = clock::now();
    const reid::MatchResult m = reid::match_features(anchor, reid_model, candidates);
    const auto t1 = clock::now();
    sink += m.best_distance;
    reid_times.push_back(std::chrono::duration<double>(t1 - t0).count());
  }

  const auto& ac = action_model.config();
  action::WindowBuffer window(ac.window, ac.dim);
  for (std::size_t k = 0; k < ac.window; ++k) {
    Vector v(ac.dim);
    for (double& x : v) x = rng.uniform(-1.0, 1.0);
    window.push(v);
  }
  std::vector<double> action_times;
  action_times.reserve(config.windows);
  for (std::size_t i = 0; i < config.windows; ++i) {
    const auto t0 = clock::now();
    const auto p = action_model.predict(window, ac.window - 1);
    const auto t1 = clock::now();
    sink += p->probabilities[0];
    action_times.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  if (!std::isfinite(sink)) throw NumericError("latency benchmark produced non-finite outputs");

  LatencyReport r;
  r.w = ac.window;
  r.t_r = median(std::move(reid_times));
  r.t_a = median(std::move(action_times));
  r.t_f = 1.0 / config.fps;
  r.alpha_as_prose = config.alpha_as_prose;
  r.frames = config.frames;
  r.t_i = inference_time({r.w, r.t_r, r.t_f, r.t_a}, config.alpha_as_prose);
  return r;
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["schema"] = "escorte-report";
  j["version"] = 1;
  j["sequences"] = sequences;
  j["frames"] = frames;
  j["subject_visible_frames"] = subject_visible_frames;
  j["predicted_frames"] = predicted_frames;
  nlohmann::ordered_json ap;
  for (ActionState s : action::kAllStates) {
    const auto& v = per_class_ap[action::index_of(s)];
    ap[std::string(action::to_string(s))] = v ? nlohmann::ordered_json(*v) : nullptr;
  }
  j["per_class_ap"] = ap;
  j["map"] = map;
  j["confusion"] = confusion;
  j["reid_precision"] = reid_precision;
  j["joint_precision"] = joint_precision;
  j["joint_frames"] = joint_frames;
  if (latency) {
    j["latency"] = {{"w", latency->w},         {"t_r", latency->t_r},
                    {"t_f", latency->t_f},     {"t_a", latency->t_a},
                    {"t_i", latency->t_i},     {"alpha_as_prose", latency->alpha_as_prose},
                    {"frames", latency->frames}};
  }
  return j.dump();
}

}  // namespace escorte::harness
