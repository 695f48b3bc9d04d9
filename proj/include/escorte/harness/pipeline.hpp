#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "escorte/action/action.hpp"
#include "escorte/harness/metrics.hpp"
#include "escorte/num/rng.hpp"
#include "escorte/reid/reid.hpp"
#include "escorte/sim/world.hpp"

namespace escorte::harness {

using Vector = std::vector<double>;

/// Box geometry appended to every subject vector, so the action branch sees
/// how far away the subject is and where it sits in the image:
///   [ (720/h - 2) / 2,  (cx - 640) / 640,  h / 360 - 1,  (cx - 640) / h ]
/// 720/h is the pinhole depth estimate in metres.
inline constexpr std::size_t kGeometryDims = 4;
Vector geometry_features(const sim::Detection& det);

/// Subject vector fed to the action window: re-ID embedding (or the raw
/// feature) followed by geometry_features().
Vector subject_vector(const reid::EmbeddingModel& model, const sim::Detection& det,
                      action::InputMode mode);
/// Same, for a detection whose embedding is already computed.
Vector subject_vector(const Vector& representation, const sim::Detection& det);
std::size_t subject_vector_dim(const reid::EmbeddingModel& model, action::InputMode mode);

/// One pool per sequence: the annotated subject's detections are positives and
/// the annotated non-subject detections of the same sequence are negatives.
std::vector<reid::TripletPool> triplet_pools(const std::vector<const sim::Sequence*>& sequences);

/// Ground-truth subject vectors with per-frame labels, for action training.
std::vector<action::LabeledSequence> action_training_set(
    const std::vector<const sim::Sequence*>& sequences, const reid::EmbeddingModel& model,
    action::InputMode mode);

/// Detection index chosen as the subject in a frame, or nullopt for absent.
using Matcher = std::function<std::optional<std::size_t>(const sim::FrameRecord& frame)>;
/// Builds a per-sequence matcher (the reference anchor is fixed per sequence).
using MatcherFactory = std::function<Matcher(const sim::Sequence& seq)>;
/// Maps the per-frame matched subject vectors of a sequence to online predictions.
using StreamClassifier = std::function<std::vector<action::ActionPrediction>(
    const sim::Sequence& seq, const std::vector<std::optional<Vector>>& stream)>;
/// Turns a matched detection into the vector that is buffered.
using SubjectEncoder = std::function<Vector(const sim::Detection& det)>;

struct LatencyReport {
  std::size_t w = 0;
  double t_r = 0.0;
  double t_f = 0.0;
  double t_a = 0.0;
  double t_i = 0.0;
  bool alpha_as_prose = false;
  std::size_t frames = 0;
};

struct EvalReport {
  std::size_t sequences = 0;
  std::size_t frames = 0;                  // all frames seen
  std::size_t subject_visible_frames = 0;
  std::size_t predicted_frames = 0;        // frames with an action prediction
  std::array<std::optional<double>, action::kNumClasses> per_class_ap{};
  double map = 0.0;
  ConfusionMatrix confusion{};
  double reid_precision = 0.0;
  /// Among subject-visible frames that carry an action prediction: both the
  /// subject match and the action class are correct.
  double joint_precision = 0.0;
  std::size_t joint_frames = 0;
  std::optional<LatencyReport> latency;

  /// JSON object on one line.
  std::string to_json() const;
};

/// Generic evaluation loop with pluggable components.
EvalReport evaluate(const std::vector<const sim::Sequence*>& sequences,
                    const MatcherFactory& matcher, const SubjectEncoder& encoder,
                    const StreamClassifier& classifier, std::size_t threads = 1);

struct EvalConfig {
  double threshold = reid::kDefaultThreshold;
  std::size_t threads = 1;
};

/// Full pipeline: the reference anchor is the subject detection of the first
/// frame where it is visible; every frame's detections are embedded and
/// matched against it; matched vectors feed detect_stream. Throws ConfigError
/// when model and corpus dimensions disagree or the split is empty.
EvalReport evaluate_joint(const reid::EmbeddingModel& reid_model,
                          const action::ActionModel& action_model,
                          const std::vector<const sim::Sequence*>& sequences,
                          const EvalConfig& config = {});

/// Matcher used by evaluate_joint for one sequence.
Matcher embedding_matcher(const reid::EmbeddingModel& model, const sim::Sequence& seq,
                          double threshold);

struct LatencyConfig {
  std::size_t frames = 300;   // re-ID timing samples
  std::size_t windows = 30;   // action timing samples
  std::size_t candidates = 4;
  double fps = 30.0;
  bool alpha_as_prose = false;
};

/// Median wall-clock re-ID time per frame (embed + match `candidates`
/// detections) and per-window action time; t_i from inference_time().
LatencyReport measure_latency(const reid::EmbeddingModel& reid_model,
                              const action::ActionModel& action_model, num::Rng& rng,
                              const LatencyConfig& config = {});

}  // namespace escorte::harness
