#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "escorte/action/action.hpp"
#include "escorte/config.hpp"
#include "escorte/num/rng.hpp"

namespace escorte::sim {

using action::ActionState;
using Vector = std::vector<double>;

// Camera: backward-facing pinhole on the robot, 1280x720 image, 90 degree
// horizontal field of view (focal length 640 px). A person is modelled as a
// 1.125 m tall box, so bbox height is 720 / depth px (360 px at 2 m).
inline constexpr double kImageWidth = 1280.0;
inline constexpr double kImageHeight = 720.0;
inline constexpr double kFocalPx = 640.0;
inline constexpr double kPersonHeightM = 1.125;
inline constexpr double kBoxAspect = 0.4;
inline constexpr double kMinDepthM = 0.3;
inline constexpr double kMaxDepthM = 25.0;
/// Lateral distance under which a nearer person can hide a farther one.
inline constexpr double kOcclusionLateralM = 0.5;

/// Gap rule: Following below this many metres, Lagging at or above it.
inline constexpr double kGapThresholdM = 2.0;
inline constexpr double kStationarySpeed = 0.05;
inline constexpr std::size_t kStationaryFrames = 5;

using ScriptSegment = std::pair<ActionState, double>;

struct ScenarioSpec {
  /// Minimum sequence length in seconds.
  double duration = 10.0;
  double fps = 30.0;
  /// Upper bound; each sequence draws its count uniformly from [0, distractors].
  std::size_t distractors = 4;
  /// Fixed escortee script. Empty means a random pattern per sequence.
  std::vector<ScriptSegment> script;
  double sigma = 0.1;
  double occlusion = 0.1;
  std::size_t identities = 10;
  std::size_t feature_dim = 64;
  /// Relative standard deviation of bbox size and centre jitter.
  double box_noise = 0.01;
  double robot_speed = 1.0;
  std::uint64_t seed = 1;

  /// Throws ConfigError when a field is out of range.
  void validate() const;
};

struct Person {
  double x = 0.0;  // along the path, metres
  double y = 0.0;  // lateral offset, metres
  double vx = 0.0;
  double vy = 0.0;
  /// Unit-norm latent identity vector.
  Vector z;
  std::size_t identity = 0;

  double speed() const;
};

struct WorldState {
  double t = 0.0;
  double robot_x = 0.0;
  double robot_speed = 1.0;
  /// persons[0] is the escortee.
  std::vector<Person> persons;
  /// Consecutive frames (including this one) with escortee speed below kStationarySpeed.
  std::size_t stationary_frames = 0;

  const Person& escortee() const { return persons.at(0); }
  /// Distance from the robot back to a person along the path.
  double depth(std::size_t person) const { return robot_x - persons.at(person).x; }
  double gap() const { return depth(0); }
};

/// Per-segment escortee parameters.
struct EscorteeBehavior {
  /// Gap the escortee settles at while following.
  double target_gap = 1.3;
  /// Escortee speed as a fraction of robot speed while lagging.
  double lag_factor = 0.55;
};

/// Advances the world by dt. Following closes in on target_gap and then
/// tracks the robot with small jitter; Lagging walks at lag_factor times the
/// robot speed; Stopping stands still. Distractors random-walk around the
/// robot. Throws ContractError if dt <= 0.
WorldState kinematics_step(const WorldState& state, ActionState script,
                           const EscorteeBehavior& behavior, double dt, num::Rng& rng);

struct Detection {
  double x = 0.0;  // top-left corner, px
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;
  Vector feature;
  bool subject = false;

  double center_x() const { return x + w / 2.0; }
  friend bool operator==(const Detection&, const Detection&) = default;
};

/// Noise-free pinhole box of a person, or nullopt when out of view.
std::optional<Detection> project_box(const WorldState& state, std::size_t person);

/// Full detection: pinhole box with jitter, noisy feature, and occlusion by a
/// nearer person within kOcclusionLateralM (dropped with probability
/// spec.occlusion). Random draws happen in a fixed order regardless of outcome.
std::optional<Detection> project_detection(const WorldState& state, std::size_t person,
                                           const ScenarioSpec& spec, num::Rng& rng);

/// normalize(z + sigma * N(0, I)); returns z unchanged for sigma = 0.
Vector noisy_feature(const Vector& z, double sigma, num::Rng& rng);

/// Stopping after kStationaryFrames slow frames, else by the gap rule.
ActionState label_frame(const WorldState& state);
/// Same rule on an explicit (gap, stationary run length) pair.
ActionState label_from(double gap, std::size_t stationary_frames);

struct FrameRecord {
  std::size_t frame = 0;
  double t = 0.0;
  ActionState action = ActionState::Following;
  double gap_m = 0.0;
  std::vector<Detection> detections;

  /// The subject detection, if any.
  const Detection* subject() const;
  bool subject_visible() const { return subject() != nullptr; }
  friend bool operator==(const FrameRecord&, const FrameRecord&) = default;
};

enum class Split : std::uint8_t { Train = 0, Dev = 1, Test = 2 };
std::string_view to_string(Split s);
/// Throws ConfigError on anything but train/dev/test.
Split parse_split(std::string_view s);

struct Sequence {
  std::string id;
  Split split = Split::Train;
  double fps = 30.0;
  double robot_speed = 1.0;
  std::size_t feature_dim = 0;
  std::vector<FrameRecord> frames;
  // Generator ground truth kept in memory only; not part of the file format.
  std::vector<double> escortee_speed;
  std::size_t subject_identity = 0;

  friend bool operator==(const Sequence& a, const Sequence& b) {
    return a.id == b.id && a.split == b.split && a.fps == b.fps &&
           a.robot_speed == b.robot_speed && a.feature_dim == b.feature_dim &&
           a.frames == b.frames;
  }
};

/// Recomputes labels from the gap trace alone: escortee speed is recovered as
/// robot_speed - d(gap)/dt.
std::vector<ActionState> relabel(const Sequence& seq);

/// Random script: a single action, two actions, all three, or a repeated
/// pattern, stretched to at least `duration` seconds.
std::vector<ScriptSegment> random_script(double duration, num::Rng& rng);

/// Unit-norm latent vectors drawn uniformly on the sphere.
std::vector<Vector> make_identities(std::size_t count, std::size_t dim, num::Rng& rng);

/// Simulates one sequence with the given escortee and distractor identities.
Sequence generate_sequence(const ScenarioSpec& spec, const std::vector<Vector>& identities,
                           std::string id, num::Rng& rng);

struct SplitCounts {
  std::size_t train = 0;
  std::size_t dev = 0;
  std::size_t test = 0;

  std::size_t total() const { return train + dev + test; }
  /// 250 : 49 : 60 split of `sequences`, rounded, test taking the remainder.
  static SplitCounts from_ratio(std::size_t sequences);
};

struct Corpus {
  ScenarioSpec spec;
  std::vector<Vector> identities;
  std::vector<Sequence> sequences;

  std::vector<const Sequence*> split(Split s) const;
};

/// Deterministic in (spec, counts, seed). Sequence i uses Rng(seed).split(i),
/// so sequences can be generated on `threads` workers without changing output.
Corpus generate_corpus(const ScenarioSpec& spec, const SplitCounts& counts, std::uint64_t seed,
                       std::size_t threads = 1);

/// Scenario keys: duration, fps, distractors, script, sigma, occlusion,
/// identities, feature_dim, box_noise, robot_speed, seed. Counts come from
/// either `sequences` (default ratio) or train/dev/test.
struct GenerateConfig {
  ScenarioSpec spec;
  SplitCounts counts;

  static GenerateConfig from_config(const KeyValueConfig& cfg);
};

/// "following:4,lagging:3.5" -> segments. Throws ConfigError when malformed.
std::vector<ScriptSegment> parse_script(const std::string& text);

}  // namespace escorte::sim
