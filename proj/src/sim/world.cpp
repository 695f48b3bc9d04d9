#include "escorte/sim/world.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <thread>

#include "escorte/error.hpp"

namespace escorte::sim {

namespace {

// Escortee behaviour constants.
constexpr double kFollowGain = 1.5;       // 1/s, gap error -> speed correction
constexpr double kMinWalkSpeed = 0.3;     // m/s, slowest non-stopped walk
constexpr double kMaxWalkSpeed = 2.5;     // m/s, catch-up limit
constexpr double kSpeedJitter = 0.03;     // m/s per step

// Distractor random walk.
constexpr double kDistractorNearM = 1.0;
constexpr double kDistractorFarM = 12.0;
constexpr double kDistractorLateralM = 4.0;
constexpr double kVelocityMemory = 0.98;
constexpr double kVelocityKick = 0.05;

double reflect(double v, double lo, double hi, bool& flipped) {
  flipped = false;
  if (v < lo) {
    v = 2.0 * lo - v;
    flipped = true;
  } else if (v > hi) {
    v = 2.0 * hi - v;
    flipped = true;
  }
  return std::clamp(v, lo, hi);
}

}  // namespace

void ScenarioSpec::validate() const {
  if (!(duration > 0.0)) throw ConfigError("duration must be positive");
  if (!(fps > 0.0)) throw ConfigError("fps must be positive");
  if (!(sigma >= 0.0)) throw ConfigError("sigma must be >= 0");
  if (!(occlusion >= 0.0 && occlusion <= 1.0)) throw ConfigError("occlusion must be in [0, 1]");
  if (identities < 2) throw ConfigError("at least 2 identities are required");
  if (feature_dim == 0) throw ConfigError("feature_dim must be positive");
  if (!(box_noise >= 0.0)) throw ConfigError("box_noise must be >= 0");
  if (!(robot_speed > 0.0)) throw ConfigError("robot_speed must be positive");
  for (const auto& [state, seconds] : script) {
    (void)state;
    if (!(seconds > 0.0)) throw ConfigError("script segment durations must be positive");
  }
}

double Person::speed() const { return std::hypot(vx, vy); }

WorldState kinematics_step(const WorldState& state, ActionState script,
                           const EscorteeBehavior& behavior, double dt, num::Rng& rng) {
  if (!(dt > 0.0)) throw ContractError("kinematics_step: dt must be positive");
  WorldState next = state;
  next.t += dt;
  next.robot_x += state.robot_speed * dt;

  Person& e = next.persons.at(0);
  double v = 0.0;
  switch (script) {
    case ActionState::Following:
      v = state.robot_speed + kFollowGain * (state.gap() - behavior.target_gap) +
          kSpeedJitter * rng.normal();
      v = std::clamp(v, kMinWalkSpeed, kMaxWalkSpeed);
      break;
    case ActionState::Lagging:
      v = state.robot_speed * behavior.lag_factor + kSpeedJitter * rng.normal();
      v = std::clamp(v, kMinWalkSpeed, kMaxWalkSpeed);
      break;
    case ActionState::Stopping:
      v = 0.0;
      break;
  }
  e.vx = v;
  e.vy = 0.0;
  e.x += v * dt;
  next.stationary_frames = e.speed() < kStationarySpeed ? state.stationary_frames + 1 : 0;

  for (std::size_t i = 1; i < next.persons.size(); ++i) {
    Person& p = next.persons[i];
    p.vx = state.robot_speed + kVelocityMemory * (p.vx - state.robot_speed) +
           kVelocityKick * rng.normal();
    p.vy = kVelocityMemory * p.vy + kVelocityKick * rng.normal();
    p.x += p.vx * dt;
    p.y += p.vy * dt;
    bool flipped = false;
    const double depth = reflect(next.robot_x - p.x, kDistractorNearM, kDistractorFarM, flipped);
    p.x = next.robot_x - depth;
    if (flipped) p.vx = 2.0 * state.robot_speed - p.vx;
    p.y = reflect(p.y, -kDistractorLateralM, kDistractorLateralM, flipped);
    if (flipped) p.vy = -p.vy;
  }
  return next;
}

std::optional<Detection> project_box(const WorldState& state, std::size_t person) {
  const double z = state.depth(person);
  const double lateral = state.persons.at(person).y;
  if (z < kMinDepthM || z > kMaxDepthM || std::abs(lateral) >= z) return std::nullopt;
  Detection d;
  d.h = kFocalPx * kPersonHeightM / z;
  d.w = kBoxAspect * d.h;
  d.x = kImageWidth / 2.0 + kFocalPx * lateral / z - d.w / 2.0;
  d.y = kImageHeight / 2.0 - d.h / 2.0;
  d.subject = person == 0;
  return d;
}

namespace {

std::optional<Detection> clip_to_image(Detection d) {
  const double x0 = std::max(0.0, d.x);
  const double y0 = std::max(0.0, d.y);
  const double x1 = std::min(kImageWidth, d.x + d.w);
  const double y1 = std::min(kImageHeight, d.y + d.h);
  if (x1 <= x0 || y1 <= y0) return std::nullopt;
  d.x = x0;
  d.y = y0;
  d.w = x1 - x0;
  d.h = y1 - y0;
  return d;
}

}  // namespace

Vector noisy_feature(const Vector& z, double sigma, num::Rng& rng) {
  if (sigma == 0.0) return z;
  Vector f(z.size());
  double norm = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    f[i] = z[i] + sigma * rng.normal();
    norm += f[i] * f[i];
  }
  norm = std::sqrt(norm);
  for (double& v : f) v /= norm;
  return f;
}

std::optional<Detection> project_detection(const WorldState& state, std::size_t person,
                                           const ScenarioSpec& spec, num::Rng& rng) {
  auto box = project_box(state, person);
  if (!box) return std::nullopt;
  const double h = box->h * std::max(0.2, 1.0 + spec.box_noise * rng.normal());
  const double cx = box->x + box->w / 2.0 + spec.box_noise * box->h * rng.normal();
  const double cy = box->y + box->h / 2.0 + spec.box_noise * box->h * rng.normal();
  Detection d;
  d.h = h;
  d.w = kBoxAspect * h;
  d.x = cx - d.w / 2.0;
  d.y = cy - h / 2.0;
  d.subject = box->subject;
  d.feature = noisy_feature(state.persons[person].z, spec.sigma, rng);
  const double draw = rng.uniform();

  const double z = state.depth(person);
  bool hidden = false;
  for (std::size_t q = 0; q < state.persons.size(); ++q) {
    if (q == person || !project_box(state, q)) continue;
    if (state.depth(q) < z &&
        std::abs(state.persons[q].y - state.persons[person].y) < kOcclusionLateralM) {
      hidden = true;
      break;
    }
  }
  if (hidden && draw < spec.occlusion) return std::nullopt;
  return clip_to_image(std::move(d));
}

ActionState label_from(double gap, std::size_t stationary_frames) {
  if (stationary_frames >= kStationaryFrames) return ActionState::Stopping;
  return gap < kGapThresholdM ? ActionState::Following : ActionState::Lagging;
}

ActionState label_frame(const WorldState& state) {
  return label_from(state.gap(), state.stationary_frames);
}

const Detection* FrameRecord::subject() const {
  for (const auto& d : detections)
    if (d.subject) return &d;
  return nullptr;
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Dev: return "dev";
    case Split::Test: return "test";
  }
  return "unknown";
}

Split parse_split(std::string_view s) {
  for (Split v : {Split::Train, Split::Dev, Split::Test})
    if (to_string(v) == s) return v;
  throw ConfigError("unknown split '" + std::string(s) + "'");
}

std::vector<ActionState> relabel(const Sequence& seq) {
  std::vector<ActionState> out;
  out.reserve(seq.frames.size());
  std::size_t run = 0;
  for (std::size_t k = 0; k < seq.frames.size(); ++k) {
    if (k > 0) {
      const double speed =
          seq.robot_speed - (seq.frames[k].gap_m - seq.frames[k - 1].gap_m) * seq.fps;
      run = std::abs(speed) < kStationarySpeed ? run + 1 : 0;
    }
    out.push_back(label_from(seq.frames[k].gap_m, run));
  }
  return out;
}

std::vector<ScriptSegment> random_script(double duration, num::Rng& rng) {
  using action::kAllStates;
  std::vector<ActionState> actions;
  switch (rng.below(4)) {
    case 0:  // single action
      actions.push_back(kAllStates[rng.below(3)]);
      break;
    case 1: {  // two different actions
      const std::size_t a = rng.below(3);
      const std::size_t b = (a + 1 + rng.below(2)) % 3;
      actions = {kAllStates[a], kAllStates[b]};
      break;
    }
    case 2: {  // all three, random order
      actions.assign(kAllStates.begin(), kAllStates.end());
      rng.shuffle(actions);
      break;
    }
    default: {  // four segments, so at least one action repeats
      std::size_t prev = rng.below(3);
      actions.push_back(kAllStates[prev]);
      while (actions.size() < 4) {
        prev = (prev + 1 + rng.below(2)) % 3;
        actions.push_back(kAllStates[prev]);
      }
    }
  }
  std::vector<double> weights;
  for (std::size_t i = 0; i < actions.size(); ++i) weights.push_back(rng.uniform(0.7, 1.3));
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<ScriptSegment> script;
  for (std::size_t i = 0; i < actions.size(); ++i)
    script.emplace_back(actions[i], duration * weights[i] / total);
  return script;
}

std::vector<Vector> make_identities(std::size_t count, std::size_t dim, num::Rng& rng) {
  std::vector<Vector> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Vector z(dim);
    double norm = 0.0;
    do {
      norm = 0.0;
      for (double& v : z) {
        v = rng.normal();
        norm += v * v;
      }
    } while (norm == 0.0);
    norm = std::sqrt(norm);
    for (double& v : z) v /= norm;
    out.push_back(std::move(z));
  }
  return out;
}

Sequence generate_sequence(const ScenarioSpec& spec, const std::vector<Vector>& identities,
                           std::string id, num::Rng& rng) {
  spec.validate();
  if (identities.size() < 2) throw ConfigError("at least 2 identities are required");
  std::vector<ScriptSegment> script = spec.script.empty() ? random_script(spec.duration, rng)
                                                          : spec.script;
  double scripted = 0.0;
  for (const auto& seg : script) scripted += seg.second;
  if (scripted < spec.duration) script.back().second += spec.duration - scripted;

  std::vector<EscorteeBehavior> behaviors;
  for (std::size_t i = 0; i < script.size(); ++i)
    behaviors.push_back({rng.uniform(1.1, 1.5), rng.uniform(0.4, 0.7)});

  // Identities: escortee first, distractors distinct from it and each other.
  std::vector<std::size_t> order(identities.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  const std::size_t distractors =
      std::min<std::size_t>(rng.below(spec.distractors + 1), identities.size() - 1);

  WorldState state;
  state.robot_speed = spec.robot_speed;
  Person escortee;
  escortee.x = -rng.uniform(1.1, 1.5);
  escortee.y = rng.uniform(-0.3, 0.3);
  escortee.vx = spec.robot_speed;
  escortee.identity = order[0];
  escortee.z = identities[order[0]];
  state.persons.push_back(std::move(escortee));
  for (std::size_t i = 0; i < distractors; ++i) {
    Person p;
    p.x = -rng.uniform(1.5, 10.0);
    p.y = rng.uniform(-3.0, 3.0);
    p.vx = spec.robot_speed + 0.2 * rng.normal();
    p.identity = order[i + 1];
    p.z = identities[order[i + 1]];
    state.persons.push_back(std::move(p));
  }

  Sequence seq;
  seq.id = std::move(id);
  seq.fps = spec.fps;
  seq.robot_speed = spec.robot_speed;
  seq.feature_dim = spec.feature_dim;
  seq.subject_identity = order[0];
  double total = 0.0;
  for (const auto& seg : script) total += seg.second;
  const auto frames = static_cast<std::size_t>(std::ceil(total * spec.fps - 1e-9));
  const double dt = 1.0 / spec.fps;

  std::size_t segment = 0;
  double segment_end = script[0].second;
  for (std::size_t k = 0; k < frames; ++k) {
    if (k > 0) {
      const double t_prev = static_cast<double>(k - 1) * dt;
      while (segment + 1 < script.size() && t_prev >= segment_end) {
        ++segment;
        segment_end += script[segment].second;
      }
      state = kinematics_step(state, script[segment].first, behaviors[segment], dt, rng);
    }
    FrameRecord rec;
    rec.frame = k;
    rec.t = static_cast<double>(k) * dt;
    rec.action = label_frame(state);
    rec.gap_m = state.gap();
    for (std::size_t p = 0; p < state.persons.size(); ++p)
      if (auto det = project_detection(state, p, spec, rng)) rec.detections.push_back(*det);
    rng.shuffle(rec.detections);
    seq.frames.push_back(std::move(rec));
    seq.escortee_speed.push_back(state.escortee().speed());
  }
  return seq;
}

SplitCounts SplitCounts::from_ratio(std::size_t sequences) {
  SplitCounts c;
  const double n = static_cast<double>(sequences);
  c.train = static_cast<std::size_t>(std::llround(n * 250.0 / 359.0));
  c.dev = static_cast<std::size_t>(std::llround(n * 49.0 / 359.0));
  c.dev = std::min(c.dev, sequences - c.train);
  c.test = sequences - c.train - c.dev;
  return c;
}

std::vector<const Sequence*> Corpus::split(Split s) const {
  std::vector<const Sequence*> out;
  for (const auto& seq : sequences)
    if (seq.split == s) out.push_back(&seq);
  return out;
}

Corpus generate_corpus(const ScenarioSpec& spec, const SplitCounts& counts, std::uint64_t seed,
                       std::size_t threads) {
  spec.validate();
  if (counts.total() == 0) throw ConfigError("corpus needs at least one sequence");
  const num::Rng base(seed);
  Corpus corpus;
  corpus.spec = spec;
  num::Rng id_rng = base.split(0);
  corpus.identities = make_identities(spec.identities, spec.feature_dim, id_rng);
  corpus.sequences.resize(counts.total());

  auto work = [&](std::size_t first, std::size_t stride) {
    for (std::size_t i = first; i < counts.total(); i += stride) {
      char name[32];
      std::snprintf(name, sizeof name, "seq-%04zu", i);
      num::Rng rng = base.split(i + 1);
      Sequence seq = generate_sequence(spec, corpus.identities, name, rng);
      seq.split = i < counts.train               ? Split::Train
                  : i < counts.train + counts.dev ? Split::Dev
                                                  : Split::Test;
      corpus.sequences[i] = std::move(seq);
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, counts.total()));
  if (threads == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t, threads);
    for (auto& th : pool) th.join();
  }
  return corpus;
}

std::vector<ScriptSegment> parse_script(const std::string& text) {
  std::vector<ScriptSegment> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) {
      throw ConfigError("script segment '" + item + "' is not action:seconds");
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const ActionState a = action::parse_action(trim(item.substr(0, colon)));
    const std::string secs = trim(item.substr(colon + 1));
    std::size_t used = 0;
    double seconds = 0.0;
    try {
      seconds = std::stod(secs, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != secs.size() || !(seconds > 0.0)) {
      throw ConfigError("script segment '" + item + "' has a bad duration");
    }
    out.emplace_back(a, seconds);
  }
  if (out.empty()) throw ConfigError("empty script");
  return out;
}

GenerateConfig GenerateConfig::from_config(const KeyValueConfig& cfg) {
  cfg.reject_unknown({"duration", "fps", "distractors", "script", "sigma", "occlusion",
                      "identities", "feature_dim", "box_noise", "robot_speed", "seed",
                      "sequences", "train", "dev", "test"});
  GenerateConfig g;
  ScenarioSpec& s = g.spec;
  s.duration = cfg.get_double("duration", s.duration);
  s.fps = cfg.get_double("fps", s.fps);
  s.distractors = cfg.get_uint("distractors", s.distractors);
  if (cfg.has("script")) s.script = parse_script(cfg.get_string("script", ""));
  s.sigma = cfg.get_double("sigma", s.sigma);
  s.occlusion = cfg.get_double("occlusion", s.occlusion);
  s.identities = cfg.get_uint("identities", s.identities);
  s.feature_dim = cfg.get_uint("feature_dim", s.feature_dim);
  s.box_noise = cfg.get_double("box_noise", s.box_noise);
  s.robot_speed = cfg.get_double("robot_speed", s.robot_speed);
  s.seed = cfg.get_uint("seed", s.seed);
  s.validate();
  if (cfg.has("train") || cfg.has("dev") || cfg.has("test")) {
    if (cfg.has("sequences")) throw ConfigError("give either sequences or train/dev/test");
    g.counts.train = cfg.get_uint("train", 0);
    g.counts.dev = cfg.get_uint("dev", 0);
    g.counts.test = cfg.get_uint("test", 0);
  } else {
    g.counts = SplitCounts::from_ratio(cfg.get_uint("sequences", 120));
  }
  if (g.counts.total() == 0) throw ConfigError("corpus needs at least one sequence");
  return g;
}

}  // namespace escorte::sim
