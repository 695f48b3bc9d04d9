#include "escorte/reid/reid.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "escorte/error.hpp"
#include "escorte/num/optim.hpp"

namespace escorte::reid {

using num::Matrix;
using num::Var;

EmbeddingModel::EmbeddingModel(const EmbeddingDims& dims) : dims_(dims) {
  if (dims.input == 0 || dims.hidden == 0 || dims.embed == 0) {
    throw ConfigError("embedding dimensions must be positive");
  }
  params_.add("w1", Matrix(dims.input, dims.hidden));
  params_.add("b1", Matrix(1, dims.hidden));
  params_.add("w2", Matrix(dims.hidden, dims.embed));
  params_.add("b2", Matrix(1, dims.embed));
}

EmbeddingModel EmbeddingModel::zeros(const EmbeddingDims& dims) { return EmbeddingModel(dims); }

EmbeddingModel EmbeddingModel::initialize(const EmbeddingDims& dims, num::Rng& rng) {
  EmbeddingModel m(dims);
  num::init_fan_in_uniform(m.params_.at(kW1), dims.input, rng);
  num::init_fan_in_uniform(m.params_.at(kW2), dims.hidden, rng);
  return m;
}

EmbeddingModel EmbeddingModel::from_checkpoint(const num::Checkpoint& ckpt) {
  if (ckpt.kind != "reid") {
    throw ConfigError("expected a reid checkpoint, got kind '" + ckpt.kind + "'");
  }
  EmbeddingDims dims;
  dims.input = static_cast<std::size_t>(ckpt.dim("input_dim"));
  dims.hidden = static_cast<std::size_t>(ckpt.dim("hidden_dim"));
  dims.embed = static_cast<std::size_t>(ckpt.dim("embed_dim"));
  EmbeddingModel m(dims);
  for (std::size_t i = 0; i < m.params_.size(); ++i) {
    const Matrix& stored = ckpt.params.at(ckpt.params.index(m.params_.name(i)));
    if (!stored.same_shape(m.params_.at(i))) {
      throw ConfigError("reid checkpoint block '" + m.params_.name(i) + "' has shape " +
                        stored.shape_string() + ", expected " + m.params_.at(i).shape_string());
    }
    m.params_.at(i) = stored;
  }
  return m;
}

num::Checkpoint EmbeddingModel::to_checkpoint() const {
  num::Checkpoint ckpt;
  ckpt.kind = "reid";
  ckpt.dims = {{"input_dim", static_cast<std::int64_t>(dims_.input)},
               {"hidden_dim", static_cast<std::int64_t>(dims_.hidden)},
               {"embed_dim", static_cast<std::int64_t>(dims_.embed)}};
  ckpt.params = params_;
  return ckpt;
}

Vector EmbeddingModel::embed(std::span<const double> feature) const {
  if (feature.size() != dims_.input) {
    throw ShapeError("embed: feature length " + std::to_string(feature.size()) +
                     " but model input is " + std::to_string(dims_.input));
  }
  const Matrix out = embed_rows(Matrix::row(feature));
  return Vector(out.data().begin(), out.data().end());
}

Matrix EmbeddingModel::embed_rows(const Matrix& features) const {
  if (features.cols() != dims_.input) {
    throw ShapeError("embed: features " + features.shape_string() + " but model input is " +
                     std::to_string(dims_.input));
  }
  Matrix hidden = num::matmul(features, params_.at(kW1));
  const Matrix& b1 = params_.at(kB1);
  for (std::size_t r = 0; r < hidden.rows(); ++r)
    for (std::size_t c = 0; c < hidden.cols(); ++c) hidden(r, c) = num::relu_scalar(hidden(r, c) + b1[c]);
  Matrix out = num::matmul(hidden, params_.at(kW2));
  const Matrix& b2 = params_.at(kB2);
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += b2[c];
  return out;
}

Var EmbeddingModel::forward(Var x, std::span<const Var> bound) const {
  if (bound.size() != params_.size()) {
    throw ContractError("embedding forward: expected " + std::to_string(params_.size()) +
                        " bound parameters");
  }
  Var hidden = num::relu(num::add_row(num::matmul(x, bound[kW1]), bound[kB1]));
  return num::add_row(num::matmul(hidden, bound[kW2]), bound[kB2]);
}

double triplet_loss(std::span<const double> a, std::span<const double> p, std::span<const double> n,
                    double margin) {
  if (a.size() != p.size() || a.size() != n.size()) {
    throw ShapeError("triplet_loss: lengths " + std::to_string(a.size()) + "/" +
                     std::to_string(p.size()) + "/" + std::to_string(n.size()));
  }
  if (margin < 0.0) throw ContractError("triplet_loss: margin must be >= 0");
  return std::max(num::l2_distance(a, p) - num::l2_distance(a, n) + margin, 0.0);
}

Var triplet_loss(Var a, Var p, Var n, double margin) {
  if (!a.value().same_shape(p.value()) || !a.value().same_shape(n.value())) {
    throw ShapeError("triplet_loss: shapes " + a.value().shape_string() + " " +
                     p.value().shape_string() + " " + n.value().shape_string());
  }
  Var gap = num::sub(num::row_norms(num::sub(a, p)), num::row_norms(num::sub(a, n)));
  Var hinge = num::relu(num::add_scalar(gap, margin));
  return num::scale(num::sum(hinge), 1.0 / static_cast<double>(a.value().rows()));
}

double batch_triplet_loss(const TripletBatch& batch) {
  if (batch.anchors.size() != batch.positives.size() ||
      batch.anchors.size() != batch.negatives.size()) {
    throw ShapeError("triplet batch lists differ in length");
  }
  if (batch.size() == 0) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i)
    total += triplet_loss(batch.anchors[i], batch.positives[i], batch.negatives[i], batch.margin);
  return total / static_cast<double>(batch.size());
}

std::vector<TripletPool> pools_from_labeled(const std::vector<LabeledFeature>& observations) {
  std::map<std::string, std::vector<const LabeledFeature*>> by_id;
  for (const auto& o : observations) by_id[o.identity].push_back(&o);
  if (by_id.size() < 2) {
    throw ConfigError("triplet sampling needs at least 2 identities, got " +
                      std::to_string(by_id.size()));
  }
  std::vector<TripletPool> pools;
  for (const auto& [id, obs] : by_id) {
    if (obs.size() < 2) {
      throw ConfigError("identity '" + id + "' has fewer than 2 observations");
    }
    TripletPool pool;
    pool.identity = id;
    for (const auto* o : obs) pool.positives.push_back({o->frame, o->feature});
    for (const auto& other : observations)
      if (other.identity != id) pool.negatives.push_back(other.feature);
    pools.push_back(std::move(pool));
  }
  return pools;
}

namespace {

bool usable(const TripletPool& pool) {
  if (pool.negatives.empty() || pool.positives.size() < 2) return false;
  const std::size_t f0 = pool.positives.front().frame;
  return std::any_of(pool.positives.begin(), pool.positives.end(),
                     [f0](const auto& o) { return o.frame != f0; });
}

}  // namespace

TripletBatch sample_triplets(const std::vector<TripletPool>& pools, num::Rng& rng,
                             std::size_t batch, double margin) {
  std::vector<const TripletPool*> eligible;
  for (const auto& p : pools)
    if (usable(p)) eligible.push_back(&p);
  if (eligible.empty()) {
    throw ConfigError("no identity has two observations from different frames and a negative");
  }
  TripletBatch out;
  out.margin = margin;
  while (out.size() < batch) {
    const TripletPool& pool = *eligible[rng.below(eligible.size())];
    const auto& anchor = pool.positives[rng.below(pool.positives.size())];
    const auto& positive = pool.positives[rng.below(pool.positives.size())];
    if (positive.frame == anchor.frame) continue;
    out.anchors.push_back(anchor.feature);
    out.positives.push_back(positive.feature);
    out.negatives.push_back(pool.negatives[rng.below(pool.negatives.size())]);
  }
  return out;
}

ReferenceAnchor make_reference(const EmbeddingModel& model, std::span<const double> feature,
                               std::size_t frame) {
  return ReferenceAnchor{model.embed(feature), frame, model.fingerprint()};
}

MatchResult match_subject(const ReferenceAnchor& reference, const std::vector<Vector>& candidates,
                          double threshold) {
  MatchResult result;
  result.best_distance = std::numeric_limits<double>::infinity();
  std::size_t best = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const double d = num::l2_distance(reference.embedding, candidates[i]);
    if (d < result.best_distance) {
      result.best_distance = d;
      best = i;
    }
  }
  if (!candidates.empty() && result.best_distance <= threshold) result.subject = best;
  return result;
}

MatchResult match_features(const ReferenceAnchor& reference, const EmbeddingModel& model,
                           const std::vector<Vector>& features, double threshold) {
  if (reference.model_fingerprint != model.fingerprint()) {
    throw ContractError("reference anchor was produced by a different embedding model");
  }
  std::vector<Vector> embedded;
  embedded.reserve(features.size());
  for (const auto& f : features) embedded.push_back(model.embed(f));
  return match_subject(reference, embedded, threshold);
}

ReidTrainConfig ReidTrainConfig::from_config(const KeyValueConfig& cfg) {
  cfg.reject_unknown({"input_dim", "hidden_dim", "embed_dim", "margin", "lr", "steps", "batch",
                      "seed", "threshold"});
  ReidTrainConfig c;
  c.dims.input = cfg.get_uint("input_dim", c.dims.input);
  c.dims.hidden = cfg.get_uint("hidden_dim", c.dims.hidden);
  c.dims.embed = cfg.get_uint("embed_dim", c.dims.embed);
  c.margin = cfg.get_double("margin", c.margin);
  c.learning_rate = cfg.get_double("lr", c.learning_rate);
  c.steps = cfg.get_uint("steps", c.steps);
  c.batch = cfg.get_uint("batch", c.batch);
  c.seed = cfg.get_uint("seed", c.seed);
  c.threshold = cfg.get_double("threshold", c.threshold);
  if (c.margin < 0.0) throw ConfigError("margin must be >= 0");
  if (!(c.learning_rate > 0.0)) throw ConfigError("lr must be positive");
  if (c.batch == 0) throw ConfigError("batch must be positive");
  return c;
}

ReidTrainResult train_reid(const std::vector<TripletPool>& pools, const ReidTrainConfig& config,
                           num::Rng& rng) {
  EmbeddingModel model = EmbeddingModel::initialize(config.dims, rng);
  return train_reid(std::move(model), pools, config, rng);
}

ReidTrainResult train_reid(EmbeddingModel model, const std::vector<TripletPool>& pools,
                           const ReidTrainConfig& config, num::Rng& rng) {
  for (const auto& pool : pools) {
    for (const auto& o : pool.positives) {
      if (o.feature.size() != model.dims().input) {
        throw ConfigError("feature length " + std::to_string(o.feature.size()) +
                          " does not match embedding input " + std::to_string(model.dims().input));
      }
    }
  }
  num::OptimizerState opt;
  opt.config.learning_rate = config.learning_rate;
  ReidTrainResult result{std::move(model), {}};
  result.loss_history.reserve(config.steps);

  auto to_matrix = [](const std::vector<Vector>& rows) {
    Matrix m(rows.size(), rows.front().size());
    for (std::size_t r = 0; r < rows.size(); ++r)
      std::copy(rows[r].begin(), rows[r].end(), m.row_span(r).begin());
    return m;
  };

  for (std::size_t step = 0; step < config.steps; ++step) {
    const TripletBatch batch = sample_triplets(pools, rng, config.batch, config.margin);
    num::Tape tape;
    const auto bound = result.model.params().bind(tape, true);
    Var a = result.model.forward(tape.constant(to_matrix(batch.anchors)), bound);
    Var p = result.model.forward(tape.constant(to_matrix(batch.positives)), bound);
    Var n = result.model.forward(tape.constant(to_matrix(batch.negatives)), bound);
    Var loss = triplet_loss(a, p, n, config.margin);
    const double value = loss.value()[0];
    if (!std::isfinite(value)) {
      throw NumericError("reid training diverged at step " + std::to_string(step) +
                         " (loss " + std::to_string(value) + ")");
    }
    result.loss_history.push_back(value);
    tape.backward(loss);
    const auto grads = num::collect_gradients(bound);
    num::optimizer_step(result.model.params().values(), grads, opt);
  }
  return result;
}

}  // namespace escorte::reid
