#include "escorte/action/action.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "escorte/error.hpp"
#include "escorte/num/optim.hpp"

namespace escorte::action {

using num::Matrix;
using num::Var;

namespace {

// Per-layer parameter names, in storage order.
constexpr std::array<const char*, 16> kLayerParams{
    "ln1_gain", "ln1_offset", "wq",        "bq",    "wk",    "bk",    "wv",    "bv",
    "wo",       "bo",         "ln2_gain",  "ln2_offset", "ff_w1", "ff_b1", "ff_w2", "ff_b2"};
enum LayerParam : std::size_t {
  kLn1Gain = 0, kLn1Offset, kWq, kBq, kWk, kBk, kWv, kBv, kWo, kBo,
  kLn2Gain, kLn2Offset, kFfW1, kFfB1, kFfW2, kFfB2, kPerLayer
};
enum HeadParam : std::size_t { kPoolA = 0, kPoolW, kPoolB, kClsW, kClsB };

std::string layer_name(std::size_t layer, std::size_t p) {
  return "l" + std::to_string(layer) + "." + kLayerParams[p];
}

Matrix sinusoidal_table(std::size_t rows, std::size_t dim) {
  Matrix pe(rows, dim);
  for (std::size_t pos = 0; pos < rows; ++pos) {
    for (std::size_t c = 0; c < dim; ++c) {
      const double pair = static_cast<double>(c - c % 2);
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, pair / static_cast<double>(dim));
      pe(pos, c) = (c % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

std::array<double, kNumClasses> softmax3(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  std::array<double, kNumClasses> p{};
  double z = 0.0;
  for (std::size_t i = 0; i < kNumClasses; ++i) z += (p[i] = std::exp(logits[i] - m));
  for (auto& v : p) v /= z;
  return p;
}

ActionState argmax_state(const std::array<double, kNumClasses>& p) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < kNumClasses; ++i)
    if (p[i] > p[best]) best = i;
  return kAllStates[best];
}

}  // namespace

std::string_view to_string(ActionState s) {
  switch (s) {
    case ActionState::Following: return "following";
    case ActionState::Lagging: return "lagging";
    case ActionState::Stopping: return "stopping";
  }
  return "unknown";
}

ActionState parse_action(std::string_view s) {
  for (ActionState a : kAllStates)
    if (to_string(a) == s) return a;
  throw ConfigError("unknown action state '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------

WindowBuffer::WindowBuffer(std::size_t capacity, std::size_t dim)
    : capacity_(capacity), dim_(dim), data_(capacity * dim, 0.0), present_(capacity, 0) {
  if (capacity == 0 || dim == 0) throw ConfigError("window buffer needs positive capacity and dim");
}

void WindowBuffer::push(std::span<const double> v) {
  if (v.size() != dim_) {
    throw ShapeError("window buffer: vector length " + std::to_string(v.size()) + ", expected " +
                     std::to_string(dim_));
  }
  std::size_t target;
  if (count_ < capacity_) {
    target = slot(count_++);
  } else {
    target = head_;
    head_ = (head_ + 1) % capacity_;
  }
  std::copy(v.begin(), v.end(), data_.begin() + static_cast<std::ptrdiff_t>(target * dim_));
  present_[target] = 1;
}

void WindowBuffer::push_absent() {
  const std::vector<double> zero(dim_, 0.0);
  push(zero);
  present_[slot(count_ - 1)] = 0;
}

void WindowBuffer::push_frame(const std::optional<Vector>& v) {
  if (v) {
    push(std::span<const double>(*v));
  } else {
    push_absent();
  }
}

std::span<const double> WindowBuffer::entry(std::size_t i) const {
  if (i >= count_) throw ContractError("window buffer index out of range");
  return {data_.data() + slot(i) * dim_, dim_};
}

bool WindowBuffer::present(std::size_t i) const {
  if (i >= count_) throw ContractError("window buffer index out of range");
  return present_[slot(i)] != 0;
}

Matrix WindowBuffer::matrix() const {
  Matrix m(count_, dim_);
  for (std::size_t i = 0; i < count_; ++i) {
    const auto e = entry(i);
    std::copy(e.begin(), e.end(), m.row_span(i).begin());
  }
  return m;
}

std::vector<std::uint8_t> WindowBuffer::mask() const {
  std::vector<std::uint8_t> out(count_);
  for (std::size_t i = 0; i < count_; ++i) out[i] = present_[slot(i)];
  return out;
}

// ---------------------------------------------------------------------------

PoolResult attention_pool(const Matrix& h, const Matrix& a) {
  if (h.rows() == 0 || a.cols() != 1 || a.rows() != h.cols()) {
    throw ShapeError("attention_pool: H " + h.shape_string() + " with A " + a.shape_string());
  }
  PoolResult r;
  r.scores = num::matmul(h, a);
  r.weights = num::transpose(num::row_softmax(num::transpose(r.scores)));
  r.pooled = num::matmul_tn(h, r.weights);
  // u is a convex combination of the rows of H; clamp away rounding that
  // steps outside the column range.
  for (std::size_t j = 0; j < h.cols(); ++j) {
    double lo = h(0, j), hi = h(0, j);
    for (std::size_t i = 1; i < h.rows(); ++i) {
      lo = std::min(lo, h(i, j));
      hi = std::max(hi, h(i, j));
    }
    r.pooled(j, 0) = std::clamp(r.pooled(j, 0), lo, hi);
  }
  return r;
}

Var attention_pool(Var h, Var a) {
  if (a.cols() != 1 || a.rows() != h.cols()) {
    throw ShapeError("attention_pool: H " + h.value().shape_string() + " with A " +
                     a.value().shape_string());
  }
  Var weights = num::row_softmax(num::transpose(num::matmul(h, a)));
  return num::matmul(weights, h);
}

// ---------------------------------------------------------------------------

void ActionConfig::validate() const {
  if (window == 0 || dim == 0 || heads == 0) {
    throw ConfigError("action model window, dim and heads must be positive");
  }
  if (dim % heads != 0) {
    throw ConfigError("action model dim " + std::to_string(dim) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
}

ActionModel::ActionModel(const ActionConfig& config)
    : config_(config), positional_(sinusoidal_table(config.window, config.dim)) {
  config_.validate();
  const std::size_t d = config_.dim;
  const std::size_t ff = config_.feed_forward();
  for (std::size_t l = 0; l < kNumLayers; ++l) {
    for (std::size_t p = 0; p < kPerLayer; ++p) {
      Matrix m;
      switch (p) {
        case kLn1Gain:
        case kLn2Gain: m = Matrix(1, d, 1.0); break;
        case kLn1Offset:
        case kLn2Offset:
        case kBq:
        case kBk:
        case kBv:
        case kBo:
        case kFfB2: m = Matrix(1, d); break;
        case kWq:
        case kWk:
        case kWv:
        case kWo: m = Matrix(d, d); break;
        case kFfW1: m = Matrix(d, ff); break;
        case kFfB1: m = Matrix(1, ff); break;
        case kFfW2: m = Matrix(ff, d); break;
        default: break;
      }
      params_.add(layer_name(l, p), std::move(m));
    }
  }
  head_offset_ = params_.size();
  params_.add("pool_a", Matrix(d, 1));
  params_.add("pool_w", Matrix(d, d));
  params_.add("pool_b", Matrix(1, d));
  params_.add("cls_w", Matrix(d, kNumClasses));
  params_.add("cls_b", Matrix(1, kNumClasses));
}

ActionModel ActionModel::zeros(const ActionConfig& config) { return ActionModel(config); }

ActionModel ActionModel::initialize(const ActionConfig& config, num::Rng& rng) {
  ActionModel m(config);
  const std::size_t d = m.config_.dim;
  for (std::size_t l = 0; l < kNumLayers; ++l) {
    const std::size_t base = l * kPerLayer;
    for (std::size_t p : {kWq, kWk, kWv, kWo, kFfW1})
      num::init_fan_in_uniform(m.params_.at(base + p), d, rng);
    num::init_fan_in_uniform(m.params_.at(base + kFfW2), m.config_.feed_forward(), rng);
  }
  for (std::size_t p : {kPoolA, kPoolW, kClsW})
    num::init_fan_in_uniform(m.params_.at(m.head_offset_ + p), d, rng);
  return m;
}

ActionModel ActionModel::from_checkpoint(const num::Checkpoint& ckpt) {
  if (ckpt.kind != "action") {
    throw ConfigError("expected an action checkpoint, got kind '" + ckpt.kind + "'");
  }
  if (ckpt.dim("layers") != static_cast<std::int64_t>(kNumLayers)) {
    throw ConfigError("action checkpoint has " + std::to_string(ckpt.dim("layers")) +
                      " layers, expected " + std::to_string(kNumLayers));
  }
  ActionConfig c;
  c.window = static_cast<std::size_t>(ckpt.dim("window"));
  c.dim = static_cast<std::size_t>(ckpt.dim("dim"));
  c.heads = static_cast<std::size_t>(ckpt.dim("heads"));
  c.ff_width = static_cast<std::size_t>(ckpt.dim("ff_width"));
  const auto input = ckpt.dim("input");
  if (input != 0 && input != 1) throw ConfigError("action checkpoint has an unknown input mode");
  c.input = static_cast<InputMode>(input);
  ActionModel m(c);
  for (std::size_t i = 0; i < m.params_.size(); ++i) {
    const Matrix& stored = ckpt.params.at(ckpt.params.index(m.params_.name(i)));
    if (!stored.same_shape(m.params_.at(i))) {
      throw ConfigError("action checkpoint block '" + m.params_.name(i) + "' has shape " +
                        stored.shape_string() + ", expected " + m.params_.at(i).shape_string());
    }
    m.params_.at(i) = stored;
  }
  return m;
}

num::Checkpoint ActionModel::to_checkpoint() const {
  num::Checkpoint ckpt;
  ckpt.kind = "action";
  ckpt.dims = {{"window", static_cast<std::int64_t>(config_.window)},
               {"dim", static_cast<std::int64_t>(config_.dim)},
               {"heads", static_cast<std::int64_t>(config_.heads)},
               {"ff_width", static_cast<std::int64_t>(config_.feed_forward())},
               {"layers", static_cast<std::int64_t>(kNumLayers)},
               {"input", static_cast<std::int64_t>(config_.input)}};
  ckpt.params = params_;
  return ckpt;
}

Var ActionModel::encode(num::Tape& tape, const Matrix& inputs, std::span<const std::uint8_t> mask,
                        std::span<const Var> bound) const {
  if (inputs.rows() != config_.window || inputs.cols() != config_.dim) {
    throw ShapeError("action encode: input " + inputs.shape_string() + ", expected (" +
                     std::to_string(config_.window) + "x" + std::to_string(config_.dim) + ")");
  }
  if (bound.size() != params_.size()) {
    throw ContractError("action encode: expected " + std::to_string(params_.size()) +
                        " bound parameters");
  }
  Var x = tape.constant(inputs + positional_);
  for (std::size_t l = 0; l < kNumLayers; ++l) {
    const Var* p = bound.data() + l * kPerLayer;
    Var n1 = num::layer_norm(x, p[kLn1Gain], p[kLn1Offset]);
    Var q = num::add_row(num::matmul(n1, p[kWq]), p[kBq]);
    Var k = num::add_row(num::matmul(n1, p[kWk]), p[kBk]);
    Var v = num::add_row(num::matmul(n1, p[kWv]), p[kBv]);
    Var att = num::multi_head_attention(q, k, v, mask, config_.heads);
    x = num::add(x, num::add_row(num::matmul(att, p[kWo]), p[kBo]));
    Var n2 = num::layer_norm(x, p[kLn2Gain], p[kLn2Offset]);
    Var hidden = num::relu(num::add_row(num::matmul(n2, p[kFfW1]), p[kFfB1]));
    x = num::add(x, num::add_row(num::matmul(hidden, p[kFfW2]), p[kFfB2]));
  }
  return x;
}

Var ActionModel::head(Var pooled, std::span<const Var> bound) const {
  const Var* p = bound.data() + head_offset_;
  Var hidden = num::relu(num::add_row(num::matmul(pooled, p[kPoolW]), p[kPoolB]));
  return num::add_row(num::matmul(hidden, p[kClsW]), p[kClsB]);
}

Var ActionModel::logits(num::Tape& tape, const Matrix& inputs, std::span<const std::uint8_t> mask,
                        std::span<const Var> bound) const {
  Var h = encode(tape, inputs, mask, bound);
  return head(attention_pool(h, bound[head_offset_ + kPoolA]), bound);
}

std::optional<Matrix> ActionModel::transformer_forward(const WindowBuffer& window) const {
  if (!window.full()) return std::nullopt;
  num::Tape tape;
  const auto bound = params_.bind(tape, false);
  return encode(tape, window.matrix(), window.mask(), bound).value();
}

std::optional<ActionPrediction> ActionModel::predict(const WindowBuffer& window,
                                                     std::size_t frame) const {
  if (!window.full()) return std::nullopt;
  num::Tape tape;
  const auto bound = params_.bind(tape, false);
  const Var out = logits(tape, window.matrix(), window.mask(), bound);
  ActionPrediction pred;
  pred.probabilities = softmax3(out.value().data());
  pred.state = argmax_state(pred.probabilities);
  pred.frame = frame;
  return pred;
}

ActionPrediction classify(const ActionModel& model, std::span<const double> pooled) {
  const std::size_t d = model.config().dim;
  if (pooled.size() != d) {
    throw ShapeError("classify: pooled length " + std::to_string(pooled.size()) + ", expected " +
                     std::to_string(d));
  }
  const auto& ps = model.params();
  Matrix hidden = num::matmul(Matrix::row(pooled), ps.at(ps.index("pool_w")));
  const Matrix& bp = ps.at(ps.index("pool_b"));
  for (std::size_t c = 0; c < d; ++c) hidden[c] = num::relu_scalar(hidden[c] + bp[c]);
  Matrix out = num::matmul(hidden, ps.at(ps.index("cls_w")));
  out += ps.at(ps.index("cls_b"));
  ActionPrediction pred;
  pred.probabilities = softmax3(out.data());
  pred.state = argmax_state(pred.probabilities);
  return pred;
}

double cross_entropy(std::span<const double> probabilities, ActionState label) {
  if (probabilities.size() != kNumClasses) {
    throw ShapeError("cross_entropy: expected " + std::to_string(kNumClasses) + " probabilities");
  }
  const double p = std::clamp(probabilities[index_of(label)], 1e-12, 1.0 - 1e-12);
  return -std::log(p);
}

double cross_entropy(const std::vector<ActionPrediction>& predictions,
                     const std::vector<ActionState>& labels) {
  if (predictions.size() != labels.size()) {
    throw ShapeError("cross_entropy: " + std::to_string(predictions.size()) + " predictions for " +
                     std::to_string(labels.size()) + " labels");
  }
  if (predictions.empty()) throw ContractError("cross_entropy of an empty batch");
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    total += cross_entropy(predictions[i].probabilities, labels[i]);
  return total / static_cast<double>(labels.size());
}

std::vector<ActionPrediction> detect_stream(const ActionModel& model,
                                            const std::vector<std::optional<Vector>>& stream) {
  WindowBuffer window(model.config().window, model.config().dim);
  std::vector<ActionPrediction> out;
  if (stream.size() >= window.capacity()) out.reserve(stream.size() - window.capacity() + 1);
  for (std::size_t f = 0; f < stream.size(); ++f) {
    window.push_frame(stream[f]);
    if (auto pred = model.predict(window, f)) out.push_back(*pred);
  }
  return out;
}

// ---------------------------------------------------------------------------

ActionTrainConfig ActionTrainConfig::from_config(const KeyValueConfig& cfg) {
  cfg.reject_unknown({"w", "d", "heads", "ff_width", "input", "lr", "steps", "batch", "seed",
                      "reid"});
  ActionTrainConfig c;
  c.model.window = cfg.get_uint("w", c.model.window);
  c.model.dim = cfg.get_uint("d", c.model.dim);
  c.model.heads = cfg.get_uint("heads", c.model.heads);
  c.model.ff_width = cfg.get_uint("ff_width", c.model.ff_width);
  const std::string input = cfg.get_string("input", "embedding");
  if (input == "embedding") {
    c.model.input = InputMode::Embedding;
  } else if (input == "raw") {
    c.model.input = InputMode::Raw;
  } else {
    throw ConfigError("input must be 'embedding' or 'raw', got '" + input + "'");
  }
  c.learning_rate = cfg.get_double("lr", c.learning_rate);
  c.steps = cfg.get_uint("steps", c.steps);
  c.batch = cfg.get_uint("batch", c.batch);
  c.seed = cfg.get_uint("seed", c.seed);
  c.model.validate();
  if (!(c.learning_rate > 0.0)) throw ConfigError("lr must be positive");
  if (c.batch == 0) throw ConfigError("batch must be positive");
  return c;
}

ActionTrainResult train_action(const std::vector<LabeledSequence>& corpus,
                               const ActionTrainConfig& config, num::Rng& rng) {
  const std::size_t w = config.model.window;
  const std::size_t d = config.model.dim;
  // Cumulative count of full windows per sequence, for uniform sampling.
  std::vector<std::size_t> cumulative;
  std::size_t total = 0;
  for (const auto& seq : corpus) {
    if (seq.inputs.size() != seq.labels.size()) {
      throw ConfigError("sequence has " + std::to_string(seq.inputs.size()) + " frames but " +
                        std::to_string(seq.labels.size()) + " labels");
    }
    for (const auto& v : seq.inputs) {
      if (v && v->size() != d) {
        throw ConfigError("subject vector length " + std::to_string(v->size()) +
                          " does not match model dim " + std::to_string(d));
      }
    }
    if (seq.inputs.size() >= w) total += seq.inputs.size() - w + 1;
    cumulative.push_back(total);
  }
  if (total == 0) {
    throw ConfigError("no training sequence is at least " + std::to_string(w) + " frames long");
  }

  ActionTrainResult result{ActionModel::initialize(config.model, rng), {}};
  result.loss_history.reserve(config.steps);
  num::OptimizerState opt;
  opt.config.learning_rate = config.learning_rate;

  Matrix inputs(w, d);
  std::vector<std::uint8_t> mask(w);
  for (std::size_t step = 0; step < config.steps; ++step) {
    num::Tape tape;
    const auto bound = result.model.params().bind(tape, true);
    std::vector<Var> losses;
    losses.reserve(config.batch);
    for (std::size_t b = 0; b < config.batch; ++b) {
      const std::size_t pick = rng.below(total);
      const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), pick);
      const std::size_t s = static_cast<std::size_t>(it - cumulative.begin());
      const std::size_t before = s == 0 ? 0 : cumulative[s - 1];
      const std::size_t start = pick - before;
      const auto& seq = corpus[s];
      for (std::size_t r = 0; r < w; ++r) {
        const auto& v = seq.inputs[start + r];
        auto row = inputs.row_span(r);
        if (v) {
          std::copy(v->begin(), v->end(), row.begin());
        } else {
          std::fill(row.begin(), row.end(), 0.0);
        }
        mask[r] = v ? 1 : 0;
      }
      const ActionState label = seq.labels[start + w - 1];
      Var probs = num::row_softmax(result.model.logits(tape, inputs, mask, bound));
      losses.push_back(num::negative_log_likelihood(probs, index_of(label)));
    }
    Var loss = num::mean(losses);
    const double value = loss.value()[0];
    if (!std::isfinite(value)) {
      throw NumericError("action training diverged at step " + std::to_string(step) + " (loss " +
                         std::to_string(value) + ")");
    }
    result.loss_history.push_back(value);
    tape.backward(loss);
    num::optimizer_step(result.model.params().values(), num::collect_gradients(bound), opt);
  }
  return result;
}

// ---------------------------------------------------------------------------

bool LatestWindowSlot::post(Item item) {
  bool replaced;
  {
    std::lock_guard lock(mutex_);
    if (closed_) throw ContractError("post to a closed window slot");
    replaced = pending_.has_value();
    if (replaced) ++dropped_;
    pending_ = std::move(item);
  }
  ready_.notify_one();
  return replaced;
}

std::optional<LatestWindowSlot::Item> LatestWindowSlot::take() {
  std::unique_lock lock(mutex_);
  ready_.wait(lock, [this] { return pending_.has_value() || closed_; });
  std::optional<Item> out = std::move(pending_);
  pending_.reset();
  return out;
}

void LatestWindowSlot::close() {
  {
    std::lock_guard lock(mutex_);
    closed_ = true;
  }
  ready_.notify_all();
}

std::size_t LatestWindowSlot::dropped() const {
  std::lock_guard lock(mutex_);
  return dropped_;
}

}  // namespace escorte::action
