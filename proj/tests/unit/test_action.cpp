#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <thread>

#include "escorte/action/action.hpp"
#include "escorte/error.hpp"
#include "escorte/num/gradcheck.hpp"

using namespace escorte;
using namespace escorte::action;
using num::Matrix;
using num::Rng;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Matrix m(r, c);
  for (double& x : m.data()) x = rng.uniform(lo, hi);
  return m;
}

Vector random_vector(std::size_t n, Rng& rng) {
  Vector v(n);
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

ActionConfig small_config() {
  ActionConfig c;
  c.window = 4;
  c.dim = 8;
  c.heads = 2;
  c.ff_width = 16;
  return c;
}

// Reference softmax written out independently of the library.
std::vector<double> softmax_ref(const std::vector<double>& x) {
  double m = x[0];
  for (double v : x) m = std::max(m, v);
  std::vector<double> e(x.size());
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) z += (e[i] = std::exp(x[i] - m));
  for (double& v : e) v /= z;
  return e;
}

}  // namespace

TEST_CASE("window buffer keeps the newest entries oldest-first") {
  WindowBuffer buf(3, 2);
  CHECK_FALSE(buf.full());
  buf.push(Vector{1, 1});
  buf.push_absent();
  buf.push(Vector{3, 3});
  CHECK(buf.full());
  CHECK(buf.mask() == std::vector<std::uint8_t>{1, 0, 1});
  buf.push(Vector{4, 4});
  CHECK(buf.size() == 3);
  const Matrix m = buf.matrix();
  CHECK(m == Matrix{{0, 0}, {3, 3}, {4, 4}});
  CHECK(buf.mask() == std::vector<std::uint8_t>{0, 1, 1});
  CHECK_THROWS_AS(buf.push(Vector{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(WindowBuffer(0, 2), ConfigError);
}

TEST_CASE("attention pooling on the identity") {
  const Matrix h = Matrix::identity(2);
  const Matrix a{{1.0}, {0.0}};
  const PoolResult r = attention_pool(h, a);
  const double e = std::exp(1.0);
  CHECK(r.weights(0, 0) == doctest::Approx(e / (e + 1.0)).epsilon(1e-12));
  CHECK(r.weights(1, 0) == doctest::Approx(1.0 / (e + 1.0)).epsilon(1e-12));
  CHECK(std::abs(r.weights(0, 0) - 0.731059) < 1e-6);
  CHECK(std::abs(r.weights(1, 0) - 0.268941) < 1e-6);
  CHECK(r.pooled(0, 0) == doctest::Approx(r.weights(0, 0)));
  CHECK(r.pooled(1, 0) == doctest::Approx(r.weights(1, 0)));
  CHECK_THROWS_AS(attention_pool(h, Matrix{{1.0}, {0.0}, {0.0}}), ShapeError);
}

TEST_CASE("attention pooling properties over random inputs") {
  Rng rng(11);
  double worst_sum = 0.0;
  double worst_ref = 0.0;
  bool hull = true;
  bool nonneg = true;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t w = 1 + rng.below(8);
    const std::size_t d = 1 + rng.below(6);
    const Matrix h = random_matrix(w, d, rng, -3.0, 3.0);
    const Matrix a = random_matrix(d, 1, rng, -3.0, 3.0);
    const PoolResult r = attention_pool(h, a);
    double s = 0.0;
    for (std::size_t i = 0; i < w; ++i) {
      s += r.weights[i];
      nonneg = nonneg && r.weights[i] >= 0.0;
    }
    worst_sum = std::max(worst_sum, std::abs(s - 1.0));
    // Independent recomputation of the scores, weights and pooled vector.
    std::vector<double> scores(w, 0.0);
    for (std::size_t i = 0; i < w; ++i)
      for (std::size_t j = 0; j < d; ++j) scores[i] += h(i, j) * a[j];
    const auto c = softmax_ref(scores);
    for (std::size_t j = 0; j < d; ++j) {
      double u = 0.0, lo = h(0, j), hi = h(0, j);
      for (std::size_t i = 0; i < w; ++i) {
        u += c[i] * h(i, j);
        lo = std::min(lo, h(i, j));
        hi = std::max(hi, h(i, j));
      }
      worst_ref = std::max(worst_ref, std::abs(u - r.pooled[j]));
      hull = hull && r.pooled[j] >= lo - 1e-12 && r.pooled[j] <= hi + 1e-12;
    }
  }
  CHECK(worst_sum < 1e-12);
  CHECK(worst_ref < 1e-12);
  CHECK(hull);
  CHECK(nonneg);
}

TEST_CASE("identical window rows pool to that row") {
  Rng rng(3);
  const Vector row = random_vector(5, rng);
  Matrix h(7, 5);
  for (std::size_t i = 0; i < 7; ++i) std::copy(row.begin(), row.end(), h.row_span(i).begin());
  const PoolResult r = attention_pool(h, random_matrix(5, 1, rng));
  for (std::size_t j = 0; j < 5; ++j) CHECK(r.pooled[j] == doctest::Approx(row[j]).epsilon(1e-12));
  for (std::size_t i = 0; i < 7; ++i) CHECK(r.weights[i] == doctest::Approx(1.0 / 7.0));
}

TEST_CASE("tape pooling agrees with the direct computation") {
  Rng rng(5);
  const Matrix h = random_matrix(6, 4, rng);
  const Matrix a = random_matrix(4, 1, rng);
  num::Tape tape;
  const num::Var u = attention_pool(tape.constant(h), tape.constant(a));
  const PoolResult r = attention_pool(h, a);
  CHECK(u.rows() == 1);
  for (std::size_t j = 0; j < 4; ++j) CHECK(u.value()[j] == doctest::Approx(r.pooled[j]).epsilon(1e-14));
}

TEST_CASE("positional encoding is the sinusoid table") {
  const ActionModel m = ActionModel::zeros(small_config());
  const Matrix& pe = m.positional_encoding();
  CHECK(pe.rows() == 4);
  CHECK(pe.cols() == 8);
  for (std::size_t c = 0; c < 8; ++c) CHECK(pe(0, c) == (c % 2 == 0 ? 0.0 : 1.0));
  CHECK(pe(1, 0) == doctest::Approx(std::sin(1.0)));
  CHECK(pe(1, 1) == doctest::Approx(std::cos(1.0)));
  CHECK(pe(3, 2) == doctest::Approx(std::sin(3.0 / std::pow(10000.0, 2.0 / 8.0))));
  CHECK(pe(2, 5) == doctest::Approx(std::cos(2.0 / std::pow(10000.0, 4.0 / 8.0))));
}

TEST_CASE("zero weights pass the positional-encoded input through") {
  ActionConfig cfg = small_config();
  const ActionModel m = ActionModel::zeros(cfg);
  Rng rng(9);
  WindowBuffer buf(cfg.window, cfg.dim);
  CHECK_FALSE(m.transformer_forward(buf).has_value());
  for (int i = 0; i < 3; ++i) buf.push(random_vector(cfg.dim, rng));
  CHECK_FALSE(m.transformer_forward(buf).has_value());
  CHECK_FALSE(m.predict(buf, 2).has_value());
  buf.push_absent();
  const auto h = m.transformer_forward(buf);
  REQUIRE(h.has_value());
  CHECK(num::max_abs_diff(*h, buf.matrix() + m.positional_encoding()) < 1e-15);

  const auto pred = m.predict(buf, 3);
  REQUIRE(pred.has_value());
  for (double p : pred->probabilities) CHECK(p == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(cross_entropy(pred->probabilities, ActionState::Lagging) ==
        doctest::Approx(std::log(3.0)).epsilon(1e-12));
}

TEST_CASE("classify and cross-entropy examples") {
  ActionModel m = ActionModel::zeros(small_config());
  auto& ps = m.params();
  ps.at(ps.index("pool_w")) = Matrix::identity(8);
  ps.at(ps.index("cls_w"))(0, 0) = 2.0;
  ps.at(ps.index("cls_w"))(1, 2) = 1.0;
  Vector u(8, 0.0);
  u[0] = 1.0;
  u[1] = -5.0;  // removed by the ReLU
  const ActionPrediction p = classify(m, u);
  const double e2 = std::exp(2.0);
  CHECK(p.probabilities[0] == doctest::Approx(e2 / (e2 + 2.0)).epsilon(1e-14));
  CHECK(p.probabilities[1] == doctest::Approx(1.0 / (e2 + 2.0)).epsilon(1e-14));
  CHECK(p.state == ActionState::Following);

  u[1] = 3.0;
  const ActionPrediction q = classify(m, u);
  // logits [2, 0, 3]
  CHECK(q.state == ActionState::Stopping);
  CHECK(q.probabilities[2] ==
        doctest::Approx(std::exp(3.0) / (std::exp(3.0) + e2 + 1.0)).epsilon(1e-14));
  CHECK_THROWS_AS(classify(m, Vector(7, 0.0)), ShapeError);

  CHECK(cross_entropy(std::vector<double>{0.7, 0.2, 0.1}, ActionState::Following) ==
        doctest::Approx(-std::log(0.7)));
  CHECK(cross_entropy(std::vector<double>{0.0, 1.0, 0.0}, ActionState::Following) ==
        doctest::Approx(-std::log(1e-12)));
  CHECK(cross_entropy(std::vector<double>{0.0, 1.0, 0.0}, ActionState::Lagging) ==
        doctest::Approx(-std::log(1.0 - 1e-12)));
  std::vector<ActionPrediction> batch(2);
  batch[0].probabilities = {0.5, 0.25, 0.25};
  batch[1].probabilities = {0.1, 0.1, 0.8};
  CHECK(cross_entropy(batch, {ActionState::Following, ActionState::Stopping}) ==
        doctest::Approx((-std::log(0.5) - std::log(0.8)) / 2.0));
  CHECK_THROWS_AS(cross_entropy(batch, {ActionState::Following}), ShapeError);
}

TEST_CASE("action state names round-trip") {
  for (ActionState s : kAllStates) CHECK(parse_action(to_string(s)) == s);
  CHECK_THROWS_AS(parse_action("walking"), ConfigError);
}

TEST_CASE("full model gradient matches finite differences") {
  const ActionConfig cfg = small_config();
  Rng rng(21);
  ActionModel m = ActionModel::initialize(cfg, rng);
  // Non-trivial gains, offsets and biases so every path carries gradient.
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    const std::string& name = m.params().name(i);
    if (name.find("_offset") != std::string::npos || name.back() == 'b' ||
        name.find(".b") != std::string::npos || name.find("_b") != std::string::npos) {
      for (double& x : m.params().at(i).data()) x = rng.uniform(-0.3, 0.3);
    } else if (name.find("_gain") != std::string::npos) {
      for (double& x : m.params().at(i).data()) x = rng.uniform(0.7, 1.3);
    }
  }
  const Matrix inputs = random_matrix(cfg.window, cfg.dim, rng);
  const std::vector<std::uint8_t> mask{1, 0, 1, 1};
  num::LossBuilder loss = [&](num::Tape& tape, std::span<const num::Var> bound) {
    num::Var probs = num::row_softmax(m.logits(tape, inputs, mask, bound));
    return num::negative_log_likelihood(probs, 1);
  };
  CHECK(num::grad_check(loss, m.params().values()) < 1e-6);
}

TEST_CASE("model configuration errors") {
  ActionConfig cfg = small_config();
  cfg.heads = 3;
  CHECK_THROWS_AS(ActionModel::zeros(cfg), ConfigError);
  cfg.heads = 2;
  const ActionModel m = ActionModel::zeros(cfg);
  num::Tape tape;
  const auto bound = m.params().bind(tape, false);
  CHECK_THROWS_AS(m.logits(tape, Matrix(3, 8), std::vector<std::uint8_t>(3, 1), bound), ShapeError);
}

TEST_CASE("stream detection emits one prediction per frame once the window fills") {
  const ActionConfig cfg = small_config();
  Rng rng(4);
  const ActionModel m = ActionModel::initialize(cfg, rng);
  std::vector<std::optional<Vector>> stream;
  for (int i = 0; i < 20; ++i) {
    if (i % 5 == 2) {
      stream.push_back(std::nullopt);
    } else {
      stream.push_back(random_vector(cfg.dim, rng));
    }
  }
  const auto preds = detect_stream(m, stream);
  REQUIRE(preds.size() == 17);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    CHECK(preds[i].frame == i + 3);
    const double s = preds[i].probabilities[0] + preds[i].probabilities[1] + preds[i].probabilities[2];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK(detect_stream(m, {stream.begin(), stream.begin() + 3}).empty());

  // Changing frame 10 can only affect predictions whose window covers it.
  auto altered = stream;
  altered[10] = random_vector(cfg.dim, rng);
  const auto changed = detect_stream(m, altered);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const std::size_t f = preds[i].frame;
    if (f < 10 || f > 13) CHECK(changed[i].probabilities == preds[i].probabilities);
  }
  CHECK(changed[7].probabilities != preds[7].probabilities);
}

TEST_CASE("all-absent window still yields a distribution") {
  const ActionConfig cfg = small_config();
  Rng rng(8);
  const ActionModel m = ActionModel::initialize(cfg, rng);
  const std::vector<std::optional<Vector>> stream(6, std::nullopt);
  const auto preds = detect_stream(m, stream);
  REQUIRE(preds.size() == 3);
  for (const auto& p : preds) {
    for (double v : p.probabilities) CHECK(std::isfinite(v));
    CHECK(p.probabilities[0] + p.probabilities[1] + p.probabilities[2] ==
          doctest::Approx(1.0));
  }
}

TEST_CASE("checkpoint round trip preserves predictions") {
  ActionConfig cfg = small_config();
  cfg.input = InputMode::Raw;
  Rng rng(13);
  const ActionModel m = ActionModel::initialize(cfg, rng);
  std::stringstream ss;
  num::write_checkpoint(m.to_checkpoint(), ss);
  const ActionModel back = ActionModel::from_checkpoint(num::read_checkpoint(ss));
  CHECK(back.config().input == InputMode::Raw);
  CHECK(back.config().feed_forward() == 16);
  CHECK(back.params() == m.params());
  num::Checkpoint wrong = m.to_checkpoint();
  wrong.kind = "reid";
  CHECK_THROWS_AS(ActionModel::from_checkpoint(wrong), ConfigError);
}

namespace {

// Label depends on the sign of the first coordinate averaged over the window;
// the last-frame label is what training sees.
std::vector<LabeledSequence> toy_corpus(Rng& rng, std::size_t count, std::size_t dim) {
  std::vector<LabeledSequence> out;
  for (std::size_t s = 0; s < count; ++s) {
    LabeledSequence seq;
    const ActionState label = kAllStates[s % 3];
    const double level = label == ActionState::Following ? 1.0
                         : label == ActionState::Lagging ? -1.0
                                                         : 0.0;
    for (int f = 0; f < 12; ++f) {
      Vector v(dim, 0.0);
      for (double& x : v) x = 0.1 * rng.normal();
      v[0] += level;
      v[1] += label == ActionState::Stopping ? 1.0 : 0.0;
      seq.inputs.push_back(v);
      seq.labels.push_back(label);
    }
    out.push_back(std::move(seq));
  }
  return out;
}

}  // namespace

TEST_CASE("training learns a separable toy problem") {
  ActionTrainConfig cfg;
  cfg.model = small_config();
  cfg.steps = 150;
  cfg.batch = 8;
  cfg.learning_rate = 3e-3;
  Rng data_rng(1);
  const auto corpus = toy_corpus(data_rng, 12, cfg.model.dim);
  Rng rng(cfg.seed);
  const ActionTrainResult r = train_action(corpus, cfg, rng);
  REQUIRE(r.loss_history.size() == 150);
  double early = 0.0, late = 0.0;
  for (int i = 0; i < 10; ++i) {
    early += r.loss_history[static_cast<std::size_t>(i)];
    late += r.loss_history[r.loss_history.size() - 1 - static_cast<std::size_t>(i)];
  }
  CHECK(late < 0.25 * early);
  std::size_t correct = 0, total = 0;
  for (const auto& seq : corpus) {
    for (const auto& p : detect_stream(r.model, seq.inputs)) {
      correct += p.state == seq.labels[p.frame];
      ++total;
    }
  }
  CHECK(correct == total);
}

TEST_CASE("training is deterministic for a fixed seed") {
  ActionTrainConfig cfg;
  cfg.model = small_config();
  cfg.steps = 5;
  Rng data_rng(2);
  const auto corpus = toy_corpus(data_rng, 6, cfg.model.dim);
  Rng a(77), b(77);
  const auto ra = train_action(corpus, cfg, a);
  const auto rb = train_action(corpus, cfg, b);
  std::stringstream sa, sb;
  num::write_checkpoint(ra.model.to_checkpoint(), sa);
  num::write_checkpoint(rb.model.to_checkpoint(), sb);
  CHECK(sa.str() == sb.str());
}

TEST_CASE("training input validation") {
  ActionTrainConfig cfg;
  cfg.model = small_config();
  cfg.steps = 1;
  LabeledSequence short_seq;
  for (int i = 0; i < 3; ++i) {
    short_seq.inputs.push_back(Vector(8, 0.0));
    short_seq.labels.push_back(ActionState::Following);
  }
  Rng rng(1);
  CHECK_THROWS_AS(train_action({short_seq}, cfg, rng), ConfigError);
  LabeledSequence bad = short_seq;
  bad.inputs.push_back(Vector(5, 0.0));
  bad.labels.push_back(ActionState::Following);
  CHECK_THROWS_AS(train_action({bad}, cfg, rng), ConfigError);

  LabeledSequence nan_seq;
  for (int i = 0; i < 4; ++i) {
    nan_seq.inputs.push_back(Vector(8, std::numeric_limits<double>::infinity()));
    nan_seq.labels.push_back(ActionState::Lagging);
  }
  CHECK_THROWS_AS(train_action({nan_seq}, cfg, rng), NumericError);
}

TEST_CASE("training config parsing") {
  const auto kv = KeyValueConfig::parse("w = 30\nd = 16\nheads = 4\ninput = raw\nsteps = 10\n");
  const auto cfg = ActionTrainConfig::from_config(kv);
  CHECK(cfg.model.window == 30);
  CHECK(cfg.model.dim == 16);
  CHECK(cfg.model.input == InputMode::Raw);
  CHECK(cfg.model.feed_forward() == 64);
  CHECK(cfg.steps == 10);
  CHECK_THROWS_AS(ActionTrainConfig::from_config(KeyValueConfig::parse("d = 10\nheads = 4\n")),
                  ConfigError);
  CHECK_THROWS_AS(ActionTrainConfig::from_config(KeyValueConfig::parse("input = pixels\n")),
                  ConfigError);
  CHECK_THROWS_AS(ActionTrainConfig::from_config(KeyValueConfig::parse("window = 3\n")),
                  ConfigError);
}

TEST_CASE("latest-window slot keeps only the newest pending window") {
  LatestWindowSlot slot;
  CHECK_FALSE(slot.post({Matrix(1, 1, 1.0), {1}, 1}));
  CHECK(slot.post({Matrix(1, 1, 2.0), {1}, 2}));
  const auto item = slot.take();
  REQUIRE(item.has_value());
  CHECK(item->frame == 2);
  CHECK(slot.dropped() == 1);

  std::vector<std::size_t> seen;
  std::thread consumer([&] {
    while (auto it = slot.take()) seen.push_back(it->frame);
  });
  for (std::size_t f = 10; f < 200; ++f) slot.post({Matrix(1, 1), {1}, f});
  slot.close();
  consumer.join();
  CHECK(std::is_sorted(seen.begin(), seen.end()));
  CHECK(seen.size() + slot.dropped() == 190 + 1);
  CHECK_THROWS_AS(slot.post({Matrix(1, 1), {1}, 0}), ContractError);
}

TEST_CASE("positional encoding breaks permutation symmetry; masked content is ignored elsewhere") {
  const ActionConfig cfg = small_config();
  Rng rng(31);
  const ActionModel m = ActionModel::initialize(cfg, rng);
  Matrix x = random_matrix(cfg.window, cfg.dim, rng);
  const std::vector<std::uint8_t> all(cfg.window, 1);
  auto run = [&](const Matrix& in, const std::vector<std::uint8_t>& mask) {
    num::Tape tape;
    const auto bound = m.params().bind(tape, false);
    return m.encode(tape, in, mask, bound).value();
  };
  Matrix swapped = x;
  for (std::size_t c = 0; c < cfg.dim; ++c) std::swap(swapped(0, c), swapped(1, c));
  const Matrix h = run(x, all);
  const Matrix hs = run(swapped, all);
  CHECK(num::max_abs_diff(h, hs) > 1e-6);

  std::vector<std::uint8_t> mask = all;
  mask[2] = 0;
  Matrix other = x;
  for (std::size_t c = 0; c < cfg.dim; ++c) other(2, c) = rng.uniform(-5.0, 5.0);
  const Matrix a = run(x, mask);
  const Matrix b = run(other, mask);
  for (std::size_t r = 0; r < cfg.window; ++r) {
    if (r == 2) continue;
    for (std::size_t c = 0; c < cfg.dim; ++c) CHECK(a(r, c) == b(r, c));
  }
}

TEST_CASE("zero pooling vector averages the rows") {
  Rng rng(2);
  const Matrix h = random_matrix(5, 3, rng);
  const PoolResult r = attention_pool(h, Matrix(3, 1));
  for (std::size_t j = 0; j < 3; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < 5; ++i) mean += h(i, j) / 5.0;
    CHECK(r.pooled[j] == doctest::Approx(mean).epsilon(1e-14));
  }
}

TEST_CASE("shifting all logits leaves probabilities unchanged") {
  ActionModel m = ActionModel::zeros(small_config());
  auto& ps = m.params();
  Rng rng(6);
  for (double& v : ps.at(ps.index("pool_w")).data()) v = rng.uniform(-1, 1);
  for (double& v : ps.at(ps.index("cls_w")).data()) v = rng.uniform(-1, 1);
  const Vector u = random_vector(8, rng);
  const ActionPrediction before = classify(m, u);
  for (double& v : ps.at(ps.index("cls_b")).data()) v += 4.25;
  const ActionPrediction after = classify(m, u);
  for (std::size_t k = 0; k < kNumClasses; ++k)
    CHECK(after.probabilities[k] == doctest::Approx(before.probabilities[k]).epsilon(1e-14));
  std::size_t best = 0;
  for (std::size_t k = 1; k < kNumClasses; ++k)
    if (before.probabilities[k] > before.probabilities[best]) best = k;
  CHECK(index_of(before.state) == best);
}

TEST_CASE("single-class corpus drives the loss towards zero") {
  ActionTrainConfig cfg;
  cfg.model = small_config();
  cfg.steps = 300;
  cfg.learning_rate = 3e-3;
  Rng data_rng(4);
  std::vector<LabeledSequence> corpus;
  for (int s = 0; s < 3; ++s) {
    LabeledSequence seq;
    for (int f = 0; f < 8; ++f) {
      seq.inputs.push_back(random_vector(cfg.model.dim, data_rng));
      seq.labels.push_back(ActionState::Stopping);
    }
    corpus.push_back(std::move(seq));
  }
  Rng rng(1);
  const auto r = train_action(corpus, cfg, rng);
  CHECK(r.loss_history.back() < 0.05);
  for (const auto& p : detect_stream(r.model, corpus[0].inputs)) CHECK(p.state == ActionState::Stopping);
}
