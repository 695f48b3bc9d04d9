#pragma once

#include <array>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <mutex>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "escorte/config.hpp"
#include "escorte/num/checkpoint.hpp"
#include "escorte/num/params.hpp"
#include "escorte/num/rng.hpp"
#include "escorte/num/tape.hpp"

namespace escorte::action {

using Vector = std::vector<double>;

enum class ActionState : std::uint8_t { Following = 0, Lagging = 1, Stopping = 2 };

inline constexpr std::size_t kNumClasses = 3;
inline constexpr std::size_t kNumLayers = 4;
inline constexpr std::size_t kDefaultWindow = 60;
inline constexpr std::array<ActionState, kNumClasses> kAllStates{
    ActionState::Following, ActionState::Lagging, ActionState::Stopping};

/// "following" / "lagging" / "stopping".
std::string_view to_string(ActionState s);
/// Inverse of to_string; throws ConfigError for anything else.
ActionState parse_action(std::string_view s);
inline std::size_t index_of(ActionState s) { return static_cast<std::size_t>(s); }

/// Sliding window over the last `capacity` subject vectors. Frames without a
/// subject are stored as zero vectors with a cleared presence bit.
class WindowBuffer {
 public:
  WindowBuffer(std::size_t capacity, std::size_t dim);

  /// Throws ShapeError if the vector length differs from dim().
  void push(std::span<const double> subject_vector);
  void push_absent();
  /// Pushes the vector, or an absent entry for nullopt.
  void push_frame(const std::optional<Vector>& subject_vector);

  std::size_t size() const noexcept { return count_; }
  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t dim() const noexcept { return dim_; }
  bool full() const noexcept { return count_ == capacity_; }

  /// i = 0 is the oldest entry.
  std::span<const double> entry(std::size_t i) const;
  bool present(std::size_t i) const;

  /// Entries stacked oldest-first into a size() x dim() matrix.
  num::Matrix matrix() const;
  /// Presence bits, oldest-first.
  std::vector<std::uint8_t> mask() const;

 private:
  std::size_t slot(std::size_t i) const { return (head_ + i) % capacity_; }

  std::size_t capacity_;
  std::size_t dim_;
  std::size_t head_ = 0;
  std::size_t count_ = 0;
  std::vector<double> data_;
  std::vector<std::uint8_t> present_;
};

/// Output of the attention pooling step: B = H A, C = softmax(B), u = H^T C.
struct PoolResult {
  num::Matrix scores;   // B, w x 1
  num::Matrix weights;  // C, w x 1
  num::Matrix pooled;   // u, d x 1
};

/// Throws ShapeError unless H is w x d and A is d x 1.
PoolResult attention_pool(const num::Matrix& h, const num::Matrix& a);
/// Tape version; returns u as a 1 x d row.
num::Var attention_pool(num::Var h, num::Var a);

struct ActionPrediction {
  std::array<double, kNumClasses> probabilities{};
  ActionState state = ActionState::Following;
  /// Index of the last frame in the window.
  std::size_t frame = 0;
};

/// Where the buffered subject vectors come from.
enum class InputMode : std::uint8_t { Embedding = 0, Raw = 1 };

struct ActionConfig {
  std::size_t window = kDefaultWindow;
  std::size_t dim = 68;
  std::size_t heads = 4;
  /// Zero selects 4 * dim.
  std::size_t ff_width = 0;
  InputMode input = InputMode::Embedding;

  std::size_t feed_forward() const { return ff_width == 0 ? 4 * dim : ff_width; }
  /// Throws ConfigError on zero sizes or dim not divisible by heads.
  void validate() const;
  friend bool operator==(const ActionConfig&, const ActionConfig&) = default;
};

/// Four pre-norm transformer encoder layers, attention pooling, a ReLU
/// pooling layer and a 3-way classifier.
class ActionModel {
 public:
  static ActionModel initialize(const ActionConfig& config, num::Rng& rng);
  /// Zero weights and offsets, unit normalization gains.
  static ActionModel zeros(const ActionConfig& config);
  static ActionModel from_checkpoint(const num::Checkpoint& ckpt);
  num::Checkpoint to_checkpoint() const;

  const ActionConfig& config() const noexcept { return config_; }
  num::ParamStore& params() noexcept { return params_; }
  const num::ParamStore& params() const noexcept { return params_; }
  /// Fixed sinusoidal table, window x dim.
  const num::Matrix& positional_encoding() const noexcept { return positional_; }

  /// Index of a named parameter; layer-local names are "l<k>.<name>".
  std::size_t param_index(std::string_view name) const { return params_.index(name); }

  /// Transformer stack on a window x dim input with a presence mask. Returns H.
  num::Var encode(num::Tape& tape, const num::Matrix& inputs, std::span<const std::uint8_t> mask,
                  std::span<const num::Var> bound) const;
  /// Pooling layer and classifier applied to u (1 x dim); returns 1 x 3 logits.
  num::Var head(num::Var pooled, std::span<const num::Var> bound) const;
  /// Full window -> logits.
  num::Var logits(num::Tape& tape, const num::Matrix& inputs, std::span<const std::uint8_t> mask,
                  std::span<const num::Var> bound) const;

  /// H for a full buffer; nullopt while the buffer is still filling.
  std::optional<num::Matrix> transformer_forward(const WindowBuffer& window) const;
  /// Prediction for a full buffer; nullopt while the buffer is still filling.
  std::optional<ActionPrediction> predict(const WindowBuffer& window, std::size_t frame) const;

 private:
  explicit ActionModel(const ActionConfig& config);

  ActionConfig config_;
  num::ParamStore params_;
  num::Matrix positional_;
  std::size_t head_offset_ = 0;
};

/// softmax(classifier(relu(pool(u)))). Throws ShapeError if u has the wrong length.
ActionPrediction classify(const ActionModel& model, std::span<const double> pooled);

/// -log p[label] with p clamped to [1e-12, 1 - 1e-12].
double cross_entropy(std::span<const double> probabilities, ActionState label);
/// Mean over a batch.
double cross_entropy(const std::vector<ActionPrediction>& predictions,
                     const std::vector<ActionState>& labels);

/// Stride-1 online detection: one prediction per frame from frame window-1 on.
std::vector<ActionPrediction> detect_stream(const ActionModel& model,
                                            const std::vector<std::optional<Vector>>& stream);

/// Per-frame subject vectors (nullopt when unseen) with ground-truth labels.
struct LabeledSequence {
  std::vector<std::optional<Vector>> inputs;
  std::vector<ActionState> labels;
};

struct ActionTrainConfig {
  ActionConfig model;
  double learning_rate = 1e-3;
  std::size_t steps = 1000;
  std::size_t batch = 8;
  std::uint64_t seed = 1;

  /// Keys: w, d, heads, ff_width, input, lr, steps, batch, seed.
  static ActionTrainConfig from_config(const KeyValueConfig& cfg);
};

struct ActionTrainResult {
  ActionModel model;
  std::vector<double> loss_history;
};

/// Cross-entropy training on uniformly sampled windows labelled by their
/// last frame. Throws ConfigError when no sequence spans a full window and
/// NumericError on a non-finite loss.
ActionTrainResult train_action(const std::vector<LabeledSequence>& corpus,
                               const ActionTrainConfig& config, num::Rng& rng);

/// Single-slot handoff between a frame-ingestion thread and an inference
/// thread. Posting replaces any window still waiting, so inference always
/// sees the newest one.
class LatestWindowSlot {
 public:
  struct Item {
    num::Matrix inputs;
    std::vector<std::uint8_t> mask;
    std::size_t frame = 0;
  };

  /// Returns true if an unconsumed window was overwritten.
  bool post(Item item);
  /// Blocks until a window is available or the slot is closed (then nullopt).
  std::optional<Item> take();
  void close();
  std::size_t dropped() const;

 private:
  mutable std::mutex mutex_;
  std::condition_variable ready_;
  std::optional<Item> pending_;
  bool closed_ = false;
  std::size_t dropped_ = 0;
};

}  // namespace escorte::action
