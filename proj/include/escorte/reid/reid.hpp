#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "escorte/config.hpp"
#include "escorte/num/checkpoint.hpp"
#include "escorte/num/params.hpp"
#include "escorte/num/rng.hpp"
#include "escorte/num/tape.hpp"

namespace escorte::reid {

using Vector = std::vector<double>;

inline constexpr double kDefaultThreshold = 1.5;
inline constexpr double kDefaultMargin = 1.0;

struct EmbeddingDims {
  std::size_t input = 64;
  std::size_t hidden = 128;
  std::size_t embed = 64;

  friend bool operator==(const EmbeddingDims&, const EmbeddingDims&) = default;
};

/// Two linear layers with a ReLU between them:
///   f(x) = relu(x W1 + b1) W2 + b2
/// with x a row vector, W1 input x hidden and W2 hidden x embed.
class EmbeddingModel {
 public:
  enum Param : std::size_t { kW1 = 0, kB1, kW2, kB2 };

  /// Weights drawn U(+-1/sqrt(fan_in)); biases zero.
  static EmbeddingModel initialize(const EmbeddingDims& dims, num::Rng& rng);
  /// All-zero weights and biases.
  static EmbeddingModel zeros(const EmbeddingDims& dims);
  /// Throws ConfigError if the checkpoint is not a well-formed "reid" model.
  static EmbeddingModel from_checkpoint(const num::Checkpoint& ckpt);
  num::Checkpoint to_checkpoint() const;

  const EmbeddingDims& dims() const noexcept { return dims_; }
  num::ParamStore& params() noexcept { return params_; }
  const num::ParamStore& params() const noexcept { return params_; }
  std::uint64_t fingerprint() const { return params_.fingerprint(); }

  /// Throws ShapeError if `feature` does not have dims().input entries.
  Vector embed(std::span<const double> feature) const;
  /// Embeds each row of an n x input matrix.
  num::Matrix embed_rows(const num::Matrix& features) const;

  /// Records the forward pass for an n x input batch on a tape. `bound` must
  /// come from params().bind() on the same tape.
  num::Var forward(num::Var x, std::span<const num::Var> bound) const;

 private:
  explicit EmbeddingModel(const EmbeddingDims& dims);

  EmbeddingDims dims_;
  num::ParamStore params_;
};

/// max{ ||a - p|| - ||a - n|| + margin, 0 }.
double triplet_loss(std::span<const double> a, std::span<const double> p, std::span<const double> n,
                    double margin);

/// Row-wise triplet loss averaged over the rows of equal-shaped a, p, n.
num::Var triplet_loss(num::Var a, num::Var p, num::Var n, double margin);

struct TripletBatch {
  std::vector<Vector> anchors;
  std::vector<Vector> positives;
  std::vector<Vector> negatives;
  double margin = kDefaultMargin;

  std::size_t size() const noexcept { return anchors.size(); }
};

/// Mean triplet loss of a batch computed on raw vectors (no model).
double batch_triplet_loss(const TripletBatch& batch);

/// Observations of one identity plus features known to belong to other identities.
struct TripletPool {
  struct Observation {
    std::size_t frame = 0;
    Vector feature;
  };
  std::string identity;
  std::vector<Observation> positives;
  std::vector<Vector> negatives;
};

struct LabeledFeature {
  std::string identity;
  std::size_t frame = 0;
  Vector feature;
};

/// One pool per identity; every other identity's observations serve as its negatives.
/// Throws ConfigError unless there are >= 2 identities with >= 2 observations each.
std::vector<TripletPool> pools_from_labeled(const std::vector<LabeledFeature>& observations);

/// Uniformly samples `batch` triplets: a pool with usable data, anchor and
/// positive from two different frames of that pool, negative from its negatives.
/// Throws ConfigError when no pool can produce a triplet.
TripletBatch sample_triplets(const std::vector<TripletPool>& pools, num::Rng& rng,
                             std::size_t batch, double margin = kDefaultMargin);

struct ReferenceAnchor {
  Vector embedding;
  std::size_t source_frame = 0;
  std::uint64_t model_fingerprint = 0;
};

ReferenceAnchor make_reference(const EmbeddingModel& model, std::span<const double> feature,
                               std::size_t frame);

struct MatchResult {
  /// Index of the matched detection; empty when the subject is absent.
  std::optional<std::size_t> subject;
  /// Smallest candidate distance (+inf with no candidates).
  double best_distance = 0.0;

  bool found() const noexcept { return subject.has_value(); }
};

/// Nearest candidate by L2 distance if it lies within `threshold`; ties go to
/// the lowest index. An empty candidate list yields Absent.
MatchResult match_subject(const ReferenceAnchor& reference, const std::vector<Vector>& candidates,
                          double threshold = kDefaultThreshold);

/// Embeds raw detection features with `model` and matches them. Throws
/// ContractError if the anchor was produced by a different model.
MatchResult match_features(const ReferenceAnchor& reference, const EmbeddingModel& model,
                           const std::vector<Vector>& features,
                           double threshold = kDefaultThreshold);

struct ReidTrainConfig {
  EmbeddingDims dims;
  double margin = kDefaultMargin;
  double learning_rate = 1e-3;
  std::size_t steps = 1000;
  std::size_t batch = 32;
  std::uint64_t seed = 1;
  double threshold = kDefaultThreshold;

  /// Keys: input_dim, hidden_dim, embed_dim, margin, lr, steps, batch, seed, threshold.
  static ReidTrainConfig from_config(const KeyValueConfig& cfg);
};

struct ReidTrainResult {
  EmbeddingModel model;
  /// Mean batch loss before each update.
  std::vector<double> loss_history;
};

/// Adam on the mean triplet loss of uniformly sampled batches. Throws
/// NumericError if the loss goes non-finite, ConfigError on dimension mismatch.
ReidTrainResult train_reid(const std::vector<TripletPool>& pools, const ReidTrainConfig& config,
                           num::Rng& rng);

/// Continues training from an existing model (used to verify clamp behaviour).
ReidTrainResult train_reid(EmbeddingModel model, const std::vector<TripletPool>& pools,
                           const ReidTrainConfig& config, num::Rng& rng);

}  // namespace escorte::reid
