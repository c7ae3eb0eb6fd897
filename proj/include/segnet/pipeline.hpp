#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "segnet/augment.hpp"
#include "segnet/data.hpp"
#include "segnet/metrics.hpp"
#include "segnet/model.hpp"

namespace segnet::pipeline {

enum class LossKind { Bce, BcePlusDice };

std::string to_string(LossKind loss);
LossKind parse_loss(const std::string& text);

struct DataConfig {
  data::SplitRatios ratios;
  std::uint64_t split_seed = 0;

  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct TrainConfig {
  model::ModelConfig model;
  augment::AugConfig aug;
  DataConfig data;
  std::size_t epochs = 30;
  std::size_t batch_size = 4;
  AdamHyper adam;  // adam.lr is the learning rate
  LossKind loss = LossKind::Bce;
  std::uint64_t seed = 0;      // parameter init and batch order
  std::string checkpoint;      // empty: keep the checkpoint in memory only
  std::size_t eval_every = 1;  // validation period in epochs; the last epoch is always scored
  double threshold = 0.5;
  metrics::Hd95Mode hd95_mode = metrics::Hd95Mode::MaxOfDirected;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Raised for failures after validation, e.g. a non-finite loss.
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Losses

/// Mean per-channel binary cross-entropy against the packed region masks.
template <typename T>
ad::NodeId bce_loss(ad::Graph<T>& g, ad::NodeId pred, const RegionMaskSet& truth);

template <typename T>
ad::NodeId soft_dice_loss(ad::Graph<T>& g, ad::NodeId pred, const RegionMaskSet& truth);

/// bce, or bce + soft dice with equal weight.
template <typename T>
ad::NodeId training_loss(ad::Graph<T>& g, ad::NodeId pred, const BasicTensor<T>& target, LossKind kind);

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  model::ModelConfig config;
  model::NamedParams<float> params;
  /// Provenance: training seed, data split, selected epoch. Stored inside the
  /// container as the u8 entry "meta.json".
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
};

inline constexpr const char* kMetaEntry = "meta.json";

std::string encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// The split recorded in a checkpoint, recomputed over `ids`.
data::DatasetSplit checkpoint_split(const Checkpoint& checkpoint, const std::vector<std::string>& ids);

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  std::size_t steps = 0;  // optimizer steps so far
  double train_loss = 0.0;
  std::optional<std::array<double, 3>> val_dsc;  // WT, TC, ET
  bool best = false;
  double seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;

  /// Wall time is excluded by default so that reruns serialize identically.
  nlohmann::ordered_json to_json(bool include_timing = false) const;
};

struct TrainResult {
  Checkpoint checkpoint;  // best by mean val DSC; the final state without a val split
  TrainHistory history;
  std::size_t best_epoch = 0;
  std::size_t steps = 0;
};

using ProgressFn = std::function<void(const EpochRecord&)>;

/// Trains on split.train and scores split.val. Sample k of the dataset is
/// augmented in epoch e with derive_seed(aug.seed, k, e). When
/// config.checkpoint is set, the best checkpoint is rewritten on every
/// improvement, so a later failure leaves the last good one on disk.
TrainResult train(const TrainConfig& config, const data::Dataset& dataset, const data::DatasetSplit& split,
                  const ProgressFn& progress = {});

/// Splits the dataset with config.data, then trains.
TrainResult train(const TrainConfig& config, const data::Dataset& dataset, const ProgressFn& progress = {});

// ---------------------------------------------------------------------------
// Evaluation and prediction

metrics::MetricsReport evaluate(const model::ModelConfig& config, const model::NamedParams<float>& params,
                                const data::Dataset& dataset, const std::vector<std::string>& ids,
                                double threshold = 0.5,
                                metrics::Hd95Mode mode = metrics::Hd95Mode::MaxOfDirected);

/// Throws ShapeError ("architecture mismatch") when the parameters do not
/// fit the checkpoint's configuration or the data does not fit the model.
metrics::MetricsReport evaluate(const Checkpoint& checkpoint, const data::Dataset& dataset,
                                const std::vector<std::string>& ids, double threshold = 0.5,
                                metrics::Hd95Mode mode = metrics::Hd95Mode::MaxOfDirected);

/// TC := TC ∧ WT, then ET := ET ∧ TC, so the result is always nested.
RegionMaskSet enforce_nesting(RegionMaskSet masks);

struct Prediction {
  Tensor probabilities;  // (S, S, 3)
  RegionMaskSet masks;
};

Prediction predict(const Checkpoint& checkpoint, const Tensor& image, double threshold = 0.5,
                   bool nesting = false);

// ---------------------------------------------------------------------------
// Ablation

struct VariantResult {
  model::Variant variant = model::Variant::Enhanced;
  std::size_t parameter_count = 0;
  TrainResult training;
  metrics::MetricsReport val;
  metrics::MetricsReport test;
};

struct AblationResult {
  data::DatasetSplit split;
  std::vector<VariantResult> variants;  // baseline, enhanced

  nlohmann::ordered_json to_json() const;
  /// Validation-split comparison table, one row per variant.
  std::string table() const;
};

/// Trains both variants from the same config, seeds and split.
AblationResult ablate(const TrainConfig& config, const data::Dataset& dataset, const ProgressFn& progress = {});

// ---------------------------------------------------------------------------
// Gradient checking

struct GradcheckOptions {
  double epsilon = 1e-5;
  std::size_t coords_per_tensor = 20;
  std::uint64_t seed = 0;
  /// Denominator floor for the relative error |a - n| / max(|a|, |n|, floor),
  /// so coordinates with vanishing gradient are judged on absolute error.
  double floor = 1e-6;
  /// A coordinate whose ±epsilon evaluations change the ReLU/max-pool
  /// pattern straddles a kink and is replaced by another draw, up to this
  /// many times per tensor.
  std::size_t max_resamples = 200;
};

struct TensorCheck {
  std::size_t checked = 0;
  std::size_t skipped = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
};

struct GradcheckResult {
  std::map<std::string, TensorCheck> tensors;
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t checked = 0;
  std::size_t skipped = 0;

  bool passed(double tolerance = 1e-5) const { return checked > 0 && max_rel_error < tolerance; }
};

using LossBuilder = std::function<ad::NodeId(ad::Graph<double>&, const NamedTensors<double>&)>;

/// Re-evaluates a built loss node in extended precision for the
/// finite-difference quotient. A step of 1e-5 moves a loss near 1 by about
/// 1e-12 when gradients are around 1e-7, so rounding the loss itself to a
/// double would cost several significant digits.
using PreciseLoss = std::function<long double(const ad::Graph<double>&, ad::NodeId)>;

/// Central-difference check of every tensor in `params` against backward().
/// Tensors of up to coords_per_tensor elements are checked exhaustively.
GradcheckResult check_gradients(const LossBuilder& loss, NamedTensors<double>& params,
                                const GradcheckOptions& options = {}, const PreciseLoss& precise = {});

/// Mean binary cross-entropy of `pred` against `target` in long double, with
/// the same clamping as bce_loss.
long double precise_bce(const Tensor64& pred, const Tensor64& target);

/// bce_loss ∘ model_forward in 64-bit, parameters from init_params(config,
/// options.seed).
GradcheckResult gradcheck(const model::ModelConfig& config, const Sample& sample,
                          const GradcheckOptions& options = {});

}  // namespace segnet::pipeline
