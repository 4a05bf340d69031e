#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "scalenet/image.hpp"
#include "scalenet/models.hpp"
#include "scalenet/training.hpp"
#include "scalenet/transforms.hpp"

namespace scalenet {

// Every source image rotated by all four quarter turns. Samples are ordered
// label-major: all sources at y=0, then all at y=1, and so on.
struct RotationBatch {
  ImageSet images;
  std::vector<int> labels;
  std::vector<int> source_ids;

  std::size_t size() const { return images.size(); }
};

RotationBatch make_rotation_batch(const ImageSet& sources);

inline constexpr double kLogClampEps = 1e-12;

/// Mean over sources of (1/K) sum_y -log p(rotation y of the source is
/// classified as y). `probs` is row-major (rows x K); every row carries its
/// label. Probabilities are clamped below at 1e-12; a probability <= 0 at a
/// labelled index is rejected.
double rotation_loss(std::span<const double> probs, std::span<const int> labels, int num_classes = kNumRotations);

/// Same objective evaluated from logits, differentiable with a hand-written
/// backward pass: d loss / d logits = (softmax - onehot) / rows, zeroed for
/// rows whose log-probability sits on the clamp.
torch::Tensor rotation_loss_from_logits(const torch::Tensor& logits, const torch::Tensor& labels);

struct OptimizerConfig {
  double momentum = 0.9;
  double weight_decay = 5e-4;
  // Source images per optimizer step (each yields four rotated samples)...
  int batch_images = 128;
  // ...unless set, in which case batch_images counts rotated samples.
  bool count_expanded = false;

  int sources_per_step() const;
  void validate() const;
};

struct ScaleStage {
  double alpha = 1.0;
  LrLadder lr;
  int epochs = 100;
};

struct ScaleSchedule {
  std::vector<ScaleStage> stages;
  OptimizerConfig optimizer;

  // Alphas strictly increasing and ending at 1; initial lr non-increasing.
  void validate() const;
  std::string digest() const;
};

// Parallel per-stage lists; a single epochs entry applies to every stage.
// Milestones default to 30/60/80 with decay factor 5.
ScaleSchedule make_schedule(const std::vector<double>& alphas, const std::vector<double>& lrs,
                            const std::vector<int>& epochs, const OptimizerConfig& optimizer = {});

struct StageResult {
  ModelCheckpoint checkpoint;
  std::vector<EpochMetrics> metrics;
};

/// SGD on rotation_loss over label-major rotation batches. `dataset` must be
/// already resized to stage.alpha and standardized.
StageResult train_pretext_stage(Backbone& model, const ImageSet& dataset, const ScaleStage& stage,
                                const OptimizerConfig& optimizer, std::uint64_t seed,
                                const TrainHooks& hooks = {}, int stage_index = 0,
                                const std::string& schedule_digest = {});

struct ChainResult {
  std::vector<ModelCheckpoint> checkpoints;
  std::vector<EpochMetrics> metrics;
  std::vector<ChannelStats> stage_stats;
};

/// Resize -> standardize -> build (first stage) or transfer conv trunk and
/// 4-way head (later stages) -> train, for each stage in order. A single
/// alpha = 1 stage is the RotNet baseline.
ChainResult train_scalenet_chain(const BackboneSpec& spec, const ScaleSchedule& schedule,
                                 const ImageSet& dataset, std::uint64_t seed, const TrainHooks& hooks = {});

/// Fraction of the 4N rotated samples of `dataset` (already standardized)
/// whose rotation the model predicts correctly.
double rotation_accuracy(Backbone& model, const ImageSet& dataset, int batch_images = 256);

}  // namespace scalenet
