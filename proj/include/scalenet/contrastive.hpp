#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "scalenet/image.hpp"
#include "scalenet/models.hpp"
#include "scalenet/pretext.hpp"
#include "scalenet/training.hpp"
#include "scalenet/transforms.hpp"

namespace scalenet {

enum class Augmentation { inception_crop, color_distortion };

struct ContrastiveConfig {
  double temperature = 0.5;
  int batch_pairs = 128;
  int proj_dim = 128;
  std::vector<Augmentation> augmentations{Augmentation::inception_crop, Augmentation::color_distortion};
  double lr = 1e-3;
  double color_strength = 0.5;
  // Area fraction range of the random resized crop.
  double crop_min_scale = 0.2;

  void validate() const;
};

/// Two independent augmented views of a raw-range RGB image. Deterministic in
/// seed. Views keep the input shape.
std::pair<ImageTensor, ImageTensor> augment_pair(const ImageTensor& img, const ContrastiveConfig& config,
                                                 std::uint64_t seed);

// Individual augmentation primitives, exposed for testing.
ImageTensor random_resized_crop(const ImageTensor& img, double min_scale, std::uint64_t seed);
ImageTensor color_jitter(const ImageTensor& img, double strength, std::uint64_t seed);

double cosine_sim(std::span<const double> u, std::span<const double> v);

// 2N projections, row-major (2N x dim). Rows 2k and 2k+1 are the two views
// of source k.
struct ProjectionBatch {
  int rows = 0;
  int dim = 0;
  std::vector<double> z;

  std::span<const double> row(int i) const {
    return {z.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
  }
  void validate() const;
};

/// Mean over all 2N anchors i of
///   -log( exp(sim(z_i, z_pos)/tau) / sum_{k != i} exp(sim(z_i, z_k)/tau) ).
/// Only self-similarity is excluded from the denominator; the positive stays.
double nt_xent_loss(const ProjectionBatch& batch, double temperature);

/// Differentiable counterpart over a (2N, dim) tensor with an explicit
/// backward pass through the cosine normalisation.
torch::Tensor nt_xent_loss(const torch::Tensor& z, double temperature);

// Two-layer MLP with a ReLU hidden layer, hidden width = input width.
class ProjectionHeadImpl : public torch::nn::Module {
 public:
  ProjectionHeadImpl(int in_dim, int out_dim);
  torch::Tensor forward(const torch::Tensor& x);
  std::vector<std::pair<std::string, torch::Tensor>> named_state();

 private:
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(ProjectionHead);

struct ContrastiveModel {
  Backbone encoder{nullptr};
  ProjectionHead projection{nullptr};
};

ContrastiveModel build_contrastive_model(const BackboneSpec& spec, const ContrastiveConfig& config,
                                         std::uint64_t seed);

// Encoder trunk in conv_weights, projection head in head_weights.
ModelCheckpoint extract_contrastive_checkpoint(ContrastiveModel& model, CheckpointMeta meta);

// Copies encoder trunk and projection head from a contrastive checkpoint.
ContrastiveModel transfer_contrastive(const ModelCheckpoint& src, const BackboneSpec& spec,
                                      const ContrastiveConfig& config, std::uint64_t seed);

/// Adam on nt_xent_loss over `dataset` (raw range, already at the stage's
/// scale). Views are standardized with `stats` after augmentation.
StageResult train_simclr_stage(ContrastiveModel& model, const ImageSet& dataset, const ChannelStats& stats,
                               const ContrastiveConfig& config, const ScaleStage& stage, std::uint64_t seed,
                               const TrainHooks& hooks = {}, int stage_index = 0,
                               const std::string& schedule_digest = {});

/// Stage-wise contrastive training with encoder and projection head carried
/// over between stages. Stage learning rates come from the schedule.
ChainResult train_multiscale_simclr(const BackboneSpec& spec, const ScaleSchedule& schedule, const ImageSet& dataset,
                                    const ContrastiveConfig& config, std::uint64_t seed,
                                    const TrainHooks& hooks = {});

}  // namespace scalenet
