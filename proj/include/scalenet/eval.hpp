#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "scalenet/checkpoint.hpp"
#include "scalenet/image.hpp"
#include "scalenet/models.hpp"
#include "scalenet/training.hpp"

namespace scalenet {

enum class Protocol { finetune, linear_probe };

std::string to_string(Protocol p);

struct EvalReport {
  Protocol protocol = Protocol::finetune;
  std::optional<std::string> probe_block;
  double accuracy = 0.0;
  std::vector<double> per_class_acc;
  std::vector<std::int64_t> class_counts;
  std::string config_digest;
  std::uint64_t seed = 0;
  std::int64_t n_train = 0;

  // accuracy must equal the count-weighted mean of per_class_acc.
  void validate() const;
  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

struct DataSubset {
  std::vector<std::size_t> indices;  // sorted, unique
  std::uint64_t seed = 0;
  std::size_t n = 0;
};

/// Uniform sample of n indices out of [0, dataset_size) without replacement.
DataSubset subsample(std::size_t dataset_size, std::size_t n, std::uint64_t seed);

LabeledImages take(const LabeledImages& data, const DataSubset& subset);

struct DownstreamConfig {
  LrLadder lr;
  int epochs = 30;
  int batch_size = 128;
  double momentum = 0.9;
  double weight_decay = 5e-4;

  std::string digest() const;
};

// Fine-tuning ladder: 0.001, /5 at 80, 160, 200.
DownstreamConfig finetune_defaults();
// Logistic-regression probe ladder: 0.01, /5 at 5, 15, 25; 30 epochs.
DownstreamConfig probe_defaults();

/// Copies the conv trunk, draws a fresh num_classes head and fine-tunes every
/// layer. Both splits are raw-range; the train split's channel statistics
/// standardize both. Reports top-1 accuracy on `test`; the tuned weights are
/// stored in `tuned` when given.
EvalReport finetune_classifier(const ModelCheckpoint& ckpt, const LabeledImages& train, const LabeledImages& test,
                               const DownstreamConfig& config, std::uint64_t seed,
                               ModelCheckpoint* tuned = nullptr);

/// Multinomial logistic regression on frozen, spatially average-pooled
/// activations of `block` (pooled to at most 2048 values per image).
EvalReport linear_probe(const ModelCheckpoint& ckpt, const LabeledImages& train, const LabeledImages& test,
                        const std::string& block, const DownstreamConfig& config, std::uint64_t seed);

/// One linear_probe per conv block, shallow to deep.
std::vector<EvalReport> probe_all_blocks(const ModelCheckpoint& ckpt, const LabeledImages& train,
                                         const LabeledImages& test, const DownstreamConfig& config,
                                         std::uint64_t seed);

// Side length p of the p x p average pool applied to a block with `channels`
// channels and `spatial` x `spatial` maps.
int probe_pool_size(int channels, int spatial);

struct Heatmap {
  int height = 0;
  int width = 0;
  std::vector<double> values;  // row-major, in [0, 1]

  double at(int r, int c) const { return values[static_cast<std::size_t>(r * width + c)]; }
};

/// Gradient-weighted class activation map at `block`: channel weights are the
/// spatial means of d logit[class_idx] / d activation, the weighted sum is
/// rectified, bilinearly upsampled to the input size and divided by its max
/// (all zeros when the max is not positive). `img` must be standardized.
Heatmap gradcam(Backbone& model, const ImageTensor& img, const std::string& block, int class_idx);

// 8-bit grayscale PNG plus `<stem>.json` naming model, block and class.
void write_heatmap(const Heatmap& map, const std::filesystem::path& png_path, const nlohmann::json& sidecar);

}  // namespace scalenet
