#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <vector>

#include "scalenet/checkpoint.hpp"
#include "scalenet/error.hpp"

namespace scalenet {

// Block identifiers accepted by probes and freezing, shallow to deep.
std::vector<std::string> default_block_names(Arch arch);
int default_width(Arch arch);
inline const std::string kAllBlocks = "ALL";

struct BackboneSpec {
  Arch arch = Arch::small_convnet;
  int input_h = 32;
  int input_w = 32;
  int head_out = 4;
  int width = 0;  // 0 selects the arch default

  int effective_width() const { return width > 0 ? width : default_width(arch); }
  std::vector<std::string> conv_block_names() const { return default_block_names(arch); }
  void validate() const;
};

// Conv trunk (global-average-pooled, so any input >= 8x8 works) plus a linear
// head producing head_out logits.
class BackboneImpl : public torch::nn::Module {
 public:
  explicit BackboneImpl(const BackboneSpec& spec);

  torch::Tensor forward(const torch::Tensor& x);
  // Pooled trunk output, shape (batch, feature_dim).
  torch::Tensor features(const torch::Tensor& x);
  // Activations of every block up to and including `last_block`.
  std::vector<torch::Tensor> block_activations(const torch::Tensor& x, int last_block);

  const BackboneSpec& spec() const { return spec_; }
  const std::vector<std::string>& block_names() const { return block_names_; }
  int block_index(const std::string& name) const;
  int feature_dim() const { return feature_dim_; }

  torch::nn::Linear& head() { return head_; }

  // Named trunk parameters and BN running statistics, in registration order.
  std::vector<std::pair<std::string, torch::Tensor>> trunk_state();
  std::vector<std::pair<std::string, torch::Tensor>> head_state();

  // Number of leading blocks (stem included with the first) held frozen.
  int frozen_blocks() const { return frozen_blocks_; }
  void set_frozen_blocks(int n);

  // Frozen blocks stay in eval mode so BN statistics are not updated.
  void train(bool on = true) override;

  std::vector<torch::Tensor> trainable_parameters();

 private:
  BackboneSpec spec_;
  std::vector<std::string> block_names_;
  torch::nn::Sequential stem_{nullptr};
  std::vector<torch::nn::Sequential> blocks_;
  torch::nn::Linear head_{nullptr};
  int feature_dim_ = 0;
  int frozen_blocks_ = 0;
};
TORCH_MODULE(Backbone);

// Seeds torch's global generator, then constructs the model.
Backbone build_backbone(const BackboneSpec& spec, std::uint64_t seed);

// Raised when a logit row contains NaN or Inf.
class NonFiniteLogitsError : public NumericError {
 public:
  NonFiniteLogitsError(std::int64_t batch_index, const std::string& what)
      : NumericError(what), batch_index_(batch_index) {}
  std::int64_t batch_index() const { return batch_index_; }

 private:
  std::int64_t batch_index_;
};

/// Row-wise softmax in double precision; rejects non-finite rows.
torch::Tensor softmax_rows(const torch::Tensor& logits);

/// Eval-mode forward followed by softmax_rows.
torch::Tensor predict_distribution(Backbone& model, const torch::Tensor& batch);

ModelCheckpoint extract_checkpoint(Backbone& model, CheckpointMeta meta);

/// Builds a model for dst_spec and copies every conv-trunk array bitwise from
/// src. The head is either re-drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))
/// under seed, or copied, in which case its shape must match.
Backbone transfer_weights(const ModelCheckpoint& src, const BackboneSpec& dst_spec,
                          bool reinit_head, std::uint64_t seed);

/// Fresh uniform fan-in draw for a linear layer.
void reinit_linear(torch::nn::Linear& layer, std::uint64_t seed);

/// Disables gradients for every block up to `upto_block` (inclusive), or for
/// the whole trunk when upto_block == "ALL".
Backbone& freeze_conv(Backbone& model, const std::string& upto_block);
Backbone& unfreeze_all(Backbone& model);

// Weight-array conversions shared with the contrastive module.
WeightArray to_weight_array(const torch::Tensor& t);
torch::Tensor to_tensor(const WeightArray& w);
void copy_into(torch::Tensor& dst, const WeightArray& src, const std::string& name);

}  // namespace scalenet
