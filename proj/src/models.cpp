#include "scalenet/models.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>
#include <sstream>

namespace scalenet {
namespace {

namespace nn = torch::nn;

constexpr int kMinInputSide = 8;  // three 2x downsamplings

nn::Sequential conv_bn_relu(int in, int out, int kernel, bool pool) {
  nn::Sequential seq;
  seq->push_back("conv", nn::Conv2d(nn::Conv2dOptions(in, out, kernel).padding(kernel / 2).bias(false)));
  seq->push_back("bn", nn::BatchNorm2d(out));
  seq->push_back("relu", nn::ReLU(nn::ReLUOptions(true)));
  if (pool) seq->push_back("pool", nn::MaxPool2d(nn::MaxPool2dOptions(2).stride(2)));
  return seq;
}

class BottleneckImpl : public nn::Module {
 public:
  BottleneckImpl(int in, int planes, int stride) {
    const int out = planes * 4;
    conv1_ = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in, planes, 1).bias(false)));
    bn1_ = register_module("bn1", nn::BatchNorm2d(planes));
    conv2_ = register_module(
        "conv2", nn::Conv2d(nn::Conv2dOptions(planes, planes, 3).stride(stride).padding(1).bias(false)));
    bn2_ = register_module("bn2", nn::BatchNorm2d(planes));
    conv3_ = register_module("conv3", nn::Conv2d(nn::Conv2dOptions(planes, out, 1).bias(false)));
    bn3_ = register_module("bn3", nn::BatchNorm2d(out));
    if (stride != 1 || in != out) {
      nn::Sequential down;
      down->push_back("conv", nn::Conv2d(nn::Conv2dOptions(in, out, 1).stride(stride).bias(false)));
      down->push_back("bn", nn::BatchNorm2d(out));
      downsample_ = register_module("downsample", down);
    }
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto y = torch::relu(bn1_(conv1_(x)));
    y = torch::relu(bn2_(conv2_(y)));
    y = bn3_(conv3_(y));
    auto skip = downsample_ ? downsample_->forward(x) : x;
    return torch::relu(y + skip);
  }

 private:
  nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, conv3_{nullptr};
  nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr}, bn3_{nullptr};
  nn::Sequential downsample_{nullptr};
};
TORCH_MODULE(Bottleneck);

nn::Sequential resnet_stage(int& in, int planes, int units, int stride) {
  nn::Sequential seq;
  for (int u = 0; u < units; ++u) {
    seq->push_back("unit" + std::to_string(u), Bottleneck(in, planes, u == 0 ? stride : 1));
    in = planes * 4;
  }
  return seq;
}

bool is_bn_counter(const std::string& name) {
  return name.size() >= 19 && name.compare(name.size() - 19, 19, "num_batches_tracked") == 0;
}

void append_state(const std::string& prefix, nn::Module& m,
                  std::vector<std::pair<std::string, torch::Tensor>>& out) {
  for (const auto& item : m.named_parameters(true)) out.emplace_back(prefix + "." + item.key(), item.value());
  for (const auto& item : m.named_buffers(true)) {
    if (!is_bn_counter(item.key())) out.emplace_back(prefix + "." + item.key(), item.value());
  }
}

std::string join(const std::vector<std::string>& names) {
  std::ostringstream os;
  for (std::size_t i = 0; i < names.size(); ++i) os << (i ? ", " : "") << names[i];
  return os.str();
}

std::string shape_string(c10::IntArrayRef shape) {
  std::ostringstream os;
  os << shape;
  return os.str();
}

}  // namespace

std::vector<std::string> default_block_names(Arch arch) {
  switch (arch) {
    case Arch::resnet50_style:
      return {"stage1", "stage2", "stage3", "stage4"};
    case Arch::alexnet_style:
      return {"ConvB1", "ConvB2", "ConvB3", "ConvB4", "ConvB5"};
    case Arch::small_convnet:
      return {"block1", "block2", "block3", "block4"};
  }
  return {};
}

int default_width(Arch arch) {
  switch (arch) {
    case Arch::resnet50_style:
      return 64;
    case Arch::alexnet_style:
      return 64;
    case Arch::small_convnet:
      return 32;
  }
  return 32;
}

void BackboneSpec::validate() const {
  if (head_out < 2) throw ArgumentError("head_out must be >= 2, got " + std::to_string(head_out));
  if (width < 0) throw ArgumentError("width must be non-negative");
  if (input_h < kMinInputSide || input_w < kMinInputSide) {
    throw ConstructionError(to_string(arch) + " downsamples 8x; input " + std::to_string(input_h) +
                            "x" + std::to_string(input_w) + " is smaller than 8x8");
  }
}

BackboneImpl::BackboneImpl(const BackboneSpec& spec) : spec_(spec), block_names_(spec.conv_block_names()) {
  spec_.validate();
  const int w = spec_.effective_width();
  switch (spec_.arch) {
    case Arch::small_convnet: {
      blocks_.push_back(conv_bn_relu(3, w, 3, true));
      blocks_.push_back(conv_bn_relu(w, 2 * w, 3, true));
      blocks_.push_back(conv_bn_relu(2 * w, 4 * w, 3, true));
      blocks_.push_back(conv_bn_relu(4 * w, 8 * w, 3, false));
      feature_dim_ = 8 * w;
      break;
    }
    case Arch::alexnet_style: {
      // 64-192-384-256-256 at the default width; 5x5 kernels in the first two
      // blocks stand in for the large-stride ImageNet stem on small inputs.
      blocks_.push_back(conv_bn_relu(3, w, 5, true));
      blocks_.push_back(conv_bn_relu(w, 3 * w, 5, true));
      blocks_.push_back(conv_bn_relu(3 * w, 6 * w, 3, false));
      blocks_.push_back(conv_bn_relu(6 * w, 4 * w, 3, false));
      blocks_.push_back(conv_bn_relu(4 * w, 4 * w, 3, true));
      feature_dim_ = 4 * w;
      break;
    }
    case Arch::resnet50_style: {
      stem_ = register_module("stem", conv_bn_relu(3, w, 3, false));
      int in = w;
      blocks_.push_back(resnet_stage(in, w, 3, 1));
      blocks_.push_back(resnet_stage(in, 2 * w, 4, 2));
      blocks_.push_back(resnet_stage(in, 4 * w, 6, 2));
      blocks_.push_back(resnet_stage(in, 8 * w, 3, 2));
      feature_dim_ = in;
      break;
    }
  }
  for (std::size_t i = 0; i < blocks_.size(); ++i) register_module(block_names_[i], blocks_[i]);
  head_ = register_module("head", nn::Linear(feature_dim_, spec_.head_out));
}

torch::Tensor BackboneImpl::features(const torch::Tensor& x) {
  auto y = stem_ ? stem_->forward(x) : x;
  for (auto& block : blocks_) y = block->forward(y);
  return torch::adaptive_avg_pool2d(y, {1, 1}).flatten(1);
}

torch::Tensor BackboneImpl::forward(const torch::Tensor& x) { return head_(features(x)); }

std::vector<torch::Tensor> BackboneImpl::block_activations(const torch::Tensor& x, int last_block) {
  std::vector<torch::Tensor> acts;
  auto y = stem_ ? stem_->forward(x) : x;
  for (int i = 0; i <= last_block && i < static_cast<int>(blocks_.size()); ++i) {
    y = blocks_[static_cast<std::size_t>(i)]->forward(y);
    acts.push_back(y);
  }
  return acts;
}

int BackboneImpl::block_index(const std::string& name) const {
  auto it = std::find(block_names_.begin(), block_names_.end(), name);
  if (it == block_names_.end()) {
    throw ArgumentError("unknown block '" + name + "' for " + to_string(spec_.arch) +
                        " (expected one of: " + join(block_names_) + ")");
  }
  return static_cast<int>(it - block_names_.begin());
}

std::vector<std::pair<std::string, torch::Tensor>> BackboneImpl::trunk_state() {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  if (stem_) append_state("stem", *stem_, out);
  for (std::size_t i = 0; i < blocks_.size(); ++i) append_state(block_names_[i], *blocks_[i], out);
  return out;
}

std::vector<std::pair<std::string, torch::Tensor>> BackboneImpl::head_state() {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  append_state("head", *head_, out);
  return out;
}

void BackboneImpl::set_frozen_blocks(int n) {
  frozen_blocks_ = std::clamp(n, 0, static_cast<int>(blocks_.size()));
  auto apply = [](nn::Module& m, bool frozen) {
    for (auto& p : m.parameters(true)) {
      p.set_requires_grad(!frozen);
      if (frozen) p.mutable_grad() = torch::Tensor();
    }
  };
  if (stem_) apply(*stem_, frozen_blocks_ > 0);
  for (int i = 0; i < static_cast<int>(blocks_.size()); ++i) apply(*blocks_[static_cast<std::size_t>(i)], i < frozen_blocks_);
  train(is_training());
}

void BackboneImpl::train(bool on) {
  nn::Module::train(on);
  if (frozen_blocks_ > 0 && stem_) stem_->eval();
  for (int i = 0; i < frozen_blocks_; ++i) blocks_[static_cast<std::size_t>(i)]->eval();
}

std::vector<torch::Tensor> BackboneImpl::trainable_parameters() {
  std::vector<torch::Tensor> out;
  for (auto& p : parameters(true))
    if (p.requires_grad()) out.push_back(p);
  return out;
}

Backbone build_backbone(const BackboneSpec& spec, std::uint64_t seed) {
  spec.validate();
  torch::manual_seed(seed);
  return Backbone(spec);
}

torch::Tensor softmax_rows(const torch::Tensor& logits) {
  if (logits.dim() != 2) throw ShapeError("softmax_rows expects a (batch, K) matrix");
  auto finite = torch::isfinite(logits).all(1);
  if (!finite.all().item<bool>()) {
    const auto bad = (finite == false).nonzero()[0][0].item<std::int64_t>();
    throw NonFiniteLogitsError(bad, "non-finite logits at batch index " + std::to_string(bad));
  }
  return torch::softmax(logits.to(torch::kFloat64), 1);
}

torch::Tensor predict_distribution(Backbone& model, const torch::Tensor& batch) {
  torch::NoGradGuard no_grad;
  const bool was_training = model->is_training();
  model->eval();
  auto logits = model->forward(batch);
  model->train(was_training);
  return softmax_rows(logits);
}

WeightArray to_weight_array(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat32).contiguous().cpu();
  WeightArray w;
  w.shape.assign(c.sizes().begin(), c.sizes().end());
  w.values.resize(static_cast<std::size_t>(c.numel()));
  std::memcpy(w.values.data(), c.data_ptr<float>(), w.values.size() * sizeof(float));
  return w;
}

torch::Tensor to_tensor(const WeightArray& w) {
  auto t = torch::empty(w.shape, torch::kFloat32);
  std::memcpy(t.data_ptr<float>(), w.values.data(), w.values.size() * sizeof(float));
  return t;
}

void copy_into(torch::Tensor& dst, const WeightArray& src, const std::string& name) {
  if (!std::equal(dst.sizes().begin(), dst.sizes().end(), src.shape.begin(), src.shape.end())) {
    std::ostringstream os;
    os << "shape mismatch for '" << name << "': model " << shape_string(dst.sizes()) << ", checkpoint [";
    for (std::size_t i = 0; i < src.shape.size(); ++i) os << (i ? ", " : "") << src.shape[i];
    os << "]";
    throw ShapeError(os.str());
  }
  torch::NoGradGuard no_grad;
  dst.copy_(to_tensor(src));
}

ModelCheckpoint extract_checkpoint(Backbone& model, CheckpointMeta meta) {
  ModelCheckpoint ckpt;
  for (auto& [name, t] : model->trunk_state()) ckpt.conv_weights.emplace(name, to_weight_array(t));
  for (auto& [name, t] : model->head_state()) ckpt.head_weights.emplace(name, to_weight_array(t));
  meta.arch = model->spec().arch;
  meta.width = model->spec().effective_width();
  meta.head_out = model->spec().head_out;
  meta.head_kind = HeadKind::linear;
  ckpt.meta = std::move(meta);
  return ckpt;
}

void reinit_linear(nn::Linear& layer, std::uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(layer->weight.size(1)));
  torch::NoGradGuard no_grad;
  layer->weight.uniform_(-bound, bound, gen);
  if (layer->bias.defined()) layer->bias.uniform_(-bound, bound, gen);
}

Backbone transfer_weights(const ModelCheckpoint& src, const BackboneSpec& dst_spec, bool reinit_head,
                          std::uint64_t seed) {
  src.validate();
  if (src.meta.arch != dst_spec.arch) {
    throw TransferError("cannot transfer " + to_string(src.meta.arch) + " checkpoint onto " +
                        to_string(dst_spec.arch));
  }
  if (src.meta.width != dst_spec.effective_width()) {
    throw TransferError("checkpoint width " + std::to_string(src.meta.width) + " does not match requested width " +
                        std::to_string(dst_spec.effective_width()));
  }
  Backbone model = build_backbone(dst_spec, seed);

  auto trunk = model->trunk_state();
  std::vector<std::string> missing;
  std::set<std::string> expected;
  for (auto& [name, t] : trunk) {
    expected.insert(name);
    if (!src.conv_weights.contains(name)) missing.push_back(name);
  }
  std::vector<std::string> unexpected;
  for (const auto& [name, w] : src.conv_weights)
    if (!expected.contains(name)) unexpected.push_back(name);
  if (!missing.empty() || !unexpected.empty()) {
    std::string msg = "checkpoint does not match " + to_string(dst_spec.arch) + " trunk;";
    if (!missing.empty()) msg += " missing: " + join(missing) + ";";
    if (!unexpected.empty()) msg += " unexpected: " + join(unexpected) + ";";
    throw IntegrityError(msg);
  }
  for (auto& [name, t] : trunk) copy_into(t, src.conv_weights.at(name), name);

  if (reinit_head) {
    reinit_linear(model->head(), seed);
  } else {
    if (src.meta.head_kind != HeadKind::linear) {
      throw ShapeError("shape mismatch: checkpoint carries a projection head, not a linear head");
    }
    for (auto& [name, t] : model->head_state()) {
      auto it = src.head_weights.find(name);
      if (it == src.head_weights.end()) throw IntegrityError("checkpoint head is missing '" + name + "'");
      copy_into(t, it->second, name);
    }
  }
  return model;
}

Backbone& freeze_conv(Backbone& model, const std::string& upto_block) {
  if (upto_block == kAllBlocks) {
    model->set_frozen_blocks(static_cast<int>(model->block_names().size()));
  } else {
    model->set_frozen_blocks(model->block_index(upto_block) + 1);
  }
  return model;
}

Backbone& unfreeze_all(Backbone& model) {
  model->set_frozen_blocks(0);
  return model;
}

}  // namespace scalenet
