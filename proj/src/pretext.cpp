#include "scalenet/pretext.hpp"

#include <chrono>
#include <cmath>

#include "json.hpp"
#include "scalenet/tensor_bridge.hpp"
#include "scalenet/util.hpp"

namespace scalenet {
namespace {

using torch::autograd::AutogradContext;
using torch::autograd::variable_list;

class RotationLossFunction : public torch::autograd::Function<RotationLossFunction> {
 public:
  static torch::Tensor forward(AutogradContext* ctx, const torch::Tensor& logits, const torch::Tensor& labels) {
    auto log_probs = torch::log_softmax(logits, 1);
    auto picked = log_probs.gather(1, labels.unsqueeze(1)).squeeze(1);
    auto active = picked > std::log(kLogClampEps);
    auto loss = -picked.clamp_min(std::log(kLogClampEps)).mean();
    ctx->save_for_backward({log_probs, labels, active});
    return loss;
  }

  static variable_list backward(AutogradContext* ctx, variable_list grad_outputs) {
    const auto saved = ctx->get_saved_variables();
    const auto& log_probs = saved[0];
    const auto& labels = saved[1];
    const auto& active = saved[2];
    const auto rows = static_cast<double>(log_probs.size(0));
    auto grad = log_probs.exp();
    grad.scatter_add_(1, labels.unsqueeze(1), -torch::ones_like(labels.unsqueeze(1), grad.options()));
    grad.mul_(active.unsqueeze(1).to(grad.dtype())).div_(rows);
    return {grad * grad_outputs[0], torch::Tensor()};
  }
};

torch::Tensor expand_rotations(const torch::Tensor& sources) {
  std::vector<torch::Tensor> parts;
  parts.reserve(kNumRotations);
  for (int y = 0; y < kNumRotations; ++y) parts.push_back(rotate_quarter_batch(sources, y));
  return torch::cat(parts, 0).contiguous();
}

torch::Tensor rotation_labels(std::int64_t sources) {
  return torch::arange(kNumRotations, torch::kInt64).repeat_interleave(sources);
}

void validate_stage(const ScaleStage& stage) {
  if (!(stage.alpha > 0.0 && stage.alpha <= 1.0))
    throw ArgumentError("stage alpha must lie in (0, 1], got " + std::to_string(stage.alpha));
  if (stage.epochs < 0) throw ArgumentError("stage epochs must be >= 0");
  stage.lr.validate();
}

}  // namespace

RotationBatch make_rotation_batch(const ImageSet& sources) {
  if (sources.empty()) throw ArgumentError("make_rotation_batch needs at least one source image");
  RotationBatch batch;
  batch.images.reserve(sources.size() * kNumRotations);
  for (int y = 0; y < kNumRotations; ++y) {
    for (std::size_t s = 0; s < sources.size(); ++s) {
      batch.images.push_back(rotate_quarter(sources[s], y));
      batch.labels.push_back(y);
      batch.source_ids.push_back(static_cast<int>(s));
    }
  }
  return batch;
}

double rotation_loss(std::span<const double> probs, std::span<const int> labels, int num_classes) {
  if (num_classes < 2) throw ArgumentError("rotation_loss needs at least two classes");
  if (labels.empty() || probs.size() != labels.size() * static_cast<std::size_t>(num_classes)) {
    throw ShapeError("rotation_loss: " + std::to_string(probs.size()) + " probabilities for " +
                     std::to_string(labels.size()) + " labels of " + std::to_string(num_classes) + " classes");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= num_classes) throw ArgumentError("label " + std::to_string(y) + " out of range");
    const double p = probs[i * static_cast<std::size_t>(num_classes) + static_cast<std::size_t>(y)];
    if (!(p > 0.0)) {
      throw NumericError("probability " + std::to_string(p) + " <= 0 at row " + std::to_string(i) +
                         ", label " + std::to_string(y));
    }
    total += -std::log(std::max(p, kLogClampEps));
  }
  return total / static_cast<double>(labels.size());
}

torch::Tensor rotation_loss_from_logits(const torch::Tensor& logits, const torch::Tensor& labels) {
  if (logits.dim() != 2 || labels.dim() != 1 || logits.size(0) != labels.size(0))
    throw ShapeError("rotation_loss_from_logits expects (rows, K) logits and rows labels");
  return RotationLossFunction::apply(logits, labels.to(torch::kInt64));
}

int OptimizerConfig::sources_per_step() const {
  return count_expanded ? std::max(1, batch_images / kNumRotations) : batch_images;
}

void OptimizerConfig::validate() const {
  if (batch_images < 1) throw ArgumentError("batch_images must be >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ArgumentError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ArgumentError("weight_decay must be >= 0");
}

void ScaleSchedule::validate() const {
  if (stages.empty()) throw ArgumentError("schedule has no stages");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    validate_stage(stages[i]);
    if (i > 0 && !(stages[i].alpha > stages[i - 1].alpha))
      throw ArgumentError("schedule alphas must be strictly increasing");
    if (i > 0 && stages[i].lr.initial_lr > stages[i - 1].lr.initial_lr)
      throw ArgumentError("schedule initial learning rates must be non-increasing");
  }
  if (stages.back().alpha != 1.0) throw ArgumentError("final schedule alpha must be 1");
  optimizer.validate();
}

std::string ScaleSchedule::digest() const {
  nlohmann::json j;
  for (const auto& s : stages) {
    j["stages"].push_back({{"alpha", s.alpha},
                           {"epochs", s.epochs},
                           {"initial_lr", s.lr.initial_lr},
                           {"decay_factor", s.lr.decay_factor},
                           {"milestones", s.lr.milestones}});
  }
  j["optimizer"] = {{"momentum", optimizer.momentum},
                    {"weight_decay", optimizer.weight_decay},
                    {"batch_images", optimizer.batch_images},
                    {"count_expanded", optimizer.count_expanded}};
  return sha256_hex(j.dump()).substr(0, 16);
}

ScaleSchedule make_schedule(const std::vector<double>& alphas, const std::vector<double>& lrs,
                            const std::vector<int>& epochs, const OptimizerConfig& optimizer) {
  if (alphas.size() != lrs.size())
    throw ArgumentError("need one learning rate per alpha (" + std::to_string(alphas.size()) + " alphas, " +
                        std::to_string(lrs.size()) + " lrs)");
  if (epochs.size() != 1 && epochs.size() != alphas.size())
    throw ArgumentError("give either one epoch budget or one per stage");
  ScaleSchedule schedule;
  schedule.optimizer = optimizer;
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    ScaleStage stage;
    stage.alpha = alphas[i];
    stage.lr.initial_lr = lrs[i];
    stage.epochs = epochs.size() == 1 ? epochs[0] : epochs[i];
    schedule.stages.push_back(stage);
  }
  schedule.validate();
  return schedule;
}

StageResult train_pretext_stage(Backbone& model, const ImageSet& dataset, const ScaleStage& stage,
                                const OptimizerConfig& optimizer, std::uint64_t seed, const TrainHooks& hooks,
                                int stage_index, const std::string& schedule_digest) {
  validate_stage(stage);
  optimizer.validate();
  if (dataset.empty()) throw ArgumentError("pretext stage needs a non-empty dataset");
  if (dataset.front().height() != dataset.front().width())
    throw ArgumentError("pretext training batches quarter turns together and needs square images");

  CheckpointMeta meta;
  meta.alpha = stage.alpha;
  meta.seed = seed;
  meta.schedule_digest = schedule_digest;

  const auto data = images_to_tensor(dataset);
  const auto n = static_cast<std::int64_t>(dataset.size());
  const std::int64_t per_step = optimizer.sources_per_step();

  torch::optim::SGD sgd(model->trainable_parameters(), torch::optim::SGDOptions(stage.lr.lr_at(0))
                                                            .momentum(optimizer.momentum)
                                                            .weight_decay(optimizer.weight_decay));
  StageResult result;
  ModelCheckpoint last_good = extract_checkpoint(model, meta);
  model->train();

  for (int epoch = 0; epoch < stage.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = stage.lr.lr_at(epoch);
    set_learning_rate(sgd, lr);
    const auto order = shuffled_indices(dataset.size(), derive_seed(seed, static_cast<std::uint64_t>(epoch)));
    const auto order_t = torch::tensor(order, torch::kInt64);

    double loss_sum = 0.0;
    std::int64_t correct = 0, seen = 0;
    int step = 0;
    for (std::int64_t start = 0; start < n; start += per_step, ++step) {
      const auto count = std::min(per_step, n - start);
      const auto sources = data.index_select(0, order_t.slice(0, start, start + count));
      const auto batch = expand_rotations(sources);
      const auto labels = rotation_labels(count);

      sgd.zero_grad();
      const auto logits = model->forward(batch);
      const auto loss = rotation_loss_from_logits(logits, labels);
      const double loss_value = loss.item<double>();
      if (!std::isfinite(loss_value)) {
        DivergenceReport report{stage.alpha, epoch, step, seen ? loss_sum / static_cast<double>(seen) : 0.0};
        throw DivergenceError(std::move(last_good), report);
      }
      loss.backward();
      sgd.step();

      loss_sum += loss_value * static_cast<double>(labels.size(0));
      correct += logits.argmax(1).eq(labels).sum().item<std::int64_t>();
      seen += labels.size(0);
    }

    EpochMetrics m;
    m.stage_alpha = stage.alpha;
    m.epoch = epoch;
    m.lr = lr;
    m.train_loss = loss_sum / static_cast<double>(seen);
    m.rotation_acc = static_cast<double>(correct) / static_cast<double>(seen);
    m.wall_time_s = hooks.record_wall_time
                        ? std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()
                        : 0.0;
    result.metrics.push_back(m);
    if (hooks.on_epoch) hooks.on_epoch(m);

    meta.epochs_trained = epoch + 1;
    last_good = extract_checkpoint(model, meta);
    if (hooks.on_checkpoint && hooks.checkpoint_every > 0 && (epoch + 1) % hooks.checkpoint_every == 0 &&
        epoch + 1 != stage.epochs) {
      hooks.on_checkpoint(last_good, stage_index, epoch + 1);
    }
  }

  result.checkpoint = std::move(last_good);
  if (hooks.on_checkpoint) hooks.on_checkpoint(result.checkpoint, stage_index, stage.epochs);
  return result;
}

ChainResult train_scalenet_chain(const BackboneSpec& spec, const ScaleSchedule& schedule, const ImageSet& dataset,
                                 std::uint64_t seed, const TrainHooks& hooks) {
  schedule.validate();
  if (dataset.empty()) throw ArgumentError("scalenet chain needs a non-empty dataset");
  const auto digest = schedule.digest();

  ChainResult result;
  for (std::size_t k = 0; k < schedule.stages.size(); ++k) {
    const auto& stage = schedule.stages[k];
    auto prepared = standardize(resize_all(dataset, stage.alpha));

    BackboneSpec stage_spec = spec;
    stage_spec.input_h = prepared.images.front().height();
    stage_spec.input_w = prepared.images.front().width();
    stage_spec.head_out = kNumRotations;

    const std::uint64_t stage_seed = k == 0 ? seed : derive_seed(seed, 1000 + k);
    Backbone model = k == 0 ? build_backbone(stage_spec, stage_seed)
                            : transfer_weights(result.checkpoints.back(), stage_spec, false, stage_seed);
    if (hooks.on_stage_start) hooks.on_stage_start(static_cast<int>(k), *model);

    auto stage_result = train_pretext_stage(model, prepared.images, stage, schedule.optimizer, stage_seed, hooks,
                                            static_cast<int>(k), digest);
    result.checkpoints.push_back(std::move(stage_result.checkpoint));
    result.metrics.insert(result.metrics.end(), stage_result.metrics.begin(), stage_result.metrics.end());
    result.stage_stats.push_back(std::move(prepared.stats));
  }
  return result;
}

double rotation_accuracy(Backbone& model, const ImageSet& dataset, int batch_images) {
  if (dataset.empty()) throw ArgumentError("rotation_accuracy needs a non-empty dataset");
  torch::NoGradGuard no_grad;
  const bool was_training = model->is_training();
  model->eval();
  const auto data = images_to_tensor(dataset);
  std::int64_t correct = 0, total = 0;
  for (std::int64_t start = 0; start < data.size(0); start += batch_images) {
    const auto count = std::min<std::int64_t>(batch_images, data.size(0) - start);
    const auto batch = expand_rotations(data.slice(0, start, start + count));
    const auto labels = rotation_labels(count);
    correct += model->forward(batch).argmax(1).eq(labels).sum().item<std::int64_t>();
    total += labels.size(0);
  }
  model->train(was_training);
  return static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace scalenet
