#include "scalenet/eval.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "scalenet/tensor_bridge.hpp"
#include "scalenet/transforms.hpp"
#include "scalenet/util.hpp"

namespace scalenet {
namespace {

constexpr int kMaxProbeDims = 2048;

struct Accuracy {
  double overall = 0.0;
  std::vector<double> per_class;
  std::vector<std::int64_t> counts;
};

Accuracy score(const torch::Tensor& predictions, const std::vector<int>& labels, int num_classes) {
  Accuracy acc;
  acc.per_class.assign(static_cast<std::size_t>(num_classes), 0.0);
  acc.counts.assign(static_cast<std::size_t>(num_classes), 0);
  std::vector<std::int64_t> hits(static_cast<std::size_t>(num_classes), 0);
  auto pred = predictions.accessor<std::int64_t, 1>();
  std::int64_t total_hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    ++acc.counts[y];
    if (pred[static_cast<std::int64_t>(i)] == labels[i]) {
      ++hits[y];
      ++total_hits;
    }
  }
  for (std::size_t c = 0; c < acc.per_class.size(); ++c)
    acc.per_class[c] = acc.counts[c] ? static_cast<double>(hits[c]) / static_cast<double>(acc.counts[c]) : 0.0;
  acc.overall = static_cast<double>(total_hits) / static_cast<double>(labels.size());
  return acc;
}

void check_labeled(const LabeledImages& data, const char* what) {
  if (data.images.empty()) throw ArgumentError(std::string(what) + " split is empty");
  if (data.labels.size() != data.images.size())
    throw ArgumentError(std::string(what) + " split needs one label per image");
  if (data.num_classes() < 2) throw ArgumentError(std::string(what) + " split needs >= 2 classes");
  for (int y : data.labels)
    if (y < 0 || y >= data.num_classes()) throw ArgumentError("label " + std::to_string(y) + " out of range");
}

torch::Tensor predict_classes(const std::function<torch::Tensor(const torch::Tensor&)>& forward,
                              const torch::Tensor& inputs, int batch) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> out;
  for (std::int64_t start = 0; start < inputs.size(0); start += batch) {
    const auto count = std::min<std::int64_t>(batch, inputs.size(0) - start);
    out.push_back(forward(inputs.slice(0, start, start + count)).argmax(1));
  }
  return torch::cat(out).contiguous();
}

// Mini-batch SGD over a fixed tensor dataset.
void fit(torch::nn::Module& model, const std::function<torch::Tensor(const torch::Tensor&)>& forward,
         std::vector<torch::Tensor> params, const torch::Tensor& inputs, const torch::Tensor& targets,
         const DownstreamConfig& config, std::uint64_t seed) {
  torch::optim::SGD sgd(std::move(params), torch::optim::SGDOptions(config.lr.lr_at(0))
                                               .momentum(config.momentum)
                                               .weight_decay(config.weight_decay));
  const auto n = inputs.size(0);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    set_learning_rate(sgd, config.lr.lr_at(epoch));
    const auto order = torch::tensor(
        shuffled_indices(static_cast<std::size_t>(n), derive_seed(seed, static_cast<std::uint64_t>(epoch))),
        torch::kInt64);
    model.train();
    for (std::int64_t start = 0; start < n; start += config.batch_size) {
      const auto idx = order.slice(0, start, std::min<std::int64_t>(start + config.batch_size, n));
      if (idx.size(0) < 2) continue;  // BatchNorm needs more than one sample
      sgd.zero_grad();
      const auto logits = forward(inputs.index_select(0, idx));
      const auto loss = torch::nn::functional::cross_entropy(logits, targets.index_select(0, idx));
      if (!std::isfinite(loss.item<double>())) throw NumericError("downstream training diverged");
      loss.backward();
      sgd.step();
    }
  }
}

std::string report_digest(const ModelCheckpoint& ckpt, const DownstreamConfig& config, const std::string& extra) {
  return sha256_hex(to_string(ckpt.meta.arch) + "|" + ckpt.meta.schedule_digest + "|" +
                    std::to_string(ckpt.meta.alpha) + "|" + config.digest() + "|" + extra)
      .substr(0, 16);
}

BackboneSpec spec_for(const ModelCheckpoint& ckpt, const ImageTensor& sample, int head_out) {
  BackboneSpec spec;
  spec.arch = ckpt.meta.arch;
  spec.width = ckpt.meta.width;
  spec.input_h = sample.height();
  spec.input_w = sample.width();
  spec.head_out = head_out;
  return spec;
}

}  // namespace

std::string to_string(Protocol p) { return p == Protocol::finetune ? "finetune" : "linear_probe"; }

void EvalReport::validate() const {
  if (!(accuracy >= 0.0 && accuracy <= 1.0)) throw ArgumentError("accuracy must lie in [0, 1]");
  if (per_class_acc.size() != class_counts.size()) throw ShapeError("per-class accuracy and counts differ in length");
  double weighted = 0.0;
  std::int64_t total = 0;
  for (std::size_t c = 0; c < per_class_acc.size(); ++c) {
    weighted += per_class_acc[c] * static_cast<double>(class_counts[c]);
    total += class_counts[c];
  }
  if (total > 0 && std::fabs(weighted / static_cast<double>(total) - accuracy) > 1e-9)
    throw ArgumentError("accuracy disagrees with the count-weighted per-class accuracies");
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["protocol"] = to_string(protocol);
  j["probe_block"] = probe_block ? nlohmann::json(*probe_block) : nlohmann::json(nullptr);
  j["accuracy"] = accuracy;
  j["per_class_acc"] = per_class_acc;
  j["class_counts"] = class_counts;
  j["config_digest"] = config_digest;
  j["seed"] = seed;
  j["n_train"] = n_train;
  return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  const auto protocol = j.at("protocol").get<std::string>();
  if (protocol == "finetune") r.protocol = Protocol::finetune;
  else if (protocol == "linear_probe") r.protocol = Protocol::linear_probe;
  else throw ArgumentError("unknown protocol '" + protocol + "'");
  if (!j.at("probe_block").is_null()) r.probe_block = j.at("probe_block").get<std::string>();
  r.accuracy = j.at("accuracy").get<double>();
  r.per_class_acc = j.at("per_class_acc").get<std::vector<double>>();
  r.class_counts = j.at("class_counts").get<std::vector<std::int64_t>>();
  r.config_digest = j.at("config_digest").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.n_train = j.at("n_train").get<std::int64_t>();
  r.validate();
  return r;
}

DataSubset subsample(std::size_t dataset_size, std::size_t n, std::uint64_t seed) {
  if (n > dataset_size) {
    throw ArgumentError("cannot draw " + std::to_string(n) + " samples from a dataset of " +
                        std::to_string(dataset_size));
  }
  std::vector<std::size_t> all(dataset_size);
  std::iota(all.begin(), all.end(), 0);
  DataSubset subset;
  subset.seed = seed;
  subset.n = n;
  subset.indices.reserve(n);
  std::mt19937_64 rng(seed);
  std::sample(all.begin(), all.end(), std::back_inserter(subset.indices), n, rng);
  return subset;
}

LabeledImages take(const LabeledImages& data, const DataSubset& subset) {
  LabeledImages out;
  out.class_names = data.class_names;
  out.images.reserve(subset.indices.size());
  for (auto i : subset.indices) {
    if (i >= data.images.size()) throw ArgumentError("subset index out of range");
    out.images.push_back(data.images[i]);
    if (!data.labels.empty()) out.labels.push_back(data.labels[i]);
  }
  return out;
}

std::string DownstreamConfig::digest() const {
  nlohmann::json j = {{"initial_lr", lr.initial_lr}, {"decay_factor", lr.decay_factor},
                      {"milestones", lr.milestones}, {"epochs", epochs},
                      {"batch_size", batch_size},    {"momentum", momentum},
                      {"weight_decay", weight_decay}};
  return sha256_hex(j.dump()).substr(0, 16);
}

DownstreamConfig finetune_defaults() {
  DownstreamConfig c;
  c.lr = {0.001, 5.0, {80, 160, 200}};
  c.epochs = 200;
  return c;
}

DownstreamConfig probe_defaults() {
  DownstreamConfig c;
  c.lr = {0.01, 5.0, {5, 15, 25}};
  c.epochs = 30;
  return c;
}

EvalReport finetune_classifier(const ModelCheckpoint& ckpt, const LabeledImages& train, const LabeledImages& test,
                               const DownstreamConfig& config, std::uint64_t seed, ModelCheckpoint* tuned) {
  check_labeled(train, "train");
  check_labeled(test, "test");
  config.lr.validate();
  const auto prepared = standardize(train.images);
  const auto x_train = images_to_tensor(prepared.images);
  const auto x_test = images_to_tensor(apply_standardization(test.images, prepared.stats));
  const auto y_train = labels_to_tensor(train.labels);

  Backbone model = transfer_weights(ckpt, spec_for(ckpt, train.images.front(), train.num_classes()), true, seed);
  auto forward = [&](const torch::Tensor& x) { return model->forward(x); };
  fit(*model, forward, model->trainable_parameters(), x_train, y_train, config, seed);
  model->eval();
  const auto acc = score(predict_classes(forward, x_test, 256), test.labels, test.num_classes());
  if (tuned) {
    auto meta = ckpt.meta;
    meta.head_out = train.num_classes();
    meta.head_kind = HeadKind::linear;
    meta.epochs_trained += config.epochs;
    *tuned = extract_checkpoint(model, meta);
  }

  EvalReport r;
  r.protocol = Protocol::finetune;
  r.accuracy = acc.overall;
  r.per_class_acc = acc.per_class;
  r.class_counts = acc.counts;
  r.config_digest = report_digest(ckpt, config, "finetune");
  r.seed = seed;
  r.n_train = static_cast<std::int64_t>(train.size());
  return r;
}

int probe_pool_size(int channels, int spatial) {
  int p = 1;
  while (p + 1 <= spatial && channels * (p + 1) * (p + 1) <= kMaxProbeDims) ++p;
  return p;
}

EvalReport linear_probe(const ModelCheckpoint& ckpt, const LabeledImages& train, const LabeledImages& test,
                        const std::string& block, const DownstreamConfig& config, std::uint64_t seed) {
  check_labeled(train, "train");
  check_labeled(test, "test");
  config.lr.validate();
  const auto prepared = standardize(train.images);
  const auto x_train = images_to_tensor(prepared.images);
  const auto x_test = images_to_tensor(apply_standardization(test.images, prepared.stats));

  Backbone model = transfer_weights(ckpt, spec_for(ckpt, train.images.front(), train.num_classes()), true, seed);
  const int block_idx = model->block_index(block);
  freeze_conv(model, kAllBlocks);
  model->eval();

  auto extract = [&](const torch::Tensor& x) {
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> feats;
    for (std::int64_t start = 0; start < x.size(0); start += 256) {
      const auto act = model->block_activations(x.slice(0, start, std::min<std::int64_t>(start + 256, x.size(0))),
                                                block_idx)
                           .back();
      const int p = probe_pool_size(static_cast<int>(act.size(1)), static_cast<int>(std::min(act.size(2), act.size(3))));
      feats.push_back(torch::adaptive_avg_pool2d(act, {p, p}).flatten(1));
    }
    return torch::cat(feats);
  };
  auto f_train = extract(x_train);
  auto f_test = extract(x_test);
  // Features are standardized with train statistics before the regression.
  const auto mu = f_train.mean(0, true);
  const auto sigma = f_train.std(0, false, true).clamp_min(1e-6);
  f_train = (f_train - mu) / sigma;
  f_test = (f_test - mu) / sigma;

  torch::nn::Linear classifier(f_train.size(1), train.num_classes());
  {
    torch::NoGradGuard no_grad;
    classifier->weight.zero_();
    classifier->bias.zero_();
  }
  auto forward = [&](const torch::Tensor& x) { return classifier->forward(x); };
  fit(*classifier, forward, classifier->parameters(), f_train, labels_to_tensor(train.labels), config, seed);
  classifier->eval();
  const auto acc = score(predict_classes(forward, f_test, 1024), test.labels, test.num_classes());

  EvalReport r;
  r.protocol = Protocol::linear_probe;
  r.probe_block = block;
  r.accuracy = acc.overall;
  r.per_class_acc = acc.per_class;
  r.class_counts = acc.counts;
  r.config_digest = report_digest(ckpt, config, "probe:" + block);
  r.seed = seed;
  r.n_train = static_cast<std::int64_t>(train.size());
  return r;
}

std::vector<EvalReport> probe_all_blocks(const ModelCheckpoint& ckpt, const LabeledImages& train,
                                         const LabeledImages& test, const DownstreamConfig& config,
                                         std::uint64_t seed) {
  std::vector<EvalReport> reports;
  for (const auto& block : default_block_names(ckpt.meta.arch))
    reports.push_back(linear_probe(ckpt, train, test, block, config, seed));
  return reports;
}

Heatmap gradcam(Backbone& model, const ImageTensor& img, const std::string& block, int class_idx) {
  const int block_idx = model->block_index(block);
  if (class_idx < 0 || class_idx >= model->spec().head_out) {
    throw ArgumentError("class index " + std::to_string(class_idx) + " outside [0, " +
                        std::to_string(model->spec().head_out) + ")");
  }
  img.validate();
  const bool was_training = model->is_training();
  model->eval();

  auto x = image_to_tensor(img).unsqueeze(0).requires_grad_(true);
  auto acts = model->block_activations(x, static_cast<int>(model->block_names().size()) - 1);
  auto tap = acts[static_cast<std::size_t>(block_idx)];
  tap.retain_grad();
  auto logits = model->head()->forward(torch::adaptive_avg_pool2d(acts.back(), {1, 1}).flatten(1));
  logits.index({0, class_idx}).backward();

  Heatmap map;
  map.height = img.height();
  map.width = img.width();
  {
    torch::NoGradGuard no_grad;
    const auto weights = tap.grad().mean({2, 3}, true);
    auto cam = torch::relu((weights * tap.detach()).sum(1, true));
    cam = torch::nn::functional::interpolate(
        cam, torch::nn::functional::InterpolateFuncOptions()
                 .size(std::vector<std::int64_t>{img.height(), img.width()})
                 .mode(torch::kBilinear)
                 .align_corners(false));
    cam = cam.squeeze().to(torch::kFloat64).contiguous().clamp_min(0.0);
    const double peak = cam.max().item<double>();
    cam = peak > 0.0 ? cam / peak : torch::zeros_like(cam);
    map.values.assign(cam.data_ptr<double>(), cam.data_ptr<double>() + cam.numel());
  }
  for (auto& p : model->parameters()) p.mutable_grad() = torch::Tensor();
  model->train(was_training);
  return map;
}

void write_heatmap(const Heatmap& map, const std::filesystem::path& png_path, const nlohmann::json& sidecar) {
  cv::Mat gray(map.height, map.width, CV_8UC1);
  for (int r = 0; r < map.height; ++r)
    for (int c = 0; c < map.width; ++c)
      gray.at<std::uint8_t>(r, c) = static_cast<std::uint8_t>(std::lround(std::clamp(map.at(r, c), 0.0, 1.0) * 255.0));
  std::vector<std::uint8_t> png;
  if (!cv::imencode(".png", gray, png)) throw Error("PNG encoding failed for " + png_path.string());
  write_file_atomic(png_path, std::string_view(reinterpret_cast<const char*>(png.data()), png.size()));
  auto side = png_path;
  side.replace_extension(".json");
  write_file_atomic(side, sidecar.dump(2));
}

}  // namespace scalenet
