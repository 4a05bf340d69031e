#include "scalenet/contrastive.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <random>

#include "scalenet/tensor_bridge.hpp"
#include "scalenet/util.hpp"

namespace scalenet {
namespace {

using torch::autograd::AutogradContext;
using torch::autograd::variable_list;

class NtXentFunction : public torch::autograd::Function<NtXentFunction> {
 public:
  static torch::Tensor forward(AutogradContext* ctx, const torch::Tensor& z, double temperature) {
    const auto rows = z.size(0);
    auto norms = z.norm(2, 1, true);
    auto u = z / norms;
    auto sim = u.matmul(u.t()) / temperature;
    auto self = torch::eye(rows, torch::dtype(torch::kBool));
    auto masked = sim.masked_fill(self, -std::numeric_limits<double>::infinity());
    auto lse = torch::logsumexp(masked, 1);
    auto partner = torch::arange(rows, torch::kInt64).bitwise_xor(1);
    auto positive = sim.gather(1, partner.unsqueeze(1)).squeeze(1);
    auto loss = (lse - positive).mean();
    auto probs = torch::softmax(masked, 1);
    ctx->save_for_backward({u, norms, probs, partner});
    ctx->saved_data["temperature"] = temperature;
    return loss;
  }

  static variable_list backward(AutogradContext* ctx, variable_list grad_outputs) {
    const auto saved = ctx->get_saved_variables();
    const auto& u = saved[0];
    const auto& norms = saved[1];
    const auto& probs = saved[2];
    const auto& partner = saved[3];
    const double temperature = ctx->saved_data["temperature"].toDouble();
    const auto rows = static_cast<double>(u.size(0));

    // d loss / d sim, then through sim = u u^T / tau and u = z / |z|.
    auto g = probs.clone();
    g.scatter_add_(1, partner.unsqueeze(1), -torch::ones_like(partner.unsqueeze(1), g.options()));
    g.div_(rows);
    auto du = (g + g.t()).matmul(u) / temperature;
    auto dz = (du - (du * u).sum(1, true) * u) / norms;
    return {dz * grad_outputs[0], torch::Tensor()};
  }
};

std::uint64_t next_seed(std::mt19937_64& rng) { return rng(); }

// RGB in [0,1] <-> HSV with hue in [0,1).
std::array<double, 3> rgb_to_hsv(double r, double g, double b) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const double d = mx - mn;
  double h = 0.0;
  if (d > 0.0) {
    if (mx == r) h = std::fmod((g - b) / d, 6.0);
    else if (mx == g) h = (b - r) / d + 2.0;
    else h = (r - g) / d + 4.0;
    h /= 6.0;
    if (h < 0.0) h += 1.0;
  }
  const double s = mx > 0.0 ? d / mx : 0.0;
  return {h, s, mx};
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c; g = x; break;
    case 1: r = x; g = c; break;
    case 2: g = c; b = x; break;
    case 3: g = x; b = c; break;
    case 4: r = x; b = c; break;
    default: r = c; b = x; break;
  }
  const double m = v - c;
  return {r + m, g + m, b + m};
}

double clamp255(double v) { return std::clamp(v, 0.0, 255.0); }

// Bilinear sample of the window [y0, y0+h) x [x0, x0+w) onto out_h x out_w
// with pixel-centre alignment.
ImageTensor crop_resample(const ImageTensor& img, int y0, int x0, int h, int w, int out_h, int out_w, bool mirror) {
  ImageTensor out(out_h, out_w, img.channels(), img.value_range());
  for (int i = 0; i < out_h; ++i) {
    const double sy = std::clamp(y0 + (i + 0.5) * h / out_h - 0.5, 0.0, static_cast<double>(img.height() - 1));
    const int r0 = static_cast<int>(std::floor(sy));
    const int r1 = std::min(r0 + 1, img.height() - 1);
    const double fy = sy - r0;
    for (int j = 0; j < out_w; ++j) {
      const int jj = mirror ? out_w - 1 - j : j;
      const double sx = std::clamp(x0 + (jj + 0.5) * w / out_w - 0.5, 0.0, static_cast<double>(img.width() - 1));
      const int c0 = static_cast<int>(std::floor(sx));
      const int c1 = std::min(c0 + 1, img.width() - 1);
      const double fx = sx - c0;
      for (int ch = 0; ch < img.channels(); ++ch) {
        const double top = (1 - fx) * img.at(r0, c0, ch) + fx * img.at(r0, c1, ch);
        const double bot = (1 - fx) * img.at(r1, c0, ch) + fx * img.at(r1, c1, ch);
        out.at(i, j, ch) = (1 - fy) * top + fy * bot;
      }
    }
  }
  return out;
}

ImageTensor augment_view(const ImageTensor& img, const ContrastiveConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ImageTensor view = img;
  for (auto aug : config.augmentations) {
    if (aug == Augmentation::inception_crop) view = random_resized_crop(view, config.crop_min_scale, next_seed(rng));
    else view = color_jitter(view, config.color_strength, next_seed(rng));
  }
  return view;
}

}  // namespace

void ContrastiveConfig::validate() const {
  if (!(temperature > 0.0)) throw ArgumentError("temperature must be positive");
  if (batch_pairs < 2) throw ArgumentError("batch_pairs must be >= 2 so every anchor has a negative");
  if (proj_dim < 1) throw ArgumentError("proj_dim must be >= 1");
  if (!(lr >= 0.0)) throw ArgumentError("contrastive lr must be >= 0");
  if (!(crop_min_scale > 0.0 && crop_min_scale <= 1.0)) throw ArgumentError("crop_min_scale must lie in (0, 1]");
}

ImageTensor random_resized_crop(const ImageTensor& img, double min_scale, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> scale_dist(min_scale, 1.0);
  std::uniform_real_distribution<double> log_ratio(std::log(3.0 / 4.0), std::log(4.0 / 3.0));
  std::bernoulli_distribution mirror(0.5);
  const int h = img.height(), w = img.width();
  const double area = static_cast<double>(h) * w;
  // Windows that fall outside the image or below 2x2 are redrawn; after ten
  // misses the full frame is used.
  int ch = h, cw = w, y0 = 0, x0 = 0;
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * scale_dist(rng);
    const double ratio = std::exp(log_ratio(rng));
    const int tw = static_cast<int>(std::lround(std::sqrt(target * ratio)));
    const int th = static_cast<int>(std::lround(std::sqrt(target / ratio)));
    if (tw >= 2 && th >= 2 && tw <= w && th <= h) {
      cw = tw;
      ch = th;
      y0 = std::uniform_int_distribution<int>(0, h - th)(rng);
      x0 = std::uniform_int_distribution<int>(0, w - tw)(rng);
      break;
    }
  }
  return crop_resample(img, y0, x0, ch, cw, h, w, mirror(rng));
}

ImageTensor color_jitter(const ImageTensor& img, double strength, std::uint64_t seed) {
  if (img.channels() != 3) throw ArgumentError("color jitter needs a 3-channel image");
  std::mt19937_64 rng(seed);
  const double amp = 0.8 * strength;
  std::uniform_real_distribution<double> factor(std::max(0.0, 1.0 - amp), 1.0 + amp);
  std::uniform_real_distribution<double> hue(-0.2 * strength, 0.2 * strength);
  const double brightness = factor(rng), contrast = factor(rng), saturation = factor(rng), hue_shift = hue(rng);

  ImageTensor out = img;
  auto d = out.data();
  for (double& v : d) v = clamp255(v * brightness);

  double mean_gray = 0.0;
  for (int r = 0; r < out.height(); ++r)
    for (int c = 0; c < out.width(); ++c)
      mean_gray += 0.299 * out.at(r, c, 0) + 0.587 * out.at(r, c, 1) + 0.114 * out.at(r, c, 2);
  mean_gray /= static_cast<double>(out.pixel_count());
  for (double& v : d) v = clamp255((v - mean_gray) * contrast + mean_gray);

  for (int r = 0; r < out.height(); ++r) {
    for (int c = 0; c < out.width(); ++c) {
      const double g = 0.299 * out.at(r, c, 0) + 0.587 * out.at(r, c, 1) + 0.114 * out.at(r, c, 2);
      for (int ch = 0; ch < 3; ++ch) out.at(r, c, ch) = clamp255((out.at(r, c, ch) - g) * saturation + g);
      auto hsv = rgb_to_hsv(out.at(r, c, 0) / 255.0, out.at(r, c, 1) / 255.0, out.at(r, c, 2) / 255.0);
      const auto rgb = hsv_to_rgb(hsv[0] + hue_shift, hsv[1], hsv[2]);
      for (int ch = 0; ch < 3; ++ch) out.at(r, c, ch) = clamp255(rgb[static_cast<std::size_t>(ch)] * 255.0);
    }
  }
  return out;
}

std::pair<ImageTensor, ImageTensor> augment_pair(const ImageTensor& img, const ContrastiveConfig& config,
                                                 std::uint64_t seed) {
  img.validate();
  if (img.channels() != 3) throw ArgumentError("augment_pair needs a 3-channel image");
  std::mt19937_64 rng(seed);
  const auto s1 = next_seed(rng);
  const auto s2 = next_seed(rng);
  return {augment_view(img, config, s1), augment_view(img, config, s2)};
}

double cosine_sim(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size() || u.empty()) throw ShapeError("cosine_sim needs equal-length, non-empty vectors");
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  if (!(nu > 0.0) || !(nv > 0.0)) throw NumericError("cosine_sim of a zero vector");
  const double s = dot / (std::sqrt(nu) * std::sqrt(nv));
  if (!std::isfinite(s)) throw NumericError("cosine_sim is not finite");
  return std::clamp(s, -1.0, 1.0);
}

void ProjectionBatch::validate() const {
  if (rows < 2 || rows % 2 != 0) throw ShapeError("projection batch needs an even number (>= 2) of rows");
  if (dim < 1 || z.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(dim))
    throw ShapeError("projection batch buffer does not match rows x dim");
  for (double v : z)
    if (!std::isfinite(v)) throw NumericError("projection batch contains a non-finite value");
}

double nt_xent_loss(const ProjectionBatch& batch, double temperature) {
  batch.validate();
  if (!(temperature > 0.0)) throw ArgumentError("temperature must be positive");
  const int n = batch.rows;
  std::vector<double> sim(static_cast<std::size_t>(n) * static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < n; ++k)
      sim[static_cast<std::size_t>(i * n + k)] = cosine_sim(batch.row(i), batch.row(k)) / temperature;

  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    // log-sum-exp over k != i, shifted by the row max for stability.
    double mx = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < n; ++k)
      if (k != i) mx = std::max(mx, sim[static_cast<std::size_t>(i * n + k)]);
    double acc = 0.0;
    for (int k = 0; k < n; ++k)
      if (k != i) acc += std::exp(sim[static_cast<std::size_t>(i * n + k)] - mx);
    const double lse = mx + std::log(acc);
    const double loss = lse - sim[static_cast<std::size_t>(i * n + (i ^ 1))];
    if (!std::isfinite(loss)) throw NumericError("non-finite NT-Xent term at anchor " + std::to_string(i));
    total += loss;
  }
  return total / n;
}

torch::Tensor nt_xent_loss(const torch::Tensor& z, double temperature) {
  if (z.dim() != 2 || z.size(0) < 2 || z.size(0) % 2 != 0)
    throw ShapeError("nt_xent_loss expects a (2N, dim) tensor with N >= 1");
  if (!(temperature > 0.0)) throw ArgumentError("temperature must be positive");
  if (!torch::isfinite(z).all().item<bool>()) throw NumericError("projection contains non-finite values");
  if ((z.detach().norm(2, 1) == 0).any().item<bool>()) throw NumericError("projection row has zero norm");
  return NtXentFunction::apply(z, temperature);
}

ProjectionHeadImpl::ProjectionHeadImpl(int in_dim, int out_dim) {
  fc1_ = register_module("fc1", torch::nn::Linear(in_dim, in_dim));
  fc2_ = register_module("fc2", torch::nn::Linear(in_dim, out_dim));
}

torch::Tensor ProjectionHeadImpl::forward(const torch::Tensor& x) { return fc2_(torch::relu(fc1_(x))); }

std::vector<std::pair<std::string, torch::Tensor>> ProjectionHeadImpl::named_state() {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& item : named_parameters(true)) out.emplace_back("proj." + item.key(), item.value());
  return out;
}

ContrastiveModel build_contrastive_model(const BackboneSpec& spec, const ContrastiveConfig& config,
                                         std::uint64_t seed) {
  config.validate();
  ContrastiveModel m;
  m.encoder = build_backbone(spec, seed);
  torch::manual_seed(derive_seed(seed, 77));
  m.projection = ProjectionHead(m.encoder->feature_dim(), config.proj_dim);
  return m;
}

ModelCheckpoint extract_contrastive_checkpoint(ContrastiveModel& model, CheckpointMeta meta) {
  ModelCheckpoint ckpt;
  for (auto& [name, t] : model.encoder->trunk_state()) ckpt.conv_weights.emplace(name, to_weight_array(t));
  for (auto& [name, t] : model.projection->named_state()) ckpt.head_weights.emplace(name, to_weight_array(t));
  meta.arch = model.encoder->spec().arch;
  meta.width = model.encoder->spec().effective_width();
  meta.head_kind = HeadKind::projection;
  meta.head_out = static_cast<int>(ckpt.head_weights.at("proj.fc2.weight").shape.at(0));
  ckpt.meta = std::move(meta);
  return ckpt;
}

ContrastiveModel transfer_contrastive(const ModelCheckpoint& src, const BackboneSpec& spec,
                                      const ContrastiveConfig& config, std::uint64_t seed) {
  if (src.meta.head_kind != HeadKind::projection)
    throw TransferError("checkpoint has no projection head to carry over");
  ContrastiveModel m;
  m.encoder = transfer_weights(src, spec, true, seed);
  m.projection = ProjectionHead(m.encoder->feature_dim(), config.proj_dim);
  for (auto& [name, t] : m.projection->named_state()) {
    auto it = src.head_weights.find(name);
    if (it == src.head_weights.end()) throw IntegrityError("checkpoint projection head is missing '" + name + "'");
    copy_into(t, it->second, name);
  }
  return m;
}

StageResult train_simclr_stage(ContrastiveModel& model, const ImageSet& dataset, const ChannelStats& stats,
                               const ContrastiveConfig& config, const ScaleStage& stage, std::uint64_t seed,
                               const TrainHooks& hooks, int stage_index, const std::string& schedule_digest) {
  config.validate();
  if (stage.epochs < 0) throw ArgumentError("stage epochs must be >= 0");
  if (dataset.size() < 2) throw ArgumentError("contrastive training needs at least two images");

  CheckpointMeta meta;
  meta.alpha = stage.alpha;
  meta.seed = seed;
  meta.schedule_digest = schedule_digest;

  std::vector<torch::Tensor> params = model.encoder->trainable_parameters();
  for (auto& p : model.projection->parameters()) params.push_back(p);
  torch::optim::Adam adam(params, torch::optim::AdamOptions(stage.lr.lr_at(0)));

  StageResult result;
  ModelCheckpoint last_good = extract_contrastive_checkpoint(model, meta);
  model.encoder->train();
  model.projection->train();
  const auto n = dataset.size();
  const auto per_step = static_cast<std::size_t>(config.batch_pairs);

  for (int epoch = 0; epoch < stage.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = stage.lr.lr_at(epoch);
    set_learning_rate(adam, lr);
    const auto epoch_seed = derive_seed(seed, static_cast<std::uint64_t>(epoch));
    const auto order = shuffled_indices(n, epoch_seed);
    double loss_sum = 0.0;
    std::int64_t hits = 0, anchors = 0, steps = 0;
    for (std::size_t start = 0; start + 2 <= n; start += per_step) {
      const auto count = std::min(per_step, n - start);
      ImageSet views;
      views.reserve(2 * count);
      for (std::size_t i = 0; i < count; ++i) {
        const auto src = static_cast<std::size_t>(order[start + i]);
        auto [a, b] = augment_pair(dataset[src], config, derive_seed(epoch_seed, src));
        views.push_back(std::move(a));
        views.push_back(std::move(b));
      }
      const auto batch = images_to_tensor(apply_standardization(views, stats));

      adam.zero_grad();
      const auto z = model.projection->forward(model.encoder->features(batch));
      const auto loss = nt_xent_loss(z, config.temperature);
      const double loss_value = loss.item<double>();
      if (!std::isfinite(loss_value)) {
        DivergenceReport report{stage.alpha, epoch, static_cast<int>(steps),
                                steps ? loss_sum / static_cast<double>(steps) : 0.0};
        throw DivergenceError(std::move(last_good), report);
      }
      loss.backward();
      adam.step();

      {
        torch::NoGradGuard no_grad;
        auto u = z.detach() / z.detach().norm(2, 1, true);
        auto sim = u.matmul(u.t());
        sim.fill_diagonal_(-2.0);
        auto partner = torch::arange(z.size(0), torch::kInt64).bitwise_xor(1);
        hits += sim.argmax(1).eq(partner).sum().item<std::int64_t>();
        anchors += z.size(0);
      }
      loss_sum += loss_value;
      ++steps;
    }

    EpochMetrics m;
    m.stage_alpha = stage.alpha;
    m.epoch = epoch;
    m.lr = lr;
    m.train_loss = steps ? loss_sum / static_cast<double>(steps) : 0.0;
    m.rotation_acc = 0.0;
    m.wall_time_s = hooks.record_wall_time
                        ? std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()
                        : 0.0;
    m.extra = {{"temperature", config.temperature},
               {"batch_pairs", static_cast<double>(config.batch_pairs)},
               {"pair_acc", anchors ? static_cast<double>(hits) / static_cast<double>(anchors) : 0.0}};
    result.metrics.push_back(m);
    if (hooks.on_epoch) hooks.on_epoch(m);

    meta.epochs_trained = epoch + 1;
    last_good = extract_contrastive_checkpoint(model, meta);
    if (hooks.on_checkpoint && hooks.checkpoint_every > 0 && (epoch + 1) % hooks.checkpoint_every == 0 &&
        epoch + 1 != stage.epochs) {
      hooks.on_checkpoint(last_good, stage_index, epoch + 1);
    }
  }
  result.checkpoint = std::move(last_good);
  if (hooks.on_checkpoint) hooks.on_checkpoint(result.checkpoint, stage_index, stage.epochs);
  return result;
}

ChainResult train_multiscale_simclr(const BackboneSpec& spec, const ScaleSchedule& schedule, const ImageSet& dataset,
                                    const ContrastiveConfig& config, std::uint64_t seed, const TrainHooks& hooks) {
  schedule.validate();
  config.validate();
  const auto digest = schedule.digest();
  ChainResult result;
  for (std::size_t k = 0; k < schedule.stages.size(); ++k) {
    const auto& stage = schedule.stages[k];
    const auto resized = resize_all(dataset, stage.alpha);
    auto stats = standardize(resized).stats;

    BackboneSpec stage_spec = spec;
    stage_spec.input_h = resized.front().height();
    stage_spec.input_w = resized.front().width();

    const std::uint64_t stage_seed = k == 0 ? seed : derive_seed(seed, 1000 + k);
    ContrastiveModel model = k == 0 ? build_contrastive_model(stage_spec, config, stage_seed)
                                    : transfer_contrastive(result.checkpoints.back(), stage_spec, config, stage_seed);
    if (hooks.on_stage_start) hooks.on_stage_start(static_cast<int>(k), *model.encoder);

    auto stage_result = train_simclr_stage(model, resized, stats, config, stage, stage_seed, hooks,
                                           static_cast<int>(k), digest);
    result.checkpoints.push_back(std::move(stage_result.checkpoint));
    result.metrics.insert(result.metrics.end(), stage_result.metrics.begin(), stage_result.metrics.end());
    result.stage_stats.push_back(std::move(stats));
  }
  return result;
}

}  // namespace scalenet
