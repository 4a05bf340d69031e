#include "scalenet/experiment.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "scalenet/transforms.hpp"
#include "scalenet/util.hpp"

#ifndef SCALENET_BUILD_ID
#define SCALENET_BUILD_ID "unknown"
#endif

namespace scalenet {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::vector<std::pair<Task, std::string>>& task_names() {
  static const std::vector<std::pair<Task, std::string>> names{
      {Task::pretrain_rotnet, "pretrain_rotnet"},
      {Task::pretrain_scalenet, "pretrain_scalenet"},
      {Task::pretrain_simclr, "pretrain_simclr"},
      {Task::pretrain_multiscale_simclr, "pretrain_multiscale_simclr"},
      {Task::finetune, "finetune"},
      {Task::probe, "probe"},
      {Task::gradcam, "gradcam"},
      {Task::ablation_suite, "ablation_suite"}};
  return names;
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

std::string fmt(double v, int precision = 6) {
  std::ostringstream out;
  out << std::setprecision(precision) << v;
  return out.str();
}

// Recursively overlays `patch` onto `base`, rejecting keys `base` lacks.
void overlay(json& base, const json& patch, const std::string& where) {
  if (!patch.is_object()) throw ConfigError(where.empty() ? "config must be an object" : where + " must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const auto key = where.empty() ? it.key() : where + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    auto& slot = base[it.key()];
    if (slot.is_object() && it->is_object()) {
      overlay(slot, *it, key);
    } else {
      slot = *it;
    }
  }
}

template <class T>
T get(const json& j, const char* key, const std::string& where) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + where + key + "': " + e.what());
  }
}

template <class T>
std::optional<T> get_opt(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return get<T>(j, key, where);
}

json opt_json(const auto& v) { return v ? json(*v) : json(nullptr); }

std::string augmentation_name(Augmentation a) {
  return a == Augmentation::inception_crop ? "inception_crop" : "color_distortion";
}

Augmentation augmentation_from(const std::string& s) {
  if (s == "inception_crop") return Augmentation::inception_crop;
  if (s == "color_distortion") return Augmentation::color_distortion;
  throw ConfigError("unknown augmentation '" + s + "'");
}

std::string alpha_schedule_text(const ScaleSchedule& s) {
  std::string out;
  for (const auto& st : s.stages) out += (out.empty() ? "" : ";") + fmt(st.alpha);
  return out;
}

std::string ladder_text(const LrLadder& lr) {
  std::string out = fmt(lr.initial_lr) + "/" + fmt(lr.decay_factor) + "@";
  for (std::size_t k = 0; k < lr.milestones.size(); ++k) out += (k ? "," : "") + std::to_string(lr.milestones[k]);
  return out;
}

std::string lr_schedule_text(const ScaleSchedule& s) {
  std::string out;
  for (const auto& st : s.stages) out += (out.empty() ? "" : ";") + ladder_text(st.lr);
  return out;
}

// Tracks the files a record owns, relative to its directory.
class Artifacts {
 public:
  explicit Artifacts(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }
  const fs::path& dir() const { return dir_; }
  fs::path add(const std::string& name) {
    if (std::find(names_.begin(), names_.end(), name) == names_.end()) names_.push_back(name);
    return dir_ / name;
  }
  const std::vector<std::string>& names() const { return names_; }

 private:
  fs::path dir_;
  std::vector<std::string> names_;
};

void write_record(RunRecord& record, Artifacts& files) {
  files.add(kRecordFile);
  record.artifacts = files.names();
  record.dir = files.dir();
  write_file_atomic(files.dir() / kRecordFile, record.to_json().dump(2) + "\n");
}

template <class F>
auto phase(const std::string& name, F&& f) {
  try {
    return f();
  } catch (const PipelineError&) {
    throw;
  } catch (const std::exception& e) {
    throw PipelineError(name, e.what());
  }
}

struct Splits {
  LabeledImages train;
  LabeledImages test;
  std::string digest;
};

ImageSet ablate(const ImageSet& images, const AblationSpec& a, std::uint64_t seed) {
  ImageSet out = images;
  if (a.grayscale)
    for (auto& img : out) img = to_pseudo_grayscale(img);
  if (a.hybrid_prob) {
    out = make_hybrid(out, *a.hybrid_prob, seed).images;
  } else if (a.corner_removal) {
    for (auto& img : out) img = harris_whiten(img);
  }
  return out;
}

Splits load_splits(const ExperimentConfig& cfg) {
  Splits s;
  phase("ingest", [&] {
    auto ds = ingest_dataset(cfg.dataset);
    s.digest = ds.digest;
    s.train = cfg.subset_n ? take(ds.train, subsample(ds.train.size(), *cfg.subset_n, cfg.subset_seed))
                           : std::move(ds.train);
    s.test = std::move(ds.test);
    return 0;
  });
  phase("ablation", [&] {
    s.train.images = ablate(s.train.images, cfg.ablation, derive_seed(cfg.seed, 101));
    s.test.images = ablate(s.test.images, cfg.ablation, derive_seed(cfg.seed, 102));
    return 0;
  });
  return s;
}

BackboneSpec backbone_for(const ExperimentConfig& cfg, const ImageTensor& sample, int head_out) {
  BackboneSpec spec;
  spec.arch = cfg.arch;
  spec.width = cfg.width;
  spec.input_h = sample.height();
  spec.input_w = sample.width();
  spec.head_out = head_out;
  return spec;
}

RunRecord base_record(const ExperimentConfig& cfg, const std::string& method, const std::string& digest) {
  RunRecord r;
  r.task = to_string(cfg.task);
  r.method = method;
  r.ablation = cfg.ablation.name();
  r.config_digest = cfg.digest();
  r.build_id = build_id();
  r.dataset_digest = digest;
  r.started_at = utc_now();
  r.seed = cfg.seed;
  return r;
}

void evaluate_into(RunRecord& record, Artifacts& files, const ExperimentConfig& cfg, const ModelCheckpoint& ckpt,
                   const Splits& data, Protocol protocol) {
  phase("evaluate", [&] {
    if (data.test.images.empty()) throw ArgumentError("dataset has no held-out split to evaluate on");
    const auto& ds = cfg.evaluation.downstream;
    const auto seed = derive_seed(cfg.seed, 201);
    if (protocol == Protocol::finetune) {
      ModelCheckpoint tuned;
      record.reports.push_back(finetune_classifier(ckpt, data.train, data.test, ds, seed, &tuned));
      save_checkpoint(tuned, files.add("finetuned.ckpt"));
      record.checkpoints.push_back("finetuned.ckpt");
    } else if (cfg.evaluation.block == kAllBlocks) {
      record.reports = probe_all_blocks(ckpt, data.train, data.test, ds, seed);
    } else {
      record.reports.push_back(linear_probe(ckpt, data.train, data.test, cfg.evaluation.block, ds, seed));
    }
    json reports = json::array();
    for (const auto& r : record.reports) reports.push_back(r.to_json());
    write_file_atomic(files.add("eval.json"), reports.dump(2) + "\n");
    return 0;
  });
}

TrainHooks recording_hooks(const ExperimentConfig& cfg, Artifacts& files, RunRecord& record, std::ofstream& metrics,
                           const ScaleSchedule& schedule) {
  record.metrics_file = "metrics.jsonl";
  metrics.open(files.add("metrics.jsonl"), std::ios::binary | std::ios::trunc);
  TrainHooks hooks;
  hooks.record_wall_time = !cfg.deterministic;
  hooks.on_epoch = [&metrics](const EpochMetrics& m) { metrics << m.to_json_line() << '\n' << std::flush; };
  hooks.on_checkpoint = [&files, &record, &schedule](const ModelCheckpoint& ckpt, int stage, int epoch) {
    const auto& st = schedule.stages[static_cast<std::size_t>(stage)];
    std::string name = "stage" + std::to_string(stage) + "_alpha" + fmt(st.alpha);
    if (epoch < st.epochs) name += "_epoch" + std::to_string(epoch);
    name += ".ckpt";
    save_checkpoint(ckpt, files.add(name));
    if (std::find(record.checkpoints.begin(), record.checkpoints.end(), name) == record.checkpoints.end())
      record.checkpoints.push_back(name);
  };
  return hooks;
}

RunRecord pretrain_rotation(const ExperimentConfig& cfg, const Splits& data, const ScaleSchedule& schedule,
                            const std::string& method, const fs::path& dir) {
  Artifacts files(dir);
  RunRecord record = base_record(cfg, method, data.digest);
  record.alpha_schedule = alpha_schedule_text(schedule);
  record.lr_ladder = lr_schedule_text(schedule);
  std::ofstream metrics;
  try {
    auto hooks = recording_hooks(cfg, files, record, metrics, schedule);
    const auto spec = backbone_for(cfg, data.train.images.front(), kNumRotations);
    const auto chain = phase("pretrain", [&] { return train_scalenet_chain(spec, schedule, data.train.images, cfg.seed, hooks); });
    metrics.close();
    phase("evaluate", [&] {
      const auto& probe_set = data.test.images.empty() ? data.train.images : data.test.images;
      auto model = transfer_weights(chain.checkpoints.back(), backbone_for(cfg, probe_set.front(), kNumRotations), false,
                                    cfg.seed);
      record.pretext_acc = rotation_accuracy(model, apply_standardization(probe_set, chain.stage_stats.back()));
      return 0;
    });
    if (cfg.evaluation.protocol) evaluate_into(record, files, cfg, chain.checkpoints.back(), data, *cfg.evaluation.protocol);
  } catch (const std::exception& e) {
    record.error = e.what();
    record.finished_at = utc_now();
    write_record(record, files);
    throw;
  }
  record.finished_at = utc_now();
  write_record(record, files);
  return record;
}

ScaleSchedule contrastive_schedule(const ExperimentConfig& cfg, bool multiscale) {
  ScaleSchedule s = multiscale ? cfg.schedule : rotnet_schedule(cfg.schedule);
  for (auto& st : s.stages) st.lr = LrLadder{cfg.contrastive.lr, 1.0, {}};
  return s;
}

RunRecord pretrain_contrastive(const ExperimentConfig& cfg, const Splits& data, bool multiscale, const fs::path& dir) {
  Artifacts files(dir);
  const auto schedule = contrastive_schedule(cfg, multiscale);
  RunRecord record = base_record(cfg, multiscale ? "multiscale_simclr" : "simclr", data.digest);
  record.alpha_schedule = alpha_schedule_text(schedule);
  record.lr_ladder = lr_schedule_text(schedule);
  std::ofstream metrics;
  try {
    auto hooks = recording_hooks(cfg, files, record, metrics, schedule);
    const auto spec = backbone_for(cfg, data.train.images.front(), kNumRotations);
    const auto chain = phase("pretrain", [&] {
      return train_multiscale_simclr(spec, schedule, data.train.images, cfg.contrastive, cfg.seed, hooks);
    });
    metrics.close();
    if (cfg.evaluation.protocol) evaluate_into(record, files, cfg, chain.checkpoints.back(), data, *cfg.evaluation.protocol);
  } catch (const std::exception& e) {
    record.error = e.what();
    record.finished_at = utc_now();
    write_record(record, files);
    throw;
  }
  record.finished_at = utc_now();
  write_record(record, files);
  return record;
}

RunRecord evaluate_checkpoint(const ExperimentConfig& cfg, const Splits& data, Protocol protocol) {
  Artifacts files(cfg.out_dir);
  RunRecord record = base_record(cfg, to_string(protocol), data.digest);
  try {
    const auto ckpt = phase("checkpoint", [&] { return load_checkpoint(*cfg.checkpoint); });
    evaluate_into(record, files, cfg, ckpt, data, protocol);
    record.lr_ladder = ladder_text(cfg.evaluation.downstream.lr);
  } catch (const std::exception& e) {
    record.error = e.what();
    record.finished_at = utc_now();
    write_record(record, files);
    throw;
  }
  record.finished_at = utc_now();
  write_record(record, files);
  return record;
}

RunRecord gradcam_task(const ExperimentConfig& cfg, const Splits& data) {
  Artifacts files(cfg.out_dir);
  RunRecord record = base_record(cfg, "gradcam", data.digest);
  try {
    phase("gradcam", [&] {
      const auto ckpt = load_checkpoint(*cfg.checkpoint);
      const auto& source = data.test.images.empty() ? data.train : data.test;
      if (source.images.empty()) throw ArgumentError("no images to explain");
      BackboneSpec spec = backbone_for(cfg, source.images.front(), ckpt.meta.head_out);
      spec.arch = ckpt.meta.arch;
      spec.width = ckpt.meta.width;
      auto model = transfer_weights(ckpt, spec, false, cfg.seed);
      const auto stats = standardize(data.train.images).stats;
      const auto block = cfg.gradcam.block.empty() ? model->block_names().front() : cfg.gradcam.block;
      const bool classifier = ckpt.meta.head_out == source.num_classes() && !source.labels.empty();
      const int n = std::min<int>(cfg.gradcam.count, static_cast<int>(source.size()));
      for (int i = 0; i < n; ++i) {
        const int cls = cfg.gradcam.class_idx.value_or(classifier ? source.labels[static_cast<std::size_t>(i)] : 0);
        const auto img = apply_standardization({source.images[static_cast<std::size_t>(i)]}, stats).front();
        const auto map = gradcam(model, img, block, cls);
        const auto name = "gradcam_" + std::to_string(i) + ".png";
        json sidecar{{"checkpoint", cfg.checkpoint->string()},
                     {"arch", to_string(ckpt.meta.arch)},
                     {"stage_alpha", ckpt.meta.alpha},
                     {"block", block},
                     {"class_idx", cls},
                     {"image_index", i}};
        if (classifier) sidecar["class_name"] = source.class_names[static_cast<std::size_t>(cls)];
        write_heatmap(map, files.add(name), sidecar);
        files.add("gradcam_" + std::to_string(i) + ".json");
      }
      return 0;
    });
  } catch (const std::exception& e) {
    record.error = e.what();
    record.finished_at = utc_now();
    write_record(record, files);
    throw;
  }
  record.finished_at = utc_now();
  write_record(record, files);
  return record;
}

RunRecord ablation_suite(const ExperimentConfig& cfg) {
  Artifacts files(cfg.out_dir);
  RunRecord record = base_record(cfg, "ablation_suite", "");
  static const std::vector<std::string> variants{"none", "harris", "hybrid", "grayscale", "grayscale_harris"};
  try {
    for (const auto& variant : variants) {
      ExperimentConfig sub = cfg;
      sub.ablation = AblationSpec::from_name(variant);
      if (!sub.evaluation.protocol) sub.evaluation.protocol = Protocol::finetune;
      const auto data = load_splits(sub);
      record.dataset_digest = data.digest;
      for (const bool scalenet : {false, true}) {
        const auto method = scalenet ? "scalenet" : "rotnet";
        sub.task = scalenet ? Task::pretrain_scalenet : Task::pretrain_rotnet;
        const auto schedule = scalenet ? sub.schedule : rotnet_schedule(sub.schedule);
        record.children.push_back(pretrain_rotation(sub, data, schedule, method, cfg.out_dir / (variant + "_" + method)));
      }
    }
    phase("report", [&] {
      for (const auto& p : emit_report(record.children, cfg.out_dir / "report"))
        files.add(fs::relative(p, cfg.out_dir).string());
      return 0;
    });
    for (const auto& child : record.children)
      for (const auto& r : child.reports) record.reports.push_back(r);
  } catch (const std::exception& e) {
    record.error = e.what();
    record.finished_at = utc_now();
    write_record(record, files);
    throw;
  }
  record.finished_at = utc_now();
  write_record(record, files);
  return record;
}

// ---------------------------------------------------------------------------
// Report rendering.

struct Row {
  const RunRecord* record;
  std::string group;
  double downstream = NAN;
};

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {NAN, NAN};
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return {mean, NAN};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

std::string csv_num(double v) { return std::isnan(v) ? "" : fmt(v, 8); }

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

const cv::Scalar kPalette[] = {{180, 119, 31}, {14, 127, 255}, {44, 160, 44},  {40, 39, 214},  {189, 103, 148},
                               {75, 86, 140},  {194, 119, 227}, {127, 127, 127}, {34, 189, 188}, {207, 190, 23}};

void plot_bars(const std::vector<std::string>& labels, const std::vector<double>& means, const std::vector<double>& stds,
               const fs::path& path) {
  const int bar = 60, gap = 30, left = 60, top = 40, height = 300, bottom = 150;
  const int width = left + static_cast<int>(labels.size()) * (bar + gap) + gap;
  cv::Mat img(top + height + bottom, std::max(width, 320), CV_8UC3, cv::Scalar(255, 255, 255));
  cv::line(img, {left, top}, {left, top + height}, {0, 0, 0});
  cv::line(img, {left, top + height}, {img.cols - 10, top + height}, {0, 0, 0});
  for (int t = 0; t <= 4; ++t) {
    const int y = top + height - t * height / 4;
    cv::line(img, {left - 4, y}, {left, y}, {0, 0, 0});
    cv::putText(img, fmt(t * 0.25, 2), {8, y + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.4, {0, 0, 0});
  }
  cv::putText(img, "downstream accuracy", {left, 24}, cv::FONT_HERSHEY_SIMPLEX, 0.6, {0, 0, 0});
  for (std::size_t k = 0; k < labels.size(); ++k) {
    const int x = left + gap + static_cast<int>(k) * (bar + gap);
    const double m = std::isnan(means[k]) ? 0.0 : std::clamp(means[k], 0.0, 1.0);
    const int y = top + height - static_cast<int>(std::lround(m * height));
    cv::rectangle(img, {x, y}, {x + bar, top + height}, kPalette[k % 10], cv::FILLED);
    if (!std::isnan(stds[k])) {
      const int dy = static_cast<int>(std::lround(stds[k] * height));
      cv::line(img, {x + bar / 2, y - dy}, {x + bar / 2, y + dy}, {0, 0, 0}, 2);
    }
    cv::Mat text(20, 140, CV_8UC3, cv::Scalar(255, 255, 255));
    cv::putText(text, labels[k].substr(0, 22), {2, 14}, cv::FONT_HERSHEY_SIMPLEX, 0.4, {0, 0, 0});
    cv::Mat rotated;
    cv::rotate(text, rotated, cv::ROTATE_90_COUNTERCLOCKWISE);
    const int tx = x + bar / 2 - 10;
    if (tx + rotated.cols <= img.cols) rotated.copyTo(img(cv::Rect(tx, top + height + 4, rotated.cols, rotated.rows)));
  }
  std::vector<std::uint8_t> png;
  cv::imencode(".png", img, png);
  write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(png.data()), png.size()));
}

void plot_lines(const std::vector<std::string>& labels, const std::vector<std::vector<double>>& series,
                const fs::path& path) {
  const int left = 60, top = 40, w = 520, h = 300;
  cv::Mat img(top + h + 40 + 16 * static_cast<int>(labels.size()), left + w + 20, CV_8UC3, cv::Scalar(255, 255, 255));
  double lo = INFINITY, hi = -INFINITY;
  std::size_t len = 1;
  for (const auto& s : series) {
    for (double v : s) lo = std::min(lo, v), hi = std::max(hi, v);
    len = std::max(len, s.size());
  }
  if (!(hi > lo)) lo = 0.0, hi = std::isfinite(hi) ? hi + 1.0 : 1.0;
  cv::line(img, {left, top}, {left, top + h}, {0, 0, 0});
  cv::line(img, {left, top + h}, {left + w, top + h}, {0, 0, 0});
  cv::putText(img, "training loss per epoch", {left, 24}, cv::FONT_HERSHEY_SIMPLEX, 0.6, {0, 0, 0});
  cv::putText(img, fmt(hi, 3), {4, top + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.4, {0, 0, 0});
  cv::putText(img, fmt(lo, 3), {4, top + h}, cv::FONT_HERSHEY_SIMPLEX, 0.4, {0, 0, 0});
  for (std::size_t k = 0; k < series.size(); ++k) {
    std::vector<cv::Point> pts;
    for (std::size_t i = 0; i < series[k].size(); ++i) {
      const int x = left + static_cast<int>(std::lround(static_cast<double>(i) / std::max<double>(1.0, len - 1.0) * w));
      const int y = top + h - static_cast<int>(std::lround((series[k][i] - lo) / (hi - lo) * h));
      pts.push_back({x, y});
    }
    if (pts.size() > 1) cv::polylines(img, pts, false, kPalette[k % 10], 2);
    const int ly = top + h + 30 + 16 * static_cast<int>(k);
    cv::line(img, {left, ly - 4}, {left + 20, ly - 4}, kPalette[k % 10], 2);
    cv::putText(img, labels[k], {left + 26, ly}, cv::FONT_HERSHEY_SIMPLEX, 0.4, {0, 0, 0});
  }
  std::vector<std::uint8_t> png;
  cv::imencode(".png", img, png);
  write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(png.data()), png.size()));
}

void collect_leaves(const RunRecord& r, std::vector<const RunRecord*>& out) {
  if (r.children.empty()) {
    out.push_back(&r);
    return;
  }
  for (const auto& c : r.children) collect_leaves(c, out);
}

}  // namespace

// ---------------------------------------------------------------------------

std::string to_string(Task task) {
  for (const auto& [t, name] : task_names())
    if (t == task) return name;
  return "unknown";
}

Task task_from_string(const std::string& s) {
  for (const auto& [t, name] : task_names())
    if (name == s) return t;
  throw ConfigError("unknown task '" + s + "'");
}

std::string AblationSpec::name() const {
  std::string base = grayscale ? "grayscale" : "";
  std::string tail = hybrid_prob ? "hybrid" : corner_removal ? "harris" : "";
  if (base.empty()) return tail.empty() ? "none" : tail;
  return tail.empty() ? base : base + "_" + tail;
}

AblationSpec AblationSpec::from_name(const std::string& name) {
  AblationSpec a;
  if (name == "none") return a;
  if (name == "harris") a.corner_removal = true;
  else if (name == "grayscale") a.grayscale = true;
  else if (name == "grayscale_harris") a.grayscale = a.corner_removal = true;
  else if (name == "hybrid") a.hybrid_prob = 0.5;
  else if (name == "grayscale_hybrid") a.grayscale = true, a.hybrid_prob = 0.5;
  else throw ConfigError("unknown ablation '" + name + "'");
  return a;
}

void AblationSpec::validate() const {
  if (hybrid_prob && !(*hybrid_prob >= 0.0 && *hybrid_prob <= 1.0)) throw ConfigError("hybrid_prob must lie in [0, 1]");
  if (hybrid_prob && corner_removal) throw ConfigError("hybrid_prob already mixes corner removal; unset corner_removal");
}

ScaleSchedule rotnet_schedule(const ScaleSchedule& schedule) {
  if (schedule.stages.empty()) throw ConfigError("schedule has no stages");
  ScaleSchedule s;
  s.optimizer = schedule.optimizer;
  ScaleStage st = schedule.stages.front();
  st.alpha = 1.0;
  st.epochs = schedule.stages.back().epochs;
  s.stages.push_back(st);
  return s;
}

ExperimentConfig default_config() {
  ExperimentConfig c;
  c.dataset.path = "data/cifar-10-batches-py";
  c.schedule = make_schedule({0.5, 1.0}, {0.1, 0.05}, {30});
  return c;
}

json ExperimentConfig::to_json() const {
  json stages_alpha = json::array(), stages_lr = json::array(), stages_epochs = json::array();
  for (const auto& st : schedule.stages) {
    stages_alpha.push_back(st.alpha);
    stages_lr.push_back(st.lr.initial_lr);
    stages_epochs.push_back(st.epochs);
  }
  const LrLadder ladder = schedule.stages.empty() ? LrLadder{} : schedule.stages.front().lr;
  json augs = json::array();
  for (auto a : contrastive.augmentations) augs.push_back(augmentation_name(a));
  const auto& ds = evaluation.downstream;
  return json{
      {"task", to_string(task)},
      {"dataset",
       {{"kind", to_string(dataset.kind)},
        {"path", dataset.path.string()},
        {"subset_n", opt_json(subset_n)},
        {"subset_seed", subset_seed},
        {"image_side", opt_json(dataset.image_side)}}},
      {"model", {{"arch", to_string(arch)}, {"width", width}}},
      {"schedule",
       {{"alphas", stages_alpha},
        {"lrs", stages_lr},
        {"epochs", stages_epochs},
        {"decay_factor", ladder.decay_factor},
        {"milestones", ladder.milestones},
        {"batch_images", schedule.optimizer.batch_images},
        {"count_expanded", schedule.optimizer.count_expanded},
        {"momentum", schedule.optimizer.momentum},
        {"weight_decay", schedule.optimizer.weight_decay}}},
      {"contrastive",
       {{"temperature", contrastive.temperature},
        {"batch_pairs", contrastive.batch_pairs},
        {"proj_dim", contrastive.proj_dim},
        {"lr", contrastive.lr},
        {"color_strength", contrastive.color_strength},
        {"crop_min_scale", contrastive.crop_min_scale},
        {"augmentations", augs}}},
      {"ablation",
       {{"corner_removal", ablation.corner_removal},
        {"grayscale", ablation.grayscale},
        {"hybrid_prob", opt_json(ablation.hybrid_prob)}}},
      {"evaluation",
       {{"protocol", evaluation.protocol ? to_string(*evaluation.protocol) : "none"},
        {"block", evaluation.block},
        {"lr", ds.lr.initial_lr},
        {"decay_factor", ds.lr.decay_factor},
        {"milestones", ds.lr.milestones},
        {"epochs", ds.epochs},
        {"batch_size", ds.batch_size},
        {"momentum", ds.momentum},
        {"weight_decay", ds.weight_decay}}},
      {"checkpoint", checkpoint ? json(checkpoint->string()) : json(nullptr)},
      {"gradcam",
       {{"block", gradcam.block}, {"class_idx", opt_json(gradcam.class_idx)}, {"count", gradcam.count}}},
      {"seed", seed},
      {"deterministic", deterministic},
      {"out_dir", out_dir.string()}};
}

ExperimentConfig ExperimentConfig::from_json(const json& input) {
  json doc = default_config().to_json();
  // A linear probe defaults to its own ladder unless the caller set one.
  const bool probe = input.contains("evaluation") && input["evaluation"].is_object() &&
                     input["evaluation"].value("protocol", std::string()) == "linear_probe";
  if (probe || (input.value("task", std::string()) == "probe")) {
    const auto p = probe_defaults();
    doc["evaluation"]["lr"] = p.lr.initial_lr;
    doc["evaluation"]["milestones"] = p.lr.milestones;
    doc["evaluation"]["epochs"] = p.epochs;
    doc["evaluation"]["decay_factor"] = p.lr.decay_factor;
  }
  overlay(doc, input, "");

  ExperimentConfig c;
  c.task = task_from_string(get<std::string>(doc, "task", ""));
  const auto& d = doc["dataset"];
  c.dataset.kind = dataset_kind_from_string(get<std::string>(d, "kind", "dataset."));
  c.dataset.path = get<std::string>(d, "path", "dataset.");
  c.dataset.image_side = get_opt<int>(d, "image_side", "dataset.");
  c.subset_n = get_opt<std::size_t>(d, "subset_n", "dataset.");
  c.subset_seed = get<std::uint64_t>(d, "subset_seed", "dataset.");

  c.arch = arch_from_string(get<std::string>(doc["model"], "arch", "model."));
  c.width = get<int>(doc["model"], "width", "model.");

  const auto& s = doc["schedule"];
  OptimizerConfig opt;
  opt.batch_images = get<int>(s, "batch_images", "schedule.");
  opt.count_expanded = get<bool>(s, "count_expanded", "schedule.");
  opt.momentum = get<double>(s, "momentum", "schedule.");
  opt.weight_decay = get<double>(s, "weight_decay", "schedule.");
  try {
    c.schedule = make_schedule(get<std::vector<double>>(s, "alphas", "schedule."),
                               get<std::vector<double>>(s, "lrs", "schedule."),
                               get<std::vector<int>>(s, "epochs", "schedule."), opt);
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(std::string("schedule: ") + e.what());
  }
  for (auto& st : c.schedule.stages) {
    st.lr.decay_factor = get<double>(s, "decay_factor", "schedule.");
    st.lr.milestones = get<std::vector<int>>(s, "milestones", "schedule.");
  }

  const auto& k = doc["contrastive"];
  c.contrastive.temperature = get<double>(k, "temperature", "contrastive.");
  c.contrastive.batch_pairs = get<int>(k, "batch_pairs", "contrastive.");
  c.contrastive.proj_dim = get<int>(k, "proj_dim", "contrastive.");
  c.contrastive.lr = get<double>(k, "lr", "contrastive.");
  c.contrastive.color_strength = get<double>(k, "color_strength", "contrastive.");
  c.contrastive.crop_min_scale = get<double>(k, "crop_min_scale", "contrastive.");
  c.contrastive.augmentations.clear();
  for (const auto& a : get<std::vector<std::string>>(k, "augmentations", "contrastive."))
    c.contrastive.augmentations.push_back(augmentation_from(a));

  const auto& a = doc["ablation"];
  c.ablation.corner_removal = get<bool>(a, "corner_removal", "ablation.");
  c.ablation.grayscale = get<bool>(a, "grayscale", "ablation.");
  c.ablation.hybrid_prob = get_opt<double>(a, "hybrid_prob", "ablation.");

  const auto& e = doc["evaluation"];
  const auto protocol = get<std::string>(e, "protocol", "evaluation.");
  if (protocol == "finetune") c.evaluation.protocol = Protocol::finetune;
  else if (protocol == "linear_probe") c.evaluation.protocol = Protocol::linear_probe;
  else if (protocol != "none") throw ConfigError("unknown evaluation protocol '" + protocol + "'");
  c.evaluation.block = get<std::string>(e, "block", "evaluation.");
  auto& ds = c.evaluation.downstream;
  ds.lr.initial_lr = get<double>(e, "lr", "evaluation.");
  ds.lr.decay_factor = get<double>(e, "decay_factor", "evaluation.");
  ds.lr.milestones = get<std::vector<int>>(e, "milestones", "evaluation.");
  ds.epochs = get<int>(e, "epochs", "evaluation.");
  ds.batch_size = get<int>(e, "batch_size", "evaluation.");
  ds.momentum = get<double>(e, "momentum", "evaluation.");
  ds.weight_decay = get<double>(e, "weight_decay", "evaluation.");

  if (auto ck = get_opt<std::string>(doc, "checkpoint", "")) c.checkpoint = *ck;
  const auto& g = doc["gradcam"];
  c.gradcam.block = get<std::string>(g, "block", "gradcam.");
  c.gradcam.class_idx = get_opt<int>(g, "class_idx", "gradcam.");
  c.gradcam.count = get<int>(g, "count", "gradcam.");

  c.seed = get<std::uint64_t>(doc, "seed", "");
  c.deterministic = get<bool>(doc, "deterministic", "");
  c.out_dir = get<std::string>(doc, "out_dir", "");
  return c;
}

void ExperimentConfig::validate() const {
  try {
    schedule.validate();
    contrastive.validate();
    evaluation.downstream.lr.validate();
    BackboneSpec{arch, 32, 32, kNumRotations, width}.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  ablation.validate();
  if (width < 0) throw ConfigError("model width must be >= 0");
  if (evaluation.downstream.epochs < 0 || evaluation.downstream.batch_size < 2)
    throw ConfigError("evaluation needs epochs >= 0 and batch_size >= 2");
  if (dataset.image_side && *dataset.image_side < 8) throw ConfigError("image_side must be >= 8");
  if (subset_n && *subset_n == 0) throw ConfigError("subset_n must be positive");
  if (gradcam.count < 1) throw ConfigError("gradcam.count must be >= 1");
  if (!fs::exists(dataset.path)) throw ConfigError("dataset path '" + dataset.path.string() + "' does not exist");
  const bool needs_ckpt = task == Task::finetune || task == Task::probe || task == Task::gradcam;
  if (needs_ckpt && !checkpoint) throw ConfigError(to_string(task) + " needs a checkpoint path");
  if (checkpoint && !fs::exists(*checkpoint))
    throw ConfigError("checkpoint '" + checkpoint->string() + "' does not exist");
  if (out_dir.empty()) throw ConfigError("out_dir must be set");
}

std::string ExperimentConfig::digest() const {
  auto j = to_json();
  j.erase("out_dir");
  return sha256_hex(j.dump());
}

json load_config_json(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void set_config_value(json& doc, const std::string& dotted_key, json value) {
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = dotted_key.find('.', start);
    const auto key = dotted_key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("malformed config key '" + dotted_key + "'");
    if (!node->is_object()) *node = json::object();
    if (dot == std::string::npos) {
      (*node)[key] = std::move(value);
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

std::string build_id() { return SCALENET_BUILD_ID; }

json RunRecord::to_json() const {
  json reps = json::array();
  for (const auto& r : reports) reps.push_back(r.to_json());
  json kids = json::array();
  for (const auto& c : children) kids.push_back(fs::relative(c.dir / kRecordFile, dir).string());
  return json{{"task", task},
              {"method", method},
              {"ablation", ablation},
              {"config_digest", config_digest},
              {"build_id", build_id},
              {"dataset_digest", dataset_digest},
              {"started_at", started_at},
              {"finished_at", finished_at},
              {"seed", seed},
              {"alpha_schedule", alpha_schedule},
              {"lr_ladder", lr_ladder},
              {"checkpoints", checkpoints},
              {"metrics_file", opt_json(metrics_file)},
              {"artifacts", artifacts},
              {"pretext_acc", opt_json(pretext_acc)},
              {"reports", reps},
              {"children", kids},
              {"error", opt_json(error)}};
}

RunRecord RunRecord::from_json(const json& j, const fs::path& dir) {
  RunRecord r;
  r.dir = dir;
  r.task = j.at("task").get<std::string>();
  r.method = j.at("method").get<std::string>();
  r.ablation = j.at("ablation").get<std::string>();
  r.config_digest = j.at("config_digest").get<std::string>();
  r.build_id = j.at("build_id").get<std::string>();
  r.dataset_digest = j.at("dataset_digest").get<std::string>();
  r.started_at = j.at("started_at").get<std::string>();
  r.finished_at = j.at("finished_at").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.alpha_schedule = j.at("alpha_schedule").get<std::string>();
  r.lr_ladder = j.at("lr_ladder").get<std::string>();
  r.checkpoints = j.at("checkpoints").get<std::vector<std::string>>();
  if (!j.at("metrics_file").is_null()) r.metrics_file = j.at("metrics_file").get<std::string>();
  r.artifacts = j.at("artifacts").get<std::vector<std::string>>();
  if (!j.at("pretext_acc").is_null()) r.pretext_acc = j.at("pretext_acc").get<double>();
  for (const auto& rep : j.at("reports")) r.reports.push_back(EvalReport::from_json(rep));
  for (const auto& child : j.at("children")) r.children.push_back(load_record(dir / child.get<std::string>()));
  if (!j.at("error").is_null()) r.error = j.at("error").get<std::string>();
  return r;
}

RunRecord load_record(const fs::path& record_json) {
  try {
    return RunRecord::from_json(json::parse(read_file(record_json)), record_json.parent_path());
  } catch (const json::exception& e) {
    throw ArgumentError(record_json.string() + ": " + e.what());
  }
}

RunRecord run(const ExperimentConfig& config) {
  phase("config", [&] {
    config.validate();
    return 0;
  });
  if (config.deterministic) enable_deterministic_mode();
  fs::create_directories(config.out_dir);
  switch (config.task) {
    case Task::pretrain_rotnet:
      return pretrain_rotation(config, load_splits(config), rotnet_schedule(config.schedule), "rotnet", config.out_dir);
    case Task::pretrain_scalenet:
      return pretrain_rotation(config, load_splits(config), config.schedule, "scalenet", config.out_dir);
    case Task::pretrain_simclr:
      return pretrain_contrastive(config, load_splits(config), false, config.out_dir);
    case Task::pretrain_multiscale_simclr:
      return pretrain_contrastive(config, load_splits(config), true, config.out_dir);
    case Task::finetune:
      return evaluate_checkpoint(config, load_splits(config), Protocol::finetune);
    case Task::probe:
      return evaluate_checkpoint(config, load_splits(config), Protocol::linear_probe);
    case Task::gradcam:
      return gradcam_task(config, load_splits(config));
    case Task::ablation_suite:
      return ablation_suite(config);
  }
  throw PipelineError("config", "unhandled task");
}

std::vector<fs::path> emit_report(const std::vector<RunRecord>& records, const fs::path& out_dir) {
  if (records.empty()) throw ArgumentError("emit_report needs at least one record");
  std::vector<const RunRecord*> leaves;
  for (const auto& r : records) collect_leaves(r, leaves);
  const auto& digest = leaves.front()->dataset_digest;
  for (const auto* r : leaves)
    if (r->dataset_digest != digest)
      throw ArgumentError("records come from different datasets (" + digest.substr(0, 12) + " vs " +
                          r->dataset_digest.substr(0, 12) + ")");

  std::vector<Row> rows;
  std::vector<std::string> group_order;
  std::map<std::string, std::vector<double>> down_by_group, pre_by_group;
  for (const auto* r : leaves) {
    Row row{r, r->method + "|" + r->ablation + "|" + r->alpha_schedule + "|" + r->lr_ladder};
    // Fine-tuned accuracy when present, otherwise the best probed block.
    for (const auto& rep : r->reports)
      if (rep.protocol == Protocol::finetune) row.downstream = rep.accuracy;
    if (std::isnan(row.downstream))
      for (const auto& rep : r->reports)
        row.downstream = std::isnan(row.downstream) ? rep.accuracy : std::max(row.downstream, rep.accuracy);
    if (!down_by_group.count(row.group) && !pre_by_group.count(row.group)) group_order.push_back(row.group);
    if (!std::isnan(row.downstream)) down_by_group[row.group].push_back(row.downstream);
    else down_by_group[row.group];
    if (r->pretext_acc) pre_by_group[row.group].push_back(*r->pretext_acc);
    else pre_by_group[row.group];
    rows.push_back(row);
  }

  fs::create_directories(out_dir);
  std::ostringstream csv;
  csv << "method,ablation,alpha_schedule,lr_ladder,seed,pretext_acc,downstream_acc,group_runs,"
         "pretext_mean,pretext_std,downstream_mean,downstream_std\n";
  for (const auto& row : rows) {
    const auto [pm, ps] = mean_std(pre_by_group[row.group]);
    const auto [dm, dsd] = mean_std(down_by_group[row.group]);
    const auto* r = row.record;
    csv << csv_field(r->method) << ',' << csv_field(r->ablation) << ',' << csv_field(r->alpha_schedule) << ','
        << csv_field(r->lr_ladder) << ',' << r->seed << ',' << csv_num(r->pretext_acc.value_or(NAN)) << ','
        << csv_num(row.downstream) << ',' << std::max(down_by_group[row.group].size(), pre_by_group[row.group].size())
        << ',' << csv_num(pm) << ',' << csv_num(ps) << ',' << csv_num(dm) << ',' << csv_num(dsd) << '\n';
  }
  std::vector<fs::path> written{out_dir / "summary.csv", out_dir / "downstream_acc.png", out_dir / "train_loss.png"};
  write_file_atomic(written[0], csv.str());

  std::vector<std::string> labels;
  std::vector<double> means, stds;
  for (const auto& g : group_order) {
    const auto [m, s] = mean_std(down_by_group[g]);
    labels.push_back(g.substr(0, g.find('|', g.find('|') + 1)));
    means.push_back(m);
    stds.push_back(s);
  }
  plot_bars(labels, means, stds, written[1]);

  std::vector<std::string> line_labels;
  std::vector<std::vector<double>> series;
  for (const auto* r : leaves) {
    if (!r->metrics_file) continue;
    std::ifstream in(r->dir / *r->metrics_file);
    std::vector<double> losses;
    for (std::string line; std::getline(in, line);)
      if (!line.empty()) losses.push_back(json::parse(line).at("train_loss").get<double>());
    if (losses.empty()) continue;
    series.push_back(std::move(losses));
    line_labels.push_back(r->method + " " + r->ablation + " seed " + std::to_string(r->seed));
  }
  plot_lines(line_labels, series, written[2]);
  return written;
}

}  // namespace scalenet
