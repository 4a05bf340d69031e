// Command-line front end: pretrain, evaluate, ablation, gradcam, report.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "scalenet/data.hpp"
#include "scalenet/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace scalenet;

namespace {

struct CommonFlags {
  std::string config;
  std::string data;
  std::string dataset_kind;
  std::vector<double> alphas;
  std::vector<double> lrs;
  std::vector<int> epochs;
  std::string arch;
  std::optional<int> width;
  std::optional<std::size_t> subset_n;
  std::optional<std::uint64_t> subset_seed;
  std::string ablation;
  std::optional<int> batch_images;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  std::string out;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "JSON experiment config; flags override its values")->check(CLI::ExistingFile);
  cmd->add_option("--data", f.data, "dataset directory");
  cmd->add_option("--dataset-kind", f.dataset_kind, "cifar10_archive or image_folder");
  cmd->add_option("--alphas", f.alphas, "resize operator per stage, e.g. 0.5,1")->delimiter(',');
  cmd->add_option("--lrs", f.lrs, "initial learning rate per stage")->delimiter(',');
  cmd->add_option("--epochs", f.epochs, "epochs per stage (one value applies to all)")->delimiter(',');
  cmd->add_option("--arch", f.arch, "resnet50_style, alexnet_style or small_convnet");
  cmd->add_option("--width", f.width, "base channel width (0 = architecture default)");
  cmd->add_option("--subset-n", f.subset_n, "train on a uniform random subset of this size");
  cmd->add_option("--subset-seed", f.subset_seed, "seed of the subset draw");
  cmd->add_option("--ablation", f.ablation, "none, harris, grayscale, grayscale_harris or hybrid");
  cmd->add_option("--batch-images", f.batch_images, "source images per optimizer step");
  cmd->add_option("--seed", f.seed, "training seed");
  cmd->add_flag("--deterministic", f.deterministic, "single-threaded deterministic kernels, no wall times");
  cmd->add_option("--out", f.out, "output directory");
}

json build_doc(const CommonFlags& f) {
  json doc = f.config.empty() ? json::object() : load_config_json(f.config);
  if (!f.data.empty()) set_config_value(doc, "dataset.path", f.data);
  if (!f.dataset_kind.empty()) set_config_value(doc, "dataset.kind", f.dataset_kind);
  if (!f.alphas.empty()) set_config_value(doc, "schedule.alphas", f.alphas);
  if (!f.lrs.empty()) set_config_value(doc, "schedule.lrs", f.lrs);
  if (!f.epochs.empty()) set_config_value(doc, "schedule.epochs", f.epochs);
  if (!f.arch.empty()) set_config_value(doc, "model.arch", f.arch);
  if (f.width) set_config_value(doc, "model.width", *f.width);
  if (f.subset_n) set_config_value(doc, "dataset.subset_n", *f.subset_n);
  if (f.subset_seed) set_config_value(doc, "dataset.subset_seed", *f.subset_seed);
  if (!f.ablation.empty()) {
    const auto a = AblationSpec::from_name(f.ablation);
    set_config_value(doc, "ablation.corner_removal", a.corner_removal);
    set_config_value(doc, "ablation.grayscale", a.grayscale);
    set_config_value(doc, "ablation.hybrid_prob", a.hybrid_prob ? json(*a.hybrid_prob) : json(nullptr));
  }
  if (f.batch_images) set_config_value(doc, "schedule.batch_images", *f.batch_images);
  if (f.seed) set_config_value(doc, "seed", *f.seed);
  if (f.deterministic) set_config_value(doc, "deterministic", true);
  if (!f.out.empty()) set_config_value(doc, "out_dir", f.out);
  return doc;
}

void print_summary(const RunRecord& r) {
  std::cout << "task " << r.task << " (" << r.method << ", ablation " << r.ablation << ")\n";
  std::cout << "config " << r.config_digest.substr(0, 16) << "  dataset " << r.dataset_digest.substr(0, 16) << "\n";
  if (r.pretext_acc) std::cout << "pretext accuracy " << *r.pretext_acc << "\n";
  for (const auto& rep : r.reports) {
    std::cout << to_string(rep.protocol);
    if (rep.probe_block) std::cout << " " << *rep.probe_block;
    std::cout << " accuracy " << rep.accuracy << "\n";
  }
  std::cout << "record " << (r.dir / kRecordFile).string() << "\n";
}

std::vector<RunRecord> gather_records(const std::vector<std::string>& inputs) {
  std::vector<RunRecord> out;
  for (const auto& in : inputs) {
    const fs::path p(in);
    if (fs::is_directory(p)) {
      if (!fs::exists(p / kRecordFile)) throw ArgumentError(p.string() + ": no " + kRecordFile);
      out.push_back(load_record(p / kRecordFile));
    } else {
      out.push_back(load_record(p));
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-scale rotation and contrastive self-supervised pretraining"};
  app.require_subcommand(1);

  CommonFlags pre_flags, eval_flags, abl_flags, cam_flags;
  std::string method = "scalenet";
  auto* pretrain = app.add_subcommand("pretrain", "pretext or contrastive pretraining");
  add_common(pretrain, pre_flags);
  pretrain->add_option("--method", method, "rotnet, scalenet, simclr or multiscale_simclr");
  std::string protocol;
  pretrain->add_option("--evaluate", protocol, "finetune or linear_probe after pretraining");

  std::string eval_protocol = "finetune", eval_ckpt, eval_block;
  auto* evaluate = app.add_subcommand("evaluate", "fine-tune or linear-probe a checkpoint");
  add_common(evaluate, eval_flags);
  evaluate->add_option("--protocol", eval_protocol, "finetune or linear_probe");
  evaluate->add_option("--checkpoint", eval_ckpt, "checkpoint to evaluate")->required();
  evaluate->add_option("--block", eval_block, "probe block name, or ALL");

  auto* ablation = app.add_subcommand("ablation", "original/Harris/hybrid/grayscale grid for RotNet and ScaleNet");
  add_common(ablation, abl_flags);

  std::string cam_ckpt, cam_block;
  std::optional<int> cam_class;
  int cam_count = 8;
  auto* cam = app.add_subcommand("gradcam", "Grad-CAM heatmaps for test images");
  add_common(cam, cam_flags);
  cam->add_option("--checkpoint", cam_ckpt, "model checkpoint")->required();
  cam->add_option("--block", cam_block, "block to explain");
  cam->add_option("--class-idx", cam_class, "class to explain (default: true label or upright)");
  cam->add_option("--count", cam_count, "number of images");

  std::vector<std::string> report_inputs;
  std::string report_out = "report";
  auto* report = app.add_subcommand("report", "CSV table and plots from run records");
  report->add_option("records", report_inputs, "record.json files or run directories")->required();
  report->add_option("--out", report_out, "output directory");

  std::string synth_out;
  SynthOptions synth;
  auto* synth_cmd = app.add_subcommand("synth-data", "write a synthetic dataset in the CIFAR-10 python layout");
  synth_cmd->add_option("--out", synth_out, "output directory")->required();
  synth_cmd->add_option("--train-per-class", synth.train_per_class, "train images per class");
  synth_cmd->add_option("--test-per-class", synth.test_per_class, "test images per class");
  synth_cmd->add_option("--seed", synth.seed, "generator seed");

  CLI11_PARSE(app, argc, argv);

  std::string current_phase = "config";
  try {
    if (*report) {
      current_phase = "report";
      for (const auto& p : emit_report(gather_records(report_inputs), report_out)) std::cout << p.string() << "\n";
      return 0;
    }
    if (*synth_cmd) {
      current_phase = "synth";
      write_synthetic_cifar(synth_out, synth);
      std::cout << "wrote " << synth_out << "\n";
      return 0;
    }

    json doc;
    if (*pretrain) {
      doc = build_doc(pre_flags);
      static const std::map<std::string, std::string> tasks{{"rotnet", "pretrain_rotnet"},
                                                            {"scalenet", "pretrain_scalenet"},
                                                            {"simclr", "pretrain_simclr"},
                                                            {"multiscale_simclr", "pretrain_multiscale_simclr"}};
      const auto it = tasks.find(method);
      if (it == tasks.end()) throw ConfigError("unknown method '" + method + "'");
      set_config_value(doc, "task", it->second);
      if (!protocol.empty()) set_config_value(doc, "evaluation.protocol", protocol);
    } else if (*evaluate) {
      doc = build_doc(eval_flags);
      set_config_value(doc, "task", eval_protocol == "linear_probe" ? "probe" : "finetune");
      set_config_value(doc, "evaluation.protocol", eval_protocol);
      set_config_value(doc, "checkpoint", eval_ckpt);
      if (!eval_block.empty()) set_config_value(doc, "evaluation.block", eval_block);
    } else if (*ablation) {
      doc = build_doc(abl_flags);
      set_config_value(doc, "task", "ablation_suite");
    } else {
      doc = build_doc(cam_flags);
      set_config_value(doc, "task", "gradcam");
      set_config_value(doc, "checkpoint", cam_ckpt);
      if (!cam_block.empty()) set_config_value(doc, "gradcam.block", cam_block);
      if (cam_class) set_config_value(doc, "gradcam.class_idx", *cam_class);
      set_config_value(doc, "gradcam.count", cam_count);
    }
    const auto config = ExperimentConfig::from_json(doc);
    print_summary(run(config));
    return 0;
  } catch (const PipelineError& e) {
    std::cerr << "error " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error [" << current_phase << "] " << e.what() << "\n";
    return 1;
  }
}
