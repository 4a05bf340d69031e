#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "scalenet/checkpoint.hpp"
#include "scalenet/contrastive.hpp"
#include "scalenet/data.hpp"
#include "scalenet/error.hpp"
#include "scalenet/eval.hpp"
#include "scalenet/pretext.hpp"

namespace scalenet {

enum class Task {
  pretrain_rotnet,
  pretrain_scalenet,
  pretrain_simclr,
  pretrain_multiscale_simclr,
  finetune,
  probe,
  gradcam,
  ablation_suite
};

std::string to_string(Task task);
Task task_from_string(const std::string& s);

struct AblationSpec {
  bool corner_removal = false;
  bool grayscale = false;
  std::optional<double> hybrid_prob;

  // none, harris, grayscale, grayscale_harris, hybrid, grayscale_hybrid
  std::string name() const;
  static AblationSpec from_name(const std::string& name);
  void validate() const;
};

struct EvaluationSpec {
  // Unset skips evaluation after pretraining.
  std::optional<Protocol> protocol;
  std::string block = "ALL";  // linear probe block, or every block
  DownstreamConfig downstream = finetune_defaults();
};

struct GradcamSpec {
  std::string block;  // empty selects the first block
  std::optional<int> class_idx;
  int count = 8;
};

struct ExperimentConfig {
  Task task = Task::pretrain_scalenet;
  DatasetSpec dataset;
  std::optional<std::size_t> subset_n;
  std::uint64_t subset_seed = 0;
  Arch arch = Arch::small_convnet;
  int width = 0;
  ScaleSchedule schedule;
  ContrastiveConfig contrastive;
  AblationSpec ablation;
  EvaluationSpec evaluation;
  std::optional<std::filesystem::path> checkpoint;
  GradcamSpec gradcam;
  std::uint64_t seed = 0;
  bool deterministic = false;
  std::filesystem::path out_dir = "runs";

  // Every field, defaults filled in.
  nlohmann::json to_json() const;
  // Missing keys keep their defaults; unknown keys are rejected.
  static ExperimentConfig from_json(const nlohmann::json& j);
  // Schema-level checks plus existence of the referenced input paths.
  void validate() const;
  // SHA-256 of the canonical (key-sorted, compact) JSON form, out_dir excluded.
  std::string digest() const;
};

ExperimentConfig default_config();
nlohmann::json load_config_json(const std::filesystem::path& path);
// Sets `dotted.key` in a config document, creating objects on the way.
void set_config_value(nlohmann::json& doc, const std::string& dotted_key, nlohmann::json value);

// RotNet baseline matching a ScaleNet schedule: only the alpha = 1 stage, at
// the first stage's learning-rate ladder and the last stage's epoch budget.
ScaleSchedule rotnet_schedule(const ScaleSchedule& schedule);

// Failure inside run(), tagged with the pipeline phase it occurred in.
class PipelineError : public Error {
 public:
  PipelineError(std::string phase, const std::string& what)
      : Error("[" + phase + "] " + what), phase_(std::move(phase)) {}
  const std::string& phase() const { return phase_; }

 private:
  std::string phase_;
};

struct RunRecord {
  std::string task;
  std::string method;
  std::string ablation = "none";
  std::string config_digest;
  std::string build_id;
  std::string dataset_digest;
  std::string started_at;
  std::string finished_at;
  std::uint64_t seed = 0;
  std::string alpha_schedule;
  std::string lr_ladder;
  // Paths are relative to `dir`.
  std::vector<std::string> checkpoints;
  std::optional<std::string> metrics_file;
  std::vector<std::string> artifacts;  // every file this record wrote, itself included
  std::optional<double> pretext_acc;
  std::vector<EvalReport> reports;
  std::vector<RunRecord> children;
  std::optional<std::string> error;

  std::filesystem::path dir;  // not serialized

  nlohmann::json to_json() const;
  static RunRecord from_json(const nlohmann::json& j, const std::filesystem::path& dir);
};

inline constexpr const char* kRecordFile = "record.json";

std::string build_id();

/// Executes one experiment and writes its artifacts under config.out_dir.
/// Errors surface as PipelineError; files written before the failure stay.
RunRecord run(const ExperimentConfig& config);

RunRecord load_record(const std::filesystem::path& record_json);

/// Summary CSV (one row per leaf run, with per-group seed mean and std) plus
/// a bar plot of downstream accuracy and a line plot of training loss.
/// Returns the written paths. Rejects an empty list and mixed datasets.
std::vector<std::filesystem::path> emit_report(const std::vector<RunRecord>& records,
                                               const std::filesystem::path& out_dir);

}  // namespace scalenet
