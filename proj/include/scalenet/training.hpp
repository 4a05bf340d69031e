#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "scalenet/checkpoint.hpp"
#include "scalenet/error.hpp"

namespace scalenet {

// Step learning-rate ladder: lr(epoch) = initial_lr / decay_factor^m, where m
// counts the milestones <= epoch. Epochs are zero-based.
struct LrLadder {
  double initial_lr = 0.1;
  double decay_factor = 5.0;
  std::vector<int> milestones{30, 60, 80};

  double lr_at(int epoch) const;
  void validate() const;
};

// One JSON-lines record per epoch. `extra` carries method-specific fields
// (temperature, batch_pairs, ...), emitted after the common ones.
struct EpochMetrics {
  double stage_alpha = 1.0;
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double rotation_acc = 0.0;
  double wall_time_s = 0.0;
  std::vector<std::pair<std::string, double>> extra;

  std::string to_json_line() const;
};

struct TrainHooks {
  std::function<void(const EpochMetrics&)> on_epoch;
  // Called every `checkpoint_every` epochs (0 disables) and at stage end.
  std::function<void(const ModelCheckpoint&, int stage, int epoch)> on_checkpoint;
  int checkpoint_every = 0;
  // Called with the freshly built / transferred model before a stage trains.
  std::function<void(int stage, torch::nn::Module&)> on_stage_start;
  // When false, wall_time_s is written as 0 so metric files are reproducible
  // byte-for-byte.
  bool record_wall_time = true;
};

struct DivergenceReport {
  double stage_alpha = 1.0;
  int epoch = 0;
  int step = 0;
  double last_finite_loss = 0.0;
  std::string describe() const;
};

// Training produced a non-finite loss. Carries the weights as of the last
// fully completed epoch.
class DivergenceError : public NumericError {
 public:
  DivergenceError(ModelCheckpoint last_good, DivergenceReport report)
      : NumericError(report.describe()), last_good_(std::move(last_good)), report_(report) {}
  const ModelCheckpoint& last_good() const { return last_good_; }
  const DivergenceReport& report() const { return report_; }

 private:
  ModelCheckpoint last_good_;
  DivergenceReport report_;
};

// Puts torch into single-threaded deterministic execution.
void enable_deterministic_mode();

void set_learning_rate(torch::optim::Optimizer& opt, double lr);

// Fisher-Yates order of [0, n) drawn from mt19937_64(seed).
std::vector<std::int64_t> shuffled_indices(std::size_t n, std::uint64_t seed);

}  // namespace scalenet
