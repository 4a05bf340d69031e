#include "scalenet/training.hpp"

#include <ATen/Context.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"

namespace scalenet {

double LrLadder::lr_at(int epoch) const {
  const auto passed = std::count_if(milestones.begin(), milestones.end(), [&](int m) { return m <= epoch; });
  return initial_lr / std::pow(decay_factor, static_cast<double>(passed));
}

void LrLadder::validate() const {
  if (!(initial_lr >= 0.0) || !std::isfinite(initial_lr)) throw ArgumentError("initial_lr must be >= 0");
  if (!(decay_factor > 0.0)) throw ArgumentError("lr decay_factor must be positive");
  if (!std::is_sorted(milestones.begin(), milestones.end()))
    throw ArgumentError("lr milestones must be sorted");
}

std::string EpochMetrics::to_json_line() const {
  nlohmann::ordered_json j;
  j["stage_alpha"] = stage_alpha;
  j["epoch"] = epoch;
  j["lr"] = lr;
  j["train_loss"] = train_loss;
  j["rotation_acc"] = rotation_acc;
  j["wall_time_s"] = wall_time_s;
  for (const auto& [k, v] : extra) j[k] = v;
  return j.dump();
}

std::string DivergenceReport::describe() const {
  std::ostringstream os;
  os << "training diverged at stage alpha=" << stage_alpha << " epoch " << epoch << " step " << step
     << " (last finite loss " << last_finite_loss << ")";
  return os.str();
}

void enable_deterministic_mode() {
  torch::set_num_threads(1);
  at::globalContext().setDeterministicAlgorithms(true, false);
}

void set_learning_rate(torch::optim::Optimizer& opt, double lr) {
  for (auto& group : opt.param_groups()) group.options().set_lr(lr);
}

std::vector<std::int64_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::int64_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

}  // namespace scalenet
