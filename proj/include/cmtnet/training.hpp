#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmtnet/datamodel.hpp"
#include "cmtnet/losses.hpp"
#include "cmtnet/network.hpp"

namespace cmtnet {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double learning_rate = 5e-5;
  int batch_size = 16;
  int epochs = 30;
  std::uint64_t seed = 0;
  std::array<bool, 4> task_enable{true, true, true, true};
  std::filesystem::path checkpoint_dir;  // empty: no files written
  int checkpoint_every = 1;              // epochs; 0 keeps only the final checkpoint
  int eval_every = 0;                    // epochs; 0 disables the eval hook
  bool freeze_encoder_bn = false;
  LossOptions loss;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;

  /// Throws ConfigError.
  void validate() const;
};

class Adam {
 public:
  Adam() = default;
  Adam(double lr, double beta1, double beta2, double epsilon) : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(epsilon) {}

  void step(Net& net);

  std::int64_t steps() const { return t_; }
  /// First and second moments keyed by parameter name.
  const std::map<std::string, std::vector<float>>& first_moment() const { return m_; }
  const std::map<std::string, std::vector<float>>& second_moment() const { return v_; }
  void restore(std::int64_t steps, std::map<std::string, std::vector<float>> m,
               std::map<std::string, std::vector<float>> v);

 private:
  double lr_ = 5e-5;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  std::int64_t t_ = 0;
  std::map<std::string, std::vector<float>> m_;
  std::map<std::string, std::vector<float>> v_;
};

struct StepRecord {
  int epoch = 0;
  std::int64_t step = 0;
  int batch_size = 0;
  std::array<double, 4> z_sum{};     // summed over samples where the task is active
  std::array<int, 4> active{};
  double total = 0;                  // batch mean
};

struct EpochRecord {
  int epoch = 0;                    // 1-based, continues across resumes
  std::array<double, 4> mean_z{};   // over samples where active; 0 when none
  std::array<int, 4> active{};
  double mean_total = 0;            // over samples
  int samples = 0;
  std::map<std::string, double> eval;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::vector<StepRecord> steps;

  std::string epoch_line(const EpochRecord& record) const;
  void write_jsonl(const std::filesystem::path& path) const;
};

/// Called every eval_every epochs; returned metrics land in the epoch record.
using EvalHook = std::function<std::map<std::string, double>(const Net&, int epoch)>;

struct ResumeState {
  int epochs_done = 0;
  Adam adam;
};

struct TrainResult {
  TrainHistory history;
  Adam adam;
  int epochs_done = 0;
};

TrainResult train(Net& net, const Dataset& train_set, const TrainConfig& config,
                  const ResumeState* resume = nullptr, const EvalHook& eval_hook = {});

struct CheckpointMeta {
  int epoch = 0;
  const Adam* adam = nullptr;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LoadedCheckpoint {
  Net net;
  int epoch = 0;
  std::optional<Adam> adam;
};

void save_checkpoint(const Net& net, const std::filesystem::path& path, const CheckpointMeta& meta = {});
/// With `expected`, the stored config must match it.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path,
                                 const std::optional<NetworkConfig>& expected = std::nullopt);

}  // namespace cmtnet
