#pragma once

#include <array>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "cmtnet/evaluation.hpp"
#include "cmtnet/run_config.hpp"

namespace cmtnet {

/// Exit-code contract of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitValidation = 1, kExitRuntime = 2 };

/// Maps an exception to the exit-code contract.
int exit_code_for(const std::exception& e);

/// Thrown when a command fails its preconditions.
class CommandError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct PreparedData {
  Dataset train;  // augmented per config
  Dataset eval;   // per eval_split
  std::size_t train_records = 0;
  std::size_t test_records = 0;
};

/// Reads, validates, splits and loads the configured manifest.
PreparedData prepare_data(const RunConfig& config, std::ostream& log);

int cmd_validate(const std::filesystem::path& manifest, std::ostream& out);
int cmd_rasterize(const std::filesystem::path& manifest, const std::filesystem::path& out_dir, int size,
                  std::ostream& out);

struct TrainOutcome {
  Net net;
  TrainResult result;
  std::filesystem::path checkpoint;
};
TrainOutcome cmd_train(const RunConfig& config, std::ostream& log);

EvaluationReport cmd_eval(const RunConfig& config, const std::filesystem::path& checkpoint, std::ostream& log);

struct PredictSummary {
  int written = 0;
  std::vector<std::string> failures;  // one entry per unreadable input
};
PredictSummary cmd_predict(const std::filesystem::path& checkpoint, const std::vector<std::filesystem::path>& images,
                           const std::filesystem::path& out_dir, std::ostream& log);

/// RGB overlay of `mask` on `image` at the fixed 40% alpha.
std::vector<std::uint8_t> overlay_rgb(const Image& image, const Mask& mask, const std::array<std::uint8_t, 3>& color);

struct AblationRow {
  std::array<bool, 4> tasks{};
  double sensitivity_at_90 = 0;
  double sensitivity_at_99 = 0;
  double auc = 0;
  double eer = 0;
};
struct AblationTable {
  std::vector<AblationRow> rows;
  std::string to_json() const;
};

/// The six subsets of the task-reduction study.
std::vector<std::array<bool, 4>> default_ablation_subsets();
/// Parses "1,4;2,4"; duplicates are dropped with a warning on `log`.
std::vector<std::array<bool, 4>> parse_subsets(const std::string& text, std::ostream& log);
std::vector<std::array<bool, 4>> dedupe_subsets(const std::vector<std::array<bool, 4>>& subsets, std::ostream& log);
/// Needs a segmentation task and task 4.
void check_ablation_subset(const std::array<bool, 4>& subset);

AblationTable cmd_ablate(const RunConfig& config, const std::vector<std::array<bool, 4>>& subsets,
                         std::ostream& log);

struct StabilityReport {
  std::vector<std::uint64_t> seeds;
  std::vector<std::optional<double>> sensitivity;  // empty where the run failed
  std::vector<std::string> errors;
  double mean = 0;
  double stddev = 0;
  bool partial = false;
  std::string to_json() const;
};
StabilityReport cmd_stability(const RunConfig& config, const std::vector<std::uint64_t>& seeds, std::ostream& log);

void cmd_roc_export(const RunConfig& config, const std::filesystem::path& checkpoint,
                    const std::filesystem::path& csv, std::ostream& log);

}  // namespace cmtnet
