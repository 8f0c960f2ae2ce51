#pragma once

#include <filesystem>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmtnet/datamodel.hpp"
#include "cmtnet/training.hpp"

namespace cmtnet {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ScoreSet {
  std::vector<double> scores;  // in [0, 1]
  std::vector<int> labels;     // 0/1

  /// Lengths equal, scores in [0, 1], labels binary, both classes present.
  void validate() const;
  int positives() const;
  int negatives() const;
};

struct RocPoint {
  double threshold = 0;
  double sensitivity = 0;
  double specificity = 0;
};

/// Thresholds strictly decreasing from +inf to -inf. A score >= threshold
/// counts as positive.
struct RocCurve {
  std::vector<RocPoint> points;
};

RocCurve roc(const ScoreSet& set);
double auc(const RocCurve& curve);
double eer(const ScoreSet& set);

struct OperatingPoint {
  double target = 0;
  double threshold = 0;
  double sensitivity = 0;
  double specificity = 0;
  bool target_reached = true;  // false: no finite threshold reaches the target
};

/// Among finite thresholds, the one with the smallest specificity >= target
/// (highest sensitivity on ties).
OperatingPoint sensitivity_at_specificity(const ScoreSet& set, double target);

struct Overlap {
  double dice = 0;
  double iou = 0;
};

Overlap seg_overlap(const Mask& pred, const Mask& gt);

void write_roc_csv(const RocCurve& curve, const std::filesystem::path& path);

struct ReportOptions {
  std::vector<double> specificities{0.90, 0.99};
  double threshold = 0.5;
  double operating_specificity = 0.99;  // for the operating-point accuracy
  int batch_size = 16;
};

struct ClassAccuracy {
  int n = 0;
  double accuracy = 0;
};

struct CovidMetrics {
  int positives = 0;
  int negatives = 0;
  double auc = 0;
  double eer = 0;
  std::vector<OperatingPoint> at_specificity;
  double accuracy_at_threshold = 0;
  OperatingPoint operating_point;
  double accuracy_at_operating_point = 0;
};

struct MaskOverlapSummary {
  int n = 0;
  double dice = 0;
  double iou = 0;
};

struct EvaluationReport {
  static constexpr int kSchemaVersion = 1;

  int samples = 0;
  double threshold = 0.5;
  ScoreSet covid_scores;  // samples with a COVID label
  std::optional<CovidMetrics> covid;  // absent unless both classes present
  std::optional<ClassAccuracy> health;
  std::optional<ClassAccuracy> other_disease;
  std::optional<ClassAccuracy> covid_into_unhealthy;  // accuracy = rate
  std::optional<MaskOverlapSummary> lung;
  std::optional<MaskOverlapSummary> disease;

  std::string to_json() const;
};

std::vector<PredictionBundle> predict_dataset(const Net& net, const Dataset& data, int batch_size = 16);

EvaluationReport report(const Net& net, const Dataset& test_set, const ReportOptions& options = {});
EvaluationReport report_from_predictions(const std::vector<PredictionBundle>& predictions, const Dataset& test_set,
                                         const ReportOptions& options = {});

}  // namespace cmtnet
