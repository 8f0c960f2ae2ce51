#include "cmtnet/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"

namespace cmtnet {

void ScoreSet::validate() const {
  if (scores.size() != labels.size()) throw MetricError("scores and labels differ in length");
  for (double s : scores) {
    if (!(s >= 0.0 && s <= 1.0)) throw MetricError("score outside [0,1]");
  }
  for (int l : labels) {
    if (l != 0 && l != 1) throw MetricError("label outside {0,1}");
  }
  if (positives() == 0 || negatives() == 0) throw MetricError("score set needs both classes");
}

int ScoreSet::positives() const { return static_cast<int>(std::count(labels.begin(), labels.end(), 1)); }
int ScoreSet::negatives() const { return static_cast<int>(std::count(labels.begin(), labels.end(), 0)); }

RocCurve roc(const ScoreSet& set) {
  set.validate();
  const double P = set.positives();
  const double N = set.negatives();
  std::vector<std::size_t> order(set.scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return set.scores[a] > set.scores[b]; });

  constexpr double inf = std::numeric_limits<double>::infinity();
  RocCurve curve;
  curve.points.push_back({inf, 0.0, 1.0});
  int tp = 0;
  int fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double t = set.scores[order[i]];
    while (i < order.size() && set.scores[order[i]] == t) {
      if (set.labels[order[i]] == 1) ++tp; else ++fp;
      ++i;
    }
    curve.points.push_back({t, tp / P, (N - fp) / N});
  }
  curve.points.push_back({-inf, 1.0, 0.0});
  return curve;
}

double auc(const RocCurve& curve) {
  double area = 0;
  for (std::size_t i = 1; i < curve.points.size(); ++i) {
    const auto& a = curve.points[i - 1];
    const auto& b = curve.points[i];
    area += (a.specificity - b.specificity) * (a.sensitivity + b.sensitivity) / 2.0;
  }
  return area;
}

double eer(const ScoreSet& set) {
  const auto curve = roc(set);
  double prev_far = 0;
  double prev_d = -1;
  for (const auto& p : curve.points) {
    const double far = 1.0 - p.specificity;
    const double frr = 1.0 - p.sensitivity;
    const double d = far - frr;
    if (d == 0) return far;
    if (d > 0) {
      const double t = prev_d / (prev_d - d);
      return prev_far + t * (far - prev_far);
    }
    prev_far = far;
    prev_d = d;
  }
  return 1.0;  // unreachable: the -inf endpoint has far - frr = 1
}

OperatingPoint sensitivity_at_specificity(const ScoreSet& set, double target) {
  if (!(target > 0.0 && target <= 1.0)) throw MetricError("target specificity must be in (0,1]");
  const auto curve = roc(set);
  const auto first = curve.points.begin() + 1;
  const auto last = curve.points.end() - 1;
  OperatingPoint out;
  out.target = target;
  const RocPoint* best = nullptr;
  for (auto it = first; it != last; ++it) {
    if (it->specificity < target) continue;
    if (!best || it->specificity < best->specificity ||
        (it->specificity == best->specificity && it->sensitivity > best->sensitivity)) {
      best = &*it;
    }
  }
  if (!best) {
    best = &*first;  // most specific finite threshold
    out.target_reached = false;
  }
  out.threshold = best->threshold;
  out.sensitivity = best->sensitivity;
  out.specificity = best->specificity;
  return out;
}

Overlap seg_overlap(const Mask& pred, const Mask& gt) {
  if (pred.height != gt.height || pred.width != gt.width) throw MetricError("mask shape mismatch");
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.bits.size(); ++i) {
    const bool p = pred.bits[i] != 0;
    const bool g = gt.bits[i] != 0;
    a += p;
    b += g;
    both += p && g;
  }
  if (a + b == 0) return {1.0, 1.0};
  return {2.0 * both / static_cast<double>(a + b), both / static_cast<double>(a + b - both)};
}

void write_roc_csv(const RocCurve& curve, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "threshold,sensitivity,specificity\n";
  char buf[96];
  for (const auto& p : curve.points) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", p.threshold, p.sensitivity, p.specificity);
    out << buf;
  }
}

std::vector<PredictionBundle> predict_dataset(const Net& net, const Dataset& data, int batch_size) {
  std::vector<PredictionBundle> out;
  out.reserve(data.size());
  const std::size_t step = static_cast<std::size_t>(std::max(1, batch_size));
  for (std::size_t start = 0; start < data.size(); start += step) {
    std::vector<Image> images;
    for (std::size_t i = start; i < std::min(data.size(), start + step); ++i) {
      images.push_back(data.samples[i].image());
    }
    for (auto& b : net.predict(images)) out.push_back(std::move(b));
  }
  return out;
}

EvaluationReport report(const Net& net, const Dataset& test_set, const ReportOptions& options) {
  if (test_set.empty()) throw MetricError("test set is empty");
  return report_from_predictions(predict_dataset(net, test_set, options.batch_size), test_set, options);
}

EvaluationReport report_from_predictions(const std::vector<PredictionBundle>& predictions, const Dataset& test_set,
                                         const ReportOptions& options) {
  if (test_set.empty()) throw MetricError("test set is empty");
  if (predictions.size() != test_set.size()) throw MetricError("one prediction per sample required");
  EvaluationReport r;
  r.samples = static_cast<int>(test_set.size());
  r.threshold = options.threshold;

  ClassAccuracy health, other, into;
  MaskOverlapSummary lung, disease;
  for (std::size_t i = 0; i < test_set.size(); ++i) {
    const Sample& s = test_set.samples[i];
    const PredictionBundle& b = predictions[i];
    if (s.covid()) {
      r.covid_scores.scores.push_back(std::clamp<double>(b.covid_score, 0.0, 1.0));
      r.covid_scores.labels.push_back(*s.covid());
      if (*s.covid() == 1) {
        ++into.n;
        into.accuracy += b.predicted_unhealthy();
      }
    }
    if (s.healthy()) {
      ++health.n;
      health.accuracy += b.predicted_unhealthy() == *s.healthy();
    }
    if (s.other()) {
      ++other.n;
      other.accuracy += (b.other_score >= options.threshold ? 1 : 0) == *s.other();
    }
    auto overlap = [](MaskOverlapSummary& sum, const Mask& pred, const Mask& gt) {
      const auto o = seg_overlap(pred, gt);
      ++sum.n;
      sum.dice += o.dice;
      sum.iou += o.iou;
    };
    if (s.lung_mask()) overlap(lung, b.lung_mask(), *s.lung_mask());
    if (s.disease_mask()) overlap(disease, b.disease_mask(), *s.disease_mask());
  }
  auto finish = [](ClassAccuracy a) -> std::optional<ClassAccuracy> {
    if (a.n == 0) return std::nullopt;
    a.accuracy /= a.n;
    return a;
  };
  auto finish_mask = [](MaskOverlapSummary m) -> std::optional<MaskOverlapSummary> {
    if (m.n == 0) return std::nullopt;
    m.dice /= m.n;
    m.iou /= m.n;
    return m;
  };
  r.health = finish(health);
  r.other_disease = finish(other);
  r.covid_into_unhealthy = finish(into);
  r.lung = finish_mask(lung);
  r.disease = finish_mask(disease);

  const auto& cs = r.covid_scores;
  if (cs.positives() > 0 && cs.negatives() > 0) {
    CovidMetrics m;
    m.positives = cs.positives();
    m.negatives = cs.negatives();
    m.auc = auc(roc(cs));
    m.eer = eer(cs);
    for (double y : options.specificities) m.at_specificity.push_back(sensitivity_at_specificity(cs, y));
    m.operating_point = sensitivity_at_specificity(cs, options.operating_specificity);
    auto accuracy_at = [&](double t) {
      int correct = 0;
      for (std::size_t i = 0; i < cs.scores.size(); ++i) correct += (cs.scores[i] >= t ? 1 : 0) == cs.labels[i];
      return static_cast<double>(correct) / cs.scores.size();
    };
    m.accuracy_at_threshold = accuracy_at(options.threshold);
    m.accuracy_at_operating_point = accuracy_at(m.operating_point.threshold);
    r.covid = m;
  }
  return r;
}

std::string EvaluationReport::to_json() const {
  using json = nlohmann::ordered_json;
  json j;
  j["schema"] = "cmtnet.evaluation";
  j["version"] = kSchemaVersion;
  j["samples"] = samples;
  j["threshold"] = threshold;
  if (covid) {
    json c;
    c["positives"] = covid->positives;
    c["negatives"] = covid->negatives;
    c["auc"] = covid->auc;
    c["eer"] = covid->eer;
    auto point = [](const OperatingPoint& p) {
      json o;
      o["target_specificity"] = p.target;
      o["threshold"] = p.threshold;
      o["sensitivity"] = p.sensitivity;
      o["specificity"] = p.specificity;
      o["target_reached"] = p.target_reached;
      return o;
    };
    c["sensitivity_at_specificity"] = json::array();
    for (const auto& p : covid->at_specificity) c["sensitivity_at_specificity"].push_back(point(p));
    c["accuracy_at_threshold"] = covid->accuracy_at_threshold;
    c["operating_point"] = point(covid->operating_point);
    c["accuracy_at_operating_point"] = covid->accuracy_at_operating_point;
    j["covid"] = c;
  }
  auto acc = [&](const char* key, const std::optional<ClassAccuracy>& a, const char* field) {
    if (a) j[key] = {{"n", a->n}, {field, a->accuracy}};
  };
  acc("health", health, "accuracy");
  acc("other_disease", other_disease, "accuracy");
  acc("covid_into_unhealthy", covid_into_unhealthy, "rate");
  if (lung || disease) {
    json seg;
    if (lung) seg["lung"] = {{"n", lung->n}, {"dice", lung->dice}, {"iou", lung->iou}};
    if (disease) seg["disease"] = {{"n", disease->n}, {"dice", disease->dice}, {"iou", disease->iou}};
    j["segmentation"] = seg;
  }
  return j.dump(2);
}

}  // namespace cmtnet
