#include "cmtnet/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace cmtnet {

namespace {

template <typename T>
T clamp_prob(T p) {
  const T eps = static_cast<T>(kProbEpsilon);
  return std::clamp(p, eps, T(1) - eps);
}

template <typename T>
T bernoulli_nll(T p, int label) {
  const T q = clamp_prob(p);
  return label == 1 ? -std::log(q) : -std::log(T(1) - q);
}

// d/dp of bernoulli_nll; zero where the clamp is active.
template <typename T>
T bernoulli_nll_grad(T p, int label) {
  const T eps = static_cast<T>(kProbEpsilon);
  if (p < eps || p > T(1) - eps) return T(0);
  return label == 1 ? -T(1) / p : T(1) / (T(1) - p);
}

void check_label(int v, const char* what) {
  if (v != 0 && v != 1) throw LossError(std::string(what) + " label must be 0 or 1, got " + std::to_string(v));
}

void check_mask(const Mask& gt, int height, int width, std::size_t n) {
  if (gt.height != height || gt.width != width || n != gt.bits.size()) {
    throw LossError("segmentation shape mismatch: prediction " + std::to_string(height) + "x" +
                    std::to_string(width) + ", mask " + std::to_string(gt.height) + "x" +
                    std::to_string(gt.width));
  }
}

}  // namespace

template <typename T>
T seg_bce(std::span<const T> pred, int height, int width, const Mask& gt, SegReduction reduction) {
  check_mask(gt, height, width, pred.size());
  T sum = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) sum += bernoulli_nll(pred[i], gt.bits[i] ? 1 : 0);
  if (reduction == SegReduction::mean && !pred.empty()) sum /= static_cast<T>(pred.size());
  return sum;
}

template <typename T>
T health_ce(const std::array<T, 2>& probs, int healthy_label) {
  check_label(healthy_label, "healthy");
  return -std::log(clamp_prob(probs[static_cast<std::size_t>(healthy_label)]));
}

template <typename T>
T multilabel_bce(T covid_score, T other_score, int covid_label, int other_label) {
  check_label(covid_label, "covid");
  check_label(other_label, "other");
  return bernoulli_nll(covid_score, covid_label) + bernoulli_nll(other_score, other_label);
}

template <typename T>
LossBreakdown<T> total_loss(const BasicPredictionBundle<T>& bundle, const Sample& sample,
                            const Switches& switches, const LossOptions& options) {
  const std::string who = "sample '" + sample.sample_id() + "': ";
  LossBreakdown<T> out;
  out.active = switches;
  if (switches[0]) {
    if (!sample.lung_mask()) throw LossError(who + "lung switch on but lung mask absent");
    out.z1 = seg_bce(bundle.lung_foreground(), bundle.height, bundle.width, *sample.lung_mask(),
                     options.seg_reduction);
  }
  if (switches[1]) {
    if (!sample.disease_mask()) throw LossError(who + "disease switch on but disease mask absent");
    out.z2 = seg_bce(bundle.disease_foreground(), bundle.height, bundle.width, *sample.disease_mask(),
                     options.seg_reduction);
  }
  if (switches[2]) {
    if (!sample.healthy()) throw LossError(who + "health switch on but healthy label absent");
    out.z3 = health_ce(bundle.health_probs, *sample.healthy());
  }
  if (switches[3]) {
    if (!sample.covid() || !sample.other()) throw LossError(who + "multilabel switch on but labels absent");
    out.z4 = multilabel_bce(bundle.covid_score, bundle.other_score, *sample.covid(), *sample.other());
  }
  out.total = out.z1 + out.z2 + out.z3 + out.z4;
  return out;
}

template <typename T>
LossBreakdown<T> total_loss(const BasicPredictionBundle<T>& bundle, const Sample& sample,
                            const LossOptions& options) {
  return total_loss(bundle, sample, sample.switches(), options);
}

template <typename T>
BatchLoss<T> batch_loss(const std::vector<BasicPredictionBundle<T>>& bundles,
                        const std::vector<const Sample*>& samples, const std::array<bool, 4>& enable,
                        const LossOptions& options) {
  if (bundles.size() != samples.size() || bundles.empty()) {
    throw LossError("batch_loss needs one bundle per sample");
  }
  const int n = static_cast<int>(bundles.size());
  const T inv_n = T(1) / static_cast<T>(n);
  BatchLoss<T> out;
  auto& g = out.grads;
  const int H = bundles[0].height;
  const int W = bundles[0].width;
  const std::size_t hw = static_cast<std::size_t>(H) * W;

  for (int i = 0; i < n; ++i) {
    const auto& b = bundles[static_cast<std::size_t>(i)];
    const Sample& s = *samples[static_cast<std::size_t>(i)];
    const Switches sw = s.switches().masked(enable);
    out.samples.push_back(total_loss(b, s, sw, options));
    out.total += out.samples.back().total * inv_n;

    const T seg_scale = options.seg_reduction == SegReduction::mean ? inv_n / static_cast<T>(hw) : inv_n;
    auto seg_grad = [&](std::optional<Tensor<T>>& slot, std::span<const T> fg, const Mask& m) {
      if (!slot) slot = Tensor<T>(n, 2, H, W);
      T* d = slot->sample(i) + hw;
      for (std::size_t j = 0; j < hw; ++j) d[j] = seg_scale * bernoulli_nll_grad(fg[j], m.bits[j] ? 1 : 0);
    };
    if (sw[0]) seg_grad(g.lung_probs, b.lung_foreground(), *s.lung_mask());
    if (sw[1]) seg_grad(g.disease_probs, b.disease_foreground(), *s.disease_mask());
    if (sw[2]) {
      if (!g.health_probs) g.health_probs.emplace(static_cast<std::size_t>(2) * n, T(0));
      const int h = *s.healthy();
      const T p = b.health_probs[static_cast<std::size_t>(h)];
      const T eps = static_cast<T>(kProbEpsilon);
      (*g.health_probs)[2 * i + h] = (p < eps || p > T(1) - eps) ? T(0) : -inv_n / p;
    }
    if (sw[3]) {
      if (!g.multilabel) g.multilabel.emplace(static_cast<std::size_t>(2) * n, T(0));
      (*g.multilabel)[2 * i] = inv_n * bernoulli_nll_grad(b.covid_score, *s.covid());
      (*g.multilabel)[2 * i + 1] = inv_n * bernoulli_nll_grad(b.other_score, *s.other());
    }
  }
  return out;
}

#define CMTNET_INSTANTIATE_LOSSES(T)                                                                          \
  template T seg_bce<T>(std::span<const T>, int, int, const Mask&, SegReduction);                             \
  template T health_ce<T>(const std::array<T, 2>&, int);                                                      \
  template T multilabel_bce<T>(T, T, int, int);                                                               \
  template LossBreakdown<T> total_loss<T>(const BasicPredictionBundle<T>&, const Sample&, const Switches&,   \
                                          const LossOptions&);                                                \
  template LossBreakdown<T> total_loss<T>(const BasicPredictionBundle<T>&, const Sample&, const LossOptions&); \
  template BatchLoss<T> batch_loss<T>(const std::vector<BasicPredictionBundle<T>>&,                           \
                                      const std::vector<const Sample*>&, const std::array<bool, 4>&,          \
                                      const LossOptions&);

CMTNET_INSTANTIATE_LOSSES(float)
CMTNET_INSTANTIATE_LOSSES(double)
CMTNET_INSTANTIATE_LOSSES(long double)

}  // namespace cmtnet
