#pragma once

#include <array>
#include <span>
#include <stdexcept>
#include <vector>

#include "cmtnet/datamodel.hpp"
#include "cmtnet/network.hpp"

namespace cmtnet {

inline constexpr double kProbEpsilon = 1e-7;

enum class SegReduction { sum, mean };

class LossError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct LossOptions {
  SegReduction seg_reduction = SegReduction::sum;
};

/// Binary cross entropy between a foreground-probability grid and a binary
/// mask, summed over pixels (or averaged with SegReduction::mean).
template <typename T>
T seg_bce(std::span<const T> pred, int height, int width, const Mask& gt,
          SegReduction reduction = SegReduction::sum);

template <typename T>
T health_ce(const std::array<T, 2>& probs, int healthy_label);

template <typename T>
T multilabel_bce(T covid_score, T other_score, int covid_label, int other_label);

template <typename T>
struct LossBreakdown {
  T z1 = 0;
  T z2 = 0;
  T z3 = 0;
  T z4 = 0;
  T total = 0;
  Switches active;
};

/// Switch-gated loss of one sample. `switches` defaults to the sample's own;
/// turning on a switch whose label is absent is an error.
template <typename T>
LossBreakdown<T> total_loss(const BasicPredictionBundle<T>& bundle, const Sample& sample,
                            const Switches& switches, const LossOptions& options = {});
template <typename T>
LossBreakdown<T> total_loss(const BasicPredictionBundle<T>& bundle, const Sample& sample,
                            const LossOptions& options = {});

template <typename T>
struct BatchLoss {
  std::vector<LossBreakdown<T>> samples;
  T total = 0;  // mean of per-sample totals
  typename Network<T>::OutputGrads grads;  // d total / d outputs
};

/// Loss and output gradients over a batch. Branches with no active sample
/// get no gradient, so their parameters are left untouched by backward().
template <typename T>
BatchLoss<T> batch_loss(const std::vector<BasicPredictionBundle<T>>& bundles,
                        const std::vector<const Sample*>& samples, const std::array<bool, 4>& enable,
                        const LossOptions& options = {});

}  // namespace cmtnet
