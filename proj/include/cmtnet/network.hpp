#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmtnet/datamodel.hpp"
#include "cmtnet/tensor.hpp"
#include "cmtnet/tensor_ops.hpp"

namespace cmtnet {

enum class MultilabelActivation { sigmoid, softmax };

std::string to_string(MultilabelActivation a);
MultilabelActivation multilabel_activation_from_string(const std::string& text);

/// Architecture description. Channel and head widths are given at full
/// scale and divided by scale_factor when the network is built.
struct NetworkConfig {
  int input_size = kInputSize;
  std::vector<int> block_layers{2, 2, 3, 3, 3};
  std::vector<int> block_widths{64, 128, 256, 512, 512};
  std::array<int, 2> head_hidden{256, 64};
  int scale_factor = 1;
  MultilabelActivation multilabel_activation = MultilabelActivation::sigmoid;

  void validate() const;
  int width(std::size_t block) const { return block_widths.at(block) / scale_factor; }
  int head_width(std::size_t i) const { return head_hidden.at(i) / scale_factor; }
  int embedding_dim() const { return width(block_widths.size() - 1); }
  std::size_t blocks() const { return block_layers.size(); }

  bool operator==(const NetworkConfig&) const = default;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Named tensor for weight import/export. Values are stored in double.
struct TensorRecord {
  std::vector<int> shape;
  std::vector<double> values;
};
using WeightMap = std::map<std::string, TensorRecord>;

/// Per-sample network outputs.
template <typename T>
struct BasicPredictionBundle {
  int height = 0;
  int width = 0;
  std::vector<T> lung_probs;     // (2, H, W): channel 0 non-lung, channel 1 lung
  std::vector<T> disease_probs;  // (2, H, W): channel 0 non-disease, channel 1 disease
  std::array<T, 2> health_probs{};  // (healthy, unhealthy)
  T covid_score = 0;
  T other_score = 0;
  std::vector<T> embedding;

  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  std::span<const T> lung_foreground() const { return {lung_probs.data() + plane(), plane()}; }
  std::span<const T> disease_foreground() const { return {disease_probs.data() + plane(), plane()}; }
  /// Argmax masks.
  Mask lung_mask() const;
  Mask disease_mask() const;
  int predicted_unhealthy() const { return health_probs[1] > health_probs[0] ? 1 : 0; }
};

using PredictionBundle = BasicPredictionBundle<float>;

enum class Mode { train, eval };

template <typename T>
class Network {
 public:
  struct Parameter {
    std::string name;
    std::vector<int> shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool trainable = true;  // false for batch-norm running statistics
  };

  struct ForwardOptions {
    Mode mode = Mode::eval;
    bool freeze_encoder_bn = false;  // use running statistics in the encoder while training
  };

  /// Activations of one stage: acts[0] is the stage input, acts[k + 1] the
  /// output of unit k.
  struct StageCache {
    std::vector<Tensor<T>> acts;
    std::vector<ops::BatchNormCache<T>> bn;
  };
  struct PoolCache {
    std::vector<std::int32_t> indices;
    int in_h = 0;
    int in_w = 0;
  };
  struct HeadCache {
    std::vector<T> input, hidden1, hidden2, probs;
  };

  /// Cached activations of one forward pass, consumed by backward().
  struct Pass {
    Mode mode = Mode::eval;
    bool freeze_encoder_bn = false;
    int n = 0;
    std::vector<StageCache> encoder;
    std::vector<PoolCache> pools;
    std::vector<StageCache> lung;
    std::vector<StageCache> disease;
    Tensor<T> lung_probs;
    Tensor<T> disease_probs;
    HeadCache health;
    HeadCache multilabel;
    std::vector<BasicPredictionBundle<T>> bundles;
  };

  /// Loss gradients with respect to the network outputs. A branch left
  /// empty receives no backward pass at all.
  struct OutputGrads {
    std::optional<Tensor<T>> lung_probs;     // (n, 2, H, W)
    std::optional<Tensor<T>> disease_probs;  // (n, 2, H, W)
    std::optional<std::vector<T>> health_probs;  // n x 2
    std::optional<std::vector<T>> multilabel;    // n x 2: (d covid_score, d other_score)
  };

  Network() = default;

  /// Seeded initialization. With `pretrained`, every encoder.* entry is
  /// taken from the source, which must match this config exactly.
  static Network create(const NetworkConfig& config, std::uint64_t seed,
                        const WeightMap* pretrained = nullptr);

  const NetworkConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }

  /// Training-mode forward updates batch-norm running statistics.
  Pass forward(const Tensor<T>& images, const ForwardOptions& options);

  /// Eval-mode inference; reentrant.
  std::vector<BasicPredictionBundle<T>> predict(const Tensor<T>& images) const;
  std::vector<BasicPredictionBundle<T>> predict(std::span<const Image> images) const;
  std::vector<std::vector<T>> export_embedding(std::span<const Image> images) const;

  void backward(const Pass& pass, const OutputGrads& grads);
  void zero_grad();

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  Parameter& parameter(const std::string& name);
  const Parameter& parameter(const std::string& name) const;
  std::size_t parameter_count() const;  // trainable scalars

  WeightMap state() const;
  /// Replaces all parameters and buffers; shapes must match exactly.
  void load_state(const WeightMap& state);

 private:
  static constexpr std::size_t kNone = static_cast<std::size_t>(-1);

  // Indices into params_.
  struct ConvUnit {
    int in = 0;
    int out = 0;
    std::size_t weight = kNone;
    std::size_t bias = kNone;  // classifier only
    std::size_t gamma = kNone, beta = kNone, mean = kNone, var = kNone;
  };
  struct LinearUnit {
    int in = 0;
    int out = 0;
    std::size_t weight = kNone;
    std::size_t bias = kNone;
  };
  using Stage = std::vector<ConvUnit>;

  void check_input(const Tensor<T>& images) const;
  std::size_t add_param(std::string name, std::vector<int> shape, bool trainable);
  void build_layout();
  void initialize(std::uint64_t seed);

  /// Shared forward. Running statistics are written to `stats` only in
  /// training mode; `stats` may be null otherwise.
  Pass run(const Tensor<T>& images, const ForwardOptions& options,
           std::vector<Parameter>* stats) const;
  void run_stage(const Stage& stage, StageCache& cache, Mode mode,
                 std::vector<Parameter>* stats) const;
  void run_decoder(const std::vector<Stage>& decoder, const Tensor<T>& bottleneck,
                   const std::vector<PoolCache>& pools, std::vector<StageCache>& caches, Mode mode,
                   std::vector<Parameter>* stats, Tensor<T>& probs) const;
  void run_head(const std::array<LinearUnit, 3>& head, const std::vector<T>& input, int n,
                bool softmax_out, HeadCache& cache) const;

  Tensor<T> stage_backward(const Stage& stage, const StageCache& cache, Tensor<T> dy, bool need_dx);
  std::vector<T> head_backward(const std::array<LinearUnit, 3>& head, const HeadCache& cache, int n,
                               bool softmax_out, const std::vector<T>& dprobs);
  void decoder_backward(const std::vector<Stage>& decoder, const std::vector<StageCache>& caches,
                        const std::vector<PoolCache>& pools, const Tensor<T>& probs,
                        const Tensor<T>& dprobs, Tensor<T>& d_bottleneck);

  NetworkConfig config_;
  std::uint64_t seed_ = 0;
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
  std::vector<Stage> encoder_;
  std::vector<Stage> lung_;     // deepest stage first
  std::vector<Stage> disease_;  // deepest stage first
  std::array<LinearUnit, 3> health_{};
  std::array<LinearUnit, 3> multilabel_{};
};

extern template class Network<float>;
extern template class Network<double>;
extern template class Network<long double>;

using Net = Network<float>;

/// Converts network images into a batch tensor.
template <typename T>
Tensor<T> images_to_tensor(std::span<const Image> images);

std::string network_config_to_json(const NetworkConfig& config);
NetworkConfig network_config_from_json(const std::string& text);

}  // namespace cmtnet
