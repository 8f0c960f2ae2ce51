#include "cmtnet/network.hpp"

#include <algorithm>
#include <cmath>

#include "cmtnet/random.hpp"
#include "json.hpp"

namespace cmtnet {

std::string to_string(MultilabelActivation a) {
  return a == MultilabelActivation::sigmoid ? "sigmoid" : "softmax";
}

MultilabelActivation multilabel_activation_from_string(const std::string& text) {
  if (text == "sigmoid") return MultilabelActivation::sigmoid;
  if (text == "softmax") return MultilabelActivation::softmax;
  throw ConfigError("unknown multilabel activation '" + text + "'");
}

void NetworkConfig::validate() const {
  if (input_size < 1) throw ConfigError("input_size must be >= 1");
  if (scale_factor < 1) throw ConfigError("scale_factor must be >= 1");
  if (block_layers.empty()) throw ConfigError("network needs at least one encoder block");
  if (block_layers.size() != block_widths.size()) {
    throw ConfigError("block_layers and block_widths differ in length");
  }
  for (std::size_t b = 0; b < block_layers.size(); ++b) {
    if (block_layers[b] < 1) throw ConfigError("every block needs at least one layer");
    if (block_widths[b] < 1 || block_widths[b] % scale_factor != 0) {
      throw ConfigError("scale_factor " + std::to_string(scale_factor) + " does not divide block width " +
                        std::to_string(block_widths[b]));
    }
  }
  for (int h : head_hidden) {
    if (h < 1 || h % scale_factor != 0) {
      throw ConfigError("scale_factor " + std::to_string(scale_factor) + " does not divide head width " +
                        std::to_string(h));
    }
  }
}

std::string network_config_to_json(const NetworkConfig& c) {
  nlohmann::ordered_json j;
  j["input_size"] = c.input_size;
  j["block_layers"] = c.block_layers;
  j["block_widths"] = c.block_widths;
  j["head_hidden"] = c.head_hidden;
  j["scale_factor"] = c.scale_factor;
  j["multilabel_activation"] = to_string(c.multilabel_activation);
  return j.dump();
}

NetworkConfig network_config_from_json(const std::string& text) {
  NetworkConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    c.input_size = j.at("input_size").get<int>();
    c.block_layers = j.at("block_layers").get<std::vector<int>>();
    c.block_widths = j.at("block_widths").get<std::vector<int>>();
    c.head_hidden = j.at("head_hidden").get<std::array<int, 2>>();
    c.scale_factor = j.at("scale_factor").get<int>();
    c.multilabel_activation = multilabel_activation_from_string(j.at("multilabel_activation").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed network config: ") + e.what());
  }
  c.validate();
  return c;
}

template <typename T>
Mask BasicPredictionBundle<T>::lung_mask() const {
  Mask m(height, width);
  const std::size_t p = plane();
  for (std::size_t i = 0; i < p; ++i) m.bits[i] = lung_probs[p + i] > lung_probs[i] ? 1 : 0;
  return m;
}

template <typename T>
Mask BasicPredictionBundle<T>::disease_mask() const {
  Mask m(height, width);
  const std::size_t p = plane();
  for (std::size_t i = 0; i < p; ++i) m.bits[i] = disease_probs[p + i] > disease_probs[i] ? 1 : 0;
  return m;
}

template <typename T>
Tensor<T> images_to_tensor(std::span<const Image> images) {
  if (images.empty()) throw std::invalid_argument("empty image batch");
  const Image& first = images.front();
  Tensor<T> t(static_cast<int>(images.size()), first.channels, first.height, first.width);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Image& im = images[i];
    if (im.channels != first.channels || im.height != first.height || im.width != first.width) {
      throw std::invalid_argument("images in a batch must share one shape");
    }
    std::transform(im.values.begin(), im.values.end(), t.sample(static_cast<int>(i)),
                   [](float v) { return static_cast<T>(v); });
  }
  return t;
}

namespace {

template <typename T>
void softmax2_pixels(const Tensor<T>& logits, Tensor<T>& probs) {
  probs = Tensor<T>(logits.n, 2, logits.h, logits.w);
  const std::size_t hw = logits.plane();
  for (int i = 0; i < logits.n; ++i) {
    const T* l = logits.sample(i);
    T* p = probs.sample(i);
    for (std::size_t j = 0; j < hw; ++j) {
      const T a = l[j];
      const T b = l[hw + j];
      const T m = std::max(a, b);
      const T ea = std::exp(a - m);
      const T eb = std::exp(b - m);
      const T s = ea + eb;
      p[j] = ea / s;
      p[hw + j] = eb / s;
    }
  }
}

template <typename T>
T sigmoid(T v) {
  if (v >= 0) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

}  // namespace

template <typename T>
std::size_t Network<T>::add_param(std::string name, std::vector<int> shape, bool trainable) {
  std::size_t count = 1;
  for (int d : shape) count *= static_cast<std::size_t>(d);
  Parameter p;
  p.name = std::move(name);
  p.shape = std::move(shape);
  p.value.assign(count, T(0));
  p.grad.assign(trainable ? count : 0, T(0));
  p.trainable = trainable;
  index_[p.name] = params_.size();
  params_.push_back(std::move(p));
  return params_.size() - 1;
}

template <typename T>
void Network<T>::build_layout() {
  const auto& c = config_;
  const std::size_t L = c.blocks();

  auto conv_bn = [&](const std::string& prefix, int k, int in, int out) {
    ConvUnit u;
    u.in = in;
    u.out = out;
    const std::string ks = std::to_string(k);
    u.weight = add_param(prefix + ".conv" + ks + ".weight", {out, in, 3, 3}, true);
    u.gamma = add_param(prefix + ".bn" + ks + ".weight", {out}, true);
    u.beta = add_param(prefix + ".bn" + ks + ".bias", {out}, true);
    u.mean = add_param(prefix + ".bn" + ks + ".running_mean", {out}, false);
    u.var = add_param(prefix + ".bn" + ks + ".running_var", {out}, false);
    return u;
  };

  int in = 3;
  for (std::size_t b = 0; b < L; ++b) {
    const std::string prefix = "encoder.block" + std::to_string(b + 1);
    Stage stage;
    for (int k = 0; k < c.block_layers[b]; ++k) {
      stage.push_back(conv_bn(prefix, k + 1, in, c.width(b)));
      in = c.width(b);
    }
    encoder_.push_back(std::move(stage));
  }

  auto build_decoder = [&](const std::string& name, std::vector<Stage>& decoder) {
    for (std::size_t j = 0; j < L; ++j) {
      const std::size_t b = L - 1 - j;
      const std::string prefix = name + ".block" + std::to_string(b + 1);
      const int w = c.width(b);
      Stage stage;
      for (int k = 0; k < c.block_layers[b]; ++k) {
        const bool last = k == c.block_layers[b] - 1;
        if (last && b == 0) {
          ConvUnit u;
          u.in = w;
          u.out = 2;
          u.weight = add_param(name + ".classifier.weight", {2, w, 3, 3}, true);
          u.bias = add_param(name + ".classifier.bias", {2}, true);
          stage.push_back(u);
        } else {
          stage.push_back(conv_bn(prefix, k + 1, w, last ? c.width(b - 1) : w));
        }
      }
      decoder.push_back(std::move(stage));
    }
  };
  build_decoder("lung_decoder", lung_);
  build_decoder("disease_decoder", disease_);

  auto build_head = [&](const std::string& name, std::array<LinearUnit, 3>& head) {
    const int dims[4] = {c.embedding_dim(), c.head_width(0), c.head_width(1), 2};
    for (int k = 0; k < 3; ++k) {
      LinearUnit u;
      u.in = dims[k];
      u.out = dims[k + 1];
      const std::string prefix = name + ".fc" + std::to_string(k + 1);
      u.weight = add_param(prefix + ".weight", {u.out, u.in}, true);
      u.bias = add_param(prefix + ".bias", {u.out}, true);
      head[static_cast<std::size_t>(k)] = u;
    }
  };
  build_head("health_head", health_);
  build_head("multilabel_head", multilabel_);
}

template <typename T>
void Network<T>::initialize(std::uint64_t seed) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    Rng rng(derive_seed(seed, i));
    const auto& n = p.name;
    auto ends_with = [&](const char* suffix) {
      const std::string s = suffix;
      return n.size() >= s.size() && n.compare(n.size() - s.size(), s.size(), s) == 0;
    };
    if (n.find(".conv") != std::string::npos || n.find(".classifier.weight") != std::string::npos) {
      if (ends_with(".weight")) {
        // He normal, fan_out mode
        const double fan_out = static_cast<double>(p.shape[0]) * 9.0;
        const double std_dev = std::sqrt(2.0 / fan_out);
        for (auto& v : p.value) v = static_cast<T>(std_dev * rng.normal());
        continue;
      }
    }
    if (n.find(".classifier.bias") != std::string::npos) continue;
    if (n.find(".bn") != std::string::npos) {
      const bool ones = ends_with(".weight") || ends_with(".running_var");
      std::fill(p.value.begin(), p.value.end(), ones ? T(1) : T(0));
      continue;
    }
    if (n.find(".fc") != std::string::npos) {
      // uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases
      const std::size_t fc_index = ends_with(".bias") ? i - 1 : i;
      const double bound = 1.0 / std::sqrt(static_cast<double>(params_[fc_index].shape[1]));
      for (auto& v : p.value) v = static_cast<T>(rng.uniform(-bound, bound));
    }
  }
}

template <typename T>
Network<T> Network<T>::create(const NetworkConfig& config, std::uint64_t seed, const WeightMap* pretrained) {
  config.validate();
  Network net;
  net.config_ = config;
  net.seed_ = seed;
  net.build_layout();
  net.initialize(seed);
  if (pretrained) {
    for (const auto& [name, record] : *pretrained) {
      if (name.rfind("encoder.", 0) == 0 && !net.index_.contains(name)) {
        throw ConfigError("weight shape mismatch: pretrained tensor '" + name + "' has no counterpart");
      }
    }
    for (auto& p : net.params_) {
      if (p.name.rfind("encoder.", 0) != 0) continue;
      auto it = pretrained->find(p.name);
      if (it == pretrained->end()) {
        throw ConfigError("weight shape mismatch: pretrained source lacks '" + p.name + "'");
      }
      if (it->second.shape != p.shape || it->second.values.size() != p.value.size()) {
        throw ConfigError("weight shape mismatch for '" + p.name + "'");
      }
      std::transform(it->second.values.begin(), it->second.values.end(), p.value.begin(),
                     [](double v) { return static_cast<T>(v); });
    }
  }
  return net;
}

template <typename T>
typename Network<T>::Parameter& Network<T>::parameter(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return params_[it->second];
}

template <typename T>
const typename Network<T>::Parameter& Network<T>::parameter(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return params_[it->second];
}

template <typename T>
std::size_t Network<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) {
    if (p.trainable) n += p.value.size();
  }
  return n;
}

template <typename T>
void Network<T>::zero_grad() {
  for (auto& p : params_) std::fill(p.grad.begin(), p.grad.end(), T(0));
}

template <typename T>
WeightMap Network<T>::state() const {
  WeightMap out;
  for (const auto& p : params_) {
    TensorRecord r;
    r.shape = p.shape;
    r.values.assign(p.value.begin(), p.value.end());
    out.emplace(p.name, std::move(r));
  }
  return out;
}

template <typename T>
void Network<T>::load_state(const WeightMap& state) {
  if (state.size() != params_.size()) {
    throw ConfigError("weight shape mismatch: state has " + std::to_string(state.size()) +
                      " tensors, network expects " + std::to_string(params_.size()));
  }
  for (auto& p : params_) {
    auto it = state.find(p.name);
    if (it == state.end()) throw ConfigError("weight shape mismatch: state lacks '" + p.name + "'");
    if (it->second.shape != p.shape || it->second.values.size() != p.value.size()) {
      throw ConfigError("weight shape mismatch for '" + p.name + "'");
    }
    std::transform(it->second.values.begin(), it->second.values.end(), p.value.begin(),
                   [](double v) { return static_cast<T>(v); });
  }
}

template <typename T>
void Network<T>::check_input(const Tensor<T>& images) const {
  if (images.n < 1 || images.c != 3 || images.h != config_.input_size || images.w != config_.input_size) {
    throw std::invalid_argument("input batch has shape " + images.shape_string() + ", expected (n,3," +
                                std::to_string(config_.input_size) + "," +
                                std::to_string(config_.input_size) + ")");
  }
}

template <typename T>
void Network<T>::run_stage(const Stage& stage, StageCache& cache, Mode mode,
                           std::vector<Parameter>* stats) const {
  constexpr T kEps = T(1e-5);
  constexpr T kMomentum = T(0.1);
  cache.acts.resize(stage.size() + 1);
  cache.bn.resize(stage.size());
  for (std::size_t k = 0; k < stage.size(); ++k) {
    const ConvUnit& u = stage[k];
    const auto& w = params_[u.weight].value;
    if (u.bias != kNone) {
      ops::conv3x3_forward<T>(cache.acts[k], w, params_[u.bias].value, u.out, cache.acts[k + 1]);
      continue;
    }
    Tensor<T> z;
    ops::conv3x3_forward<T>(cache.acts[k], w, {}, u.out, z);
    const auto& gamma = params_[u.gamma].value;
    const auto& beta = params_[u.beta].value;
    if (mode == Mode::train) {
      ops::batchnorm_forward_train<T>(z, gamma, beta, (*stats)[u.mean].value, (*stats)[u.var].value, kMomentum,
                                      kEps, cache.acts[k + 1], cache.bn[k]);
    } else {
      ops::batchnorm_forward_eval<T>(z, gamma, beta, params_[u.mean].value, params_[u.var].value, kEps,
                                     cache.acts[k + 1], &cache.bn[k]);
    }
    ops::relu_inplace(cache.acts[k + 1]);
  }
}

template <typename T>
void Network<T>::run_decoder(const std::vector<Stage>& decoder, const Tensor<T>& bottleneck,
                             const std::vector<PoolCache>& pools, std::vector<StageCache>& caches, Mode mode,
                             std::vector<Parameter>* stats, Tensor<T>& probs) const {
  const std::size_t L = decoder.size();
  caches.resize(L);
  const Tensor<T>* x = &bottleneck;
  for (std::size_t j = 0; j < L; ++j) {
    const std::size_t b = L - 1 - j;
    auto& cache = caches[j];
    cache.acts.resize(1);
    ops::unpool2x2_forward(*x, pools[b].indices, pools[b].in_h, pools[b].in_w, cache.acts[0]);
    run_stage(decoder[j], cache, mode, stats);
    x = &cache.acts.back();
  }
  softmax2_pixels(*x, probs);
}

template <typename T>
void Network<T>::run_head(const std::array<LinearUnit, 3>& head, const std::vector<T>& input, int n,
                          bool softmax_out, HeadCache& cache) const {
  cache.input = input;
  auto relu = [](std::vector<T>& v) {
    for (auto& x : v) x = x > T(0) ? x : T(0);
  };
  const auto& [fc1, fc2, fc3] = head;
  ops::linear_forward<T>(cache.input, n, fc1.in, params_[fc1.weight].value, params_[fc1.bias].value, fc1.out,
                         cache.hidden1);
  relu(cache.hidden1);
  ops::linear_forward<T>(cache.hidden1, n, fc2.in, params_[fc2.weight].value, params_[fc2.bias].value, fc2.out,
                         cache.hidden2);
  relu(cache.hidden2);
  std::vector<T> logits;
  ops::linear_forward<T>(cache.hidden2, n, fc3.in, params_[fc3.weight].value, params_[fc3.bias].value, fc3.out,
                         logits);
  cache.probs.resize(logits.size());
  for (int i = 0; i < n; ++i) {
    const T a = logits[2 * i];
    const T b = logits[2 * i + 1];
    if (softmax_out) {
      const T m = std::max(a, b);
      const T ea = std::exp(a - m);
      const T eb = std::exp(b - m);
      cache.probs[2 * i] = ea / (ea + eb);
      cache.probs[2 * i + 1] = eb / (ea + eb);
    } else {
      cache.probs[2 * i] = sigmoid(a);
      cache.probs[2 * i + 1] = sigmoid(b);
    }
  }
}

template <typename T>
typename Network<T>::Pass Network<T>::run(const Tensor<T>& images, const ForwardOptions& options,
                                          std::vector<Parameter>* stats) const {
  check_input(images);
  Pass pass;
  pass.mode = options.mode;
  pass.freeze_encoder_bn = options.freeze_encoder_bn;
  pass.n = images.n;
  const std::size_t L = encoder_.size();
  const Mode encoder_mode = options.freeze_encoder_bn ? Mode::eval : options.mode;

  pass.encoder.resize(L);
  pass.pools.resize(L);
  Tensor<T> bottleneck;
  for (std::size_t b = 0; b < L; ++b) {
    auto& cache = pass.encoder[b];
    cache.acts.resize(1);
    cache.acts[0] = b == 0 ? images : std::move(bottleneck);
    run_stage(encoder_[b], cache, encoder_mode, stats);
    const Tensor<T>& out = cache.acts.back();
    pass.pools[b].in_h = out.h;
    pass.pools[b].in_w = out.w;
    bottleneck = Tensor<T>();
    ops::maxpool2x2_forward(out, bottleneck, pass.pools[b].indices);
  }

  run_decoder(lung_, bottleneck, pass.pools, pass.lung, options.mode, stats, pass.lung_probs);
  run_decoder(disease_, bottleneck, pass.pools, pass.disease, options.mode, stats, pass.disease_probs);

  std::vector<T> embedding;
  ops::global_avg_pool(bottleneck, embedding);
  run_head(health_, embedding, pass.n, true, pass.health);
  run_head(multilabel_, embedding, pass.n, config_.multilabel_activation == MultilabelActivation::softmax,
           pass.multilabel);

  const int C = bottleneck.c;
  const int H = images.h;
  const int W = images.w;
  const std::size_t seg = static_cast<std::size_t>(2) * H * W;
  pass.bundles.resize(static_cast<std::size_t>(pass.n));
  for (int i = 0; i < pass.n; ++i) {
    auto& bundle = pass.bundles[static_cast<std::size_t>(i)];
    bundle.height = H;
    bundle.width = W;
    bundle.lung_probs.assign(pass.lung_probs.sample(i), pass.lung_probs.sample(i) + seg);
    bundle.disease_probs.assign(pass.disease_probs.sample(i), pass.disease_probs.sample(i) + seg);
    bundle.health_probs = {pass.health.probs[2 * i], pass.health.probs[2 * i + 1]};
    bundle.covid_score = pass.multilabel.probs[2 * i];
    bundle.other_score = pass.multilabel.probs[2 * i + 1];
    bundle.embedding.assign(embedding.begin() + static_cast<std::ptrdiff_t>(i) * C,
                            embedding.begin() + static_cast<std::ptrdiff_t>(i + 1) * C);
  }
  return pass;
}

template <typename T>
typename Network<T>::Pass Network<T>::forward(const Tensor<T>& images, const ForwardOptions& options) {
  return run(images, options, options.mode == Mode::train ? &params_ : nullptr);
}

template <typename T>
std::vector<BasicPredictionBundle<T>> Network<T>::predict(const Tensor<T>& images) const {
  return run(images, ForwardOptions{Mode::eval, false}, nullptr).bundles;
}

template <typename T>
std::vector<BasicPredictionBundle<T>> Network<T>::predict(std::span<const Image> images) const {
  return predict(images_to_tensor<T>(images));
}

template <typename T>
std::vector<std::vector<T>> Network<T>::export_embedding(std::span<const Image> images) const {
  std::vector<std::vector<T>> out;
  for (auto& b : predict(images)) out.push_back(std::move(b.embedding));
  return out;
}

template <typename T>
Tensor<T> Network<T>::stage_backward(const Stage& stage, const StageCache& cache, Tensor<T> dy, bool need_dx) {
  for (std::size_t kk = stage.size(); kk-- > 0;) {
    const ConvUnit& u = stage[kk];
    auto& w = params_[u.weight];
    const bool want_dx = kk > 0 || need_dx;
    Tensor<T> dx;
    if (u.bias != kNone) {
      ops::conv3x3_backward<T>(cache.acts[kk], w.value, dy, w.grad, params_[u.bias].grad, want_dx ? &dx : nullptr);
    } else {
      ops::relu_backward_inplace(cache.acts[kk + 1], dy);
      Tensor<T> dz;
      ops::batchnorm_backward<T>(cache.bn[kk], params_[u.gamma].value, dy, params_[u.gamma].grad,
                                 params_[u.beta].grad, dz);
      ops::conv3x3_backward<T>(cache.acts[kk], w.value, dz, w.grad, {}, want_dx ? &dx : nullptr);
    }
    dy = std::move(dx);
  }
  return dy;
}

template <typename T>
std::vector<T> Network<T>::head_backward(const std::array<LinearUnit, 3>& head, const HeadCache& cache, int n,
                                         bool softmax_out, const std::vector<T>& dprobs) {
  std::vector<T> dlogits(static_cast<std::size_t>(2) * n);
  for (int i = 0; i < n; ++i) {
    const T p0 = cache.probs[2 * i];
    const T p1 = cache.probs[2 * i + 1];
    const T d0 = dprobs[2 * i];
    const T d1 = dprobs[2 * i + 1];
    if (softmax_out) {
      const T dot = p0 * d0 + p1 * d1;
      dlogits[2 * i] = p0 * (d0 - dot);
      dlogits[2 * i + 1] = p1 * (d1 - dot);
    } else {
      dlogits[2 * i] = d0 * p0 * (T(1) - p0);
      dlogits[2 * i + 1] = d1 * p1 * (T(1) - p1);
    }
  }
  const auto& [fc1, fc2, fc3] = head;
  auto mask = [](const std::vector<T>& y, std::vector<T>& d) {
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (!(y[i] > T(0))) d[i] = T(0);
    }
  };
  std::vector<T> dh2, dh1, dinput;
  ops::linear_backward<T>(cache.hidden2, n, fc3.in, params_[fc3.weight].value, fc3.out, dlogits,
                          params_[fc3.weight].grad, params_[fc3.bias].grad, &dh2);
  mask(cache.hidden2, dh2);
  ops::linear_backward<T>(cache.hidden1, n, fc2.in, params_[fc2.weight].value, fc2.out, dh2,
                          params_[fc2.weight].grad, params_[fc2.bias].grad, &dh1);
  mask(cache.hidden1, dh1);
  ops::linear_backward<T>(cache.input, n, fc1.in, params_[fc1.weight].value, fc1.out, dh1,
                          params_[fc1.weight].grad, params_[fc1.bias].grad, &dinput);
  return dinput;
}

template <typename T>
void Network<T>::decoder_backward(const std::vector<Stage>& decoder, const std::vector<StageCache>& caches,
                                  const std::vector<PoolCache>& pools, const Tensor<T>& probs,
                                  const Tensor<T>& dprobs, Tensor<T>& d_bottleneck) {
  if (!dprobs.same_shape(probs)) throw std::invalid_argument("segmentation gradient has wrong shape");
  // softmax backward per pixel
  Tensor<T> dy(probs.n, 2, probs.h, probs.w);
  const std::size_t hw = probs.plane();
  for (int i = 0; i < probs.n; ++i) {
    const T* p = probs.sample(i);
    const T* d = dprobs.sample(i);
    T* o = dy.sample(i);
    for (std::size_t j = 0; j < hw; ++j) {
      const T dot = p[j] * d[j] + p[hw + j] * d[hw + j];
      o[j] = p[j] * (d[j] - dot);
      o[hw + j] = p[hw + j] * (d[hw + j] - dot);
    }
  }
  const std::size_t L = decoder.size();
  for (std::size_t jj = L; jj-- > 0;) {
    const std::size_t b = L - 1 - jj;
    Tensor<T> dunpooled = stage_backward(decoder[jj], caches[jj], std::move(dy), true);
    const Tensor<T>& x = jj == 0 ? d_bottleneck : caches[jj - 1].acts.back();
    Tensor<T> dx(x.n, x.c, x.h, x.w);
    ops::unpool2x2_backward(dunpooled, pools[b].indices, dx);
    if (jj == 0) {
      for (std::size_t i = 0; i < dx.data.size(); ++i) d_bottleneck.data[i] += dx.data[i];
    } else {
      dy = std::move(dx);
    }
  }
}

template <typename T>
void Network<T>::backward(const Pass& pass, const OutputGrads& grads) {
  const std::size_t L = encoder_.size();
  const int n = pass.n;
  const Tensor<T>& last = pass.encoder[L - 1].acts.back();
  Tensor<T> d_bottleneck(n, last.c, (last.h + 1) / 2, (last.w + 1) / 2);
  bool reached = false;

  std::vector<T> d_embedding(static_cast<std::size_t>(n) * last.c, T(0));
  auto add = [&](const std::vector<T>& d) {
    for (std::size_t i = 0; i < d.size(); ++i) d_embedding[i] += d[i];
  };
  if (grads.health_probs) {
    add(head_backward(health_, pass.health, n, true, *grads.health_probs));
    reached = true;
  }
  if (grads.multilabel) {
    add(head_backward(multilabel_, pass.multilabel, n,
                      config_.multilabel_activation == MultilabelActivation::softmax, *grads.multilabel));
    reached = true;
  }
  if (reached) ops::global_avg_pool_backward(d_embedding, d_bottleneck);

  if (grads.lung_probs) {
    decoder_backward(lung_, pass.lung, pass.pools, pass.lung_probs, *grads.lung_probs, d_bottleneck);
    reached = true;
  }
  if (grads.disease_probs) {
    decoder_backward(disease_, pass.disease, pass.pools, pass.disease_probs, *grads.disease_probs, d_bottleneck);
    reached = true;
  }
  if (!reached) return;

  Tensor<T> dy = std::move(d_bottleneck);
  for (std::size_t bb = L; bb-- > 0;) {
    Tensor<T> dpre;
    ops::maxpool2x2_backward(dy, pass.pools[bb].indices, pass.pools[bb].in_h, pass.pools[bb].in_w, dpre);
    dy = stage_backward(encoder_[bb], pass.encoder[bb], std::move(dpre), bb > 0);
  }
}

template struct BasicPredictionBundle<float>;
template struct BasicPredictionBundle<double>;
template struct BasicPredictionBundle<long double>;

template class Network<float>;
template class Network<double>;
template class Network<long double>;

template Tensor<float> images_to_tensor<float>(std::span<const Image>);
template Tensor<double> images_to_tensor<double>(std::span<const Image>);
template Tensor<long double> images_to_tensor<long double>(std::span<const Image>);

}  // namespace cmtnet
