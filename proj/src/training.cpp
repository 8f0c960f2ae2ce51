#include "cmtnet/training.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include "cmtnet/random.hpp"
#include "json.hpp"

namespace cmtnet {

void TrainConfig::validate() const {
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  if (eval_every < 0) throw ConfigError("eval_every must be >= 0");
  if (!task_enable[2] && !task_enable[3]) {
    throw ConfigError("at least one classification task (3 or 4) must be enabled");
  }
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1) || !(adam_epsilon > 0)) {
    throw ConfigError("invalid Adam hyperparameters");
  }
}

void Adam::step(Net& net) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const float b1 = static_cast<float>(beta1_);
  const float b2 = static_cast<float>(beta2_);
  for (auto& p : net.parameters()) {
    if (!p.trainable) continue;
    auto& m = m_[p.name];
    auto& v = v_[p.name];
    if (m.empty()) {
      m.assign(p.value.size(), 0.0f);
      v.assign(p.value.size(), 0.0f);
    }
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const float g = p.grad[i];
      m[i] = b1 * m[i] + (1.0f - b1) * g;
      v[i] = b2 * v[i] + (1.0f - b2) * g * g;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p.value[i] -= static_cast<float>(lr_ * mhat / (std::sqrt(vhat) + eps_));
    }
  }
}

void Adam::restore(std::int64_t steps, std::map<std::string, std::vector<float>> m,
                   std::map<std::string, std::vector<float>> v) {
  t_ = steps;
  m_ = std::move(m);
  v_ = std::move(v);
}

std::string TrainHistory::epoch_line(const EpochRecord& r) const {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["samples"] = r.samples;
  j["mean_total"] = r.mean_total;
  for (int k = 0; k < 4; ++k) {
    const std::string z = "z" + std::to_string(k + 1);
    j["mean_" + z] = r.mean_z[static_cast<std::size_t>(k)];
    j["active_" + z] = r.active[static_cast<std::size_t>(k)];
  }
  if (!r.eval.empty()) j["eval"] = r.eval;
  return j.dump();
}

void TrainHistory::write_jsonl(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw TrainingError("cannot write history to " + path.string());
  for (const auto& r : epochs) out << epoch_line(r) << '\n';
}

namespace {

constexpr std::uint64_t kShuffleStream = 0x5eed0000ULL;

std::string checkpoint_name(int epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%04d.ckpt", epoch);
  return buf;
}

}  // namespace

TrainResult train(Net& net, const Dataset& train_set, const TrainConfig& config, const ResumeState* resume,
                  const EvalHook& eval_hook) {
  config.validate();
  if (train_set.empty()) throw TrainingError("training set is empty");
  for (const auto& s : train_set.samples) {
    if (s.size() != net.config().input_size) {
      throw TrainingError("sample '" + s.sample_id() + "' has size " + std::to_string(s.size()) +
                          ", network expects " + std::to_string(net.config().input_size));
    }
  }

  TrainResult result;
  result.adam = Adam(config.learning_rate, config.beta1, config.beta2, config.adam_epsilon);
  int first_epoch = 1;
  if (resume) {
    result.adam.restore(resume->adam.steps(), resume->adam.first_moment(), resume->adam.second_moment());
    first_epoch = resume->epochs_done + 1;
  }
  if (!config.checkpoint_dir.empty()) std::filesystem::create_directories(config.checkpoint_dir);

  const std::size_t n = train_set.size();
  const int last_epoch = first_epoch + config.epochs - 1;
  std::int64_t step = result.adam.steps();
  result.epochs_done = first_epoch - 1;

  for (int epoch = first_epoch; epoch <= last_epoch; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(config.seed, kShuffleStream + static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);

    EpochRecord record;
    record.epoch = epoch;
    double total_sum = 0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(n, start + static_cast<std::size_t>(config.batch_size));
      std::vector<Image> images;
      std::vector<const Sample*> batch;
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(&train_set.samples[order[i]]);
        images.push_back(batch.back()->image());
      }
      ++step;
      const auto pass = net.forward(images_to_tensor<float>(images), {Mode::train, config.freeze_encoder_bn});
      const auto loss = batch_loss(pass.bundles, batch, config.task_enable, config.loss);
      if (!std::isfinite(loss.total)) {
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step));
      }
      net.zero_grad();
      net.backward(pass, loss.grads);
      result.adam.step(net);

      StepRecord sr;
      sr.epoch = epoch;
      sr.step = step;
      sr.batch_size = static_cast<int>(batch.size());
      sr.total = loss.total;
      for (const auto& b : loss.samples) {
        const double z[4] = {b.z1, b.z2, b.z3, b.z4};
        for (std::size_t k = 0; k < 4; ++k) {
          if (b.active[static_cast<int>(k)]) {
            sr.z_sum[k] += z[k];
            ++sr.active[k];
          }
        }
      }
      for (std::size_t k = 0; k < 4; ++k) {
        record.mean_z[k] += sr.z_sum[k];
        record.active[k] += sr.active[k];
      }
      total_sum += sr.total * sr.batch_size;
      record.samples += sr.batch_size;
      result.history.steps.push_back(sr);
    }
    for (std::size_t k = 0; k < 4; ++k) {
      record.mean_z[k] = record.active[k] > 0 ? record.mean_z[k] / record.active[k] : 0.0;
    }
    record.mean_total = total_sum / record.samples;
    if (eval_hook && config.eval_every > 0 && (epoch - first_epoch + 1) % config.eval_every == 0) {
      record.eval = eval_hook(net, epoch);
    }
    result.history.epochs.push_back(record);
    result.epochs_done = epoch;

    if (!config.checkpoint_dir.empty()) {
      const bool cadence = config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0;
      if (cadence || epoch == last_epoch) {
        save_checkpoint(net, config.checkpoint_dir / checkpoint_name(epoch), {epoch, &result.adam});
      }
      std::ofstream hist(config.checkpoint_dir / "history.jsonl", epoch == first_epoch && !resume
                                                                      ? std::ios::trunc
                                                                      : std::ios::app);
      hist << result.history.epoch_line(record) << '\n';
    }
  }
  if (!config.checkpoint_dir.empty()) {
    save_checkpoint(net, config.checkpoint_dir / "last.ckpt", {result.epochs_done, &result.adam});
  }
  return result;
}

}  // namespace cmtnet
