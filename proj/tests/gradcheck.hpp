#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "cmtnet/losses.hpp"
#include "cmtnet/network.hpp"
#include "cmtnet/random.hpp"

namespace gradcheck {

using namespace cmtnet;
using LD = long double;
using LNet = Network<LD>;

struct Result {
  long double max_rel_error = 0;
  int checked = 0;
  int skipped = 0;  // activation pattern changed within +-h
  std::string worst;
};

/// ReLU on/off bits and pooling argmaxes of one pass.
inline std::vector<std::int64_t> pattern(const LNet::Pass& p) {
  std::vector<std::int64_t> out;
  auto stages = [&](const std::vector<LNet::StageCache>& caches) {
    for (const auto& c : caches) {
      for (std::size_t k = 1; k < c.acts.size(); ++k) {
        for (LD v : c.acts[k].data) out.push_back(v > 0);
      }
    }
  };
  stages(p.encoder);
  stages(p.lung);
  stages(p.disease);
  for (const auto& pc : p.pools) out.insert(out.end(), pc.indices.begin(), pc.indices.end());
  for (const auto* h : {&p.health, &p.multilabel}) {
    for (LD v : h->hidden1) out.push_back(v > 0);
    for (LD v : h->hidden2) out.push_back(v > 0);
  }
  return out;
}

/// Central differences against backward() for the loss restricted to one task.
inline Result check_task(LNet& net, const Tensor<LD>& images, const std::vector<const Sample*>& samples, int task,
                         int entries_per_tensor, std::uint64_t seed, LD h = 1e-6L, bool five_point = false) {
  std::array<bool, 4> enable{false, false, false, false};
  enable[static_cast<std::size_t>(task)] = true;
  const LNet::ForwardOptions opts{Mode::train, false};

  auto loss_at = [&](std::vector<std::int64_t>* pat) {
    auto pass = net.forward(images, opts);
    if (pat) *pat = pattern(pass);
    return batch_loss(pass.bundles, samples, enable).total;
  };

  const auto pass = net.forward(images, opts);
  const auto base_pattern = pattern(pass);
  const auto loss = batch_loss(pass.bundles, samples, enable);
  net.zero_grad();
  net.backward(pass, loss.grads);
  // Rounding noise in a difference of two losses grows with the loss itself
  // (segmentation terms are sums over pixels), so the relative-error floor
  // scales with it. Entries below the floor are compared absolutely.
  const LD floor = 1e-7L * std::max<LD>(1, std::fabs(loss.total));
  std::vector<std::vector<LD>> analytic;
  for (const auto& p : net.parameters()) analytic.push_back(p.grad);

  Result r;
  Rng rng(seed);
  auto& params = net.parameters();
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    if (!params[pi].trainable) continue;
    const auto& g = analytic[pi];
    std::vector<std::size_t> picks;
    picks.push_back(static_cast<std::size_t>(
        std::max_element(g.begin(), g.end(), [](LD a, LD b) { return std::fabs(a) < std::fabs(b); }) - g.begin()));
    for (int k = 1; k < entries_per_tensor; ++k) picks.push_back(rng.below(g.size()));
    for (std::size_t idx : picks) {
      LD& w = params[pi].value[idx];
      const LD orig = w;
      bool stable = true;
      auto probe = [&](LD offset) {
        std::vector<std::int64_t> pat;
        w = orig + offset;
        const LD l = loss_at(&pat);
        stable = stable && pat == base_pattern;
        return l;
      };
      LD numeric;
      if (five_point) {
        // fourth-order stencil: truncation O(h^4), so a larger h keeps rounding noise down
        const LD l2p = probe(2 * h), lp = probe(h), lm = probe(-h), l2m = probe(-2 * h);
        numeric = (-l2p + 8 * lp - 8 * lm + l2m) / (12 * h);
      } else {
        const LD lp = probe(h), lm = probe(-h);
        numeric = (lp - lm) / (2 * h);
      }
      w = orig;
      if (!stable) {
        ++r.skipped;
        continue;
      }
      const LD a = g[idx];
      const LD denom = std::max({std::fabs(a), std::fabs(numeric), floor});
      const LD rel = std::fabs(a - numeric) / denom;
      ++r.checked;
      if (rel > r.max_rel_error) {
        r.max_rel_error = rel;
        r.worst = params[pi].name + "[" + std::to_string(idx) + "]";
      }
    }
  }
  return r;
}

}  // namespace gradcheck
