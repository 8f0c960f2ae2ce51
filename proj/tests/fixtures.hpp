#pragma once

#include <filesystem>
#include <string>

#include "cmtnet/datamodel.hpp"
#include "cmtnet/network.hpp"
#include "cmtnet/random.hpp"

namespace fixtures {

using namespace cmtnet;

inline Image random_image(int size, Rng& rng) {
  Image im(3, size, size);
  for (auto& v : im.values) v = static_cast<float>(rng.uniform());
  return im;
}

inline Mask random_mask(int size, Rng& rng, double p = 0.5) {
  Mask m(size, size);
  for (auto& b : m.bits) b = rng.uniform() < p ? 1 : 0;
  return m;
}

/// Sample with the given annotations present.
inline Sample make_sample(int size, Rng& rng, bool lung, bool disease, bool health, bool multilabel,
                          const std::string& id = "s") {
  SampleLabels labels;
  const int covid = rng.below(2) == 0 ? 1 : 0;
  if (health) labels.healthy = covid ? 1 : static_cast<int>(rng.below(2));
  if (multilabel) {
    labels.covid = covid;
    labels.other = covid ? 0 : static_cast<int>(rng.below(2));
  }
  std::optional<Mask> lm, dm;
  if (lung) lm = random_mask(size, rng);
  if (disease) dm = random_mask(size, rng, 0.2);
  return Sample::create(random_image(size, rng), lm, dm, labels, "p-" + id, id);
}

inline NetworkConfig small_config(int input = 16, int scale = 8) {
  NetworkConfig c;
  c.input_size = input;
  c.scale_factor = scale;
  return c;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("cmtnet_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace fixtures
