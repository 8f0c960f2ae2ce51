#include <cmath>

#include "doctest.h"
#include "fixtures.hpp"
#include "gradcheck.hpp"

using namespace cmtnet;

namespace {

std::vector<Image> random_batch(int n, int size, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Image> out;
  for (int i = 0; i < n; ++i) out.push_back(fixtures::random_image(size, rng));
  return out;
}

void check_normalized(const PredictionBundle& b) {
  const std::size_t hw = b.plane();
  for (std::size_t i = 0; i < hw; ++i) {
    REQUIRE(std::abs(b.lung_probs[i] + b.lung_probs[hw + i] - 1.0f) <= 1e-5f);
    REQUIRE(std::abs(b.disease_probs[i] + b.disease_probs[hw + i] - 1.0f) <= 1e-5f);
  }
  CHECK(std::abs(b.health_probs[0] + b.health_probs[1] - 1.0f) <= 1e-5f);
  CHECK(b.covid_score >= 0.0f);
  CHECK(b.covid_score <= 1.0f);
  CHECK(b.other_score >= 0.0f);
  CHECK(b.other_score <= 1.0f);
}

}  // namespace

TEST_SUITE("network") {

TEST_CASE("config validation and arithmetic") {
  NetworkConfig c;
  CHECK(c.embedding_dim() == 512);
  c.scale_factor = 8;
  CHECK(c.width(0) == 8);
  CHECK(c.embedding_dim() == 64);
  CHECK(c.head_width(1) == 8);
  c.scale_factor = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.scale_factor = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  NetworkConfig mismatch;
  mismatch.block_layers = {2, 2};
  CHECK_THROWS_AS(mismatch.validate(), ConfigError);

  NetworkConfig s = fixtures::small_config(48, 4);
  s.multilabel_activation = MultilabelActivation::softmax;
  CHECK(network_config_from_json(network_config_to_json(s)) == s);
}

TEST_CASE("seeded initialization is deterministic") {
  const auto c = fixtures::small_config();
  const auto a = Net::create(c, 5);
  const auto b = Net::create(c, 5);
  const auto d = Net::create(c, 6);
  REQUIRE(a.parameters().size() == b.parameters().size());
  bool differs = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    CHECK(a.parameters()[i].value == b.parameters()[i].value);
    differs |= a.parameters()[i].value != d.parameters()[i].value;
  }
  CHECK(differs);
  CHECK(a.parameter("encoder.block1.conv1.weight").shape == std::vector<int>{8, 3, 3, 3});
  CHECK(a.parameter("lung_decoder.classifier.weight").shape == std::vector<int>{2, 8, 3, 3});
  CHECK(a.parameter("health_head.fc1.weight").shape == std::vector<int>{32, 64});
  CHECK(a.parameter("multilabel_head.fc3.bias").shape == std::vector<int>{2});
  CHECK(a.parameter("encoder.block5.bn3.running_var").value == std::vector<float>(64, 1.0f));
}

TEST_CASE("pretrained encoder source") {
  const auto c = fixtures::small_config();
  const auto src = Net::create(c, 100);
  const auto state = src.state();
  const auto net = Net::create(c, 1, &state);
  const auto plain = Net::create(c, 1);
  for (const auto& p : net.parameters()) {
    const bool enc = p.name.rfind("encoder.", 0) == 0;
    if (enc) {
      CHECK(p.value == src.parameter(p.name).value);
    } else {
      CHECK(p.value == plain.parameter(p.name).value);
    }
  }

  NetworkConfig four = c;
  four.block_layers = {2, 2, 3, 3};
  four.block_widths = {64, 128, 256, 512};
  const auto wrong = Net::create(four, 1).state();
  try {
    Net::create(c, 1, &wrong);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("shape mismatch") != std::string::npos);
  }
}

TEST_CASE("forward produces normalized bundles") {
  const auto net = Net::create(fixtures::small_config(32), 2);
  const auto images = random_batch(2, 32, 8);
  const auto out = net.predict(images);
  REQUIRE(out.size() == 2);
  for (const auto& b : out) {
    CHECK(b.height == 32);
    CHECK(b.lung_probs.size() == 2u * 32 * 32);
    check_normalized(b);
  }
  CHECK_THROWS_AS(net.predict(random_batch(1, 16, 1)), std::invalid_argument);
}

TEST_CASE("identical inputs give identical bundles in eval mode") {
  const auto net = Net::create(fixtures::small_config(), 4);
  auto images = random_batch(1, 16, 3);
  images.push_back(images[0]);
  images.push_back(random_batch(1, 16, 4)[0]);
  const auto out = net.predict(images);
  CHECK(out[0].lung_probs == out[1].lung_probs);
  CHECK(out[0].disease_probs == out[1].disease_probs);
  CHECK(out[0].health_probs == out[1].health_probs);
  CHECK(out[0].covid_score == out[1].covid_score);
  CHECK(out[0].embedding == out[1].embedding);
  CHECK(out[0].embedding != out[2].embedding);
}

TEST_CASE("embedding export length") {
  const auto images = random_batch(2, 16, 1);
  const auto small = Net::create(fixtures::small_config(), 1).export_embedding(images);
  REQUIRE(small.size() == 2);
  CHECK(small[0].size() == 64);

  NetworkConfig full;
  full.input_size = 16;
  const auto emb = Net::create(full, 1).export_embedding(images);
  CHECK(emb[0].size() == 512);
}

TEST_CASE("argmax lung mask ignores a constant shift of the output biases") {
  auto net = Net::create(fixtures::small_config(32), 12);
  const auto images = random_batch(2, 32, 12);
  const auto before = net.predict(images);
  for (auto& v : net.parameter("lung_decoder.classifier.bias").value) v += 3.25f;
  const auto after = net.predict(images);
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i].lung_mask() == after[i].lung_mask());
}

TEST_CASE("softmax multilabel mode still yields scores in [0,1]") {
  auto c = fixtures::small_config();
  c.multilabel_activation = MultilabelActivation::softmax;
  const auto out = Net::create(c, 3).predict(random_batch(3, 16, 2));
  for (const auto& b : out) {
    check_normalized(b);
    CHECK(std::abs(b.covid_score + b.other_score - 1.0f) <= 1e-5f);
  }
}

TEST_CASE("state round trip and load_state validation") {
  const auto c = fixtures::small_config();
  auto a = Net::create(c, 1);
  auto b = Net::create(c, 2);
  b.load_state(a.state());
  const auto images = random_batch(2, 16, 5);
  CHECK(a.predict(images)[1].lung_probs == b.predict(images)[1].lung_probs);
  auto st = a.state();
  st.erase(st.begin());
  CHECK_THROWS_AS(b.load_state(st), ConfigError);
}

TEST_CASE("training forward updates running statistics, eval forward does not") {
  auto net = Net::create(fixtures::small_config(), 1);
  const auto x = images_to_tensor<float>(random_batch(2, 16, 6));
  const auto before = net.parameter("encoder.block1.bn1.running_mean").value;
  net.forward(x, {Mode::eval, false});
  CHECK(net.parameter("encoder.block1.bn1.running_mean").value == before);
  net.forward(x, {Mode::train, false});
  CHECK(net.parameter("encoder.block1.bn1.running_mean").value != before);
  const auto enc = net.parameter("encoder.block1.bn1.running_mean").value;
  const auto dec = net.parameter("lung_decoder.block1.bn1.running_mean").value;
  net.forward(x, {Mode::train, true});
  CHECK(net.parameter("encoder.block1.bn1.running_mean").value == enc);
  CHECK(net.parameter("lung_decoder.block1.bn1.running_mean").value != dec);
}

TEST_CASE("analytic gradients match finite differences (spot check)") {
  Rng rng(21);
  std::vector<Sample> samples;
  for (int i = 0; i < 2; ++i) samples.push_back(fixtures::make_sample(16, rng, true, true, true, true));
  std::vector<const Sample*> ptrs;
  std::vector<Image> images;
  for (const auto& s : samples) {
    ptrs.push_back(&s);
    images.push_back(s.image());
  }
  auto net = gradcheck::LNet::create(fixtures::small_config(), 3);
  const auto x = images_to_tensor<long double>(images);
  for (int task = 0; task < 4; ++task) {
    const auto r = gradcheck::check_task(net, x, ptrs, task, 1, 77);
    INFO("task " << task + 1 << " worst " << r.worst);
    CHECK(r.checked > 0);
    CHECK(static_cast<double>(r.max_rel_error) < 1e-4);
  }
}

TEST_CASE("frozen encoder batch norm gradients match finite differences") {
  Rng rng(22);
  std::vector<Sample> samples;
  for (int i = 0; i < 2; ++i) samples.push_back(fixtures::make_sample(16, rng, true, false, true, true));
  std::vector<const Sample*> ptrs{&samples[0], &samples[1]};
  auto net = gradcheck::LNet::create(fixtures::small_config(), 4);
  const auto x = images_to_tensor<long double>(std::vector<Image>{samples[0].image(), samples[1].image()});
  const gradcheck::LNet::ForwardOptions frozen{Mode::train, true};
  std::array<bool, 4> enable{true, false, false, false};
  auto pass = net.forward(x, frozen);
  auto loss = batch_loss(pass.bundles, ptrs, enable);
  net.zero_grad();
  net.backward(pass, loss.grads);
  auto& w = net.parameter("encoder.block2.conv1.weight");
  const long double a = w.grad[5];
  const long double h = 1e-6L, orig = w.value[5];
  w.value[5] = orig + h;
  const auto lp = batch_loss(net.forward(x, frozen).bundles, ptrs, enable).total;
  w.value[5] = orig - h;
  const auto lm = batch_loss(net.forward(x, frozen).bundles, ptrs, enable).total;
  w.value[5] = orig;
  const long double numeric = (lp - lm) / (2 * h);
  CHECK(static_cast<double>(std::fabs(a - numeric) / std::max(std::fabs(numeric), 1e-7L)) < 1e-4);
}

}  // TEST_SUITE
