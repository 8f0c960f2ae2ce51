#include <cmath>

#include "cmtnet/losses.hpp"
#include "doctest.h"
#include "fixtures.hpp"

using namespace cmtnet;

namespace {

Mask grid(int h, int w, std::vector<std::uint8_t> bits) {
  Mask m(h, w);
  m.bits = std::move(bits);
  return m;
}

BasicPredictionBundle<double> random_bundle(int size, Rng& rng) {
  BasicPredictionBundle<double> b;
  b.height = b.width = size;
  const std::size_t hw = static_cast<std::size_t>(size) * size;
  b.lung_probs.resize(2 * hw);
  b.disease_probs.resize(2 * hw);
  for (std::size_t i = 0; i < hw; ++i) {
    const double p = rng.uniform(), q = rng.uniform();
    b.lung_probs[i] = 1 - p;
    b.lung_probs[hw + i] = p;
    b.disease_probs[i] = 1 - q;
    b.disease_probs[hw + i] = q;
  }
  const double h = rng.uniform();
  b.health_probs = {1 - h, h};
  b.covid_score = rng.uniform();
  b.other_score = rng.uniform();
  return b;
}

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("seg_bce examples") {
  const std::vector<double> perfect = {1, 0, 0, 1};
  const Mask m = grid(2, 2, {1, 0, 0, 1});
  CHECK(seg_bce<double>(perfect, 2, 2, m) == doctest::Approx(-4 * std::log(1 - 1e-7)).epsilon(1e-9));

  // full-size perfect prediction: the clamp leaves H*W*(-log(1 - eps))
  Mask big(224, 224);
  std::vector<double> zeros(224 * 224, 0.0);
  CHECK(seg_bce<double>(zeros, 224, 224, big) == doctest::Approx(0.005017600248238973).epsilon(1e-9));

  const std::vector<double> half(4, 0.5);
  CHECK(seg_bce<double>(half, 2, 2, grid(2, 2, {0, 1, 1, 1})) == doctest::Approx(2.772588722239781).epsilon(1e-12));
  CHECK(seg_bce<double>(half, 2, 2, grid(2, 2, {0, 0, 0, 0})) == doctest::Approx(2.772588722239781).epsilon(1e-12));

  const std::vector<double> pred = {0.9, 0.2};
  CHECK(seg_bce<double>(pred, 1, 2, grid(1, 2, {1, 0})) == doctest::Approx(0.328504066972036).epsilon(1e-12));
  CHECK(seg_bce<double>(pred, 1, 2, grid(1, 2, {1, 0}), SegReduction::mean) ==
        doctest::Approx(0.328504066972036 / 2).epsilon(1e-12));

  CHECK_THROWS_AS(seg_bce<double>(pred, 2, 1, grid(1, 2, {1, 0})), LossError);
  CHECK_THROWS_AS(seg_bce<double>(half, 2, 2, grid(1, 2, {1, 0})), LossError);
}

TEST_CASE("health_ce examples") {
  CHECK(health_ce<double>({0.0, 1.0}, 1) < 1e-6);
  CHECK(health_ce<double>({0.5, 0.5}, 0) == doctest::Approx(0.6931471805599453).epsilon(1e-12));
  CHECK(health_ce<double>({0.5, 0.5}, 1) == doctest::Approx(0.6931471805599453).epsilon(1e-12));
  CHECK(health_ce<double>({0.8, 0.2}, 1) == doctest::Approx(1.6094379124341003).epsilon(1e-12));
  CHECK_THROWS_AS(health_ce<double>({0.5, 0.5}, 2), LossError);
}

TEST_CASE("multilabel_bce examples") {
  CHECK(multilabel_bce<double>(1.0, 0.0, 1, 0) < 1e-6);
  CHECK(multilabel_bce<double>(0.5, 0.5, 0, 1) == doctest::Approx(1.3862943611198906).epsilon(1e-12));
  CHECK(multilabel_bce<double>(0.9, 0.3, 1, 1) == doctest::Approx(1.3093333199837625).epsilon(1e-12));
  CHECK_THROWS_AS(multilabel_bce<double>(0.5, 0.5, -1, 0), LossError);
  CHECK_THROWS_AS(multilabel_bce<double>(0.5, 0.5, 0, 3), LossError);
}

TEST_CASE("seg_bce equals the sum of per-pixel two-class cross entropies") {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> p(36);
    for (auto& v : p) v = rng.uniform();
    const Mask m = fixtures::random_mask(6, rng);
    double sum = 0;
    for (std::size_t i = 0; i < p.size(); ++i) sum += health_ce<double>({1 - p[i], p[i]}, m.bits[i]);
    CHECK(seg_bce<double>(p, 6, 6, m) == doctest::Approx(sum).epsilon(1e-12));
  }
}

TEST_CASE("total_loss gating") {
  Rng rng(8);
  const auto full = fixtures::make_sample(6, rng, true, true, true, true);
  const auto b = random_bundle(6, rng);

  const auto off = total_loss(b, full, Switches{{0, 0, 0, 0}});
  CHECK(off.total == 0);
  CHECK(off.z1 == 0);

  const auto all = total_loss(b, full);
  const auto partial = total_loss(b, full, Switches{{1, 0, 1, 1}});
  CHECK(partial.z2 == 0);
  CHECK(partial.total == doctest::Approx(all.z1 + all.z3 + all.z4).epsilon(1e-14));
  CHECK(all.total == doctest::Approx(all.z1 + all.z2 + all.z3 + all.z4).epsilon(1e-14));
  CHECK(all.z1 >= 0);
  CHECK(all.z2 >= 0);
  CHECK(all.z3 >= 0);
  CHECK(all.z4 >= 0);

  const auto no_disease = fixtures::make_sample(6, rng, true, false, true, true);
  CHECK(no_disease.switches() == Switches{{1, 0, 1, 1}});
  CHECK_THROWS_AS(total_loss(b, no_disease, Switches{{1, 1, 1, 1}}), LossError);
  const auto unlabeled = fixtures::make_sample(6, rng, false, false, false, false);
  CHECK(total_loss(b, unlabeled).total == 0);
  CHECK_THROWS_AS(total_loss(b, unlabeled, Switches{{0, 0, 1, 0}}), LossError);
}

TEST_CASE("batch loss is the mean of per-sample totals and decomposes") {
  Rng rng(13);
  const auto s1 = fixtures::make_sample(4, rng, true, false, true, true, "a");
  const auto s2 = fixtures::make_sample(4, rng, false, true, false, true, "b");
  const auto b1 = random_bundle(4, rng), b2 = random_bundle(4, rng);
  const std::array<bool, 4> all{true, true, true, true};
  const auto single1 = batch_loss<double>({b1}, {&s1}, all).total;
  const auto single2 = batch_loss<double>({b2}, {&s2}, all).total;
  const auto both = batch_loss<double>({b1, b2}, {&s1, &s2}, all);
  CHECK(single1 + single2 == doctest::Approx(2 * both.total).epsilon(1e-14));
  CHECK(both.samples.size() == 2);
  CHECK(both.samples[1].z1 == 0);
  CHECK(both.grads.lung_probs.has_value());
  CHECK(both.grads.disease_probs.has_value());

  const std::array<bool, 4> no_disease{true, false, true, true};
  const auto gated = batch_loss<double>({b1, b2}, {&s1, &s2}, no_disease);
  CHECK(!gated.grads.disease_probs.has_value());
  CHECK(gated.samples[1].z2 == 0);
}

TEST_CASE("output gradients match finite differences of the batch loss") {
  Rng rng(17);
  const auto s = fixtures::make_sample(3, rng, true, true, true, true);
  auto b = random_bundle(3, rng);
  const std::array<bool, 4> all{true, true, true, true};
  for (auto reduction : {SegReduction::sum, SegReduction::mean}) {
    const LossOptions opts{reduction};
    const auto g = batch_loss<double>({b}, {&s}, all, opts).grads;
    const double h = 1e-6;
    auto fd = [&](double& slot) {
      const double orig = slot;
      slot = orig + h;
      const double lp = batch_loss<double>({b}, {&s}, all, opts).total;
      slot = orig - h;
      const double lm = batch_loss<double>({b}, {&s}, all, opts).total;
      slot = orig;
      return (lp - lm) / (2 * h);
    };
    CHECK(g.lung_probs->data[9 + 4] == doctest::Approx(fd(b.lung_probs[9 + 4])).epsilon(1e-6));
    CHECK(g.disease_probs->data[9 + 2] == doctest::Approx(fd(b.disease_probs[9 + 2])).epsilon(1e-6));
    const int h_label = *s.healthy();
    CHECK((*g.health_probs)[h_label] == doctest::Approx(fd(b.health_probs[h_label])).epsilon(1e-6));
    CHECK((*g.multilabel)[0] == doctest::Approx(fd(b.covid_score)).epsilon(1e-6));
    CHECK((*g.multilabel)[1] == doctest::Approx(fd(b.other_score)).epsilon(1e-6));
  }
}

TEST_CASE("disease decoder influences the loss only when task 2 is on") {
  Rng rng(31);
  const auto with = fixtures::make_sample(16, rng, true, true, true, true);
  const auto without = fixtures::make_sample(16, rng, true, false, true, true);
  auto net = Net::create(fixtures::small_config(), 9);
  auto loss_of = [&](const Sample& s) {
    const auto out = net.predict(std::vector<Image>{s.image()});
    return total_loss(out[0], s).total;
  };
  const float w0 = loss_of(with), v0 = loss_of(without);
  for (auto& x : net.parameter("disease_decoder.block2.conv1.weight").value) x *= 1.5f;
  CHECK(loss_of(with) != w0);
  CHECK(loss_of(without) == v0);
}

}  // TEST_SUITE
