// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any failure.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "cmtnet/commands.hpp"
#include "cmtnet/ingestion.hpp"
#include "cmtnet/losses.hpp"
#include "cmtnet/training.hpp"
#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "metric_oracle.hpp"

using namespace cmtnet;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

Outcome verdict(bool pass, const std::string& detail) { return {pass, detail}; }

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(6);
  s << v;
  return s.str();
}

// Plain scalar loss, written independently of the library.
double clamp_p(double p) { return std::min(std::max(p, 1e-7), 1 - 1e-7); }
double bce(double p, int y) {
  p = clamp_p(p);
  return y ? -std::log(p) : -std::log(1 - p);
}

double oracle_total(const BasicPredictionBundle<double>& b, const Sample& s) {
  double z = 0;
  const std::size_t hw = b.plane();
  if (s.lung_mask()) {
    for (std::size_t i = 0; i < hw; ++i) z += bce(b.lung_probs[hw + i], s.lung_mask()->bits[i]);
  }
  if (s.disease_mask()) {
    for (std::size_t i = 0; i < hw; ++i) z += bce(b.disease_probs[hw + i], s.disease_mask()->bits[i]);
  }
  if (s.healthy()) z += -std::log(clamp_p(b.health_probs[static_cast<std::size_t>(*s.healthy())]));
  if (s.covid() && s.other()) z += bce(b.covid_score, *s.covid()) + bce(b.other_score, *s.other());
  return z;
}

Outcome loss_oracle() {
  Rng rng(101);
  std::vector<Sample> samples;
  samples.push_back(fixtures::make_sample(16, rng, true, true, true, true, "a"));
  samples.push_back(fixtures::make_sample(16, rng, true, false, true, false, "b"));
  samples.push_back(fixtures::make_sample(16, rng, false, true, false, true, "c"));
  samples.push_back(fixtures::make_sample(16, rng, false, false, true, true, "d"));
  std::vector<const Sample*> ptrs;
  std::vector<Image> images;
  for (const auto& s : samples) {
    ptrs.push_back(&s);
    images.push_back(s.image());
  }
  const auto net = Network<double>::create(fixtures::small_config(), 5);
  const auto bundles = net.predict(images);
  const auto got = batch_loss(bundles, ptrs, {true, true, true, true});
  double want = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) want += oracle_total(bundles[i], samples[i]);
  want /= static_cast<double>(samples.size());
  const double rel = std::fabs(got.total - want) / std::fabs(want);
  return verdict(rel <= 1e-6, "batch " + fmt(got.total) + " oracle " + fmt(want) + " rel " + fmt(rel));
}

Outcome switch_gating() {
  Rng rng(102);
  std::vector<Sample> samples;
  for (int i = 0; i < 4; ++i) samples.push_back(fixtures::make_sample(16, rng, true, false, true, true));
  std::vector<const Sample*> ptrs;
  std::vector<Image> images;
  for (const auto& s : samples) {
    ptrs.push_back(&s);
    images.push_back(s.image());
  }
  auto net = Net::create(fixtures::small_config(), 6);
  const auto x = images_to_tensor<float>(images);
  const auto pass = net.forward(x, {Mode::train, false});
  const auto loss = batch_loss(pass.bundles, ptrs, {true, true, true, true});
  net.zero_grad();
  net.backward(pass, loss.grads);
  bool zero = true;
  std::vector<std::vector<float>> before;
  for (const auto& p : net.parameters()) {
    if (p.name.rfind("disease_decoder.", 0) != 0) continue;
    for (float g : p.grad) zero = zero && g == 0.0f;
    before.push_back(p.value);
  }
  Adam adam;
  adam.step(net);
  bool unchanged = true;
  std::size_t k = 0;
  for (const auto& p : net.parameters()) {
    if (p.name.rfind("disease_decoder.", 0) != 0) continue;
    if (p.trainable) unchanged = unchanged && p.value == before[k];
    ++k;
  }
  bool encoder_moved = net.parameter("encoder.block1.conv1.weight").grad !=
                       std::vector<float>(net.parameter("encoder.block1.conv1.weight").grad.size(), 0.0f);
  return verdict(zero && unchanged && encoder_moved,
                 std::string("grads zero ") + (zero ? "yes" : "no") + ", params unchanged " + (unchanged ? "yes" : "no"));
}

Outcome gradient_check() {
  Rng rng(103);
  std::vector<Sample> samples;
  for (int i = 0; i < 2; ++i) samples.push_back(fixtures::make_sample(16, rng, true, true, true, true));
  std::vector<const Sample*> ptrs{&samples[0], &samples[1]};
  auto net = gradcheck::LNet::create(fixtures::small_config(16, 8), 8);
  const auto x = images_to_tensor<long double>(std::vector<Image>{samples[0].image(), samples[1].image()});
  bool ok = true;
  std::string detail;
  for (int task = 0; task < 4; ++task) {
    const auto r = gradcheck::check_task(net, x, ptrs, task, 2, 900 + task, 3e-5L, true);
    const double e = static_cast<double>(r.max_rel_error);
    ok = ok && r.checked > 0 && e < 1e-4;
    detail += "Z" + std::to_string(task + 1) + " " + fmt(e) + " (" + std::to_string(r.checked) + " checked, worst " + r.worst + ") ";
  }
  return verdict(ok, detail);
}

Outcome overfit() {
  const auto dir = fixtures::temp_dir("accept_overfit");
  const auto syn = generate_synthetic(8, 1, dir, {128});
  NetworkConfig nc = fixtures::small_config(32, 2);
  const Dataset data = build_dataset(syn.records, syn.mask_dir, {syn.image_root, nc.input_size});
  auto net = Net::create(nc, 7);
  TrainConfig tc;
  tc.epochs = 300;
  tc.seed = 7;
  const auto r = train(net, data, tc);
  const double first = r.history.steps.front().total, last = r.history.steps.back().total;

  const auto preds = predict_dataset(net, data);
  ScoreSet covid;
  double dice = 0;
  int masks = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto& s = data.samples[i];
    if (s.covid()) {
      covid.scores.push_back(preds[i].covid_score);
      covid.labels.push_back(*s.covid());
    }
    if (s.lung_mask()) {
      dice += seg_overlap(preds[i].lung_mask(), *s.lung_mask()).dice;
      ++masks;
    }
  }
  dice /= std::max(masks, 1);
  const double sens = sensitivity_at_specificity(covid, 0.99).sensitivity;
  const bool ok = last <= 0.10 * first && sens == 1.0 && masks > 0 && dice >= 0.90;
  return verdict(ok, "loss " + fmt(first) + " -> " + fmt(last) + " (" + fmt(100 * last / first) +
                         "%), covid sensitivity " + fmt(sens) + ", lung dice " + fmt(dice));
}

Outcome metric_oracle() {
  Rng rng(104);
  double worst = 0;
  for (int t = 0; t < 64; ++t) {
    const auto set = oracle::random_set(rng, 2 + static_cast<int>(rng.below(199)));
    const auto want = oracle::sweep(set);
    const auto got = roc(set);
    if (got.points.size() != want.size()) return verdict(false, "roc length differs in set " + std::to_string(t));
    double area = 0;
    for (std::size_t i = 0; i < want.size(); ++i) {
      if (got.points[i].threshold != want[i].threshold) return verdict(false, "threshold order differs");
      worst = std::max({worst, std::fabs(got.points[i].sensitivity - want[i].sensitivity),
                        std::fabs(got.points[i].specificity - want[i].specificity)});
      if (i) {
        const double dx = (1 - want[i].specificity) - (1 - want[i - 1].specificity);
        area += dx * (want[i].sensitivity + want[i - 1].sensitivity) / 2;
      }
    }
    worst = std::max({worst, std::fabs(auc(got) - area), std::fabs(eer(set) - oracle::eer(set))});
    for (double y : {0.90, 0.95, 0.99}) {
      const auto a = sensitivity_at_specificity(set, y);
      const auto b = oracle::sens_at_spec(set, y);
      if (a.target_reached != b.target_reached || a.threshold != b.threshold) {
        return verdict(false, "operating point differs in set " + std::to_string(t));
      }
      worst = std::max({worst, std::fabs(a.sensitivity - b.sensitivity), std::fabs(a.specificity - b.specificity)});
    }
  }
  return verdict(worst <= 1e-9, "64 sets, max deviation " + fmt(worst));
}

Outcome augmentation() {
  Rng rng(105);
  Mask lung(64, 64);
  lung.at(20, 30) = 1;
  const Sample s = Sample::create(fixtures::random_image(64, rng), lung, Mask(64, 64), {1, 1, 0}, "pt", "orig");
  const auto out = augment(s);
  if (out.size() != 5) return verdict(false, std::to_string(out.size()) + " variants");
  bool labels = true;
  for (const auto& a : out) {
    labels = labels && a.switches() == s.switches() && a.healthy() == s.healthy() && a.covid() == s.covid() &&
             a.other() == s.other() && a.patient_id() == s.patient_id();
  }
  const std::array<std::pair<int, int>, 3> shifts{{{10, 0}, {0, 10}, {10, 10}}};
  bool moved = true;
  for (std::size_t k = 0; k < shifts.size(); ++k) {
    const Mask& m = *out[2 + k].lung_mask();
    moved = moved && m.count() == 1 && m.at(20 + shifts[k].second, 30 + shifts[k].first) == 1;
  }
  return verdict(labels && moved, std::string("labels preserved ") + (labels ? "yes" : "no") +
                                      ", pixel oracle " + (moved ? "yes" : "no"));
}

Outcome split() {
  Rng rng(106);
  for (int t = 0; t < 100; ++t) {
    const int patients = 2 + static_cast<int>(rng.below(40));
    std::vector<ManifestRecord> records;
    for (int p = 0; p < patients; ++p) {
      const int k = 1 + static_cast<int>(rng.below(5));
      for (int i = 0; i < k; ++i) {
        ManifestRecord r;
        r.sample_id = "s" + std::to_string(p) + "_" + std::to_string(i);
        r.patient_id = "p" + std::to_string(p);
        r.image_path = r.sample_id + ".png";
        records.push_back(r);
      }
    }
    const std::uint64_t seed = rng.next();
    const auto a = split_subject_disjoint(records, 0.8, seed);
    const auto b = split_subject_disjoint(records, 0.8, seed);
    if (a.train != b.train || a.test != b.test) return verdict(false, "not deterministic in trial " + std::to_string(t));
    std::set<std::string> train_p, test_p, ids;
    for (const auto& r : a.train) train_p.insert(r.patient_id), ids.insert(r.sample_id);
    for (const auto& r : a.test) test_p.insert(r.patient_id), ids.insert(r.sample_id);
    for (const auto& p : train_p) {
      if (test_p.contains(p)) return verdict(false, "patient " + p + " on both sides");
    }
    if (ids.size() != records.size() || a.train.size() + a.test.size() != records.size()) {
      return verdict(false, "record assignment broken in trial " + std::to_string(t));
    }
  }
  return verdict(true, "100 manifests");
}

Outcome normalization() {
  Rng rng(107);
  std::vector<Image> images;
  for (int i = 0; i < 4; ++i) images.push_back(fixtures::random_image(16, rng));
  images.push_back(Image(3, 16, 16, 0.0f));
  double worst = 0;
  bool range = true;
  for (auto act : {MultilabelActivation::sigmoid, MultilabelActivation::softmax}) {
    auto cfg = fixtures::small_config();
    cfg.multilabel_activation = act;
    const auto net = Net::create(cfg, 11);
    for (const auto& b : net.predict(images)) {
      const std::size_t hw = b.plane();
      for (std::size_t i = 0; i < hw; ++i) {
        worst = std::max<double>(worst, std::fabs(b.lung_probs[i] + b.lung_probs[hw + i] - 1));
        worst = std::max<double>(worst, std::fabs(b.disease_probs[i] + b.disease_probs[hw + i] - 1));
      }
      worst = std::max<double>(worst, std::fabs(b.health_probs[0] + b.health_probs[1] - 1));
      range = range && b.covid_score >= 0 && b.covid_score <= 1 && b.other_score >= 0 && b.other_score <= 1;
    }
  }
  return verdict(worst <= 1e-5 && range, "max softmax deviation " + fmt(worst));
}

Outcome overlap() {
  auto mask = [](std::vector<std::uint8_t> bits) {
    Mask m(2, 2);
    m.bits = std::move(bits);
    return m;
  };
  auto near = [](Overlap o, double d, double i) { return std::fabs(o.dice - d) < 1e-12 && std::fabs(o.iou - i) < 1e-12; };
  const bool ok = near(seg_overlap(mask({1, 1, 0, 0}), mask({1, 1, 0, 0})), 1, 1) &&
                  near(seg_overlap(mask({1, 1, 0, 0}), mask({0, 0, 1, 1})), 0, 0) &&
                  near(seg_overlap(mask({0, 0, 0, 0}), mask({0, 0, 0, 0})), 1, 1) &&
                  near(seg_overlap(mask({1, 1, 0, 0}), mask({0, 1, 1, 0})), 0.5, 1.0 / 3) &&
                  near(seg_overlap(mask({1, 0, 0, 0}), mask({1, 1, 1, 1})), 0.4, 0.25);
  return verdict(ok, "identical, disjoint, empty, half and nested cases");
}

Outcome round_trips() {
  const auto dir = fixtures::temp_dir("accept_roundtrip");
  Rng rng(108);
  auto net = Net::create(fixtures::small_config(), 12);
  Dataset d;
  for (int i = 0; i < 3; ++i) d.samples.push_back(fixtures::make_sample(16, rng, true, true, true, true));
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 3;
  const auto r = train(net, d, tc);
  save_checkpoint(net, dir / "m.ckpt", {1, &r.adam});
  const auto loaded = load_checkpoint(dir / "m.ckpt", net.config());
  std::vector<Image> images;
  for (const auto& s : d.samples) images.push_back(s.image());
  const auto a = net.predict(images), b = loaded.net.predict(images);
  bool same = loaded.adam && loaded.adam->steps() == r.adam.steps() &&
              loaded.adam->first_moment() == r.adam.first_moment();
  for (std::size_t i = 0; i < a.size(); ++i) {
    same = same && a[i].lung_probs == b[i].lung_probs && a[i].disease_probs == b[i].disease_probs &&
           a[i].health_probs == b[i].health_probs && a[i].covid_score == b[i].covid_score &&
           a[i].other_score == b[i].other_score;
  }
  const auto syn = generate_synthetic(6, 9, dir / "syn", {48});
  write_manifest(dir / "copy.jsonl", syn.records);
  const bool manifest = read_manifest(dir / "copy.jsonl") == syn.records;
  return verdict(same && manifest, std::string("checkpoint ") + (same ? "identical" : "differs") + ", manifest " +
                                       (manifest ? "identical" : "differs"));
}

Outcome ablation() {
  const auto dir = fixtures::temp_dir("accept_ablation");
  const auto syn = generate_synthetic(24, 3, dir / "data", {96});
  RunConfig c;
  c.manifest = syn.manifest_path;
  c.network.input_size = 32;
  c.network.scale_factor = 4;
  c.train.epochs = 30;
  c.train.batch_size = 16;
  c.out_dir = dir / "out";
  std::ostringstream log;
  const auto table = cmd_ablate(c, default_ablation_subsets(), log);
  if (table.rows.size() != 6) return verdict(false, std::to_string(table.rows.size()) + " rows");
  const AblationRow* full = nullptr;
  for (const auto& r : table.rows) {
    if (r.tasks == std::array<bool, 4>{true, true, true, true}) full = &r;
  }
  if (!full) return verdict(false, "no all-task row");
  bool ok = true;
  std::string detail = "all tasks " + fmt(full->sensitivity_at_90) + ";";
  for (const auto& r : table.rows) {
    if (std::count(r.tasks.begin(), r.tasks.end(), true) != 2) continue;
    ok = ok && full->sensitivity_at_90 >= r.sensitivity_at_90;
    detail += " " + format_tasks(r.tasks) + " " + fmt(r.sensitivity_at_90);
  }
  return verdict(ok, detail);
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;  // optional criterion numbers to run
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  struct Criterion {
    std::string name;
    std::function<Outcome()> run;
    double limit_s;  // 0: no limit
  };
  const std::vector<Criterion> criteria = {
      {"loss oracle", loss_oracle, 1},
      {"switch gating", switch_gating, 10},
      {"gradient check", gradient_check, 120},
      {"overfit", overfit, 300},
      {"metric oracle", metric_oracle, 0},
      {"augmentation", augmentation, 0},
      {"subject-disjoint split", split, 0},
      {"output normalization", normalization, 0},
      {"dice and iou", overlap, 0},
      {"round trips", round_trips, 0},
      {"ablation ordering", ablation, 0},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto& c = criteria[i];
    if (!only.empty() && !only.contains(static_cast<int>(i + 1))) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.limit_s > 0 && secs > c.limit_s) {
      o.pass = false;
      o.detail += " [over the " + fmt(c.limit_s) + " s budget]";
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << (i + 1) << " " << c.name << ": " << o.detail << " ("
              << fmt(secs) << " s)" << std::endl;
  }
  const std::size_t ran = only.empty() ? criteria.size() : only.size();
  std::cout << (failed ? "FAILED " : "ALL PASSED ") << ran - failed << "/" << ran << std::endl;
  return failed ? 1 : 0;
}
