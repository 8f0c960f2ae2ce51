#include "cmtnet/commands.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <ostream>
#include <set>

#include "cmtnet/image_io.hpp"
#include "cmtnet/ingestion.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace cmtnet {

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const std::invalid_argument*>(&e) || dynamic_cast<const ManifestError*>(&e)) {
    return kExitValidation;
  }
  return kExitRuntime;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

Dataset load_records(const std::vector<ManifestRecord>& records, const RunConfig& c) {
  const fs::path base = c.manifest.parent_path();
  const fs::path image_root = c.image_root.empty() ? base : c.image_root;
  const fs::path mask_dir = c.mask_dir.empty() ? base / "masks" : c.mask_dir;
  return build_dataset(records, mask_dir, {image_root, c.network.input_size});
}

std::vector<ManifestRecord> read_valid_manifest(const fs::path& path) {
  auto records = read_manifest(path);
  const auto issues = validate_manifest(records);
  if (!issues.empty()) {
    std::string msg = "manifest " + path.string() + " has " + std::to_string(issues.size()) + " invalid record(s)";
    for (std::size_t i = 0; i < std::min<std::size_t>(issues.size(), 5); ++i) {
      msg += "\n  " + issues[i].sample_id + ": " + issues[i].reason;
    }
    throw CommandError(msg);
  }
  return records;
}

ScoreSet covid_scores(const Net& net, const Dataset& data) {
  const auto preds = predict_dataset(net, data);
  ScoreSet s;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!data.samples[i].covid()) continue;
    s.scores.push_back(std::clamp<double>(preds[i].covid_score, 0.0, 1.0));
    s.labels.push_back(*data.samples[i].covid());
  }
  return s;
}

Net train_one(const RunConfig& cfg, const Dataset& train_set, std::uint64_t seed, const std::array<bool, 4>& tasks,
              std::ostream& log) {
  Net net = Net::create(cfg.network, seed);
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  tc.task_enable = tasks;
  tc.checkpoint_dir.clear();
  const auto result = train(net, train_set, tc);
  if (!result.history.epochs.empty()) {
    log << "  tasks " << format_tasks(tasks) << " seed " << seed << ": final epoch mean loss "
        << result.history.epochs.back().mean_total << '\n';
  }
  return net;
}

}  // namespace

PreparedData prepare_data(const RunConfig& config, std::ostream& log) {
  if (config.manifest.empty()) throw CommandError("no manifest configured");
  const auto records = read_valid_manifest(config.manifest);
  const auto split = split_subject_disjoint(records, config.train_fraction, config.seed);
  PreparedData out;
  out.train_records = split.train.size();
  out.test_records = split.test.size();
  Dataset train_set = load_records(split.train, config);
  switch (config.eval_split) {
    case EvalSplit::test: out.eval = load_records(split.test, config); break;
    case EvalSplit::train: out.eval = train_set; break;
    case EvalSplit::all: out.eval = load_records(records, config); break;
  }
  out.eval.split_tag = SplitTag::test;
  out.train = config.augment_enabled ? augment_dataset(train_set, config.augment) : std::move(train_set);
  log << "data: " << out.train_records << " train records (" << out.train.size() << " after augmentation), "
      << out.test_records << " test records, " << out.eval.size() << " evaluation samples\n";
  return out;
}

int cmd_validate(const fs::path& manifest, std::ostream& out) {
  const auto records = read_manifest(manifest);
  const auto issues = validate_manifest(records);
  const auto c = stratum_counts(records);
  out << "records: " << c.total << " (normal " << c.normal << ", covid " << c.covid << ", other " << c.other
      << "; PA " << c.pa << ", AP " << c.ap << "; lung boxes " << c.lung_masks << ", disease masks "
      << c.disease_masks << ")\n";
  for (const auto& i : issues) out << "invalid: " << i.sample_id << ": " << i.reason << '\n';
  out << (issues.empty() ? "manifest valid\n" : std::to_string(issues.size()) + " issue(s)\n");
  return issues.empty() ? kExitOk : kExitValidation;
}

int cmd_rasterize(const fs::path& manifest, const fs::path& out_dir, int size, std::ostream& out) {
  const auto records = read_valid_manifest(manifest);
  fs::create_directories(out_dir);
  const fs::path base = manifest.parent_path();
  int written = 0;
  for (const auto& r : records) {
    if (!r.lung_boxes) continue;
    fs::path image = r.image_path;
    if (image.is_relative()) image = base / image;
    const auto raster = read_png(image);
    const Mask m = boxes_to_mask(*r.lung_boxes, raster.width, raster.height, size);
    save_mask(out_dir / (r.sample_id + "_lung.png"), m);
    ++written;
  }
  out << "wrote " << written << " lung mask(s) to " << out_dir.string() << '\n';
  return kExitOk;
}

TrainOutcome cmd_train(const RunConfig& config, std::ostream& log) {
  config.validate();
  log << "resolved config:\n" << config.resolved();
  fs::create_directories(config.out_dir);
  write_text(config.out_dir / "resolved_config.ini", config.resolved());
  const auto data = prepare_data(config, log);

  TrainOutcome out{Net::create(config.network, config.seed), {}, config.out_dir / "model.ckpt"};
  TrainConfig tc = config.train;
  tc.seed = config.seed;
  tc.checkpoint_dir = config.out_dir / "checkpoints";
  EvalHook hook;
  if (tc.eval_every > 0 && !data.eval.empty()) {
    hook = [&](const Net& net, int) {
      const auto r = report(net, data.eval);
      std::map<std::string, double> m;
      if (r.covid) {
        m["covid_auc"] = r.covid->auc;
        m["covid_eer"] = r.covid->eer;
        m["covid_sens_at_spec_0.99"] = r.covid->operating_point.sensitivity;
      }
      if (r.health) m["health_accuracy"] = r.health->accuracy;
      if (r.lung) m["lung_dice"] = r.lung->dice;
      return m;
    };
  }
  out.result = train(out.net, data.train, tc, nullptr, hook);
  out.result.history.write_jsonl(config.out_dir / "history.jsonl");
  save_checkpoint(out.net, out.checkpoint, {out.result.epochs_done, &out.result.adam});
  log << "trained " << out.result.epochs_done << " epoch(s); checkpoint " << out.checkpoint.string() << '\n';
  return out;
}

EvaluationReport cmd_eval(const RunConfig& config, const fs::path& checkpoint, std::ostream& log) {
  auto loaded = load_checkpoint(checkpoint);
  RunConfig c = config;
  c.network = loaded.net.config();
  c.augment_enabled = false;
  log << "resolved config:\n" << c.resolved();
  const auto data = prepare_data(c, log);
  const auto r = report(loaded.net, data.eval);
  fs::create_directories(c.out_dir);
  write_text(c.out_dir / "report.json", r.to_json() + "\n");
  log << "report written to " << (c.out_dir / "report.json").string() << '\n';
  return r;
}

std::vector<std::uint8_t> overlay_rgb(const Image& image, const Mask& mask, const std::array<std::uint8_t, 3>& color) {
  constexpr double alpha = 0.4;
  const std::size_t hw = static_cast<std::size_t>(image.height) * image.width;
  std::vector<std::uint8_t> out(hw * 3);
  for (std::size_t i = 0; i < hw; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = image.values[std::min<std::size_t>(c, image.channels - 1) * hw + i];
      double px = v * 255.0;
      if (mask.bits[i]) px = (1.0 - alpha) * px + alpha * color[c];
      out[i * 3 + c] = static_cast<std::uint8_t>(std::clamp(std::lround(px), 0L, 255L));
    }
  }
  return out;
}

PredictSummary cmd_predict(const fs::path& checkpoint, const std::vector<fs::path>& images, const fs::path& out_dir,
                           std::ostream& log) {
  const auto loaded = load_checkpoint(checkpoint);
  const Net& net = loaded.net;
  const int size = net.config().input_size;
  fs::create_directories(out_dir);
  std::ofstream scores(out_dir / "scores.jsonl");
  if (!scores) throw std::runtime_error("cannot write " + (out_dir / "scores.jsonl").string());
  PredictSummary summary;
  std::set<std::string> stems;
  for (const auto& path : images) {
    try {
      const Image image = load_image(path, size);
      const auto b = net.predict(std::span<const Image>(&image, 1)).front();
      std::string stem = path.stem().string();
      for (int k = 2; stems.contains(stem); ++k) stem = path.stem().string() + "_" + std::to_string(k);
      stems.insert(stem);
      write_png(out_dir / (stem + "_lung_overlay.png"), size, size, 3, overlay_rgb(image, b.lung_mask(), {0, 255, 0}));
      write_png(out_dir / (stem + "_disease_overlay.png"), size, size, 3,
                overlay_rgb(image, b.disease_mask(), {255, 0, 0}));
      nlohmann::ordered_json j;
      j["image"] = path.string();
      j["covid_score"] = static_cast<double>(b.covid_score);
      j["other_score"] = static_cast<double>(b.other_score);
      j["p_healthy"] = static_cast<double>(b.health_probs[0]);
      j["p_unhealthy"] = static_cast<double>(b.health_probs[1]);
      scores << j.dump() << '\n';
      ++summary.written;
    } catch (const std::exception& e) {
      summary.failures.push_back(path.string() + ": " + e.what());
      log << "error: " << path.string() << ": " << e.what() << '\n';
    }
  }
  return summary;
}

std::vector<std::array<bool, 4>> default_ablation_subsets() {
  return {parse_tasks("1,4"), parse_tasks("2,4"), parse_tasks("1,2,4"),
          parse_tasks("1,3,4"), parse_tasks("2,3,4"), parse_tasks("1,2,3,4")};
}

void check_ablation_subset(const std::array<bool, 4>& s) {
  if (!(s[0] || s[1]) || !s[3]) {
    throw CommandError("invalid ablation subset {" + format_tasks(s) +
                       "}: needs a segmentation task (1 or 2) and task 4");
  }
}

std::vector<std::array<bool, 4>> dedupe_subsets(const std::vector<std::array<bool, 4>>& subsets, std::ostream& log) {
  std::vector<std::array<bool, 4>> out;
  for (const auto& s : subsets) {
    if (std::find(out.begin(), out.end(), s) != out.end()) {
      log << "warning: duplicate subset {" << format_tasks(s) << "} ignored\n";
      continue;
    }
    out.push_back(s);
  }
  return out;
}

std::vector<std::array<bool, 4>> parse_subsets(const std::string& text, std::ostream& log) {
  std::vector<std::array<bool, 4>> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = std::min(text.find(';', start), text.size());
    out.push_back(parse_tasks(text.substr(start, end - start)));
    start = end + 1;
  }
  return dedupe_subsets(out, log);
}

std::string AblationTable::to_json() const {
  nlohmann::ordered_json j;
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json row;
    row["tasks"] = format_tasks(r.tasks);
    row["sensitivity_at_specificity_0.90"] = r.sensitivity_at_90;
    row["sensitivity_at_specificity_0.99"] = r.sensitivity_at_99;
    row["auc"] = r.auc;
    row["eer"] = r.eer;
    j["rows"].push_back(row);
  }
  return j.dump(2);
}

AblationTable cmd_ablate(const RunConfig& config, const std::vector<std::array<bool, 4>>& subsets, std::ostream& log) {
  const auto unique = dedupe_subsets(subsets, log);
  for (const auto& s : unique) check_ablation_subset(s);
  config.validate();
  log << "resolved config:\n" << config.resolved();
  const auto data = prepare_data(config, log);
  AblationTable table;
  for (const auto& s : unique) {
    const Net net = train_one(config, data.train, config.seed, s, log);
    const auto scores = covid_scores(net, data.eval);
    AblationRow row;
    row.tasks = s;
    row.sensitivity_at_90 = sensitivity_at_specificity(scores, 0.90).sensitivity;
    row.sensitivity_at_99 = sensitivity_at_specificity(scores, 0.99).sensitivity;
    row.auc = auc(roc(scores));
    row.eer = eer(scores);
    table.rows.push_back(row);
  }
  fs::create_directories(config.out_dir);
  write_text(config.out_dir / "ablation.json", table.to_json() + "\n");
  return table;
}

std::string StabilityReport::to_json() const {
  nlohmann::ordered_json j;
  j["metric"] = "covid_sensitivity_at_specificity_0.99";
  j["runs"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    nlohmann::ordered_json r;
    r["seed"] = seeds[i];
    if (sensitivity[i]) r["sensitivity"] = *sensitivity[i];
    else r["error"] = errors[i];
    j["runs"].push_back(r);
  }
  j["mean"] = mean;
  j["stddev"] = stddev;
  j["partial"] = partial;
  return j.dump(2);
}

StabilityReport cmd_stability(const RunConfig& config, const std::vector<std::uint64_t>& seeds, std::ostream& log) {
  if (seeds.size() < 2) throw CommandError("stability needs at least 2 seeds");
  config.validate();
  log << "resolved config:\n" << config.resolved();
  const auto data = prepare_data(config, log);
  StabilityReport rep;
  rep.seeds = seeds;
  std::vector<double> values;
  for (auto seed : seeds) {
    try {
      const Net net = train_one(config, data.train, seed, config.train.task_enable, log);
      const double s = sensitivity_at_specificity(covid_scores(net, data.eval), 0.99).sensitivity;
      rep.sensitivity.emplace_back(s);
      rep.errors.emplace_back();
      values.push_back(s);
    } catch (const std::exception& e) {
      log << "seed " << seed << " failed: " << e.what() << '\n';
      rep.sensitivity.emplace_back(std::nullopt);
      rep.errors.emplace_back(e.what());
      rep.partial = true;
    }
  }
  if (values.empty()) throw std::runtime_error("every stability run failed");
  double sum = 0;
  for (double v : values) sum += v;
  rep.mean = sum / values.size();
  double ss = 0;
  for (double v : values) ss += (v - rep.mean) * (v - rep.mean);
  rep.stddev = values.size() > 1 ? std::sqrt(ss / (values.size() - 1)) : 0.0;
  fs::create_directories(config.out_dir);
  write_text(config.out_dir / "stability.json", rep.to_json() + "\n");
  return rep;
}

void cmd_roc_export(const RunConfig& config, const fs::path& checkpoint, const fs::path& csv, std::ostream& log) {
  auto loaded = load_checkpoint(checkpoint);
  RunConfig c = config;
  c.network = loaded.net.config();
  c.augment_enabled = false;
  const auto data = prepare_data(c, log);
  const auto curve = roc(covid_scores(loaded.net, data.eval));
  if (csv.has_parent_path()) fs::create_directories(csv.parent_path());
  write_roc_csv(curve, csv);
  log << "wrote " << curve.points.size() << " ROC points to " << csv.string() << '\n';
}

}  // namespace cmtnet
