#include "cmtnet/run_config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace cmtnet {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename N>
N parse_number(const std::string& key, const std::string& value) {
  N out{};
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("bad value for " + key + ": '" + value + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw ConfigError("bad boolean for " + key + ": '" + value + "'");
}

std::string fmt_double(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

}  // namespace

std::array<bool, 4> parse_tasks(const std::string& text) {
  std::array<bool, 4> out{false, false, false, false};
  std::stringstream ss(text);
  std::string item;
  bool any = false;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.size() != 1 || item[0] < '1' || item[0] > '4') throw ConfigError("bad task id '" + item + "' in '" + text + "'");
    out[static_cast<std::size_t>(item[0] - '1')] = true;
    any = true;
  }
  if (!any) throw ConfigError("empty task list");
  return out;
}

std::string format_tasks(const std::array<bool, 4>& tasks) {
  std::string out;
  for (int k = 0; k < 4; ++k) {
    if (!tasks[static_cast<std::size_t>(k)]) continue;
    if (!out.empty()) out += ',';
    out += static_cast<char>('1' + k);
  }
  return out;
}

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = {
      "seed", "manifest", "image_root", "mask_dir", "out_dir", "train_fraction", "augment", "augment_strata",
      "eval_split", "input_size", "scale_factor", "multilabel_activation", "learning_rate", "batch_size",
      "epochs", "tasks", "checkpoint_every", "eval_every", "freeze_encoder_bn", "seg_reduction"};
  return k;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (key == "seed") {
    seed = parse_number<std::uint64_t>(key, value);
    train.seed = seed;
  } else if (key == "manifest") {
    manifest = value;
  } else if (key == "image_root") {
    image_root = value;
  } else if (key == "mask_dir") {
    mask_dir = value;
  } else if (key == "out_dir") {
    out_dir = value;
  } else if (key == "train_fraction") {
    train_fraction = parse_number<double>(key, value);
  } else if (key == "augment") {
    augment_enabled = parse_bool(key, value);
  } else if (key == "augment_strata") {
    augment = AugmentationPolicy{false, false, false, false};
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (item == "healthy") augment.healthy = true;
      else if (item == "covid") augment.covid = true;
      else if (item == "other") augment.other = true;
      else if (item == "unlabeled") augment.unlabeled = true;
      else if (!item.empty()) throw ConfigError("unknown stratum '" + item + "'");
    }
  } else if (key == "eval_split") {
    if (value == "test") eval_split = EvalSplit::test;
    else if (value == "train") eval_split = EvalSplit::train;
    else if (value == "all") eval_split = EvalSplit::all;
    else throw ConfigError("eval_split must be test, train or all");
  } else if (key == "input_size") {
    network.input_size = parse_number<int>(key, value);
  } else if (key == "scale_factor") {
    network.scale_factor = parse_number<int>(key, value);
  } else if (key == "multilabel_activation") {
    network.multilabel_activation = multilabel_activation_from_string(value);
  } else if (key == "learning_rate") {
    train.learning_rate = parse_number<double>(key, value);
  } else if (key == "batch_size") {
    train.batch_size = parse_number<int>(key, value);
  } else if (key == "epochs") {
    train.epochs = parse_number<int>(key, value);
  } else if (key == "tasks") {
    train.task_enable = parse_tasks(value);
  } else if (key == "checkpoint_every") {
    train.checkpoint_every = parse_number<int>(key, value);
  } else if (key == "eval_every") {
    train.eval_every = parse_number<int>(key, value);
  } else if (key == "freeze_encoder_bn") {
    train.freeze_encoder_bn = parse_bool(key, value);
  } else if (key == "seg_reduction") {
    if (value == "sum") train.loss.seg_reduction = SegReduction::sum;
    else if (value == "mean") train.loss.seg_reduction = SegReduction::mean;
    else throw ConfigError("seg_reduction must be sum or mean");
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

void RunConfig::validate() const {
  network.validate();
  train.validate();
  if (!(train_fraction > 0 && train_fraction < 1)) throw ConfigError("train_fraction must be in (0,1)");
}

RunConfig RunConfig::parse(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    }
    try {
      cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

std::string RunConfig::resolved() const {
  std::ostringstream o;
  std::string strata;
  for (auto [on, name] : {std::pair{augment.healthy, "healthy"}, std::pair{augment.covid, "covid"},
                          std::pair{augment.other, "other"}, std::pair{augment.unlabeled, "unlabeled"}}) {
    if (!on) continue;
    if (!strata.empty()) strata += ',';
    strata += name;
  }
  const char* split = eval_split == EvalSplit::test ? "test" : eval_split == EvalSplit::train ? "train" : "all";
  o << "seed = " << seed << '\n'
    << "manifest = " << manifest.string() << '\n'
    << "image_root = " << image_root.string() << '\n'
    << "mask_dir = " << mask_dir.string() << '\n'
    << "out_dir = " << out_dir.string() << '\n'
    << "train_fraction = " << fmt_double(train_fraction) << '\n'
    << "augment = " << (augment_enabled ? "true" : "false") << '\n'
    << "augment_strata = " << strata << '\n'
    << "eval_split = " << split << '\n'
    << "input_size = " << network.input_size << '\n'
    << "scale_factor = " << network.scale_factor << '\n'
    << "multilabel_activation = " << to_string(network.multilabel_activation) << '\n'
    << "learning_rate = " << fmt_double(train.learning_rate) << '\n'
    << "batch_size = " << train.batch_size << '\n'
    << "epochs = " << train.epochs << '\n'
    << "tasks = " << format_tasks(train.task_enable) << '\n'
    << "checkpoint_every = " << train.checkpoint_every << '\n'
    << "eval_every = " << train.eval_every << '\n'
    << "freeze_encoder_bn = " << (train.freeze_encoder_bn ? "true" : "false") << '\n'
    << "seg_reduction = " << (train.loss.seg_reduction == SegReduction::sum ? "sum" : "mean") << '\n';
  return o.str();
}

}  // namespace cmtnet
