#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cmtnet/commands.hpp"
#include "cmtnet/ingestion.hpp"

using namespace cmtnet;
namespace fs = std::filesystem;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string tasks;
  std::optional<int> scale_factor;
  std::string manifest;
  std::vector<std::string> overrides;

  void attach(CLI::App* sub) {
    sub->add_option("--config", config, "run configuration (key = value lines)");
    sub->add_option("--seed", seed, "seed for split, initialization and shuffling");
    sub->add_option("--out", out, "output directory");
    sub->add_option("--tasks", tasks, "enabled tasks, e.g. 1,3,4");
    sub->add_option("--scale-factor", scale_factor, "divide all layer widths by this factor");
    sub->add_option("--manifest", manifest, "manifest path");
    sub->add_option("--set", overrides, "override any config key: key=value")->take_all();
  }

  RunConfig resolve() const {
    RunConfig c = config.empty() ? RunConfig{} : RunConfig::load(config);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      c.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed) c.set("seed", std::to_string(*seed));
    if (!out.empty()) c.out_dir = out;
    if (!tasks.empty()) c.train.task_enable = parse_tasks(tasks);
    if (scale_factor) c.network.scale_factor = *scale_factor;
    if (!manifest.empty()) c.manifest = manifest;
    return c;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task chest radiograph segmentation and classification"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  int synth_n = 24;
  std::uint64_t synth_seed = 0;
  std::string synth_out = "synthetic";
  int synth_size = 256;
  synth->add_option("--n", synth_n, "number of samples");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--out", synth_out, "output directory");
  synth->add_option("--source-size", synth_size, "side length of the written images");

  auto* validate = app.add_subcommand("validate", "check a manifest");
  std::string validate_manifest_path;
  validate->add_option("manifest", validate_manifest_path, "manifest path")->required();

  auto* rasterize = app.add_subcommand("rasterize", "turn lung boxes into mask images");
  std::string raster_manifest, raster_out = "lung_masks";
  int raster_size = kInputSize;
  rasterize->add_option("manifest", raster_manifest, "manifest path")->required();
  rasterize->add_option("--out", raster_out, "output directory");
  rasterize->add_option("--size", raster_size, "mask side length");

  CommonFlags train_flags, eval_flags, ablate_flags, stability_flags, roc_flags;
  auto* train_cmd = app.add_subcommand("train", "train a network");
  train_flags.attach(train_cmd);

  std::string eval_checkpoint;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_flags.attach(eval_cmd);
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "checkpoint file")->required();

  auto* predict_cmd = app.add_subcommand("predict", "write overlays and scores for images");
  std::string predict_checkpoint, predict_out = "predictions";
  std::vector<std::string> predict_images;
  predict_cmd->add_option("--checkpoint", predict_checkpoint, "checkpoint file")->required();
  predict_cmd->add_option("--out", predict_out, "output directory");
  predict_cmd->add_option("images", predict_images, "input images")->required();

  auto* ablate_cmd = app.add_subcommand("ablate", "train and evaluate one model per task subset");
  std::string subsets;
  ablate_flags.attach(ablate_cmd);
  ablate_cmd->add_option("--subsets", subsets, "semicolon-separated subsets, e.g. \"1,4;2,3,4\"");

  auto* stability_cmd = app.add_subcommand("stability", "repeat training over seeds");
  std::vector<std::uint64_t> seeds;
  stability_flags.attach(stability_cmd);
  stability_cmd->add_option("--seeds", seeds, "training seeds (at least two)")->required()->delimiter(',');

  auto* roc_cmd = app.add_subcommand("roc-export", "write the COVID ROC curve as CSV");
  std::string roc_checkpoint, roc_csv = "roc.csv";
  roc_flags.attach(roc_cmd);
  roc_cmd->add_option("--checkpoint", roc_checkpoint, "checkpoint file")->required();
  roc_cmd->add_option("--csv", roc_csv, "CSV output path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (synth->parsed()) {
      const auto out = generate_synthetic(synth_n, synth_seed, synth_out, {synth_size});
      std::cout << "wrote " << out.records.size() << " samples; manifest " << out.manifest_path.string() << '\n';
      return kExitOk;
    }
    if (validate->parsed()) return cmd_validate(validate_manifest_path, std::cout);
    if (rasterize->parsed()) return cmd_rasterize(raster_manifest, raster_out, raster_size, std::cout);
    if (train_cmd->parsed()) {
      cmd_train(train_flags.resolve(), std::cerr);
      return kExitOk;
    }
    if (eval_cmd->parsed()) {
      const auto r = cmd_eval(eval_flags.resolve(), eval_checkpoint, std::cerr);
      std::cout << r.to_json() << '\n';
      return kExitOk;
    }
    if (predict_cmd->parsed()) {
      std::vector<fs::path> paths(predict_images.begin(), predict_images.end());
      const auto s = cmd_predict(predict_checkpoint, paths, predict_out, std::cerr);
      std::cerr << "predicted " << s.written << " image(s), " << s.failures.size() << " failure(s)\n";
      return s.failures.empty() ? kExitOk : kExitRuntime;
    }
    if (ablate_cmd->parsed()) {
      const auto list = subsets.empty() ? default_ablation_subsets() : parse_subsets(subsets, std::cerr);
      std::cout << cmd_ablate(ablate_flags.resolve(), list, std::cerr).to_json() << '\n';
      return kExitOk;
    }
    if (stability_cmd->parsed()) {
      const auto rep = cmd_stability(stability_flags.resolve(), seeds, std::cerr);
      std::cout << rep.to_json() << '\n';
      return rep.partial ? kExitRuntime : kExitOk;
    }
    if (roc_cmd->parsed()) {
      cmd_roc_export(roc_flags.resolve(), roc_checkpoint, roc_csv, std::cerr);
      return kExitOk;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return kExitOk;
}
