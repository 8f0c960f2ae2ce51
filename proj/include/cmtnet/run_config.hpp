#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cmtnet/ingestion.hpp"
#include "cmtnet/network.hpp"
#include "cmtnet/training.hpp"

namespace cmtnet {

enum class EvalSplit { test, train, all };

/// Everything a command needs, read from one key=value document.
/// Lines are `key = value`; `#` starts a comment. Unknown keys are errors.
struct RunConfig {
  NetworkConfig network;
  TrainConfig train;
  std::uint64_t seed = 0;
  std::filesystem::path manifest;
  std::filesystem::path image_root;  // empty: the manifest's directory
  std::filesystem::path mask_dir;    // empty: <manifest dir>/masks
  std::filesystem::path out_dir = "cmtnet_out";
  double train_fraction = 0.8;
  AugmentationPolicy augment;
  bool augment_enabled = true;
  EvalSplit eval_split = EvalSplit::test;

  static RunConfig parse(const std::string& text, const std::string& origin = "<config>");
  static RunConfig load(const std::filesystem::path& path);

  /// Applies one override; throws ConfigError for unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  /// Cross-field checks.
  void validate() const;
  /// Fully resolved key=value text, parseable by parse().
  std::string resolved() const;

  static const std::vector<std::string>& keys();
};

/// "1,3,4" -> {true,false,true,true}.
std::array<bool, 4> parse_tasks(const std::string& text);
std::string format_tasks(const std::array<bool, 4>& tasks);

}  // namespace cmtnet
