#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cmtnet/datamodel.hpp"
#include "cmtnet/image_io.hpp"

namespace cmtnet {

struct LoadedImage {
  Image image;
  int source_width = 0;
  int source_height = 0;
};

/// Bilinear resize to size x size, values in [0,1], gray replicated to 3 channels.
LoadedImage load_image_with_dims(const std::filesystem::path& path, int size = kInputSize);
Image load_image(const std::filesystem::path& path, int size = kInputSize);
Image resize_to_input(const Raster& raster, int size = kInputSize);

/// Mask PNG (0/255) resized by nearest neighbour; pixels >= 0.5 become 1.
Mask load_mask(const std::filesystem::path& path, int size = kInputSize);
void save_mask(const std::filesystem::path& path, const Mask& mask);

/// Rasterizes lung boxes given in source pixel coordinates onto a size x size grid.
Mask boxes_to_mask(std::span<const Box> boxes, int source_width, int source_height,
                   int size = kInputSize);

struct AugmentationOp {
  enum class Kind { rotate, translate };
  Kind kind = Kind::rotate;
  double degrees = 0;  // positive = clockwise as displayed (y axis pointing down)
  int dx = 0;
  int dy = 0;

  static AugmentationOp rotation(double degrees) { return {Kind::rotate, degrees, 0, 0}; }
  static AugmentationOp translation(int dx, int dy) { return {Kind::translate, 0, dx, dy}; }
};

struct AugmentationSpec {
  std::array<AugmentationOp, 5> ops;

  /// +10 deg, -10 deg, (+10,0), (0,+10), (+10,+10) px.
  static AugmentationSpec standard();
};

Image transform_image(const Image& image, const AugmentationOp& op);
Mask transform_mask(const Mask& mask, const AugmentationOp& op);

/// Five co-transformed variants. Labels, switches and patient id are carried over.
std::vector<Sample> augment(const Sample& sample,
                            const AugmentationSpec& spec = AugmentationSpec::standard());

enum class Stratum { healthy, covid, other, unlabeled };

Stratum stratum_of(const SampleLabels& labels);
Stratum stratum_of(const ManifestRecord& record);
std::string to_string(Stratum stratum);

/// Which strata receive augmentation when expanding a training split.
struct AugmentationPolicy {
  bool healthy = false;
  bool covid = true;
  bool other = false;
  bool unlabeled = false;

  bool selects(Stratum s) const;
};

/// Originals followed by the five variants of every sample whose stratum is selected.
Dataset augment_dataset(const Dataset& train, const AugmentationPolicy& policy,
                        const AugmentationSpec& spec = AugmentationSpec::standard());

/// Counts in the layout of a train/test split summary table.
struct StratumCounts {
  std::size_t total = 0;
  std::size_t lung_masks = 0;
  std::size_t disease_masks = 0;
  std::size_t normal = 0;
  std::size_t covid = 0;
  std::size_t other = 0;
  std::size_t pa = 0;
  std::size_t ap = 0;
};

StratumCounts stratum_counts(std::span<const ManifestRecord> records);

struct SplitResult {
  std::vector<ManifestRecord> train;
  std::vector<ManifestRecord> test;
};

/// Patient-level split. Record order within each side follows the input order.
SplitResult split_subject_disjoint(const std::vector<ManifestRecord>& records,
                                   double train_fraction, std::uint64_t seed);

struct BuildOptions {
  std::filesystem::path image_root;  // base for relative image paths
  int size = kInputSize;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

Dataset build_dataset(const std::vector<ManifestRecord>& records,
                      const std::filesystem::path& mask_dir, const BuildOptions& options = {});

struct SyntheticOptions {
  int source_size = 256;
};

struct SyntheticOutput {
  std::filesystem::path manifest_path;
  std::filesystem::path image_root;
  std::filesystem::path mask_dir;
  std::vector<ManifestRecord> records;
};

/// Writes `n` deterministic synthetic radiographs plus masks and a manifest
/// under `out_dir` (images/, masks/, manifest.jsonl).
SyntheticOutput generate_synthetic(int n, std::uint64_t seed, const std::filesystem::path& out_dir,
                                   const SyntheticOptions& options = {});

}  // namespace cmtnet
