#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace cmtnet {

/// Working resolution of the network input.
inline constexpr int kInputSize = 224;

enum class View { AP, PA };

std::string to_string(View view);
View view_from_string(const std::string& text);

/// Axis-aligned box in source pixel coordinates. x_max/y_max are edge
/// coordinates, so a box covering a W x H image is (0, 0, W, H).
struct Box {
  double x_min = 0;
  double y_min = 0;
  double x_max = 0;
  double y_max = 0;

  bool operator==(const Box&) const = default;
};

/// One line of a JSON-Lines manifest.
///
/// healthy_label follows the H convention: 0 = healthy, 1 = unhealthy.
struct ManifestRecord {
  std::string sample_id;
  std::string patient_id;
  std::string image_path;
  View view = View::PA;
  std::optional<int> healthy_label;
  std::optional<int> covid_label;
  std::optional<int> other_disease_label;
  std::optional<std::vector<Box>> lung_boxes;
  std::optional<std::string> disease_mask_path;
  std::string source_tag;

  bool operator==(const ManifestRecord&) const = default;
};

struct ValidationIssue {
  std::string sample_id;
  std::string reason;
};

/// Raised when a manifest cannot be read or a line is not a well-formed
/// record. Distinct from invariant violations, which are reported as
/// ValidationIssue values.
class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised by constructors of domain types whose invariants do not hold.
class InvariantError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Per-sample task gates (lung seg, disease seg, healthy/unhealthy,
/// COVID + other-disease).
struct Switches {
  std::array<std::uint8_t, 4> t{0, 0, 0, 0};

  bool operator[](int task) const { return t.at(static_cast<std::size_t>(task)) != 0; }
  bool any() const { return t[0] || t[1] || t[2] || t[3]; }
  Switches masked(const std::array<bool, 4>& enable) const;
  bool operator==(const Switches&) const = default;
};

Switches derive_switches(const ManifestRecord& record, bool has_lung_mask,
                         bool has_disease_mask);

std::vector<ValidationIssue> validate_manifest(const std::vector<ManifestRecord>& records);

ManifestRecord record_from_json_line(const std::string& line);
std::string record_to_json_line(const ManifestRecord& record);

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records);

/// Planar (channel-major) image with values in [0, 1].
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> values;

  Image() = default;
  Image(int c, int h, int w, float fill = 0.0f)
      : channels(c), height(h), width(w),
        values(static_cast<std::size_t>(c) * h * w, fill) {}

  float& at(int c, int y, int x) { return values[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return values[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  bool operator==(const Image&) const = default;
};

/// Binary H x W grid.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(int h, int w) : height(h), width(w), bits(static_cast<std::size_t>(h) * w, 0) {}

  std::uint8_t& at(int y, int x) { return bits[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return bits[static_cast<std::size_t>(y) * width + x]; }
  std::size_t count() const;
  bool operator==(const Mask&) const = default;
};

struct SampleLabels {
  std::optional<int> healthy;
  std::optional<int> covid;
  std::optional<int> other;
};

/// A training/evaluation sample. Switches are derived from annotation
/// presence at construction and cannot be set independently.
class Sample {
 public:
  static Sample create(Image image, std::optional<Mask> lung_mask,
                       std::optional<Mask> disease_mask, SampleLabels labels,
                       std::string patient_id, std::string sample_id = {});

  const Image& image() const { return image_; }
  const std::optional<Mask>& lung_mask() const { return lung_mask_; }
  const std::optional<Mask>& disease_mask() const { return disease_mask_; }
  const SampleLabels& labels() const { return labels_; }
  std::optional<int> healthy() const { return labels_.healthy; }
  std::optional<int> covid() const { return labels_.covid; }
  std::optional<int> other() const { return labels_.other; }
  const Switches& switches() const { return switches_; }
  const std::string& patient_id() const { return patient_id_; }
  const std::string& sample_id() const { return sample_id_; }
  int size() const { return image_.height; }

 private:
  Sample() = default;

  Image image_;
  std::optional<Mask> lung_mask_;
  std::optional<Mask> disease_mask_;
  SampleLabels labels_;
  Switches switches_;
  std::string patient_id_;
  std::string sample_id_;
};

enum class SplitTag { train, test };

struct Dataset {
  std::vector<Sample> samples;
  SplitTag split_tag = SplitTag::train;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

}  // namespace cmtnet
