#include "cmtnet/ingestion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <set>

#include "cmtnet/random.hpp"

namespace cmtnet {

namespace fs = std::filesystem;

Image resize_to_input(const Raster& raster, int size) {
  if (raster.width <= 0 || raster.height <= 0) throw ImageError("cannot resize empty raster");
  Image out(3, size, size);
  const double sx = static_cast<double>(raster.width) / size;
  const double sy = static_cast<double>(raster.height) / size;
  for (int y = 0; y < size; ++y) {
    double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(raster.height - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, raster.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < size; ++x) {
      double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(raster.width - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, raster.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const int src_c = raster.channels == 3 ? c : 0;
        const double v = (1 - wy) * ((1 - wx) * raster.at(y0, x0, src_c) + wx * raster.at(y0, x1, src_c)) +
                         wy * ((1 - wx) * raster.at(y1, x0, src_c) + wx * raster.at(y1, x1, src_c));
        out.at(c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

LoadedImage load_image_with_dims(const fs::path& path, int size) {
  Raster raster = read_png(path);
  return {resize_to_input(raster, size), raster.width, raster.height};
}

Image load_image(const fs::path& path, int size) { return load_image_with_dims(path, size).image; }

Mask load_mask(const fs::path& path, int size) {
  Raster raster = read_png(path);
  Mask mask(size, size);
  for (int y = 0; y < size; ++y) {
    const int sy = std::min(static_cast<int>((y + 0.5) * raster.height / size), raster.height - 1);
    for (int x = 0; x < size; ++x) {
      const int sx = std::min(static_cast<int>((x + 0.5) * raster.width / size), raster.width - 1);
      mask.at(y, x) = raster.at(sy, sx, 0) >= 0.5f ? 1 : 0;
    }
  }
  return mask;
}

void save_mask(const fs::path& path, const Mask& mask) {
  std::vector<std::uint8_t> px(mask.bits.size());
  std::transform(mask.bits.begin(), mask.bits.end(), px.begin(), [](auto b) { return b ? 255 : 0; });
  write_png(path, mask.width, mask.height, 1, px);
}

namespace {

int round_half_up(double v) { return static_cast<int>(std::floor(v + 0.5)); }

}  // namespace

Mask boxes_to_mask(std::span<const Box> boxes, int source_width, int source_height, int size) {
  if (source_width <= 0 || source_height <= 0) throw std::invalid_argument("boxes_to_mask: empty source");
  Mask mask(size, size);
  const double sx = static_cast<double>(size) / source_width;
  const double sy = static_cast<double>(size) / source_height;
  for (const auto& b : boxes) {
    if (b.x_min < 0 || b.y_min < 0 || b.x_max > source_width || b.y_max > source_height) {
      throw std::out_of_range("box out of bounds");
    }
    // box edges map to pixel-edge indices; a non-empty box keeps at least one pixel
    const int x0 = std::clamp(round_half_up(b.x_min * sx), 0, size - 1);
    const int y0 = std::clamp(round_half_up(b.y_min * sy), 0, size - 1);
    const int x1 = std::clamp(std::max(round_half_up(b.x_max * sx), x0 + 1), 0, size);
    const int y1 = std::clamp(std::max(round_half_up(b.y_max * sy), y0 + 1), 0, size);
    for (int y = y0; y < y1; ++y) {
      for (int x = x0; x < x1; ++x) mask.at(y, x) = 1;
    }
  }
  return mask;
}

AugmentationSpec AugmentationSpec::standard() {
  return {{AugmentationOp::rotation(10.0), AugmentationOp::rotation(-10.0),
           AugmentationOp::translation(10, 0), AugmentationOp::translation(0, 10),
           AugmentationOp::translation(10, 10)}};
}

namespace {

// Maps an output pixel to its source location (inverse transform).
struct InverseMap {
  double cx, cy, cos_t, sin_t;
  int dx, dy;
  bool rotate;

  InverseMap(const AugmentationOp& op, int height, int width)
      : cx((width - 1) / 2.0), cy((height - 1) / 2.0),
        cos_t(std::cos(op.degrees * std::numbers::pi / 180.0)),
        sin_t(std::sin(op.degrees * std::numbers::pi / 180.0)),
        dx(op.dx), dy(op.dy), rotate(op.kind == AugmentationOp::Kind::rotate) {}

  void operator()(int x, int y, double& sx, double& sy) const {
    if (!rotate) {
      sx = x - dx;
      sy = y - dy;
      return;
    }
    const double px = x - cx;
    const double py = y - cy;
    sx = cos_t * px + sin_t * py + cx;
    sy = -sin_t * px + cos_t * py + cy;
  }
};

}  // namespace

Image transform_image(const Image& image, const AugmentationOp& op) {
  Image out(image.channels, image.height, image.width);
  const InverseMap map(op, image.height, image.width);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      double sx, sy;
      map(x, y, sx, sy);
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      const double wx = sx - x0;
      const double wy = sy - y0;
      for (int c = 0; c < image.channels; ++c) {
        auto px = [&](int yy, int xx) -> double {
          if (xx < 0 || yy < 0 || xx >= image.width || yy >= image.height) return 0.0;
          return image.at(c, yy, xx);
        };
        double v = (1 - wy) * ((1 - wx) * px(y0, x0) + wx * px(y0, x0 + 1)) +
                   wy * ((1 - wx) * px(y0 + 1, x0) + wx * px(y0 + 1, x0 + 1));
        out.at(c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

Mask transform_mask(const Mask& mask, const AugmentationOp& op) {
  Mask out(mask.height, mask.width);
  const InverseMap map(op, mask.height, mask.width);
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      double sx, sy;
      map(x, y, sx, sy);
      const int ix = round_half_up(sx);
      const int iy = round_half_up(sy);
      if (ix < 0 || iy < 0 || ix >= mask.width || iy >= mask.height) continue;
      out.at(y, x) = mask.at(iy, ix);
    }
  }
  return out;
}

std::vector<Sample> augment(const Sample& sample, const AugmentationSpec& spec) {
  std::vector<Sample> out;
  out.reserve(spec.ops.size());
  for (std::size_t i = 0; i < spec.ops.size(); ++i) {
    const auto& op = spec.ops[i];
    std::optional<Mask> lung, disease;
    if (sample.lung_mask()) lung = transform_mask(*sample.lung_mask(), op);
    if (sample.disease_mask()) disease = transform_mask(*sample.disease_mask(), op);
    std::string id = sample.sample_id().empty() ? std::string{} : sample.sample_id() + "#aug" + std::to_string(i + 1);
    out.push_back(Sample::create(transform_image(sample.image(), op), std::move(lung), std::move(disease),
                                 sample.labels(), sample.patient_id(), std::move(id)));
  }
  return out;
}

Stratum stratum_of(const SampleLabels& labels) {
  if (labels.covid == 1) return Stratum::covid;
  if (labels.other == 1 || labels.healthy == 1) return Stratum::other;
  if (labels.healthy == 0) return Stratum::healthy;
  return Stratum::unlabeled;
}

Stratum stratum_of(const ManifestRecord& r) {
  return stratum_of(SampleLabels{r.healthy_label, r.covid_label, r.other_disease_label});
}

std::string to_string(Stratum s) {
  switch (s) {
    case Stratum::healthy: return "healthy";
    case Stratum::covid: return "covid";
    case Stratum::other: return "other";
    case Stratum::unlabeled: return "unlabeled";
  }
  return "unknown";
}

bool AugmentationPolicy::selects(Stratum s) const {
  switch (s) {
    case Stratum::healthy: return healthy;
    case Stratum::covid: return covid;
    case Stratum::other: return other;
    case Stratum::unlabeled: return unlabeled;
  }
  return false;
}

Dataset augment_dataset(const Dataset& train, const AugmentationPolicy& policy,
                        const AugmentationSpec& spec) {
  Dataset out;
  out.split_tag = train.split_tag;
  out.samples = train.samples;
  for (const auto& s : train.samples) {
    if (!policy.selects(stratum_of(s.labels()))) continue;
    for (auto& v : augment(s, spec)) out.samples.push_back(std::move(v));
  }
  return out;
}

StratumCounts stratum_counts(std::span<const ManifestRecord> records) {
  StratumCounts c;
  for (const auto& r : records) {
    ++c.total;
    if (r.lung_boxes) ++c.lung_masks;
    if (r.disease_mask_path) ++c.disease_masks;
    switch (stratum_of(r)) {
      case Stratum::healthy: ++c.normal; break;
      case Stratum::covid: ++c.covid; break;
      case Stratum::other: ++c.other; break;
      case Stratum::unlabeled: break;
    }
    if (r.view == View::PA) ++c.pa; else ++c.ap;
  }
  return c;
}

SplitResult split_subject_disjoint(const std::vector<ManifestRecord>& records, double train_fraction,
                                   std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw std::invalid_argument("train_fraction must be in (0, 1)");
  }
  std::map<std::string, std::size_t> per_patient;
  for (const auto& r : records) {
    if (r.patient_id.empty()) throw std::invalid_argument("record " + r.sample_id + " has no patient_id");
    ++per_patient[r.patient_id];
  }
  if (per_patient.size() < 2) throw std::invalid_argument("cannot split: fewer than 2 patients");

  std::vector<std::string> patients;
  for (const auto& [id, n] : per_patient) patients.push_back(id);
  Rng rng(derive_seed(seed, 0x5117));
  rng.shuffle(patients);

  // Greedy fill in shuffled order: take a patient when it moves the train count
  // closer to the target.
  const double target = train_fraction * static_cast<double>(records.size());
  std::set<std::string> train_ids;
  double count = 0;
  for (const auto& id : patients) {
    const double c = static_cast<double>(per_patient[id]);
    if (std::abs(count + c - target) < std::abs(count - target)) {
      train_ids.insert(id);
      count += c;
    }
  }
  // Both sides must hold at least one patient.
  auto best_move = [&](bool into_train) {
    const std::string* best = nullptr;
    double best_gap = 0;
    for (const auto& id : patients) {
      if (train_ids.contains(id) == into_train) continue;
      const double c = static_cast<double>(per_patient[id]);
      const double gap = std::abs((into_train ? count + c : count - c) - target);
      if (!best || gap < best_gap) {
        best = &id;
        best_gap = gap;
      }
    }
    if (into_train) {
      train_ids.insert(*best);
      count += static_cast<double>(per_patient[*best]);
    } else {
      train_ids.erase(*best);
      count -= static_cast<double>(per_patient[*best]);
    }
  };
  if (train_ids.empty()) best_move(true);
  if (train_ids.size() == patients.size()) best_move(false);

  SplitResult out;
  for (const auto& r : records) {
    (train_ids.contains(r.patient_id) ? out.train : out.test).push_back(r);
  }
  return out;
}

Dataset build_dataset(const std::vector<ManifestRecord>& records, const fs::path& mask_dir,
                      const BuildOptions& options) {
  if (records.empty()) throw DatasetError("empty dataset");
  Dataset ds;
  ds.samples.reserve(records.size());
  for (const auto& r : records) {
    try {
      fs::path image_path = r.image_path;
      if (image_path.is_relative()) image_path = options.image_root / image_path;
      LoadedImage loaded = load_image_with_dims(image_path, options.size);
      std::optional<Mask> lung, disease;
      if (r.lung_boxes) {
        lung = boxes_to_mask(*r.lung_boxes, loaded.source_width, loaded.source_height, options.size);
      }
      if (r.disease_mask_path) {
        fs::path mp = *r.disease_mask_path;
        if (mp.is_relative()) mp = mask_dir / mp;
        disease = load_mask(mp, options.size);
      }
      ds.samples.push_back(Sample::create(std::move(loaded.image), std::move(lung), std::move(disease),
                                          {r.healthy_label, r.covid_label, r.other_disease_label},
                                          r.patient_id, r.sample_id));
    } catch (const std::exception& e) {
      throw DatasetError("sample " + r.sample_id + ": " + e.what());
    }
  }
  return ds;
}

namespace {

struct Ellipse {
  double cx, cy, a, b;
  bool contains(double x, double y) const {
    const double u = (x - cx) / a;
    const double v = (y - cy) / b;
    return u * u + v * v <= 1.0;
  }
};

struct Disc {
  double cx, cy, r;
  bool contains(double x, double y) const { return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r; }
};

std::string numbered(const char* prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s%04d", prefix, i);
  return buf;
}

}  // namespace

SyntheticOutput generate_synthetic(int n, std::uint64_t seed, const fs::path& out_dir,
                                   const SyntheticOptions& options) {
  if (n < 1) throw std::invalid_argument("generate_synthetic: n must be >= 1");
  const int S = options.source_size;
  SyntheticOutput out;
  out.image_root = out_dir;
  out.mask_dir = out_dir / "masks";
  out.manifest_path = out_dir / "manifest.jsonl";
  fs::create_directories(out_dir / "images");
  fs::create_directories(out.mask_dir);

  // 0 = healthy, 1 = covid, 2 = other disease; balanced, order chosen by seed
  std::vector<int> classes(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) classes[static_cast<std::size_t>(i)] = i % 3;
  Rng class_rng(derive_seed(seed, 0xC1A55));
  class_rng.shuffle(classes);

  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i) + 1));
    const int cls = classes[static_cast<std::size_t>(i)];

    const double jitter = 0.02 * S;
    const Ellipse left{0.31 * S + rng.uniform(-jitter, jitter), 0.50 * S + rng.uniform(-jitter, jitter),
                       0.13 * S + rng.uniform(-0.01 * S, 0.01 * S), 0.30 * S + rng.uniform(-jitter, jitter)};
    const Ellipse right{0.69 * S + rng.uniform(-jitter, jitter), 0.50 * S + rng.uniform(-jitter, jitter),
                        0.13 * S + rng.uniform(-0.01 * S, 0.01 * S), 0.30 * S + rng.uniform(-jitter, jitter)};
    const Ellipse lungs[2] = {left, right};

    std::vector<Disc> lesions;
    if (cls == 1) {
      // bilateral, lower zone
      for (const auto& e : lungs) {
        lesions.push_back({e.cx + rng.uniform(-0.3, 0.3) * e.a, e.cy + rng.uniform(0.40, 0.60) * e.b,
                           rng.uniform(0.05, 0.07) * S});
      }
    } else if (cls == 2) {
      const auto& e = lungs[rng.below(2)];
      lesions.push_back({e.cx + rng.uniform(-0.3, 0.3) * e.a, e.cy - rng.uniform(0.35, 0.55) * e.b,
                         rng.uniform(0.05, 0.08) * S});
    }

    std::vector<std::uint8_t> pixels(static_cast<std::size_t>(S) * S);
    Mask disease(S, S);
    const double body_level = rng.uniform(0.55, 0.65);
    for (int y = 0; y < S; ++y) {
      for (int x = 0; x < S; ++x) {
        const double px = x + 0.5;
        const double py = y + 0.5;
        double v = body_level + 0.10 * (static_cast<double>(y) / S - 0.5);
        bool in_lung = false;
        for (const auto& e : lungs) in_lung = in_lung || e.contains(px, py);
        if (in_lung) {
          v = 0.18;
          for (const auto& d : lesions) {
            if (d.contains(px, py)) {
              v = 0.62;
              disease.at(y, x) = 1;
              break;
            }
          }
        }
        v += 0.02 * rng.normal();
        pixels[static_cast<std::size_t>(y) * S + x] =
            static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
    }

    ManifestRecord r;
    r.sample_id = numbered("synth_", i);
    r.patient_id = numbered("SP", i);
    r.image_path = "images/" + r.sample_id + ".png";
    r.view = rng.below(2) == 0 ? View::PA : View::AP;
    r.healthy_label = cls == 0 ? 0 : 1;
    r.covid_label = cls == 1 ? 1 : 0;
    r.other_disease_label = cls == 2 ? 1 : 0;
    std::vector<Box> boxes;
    for (const auto& e : lungs) {
      boxes.push_back({std::max(0.0, std::floor(e.cx - e.a)), std::max(0.0, std::floor(e.cy - e.b)),
                       std::min<double>(S, std::ceil(e.cx + e.a)), std::min<double>(S, std::ceil(e.cy + e.b))});
    }
    r.lung_boxes = std::move(boxes);
    r.disease_mask_path = r.sample_id + "_disease.png";
    r.source_tag = "synthetic";

    write_png(out_dir / r.image_path, S, S, 1, pixels);
    save_mask(out.mask_dir / *r.disease_mask_path, disease);
    out.records.push_back(std::move(r));
  }
  write_manifest(out.manifest_path, out.records);
  return out;
}

}  // namespace cmtnet
