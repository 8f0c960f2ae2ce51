#include "cmtnet/datamodel.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "json.hpp"

namespace cmtnet {

using nlohmann::json;

std::string to_string(View view) { return view == View::AP ? "AP" : "PA"; }

View view_from_string(const std::string& text) {
  if (text == "AP") return View::AP;
  if (text == "PA") return View::PA;
  throw ManifestError("unknown view '" + text + "' (expected AP or PA)");
}

Switches Switches::masked(const std::array<bool, 4>& enable) const {
  Switches out = *this;
  for (std::size_t k = 0; k < 4; ++k) {
    if (!enable[k]) out.t[k] = 0;
  }
  return out;
}

Switches derive_switches(const ManifestRecord& record, bool has_lung_mask,
                         bool has_disease_mask) {
  Switches s;
  s.t[0] = has_lung_mask ? 1 : 0;
  s.t[1] = has_disease_mask ? 1 : 0;
  s.t[2] = record.healthy_label.has_value() ? 1 : 0;
  s.t[3] = (record.covid_label.has_value() && record.other_disease_label.has_value()) ? 1 : 0;
  return s;
}

namespace {

bool is_binary(const std::optional<int>& v) { return !v || *v == 0 || *v == 1; }

}  // namespace

std::vector<ValidationIssue> validate_manifest(const std::vector<ManifestRecord>& records) {
  std::vector<ValidationIssue> issues;
  std::set<std::string> seen;
  for (const auto& r : records) {
    auto issue = [&](std::string reason) { issues.push_back({r.sample_id, std::move(reason)}); };
    if (r.sample_id.empty()) issue("empty sample_id");
    if (!seen.insert(r.sample_id).second) issue("duplicate id");
    if (r.patient_id.empty()) issue("empty patient_id");
    if (r.image_path.empty()) issue("empty image_path");
    if (!is_binary(r.healthy_label) || !is_binary(r.covid_label) ||
        !is_binary(r.other_disease_label)) {
      issue("label outside {0,1}");
    }
    if (r.healthy_label == 0 && r.covid_label == 1) issue("healthy sample labeled covid");
    if (r.covid_label.has_value() != r.other_disease_label.has_value()) {
      issue("partial multilabel (covid_label and other_disease_label must appear together)");
    }
    if (r.lung_boxes) {
      for (const auto& b : *r.lung_boxes) {
        if (b.x_min < 0 || b.y_min < 0 || b.x_max < 0 || b.y_max < 0) {
          issue("negative box coordinate");
        } else if (!(b.x_max > b.x_min) || !(b.y_max > b.y_min)) {
          issue("degenerate box");
        }
      }
    }
  }
  return issues;
}

namespace {

std::optional<int> optional_label(const json& j, const char* key) {
  if (!j.contains(key)) return std::nullopt;
  const auto& v = j.at(key);
  if (!v.is_number_integer()) throw ManifestError(std::string("field '") + key + "' must be an integer");
  return v.get<int>();
}

std::string required_string(const json& j, const char* key) {
  if (!j.contains(key) || !j.at(key).is_string()) {
    throw ManifestError(std::string("missing string field '") + key + "'");
  }
  return j.at(key).get<std::string>();
}

}  // namespace

ManifestRecord record_from_json_line(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ManifestError(std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw ManifestError("manifest line is not a JSON object");

  static const std::set<std::string> known{
      "sample_id", "patient_id", "image_path", "view", "healthy_label", "covid_label",
      "other_disease_label", "lung_boxes", "disease_mask_path", "source_tag"};
  for (const auto& item : j.items()) {
    if (!known.contains(item.key())) throw ManifestError("unknown field '" + item.key() + "'");
  }

  ManifestRecord r;
  r.sample_id = required_string(j, "sample_id");
  r.patient_id = required_string(j, "patient_id");
  r.image_path = required_string(j, "image_path");
  r.view = view_from_string(required_string(j, "view"));
  r.healthy_label = optional_label(j, "healthy_label");
  r.covid_label = optional_label(j, "covid_label");
  r.other_disease_label = optional_label(j, "other_disease_label");
  if (j.contains("lung_boxes")) {
    const auto& arr = j.at("lung_boxes");
    if (!arr.is_array()) throw ManifestError("lung_boxes must be an array");
    std::vector<Box> boxes;
    for (const auto& b : arr) {
      try {
        boxes.push_back({b.at("x_min").get<double>(), b.at("y_min").get<double>(),
                         b.at("x_max").get<double>(), b.at("y_max").get<double>()});
      } catch (const json::exception& e) {
        throw ManifestError(std::string("malformed box: ") + e.what());
      }
    }
    r.lung_boxes = std::move(boxes);
  }
  if (j.contains("disease_mask_path")) r.disease_mask_path = required_string(j, "disease_mask_path");
  r.source_tag = j.contains("source_tag") ? required_string(j, "source_tag") : std::string{};
  return r;
}

std::string record_to_json_line(const ManifestRecord& r) {
  // ordered_json keeps the field order of the record definition
  nlohmann::ordered_json j;
  j["sample_id"] = r.sample_id;
  j["patient_id"] = r.patient_id;
  j["image_path"] = r.image_path;
  j["view"] = to_string(r.view);
  if (r.healthy_label) j["healthy_label"] = *r.healthy_label;
  if (r.covid_label) j["covid_label"] = *r.covid_label;
  if (r.other_disease_label) j["other_disease_label"] = *r.other_disease_label;
  if (r.lung_boxes) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& b : *r.lung_boxes) {
      arr.push_back({{"x_min", b.x_min}, {"y_min", b.y_min}, {"x_max", b.x_max}, {"y_max", b.y_max}});
    }
    j["lung_boxes"] = std::move(arr);
  }
  if (r.disease_mask_path) j["disease_mask_path"] = *r.disease_mask_path;
  j["source_tag"] = r.source_tag;
  return j.dump();
}

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ManifestError("cannot open manifest " + path.string());
  std::vector<ManifestRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      records.push_back(record_from_json_line(line));
    } catch (const ManifestError& e) {
      throw ManifestError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (in.bad()) throw ManifestError("error reading manifest " + path.string());
  return records;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ManifestError("cannot write manifest " + path.string());
  for (const auto& r : records) out << record_to_json_line(r) << '\n';
  if (!out) throw ManifestError("error writing manifest " + path.string());
}

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(), [](auto b) { return b != 0; }));
}

namespace {

void check_mask(const Mask& m, const Image& image, const char* what) {
  if (m.height != image.height || m.width != image.width) {
    throw InvariantError(std::string(what) + " size does not match image");
  }
  if (m.bits.size() != static_cast<std::size_t>(m.height) * m.width) {
    throw InvariantError(std::string(what) + " storage size mismatch");
  }
  for (auto b : m.bits) {
    if (b > 1) throw InvariantError(std::string(what) + " contains values outside {0,1}");
  }
}

void check_label(const std::optional<int>& v, const char* what) {
  if (v && *v != 0 && *v != 1) throw InvariantError(std::string(what) + " label outside {0,1}");
}

}  // namespace

Sample Sample::create(Image image, std::optional<Mask> lung_mask, std::optional<Mask> disease_mask,
                      SampleLabels labels, std::string patient_id, std::string sample_id) {
  if (image.channels != 3) throw InvariantError("sample image must have 3 channels");
  if (image.height <= 0 || image.width <= 0) throw InvariantError("sample image is empty");
  if (image.values.size() != static_cast<std::size_t>(3) * image.height * image.width) {
    throw InvariantError("sample image storage size mismatch");
  }
  for (float v : image.values) {
    if (!(v >= 0.0f && v <= 1.0f)) throw InvariantError("sample image value outside [0,1]");
  }
  if (lung_mask) check_mask(*lung_mask, image, "lung mask");
  if (disease_mask) check_mask(*disease_mask, image, "disease mask");
  check_label(labels.healthy, "healthy");
  check_label(labels.covid, "covid");
  check_label(labels.other, "other-disease");
  if (patient_id.empty()) throw InvariantError("sample patient_id is empty");

  Sample s;
  s.switches_.t = {static_cast<std::uint8_t>(lung_mask.has_value()),
                   static_cast<std::uint8_t>(disease_mask.has_value()),
                   static_cast<std::uint8_t>(labels.healthy.has_value()),
                   static_cast<std::uint8_t>(labels.covid.has_value() && labels.other.has_value())};
  s.image_ = std::move(image);
  s.lung_mask_ = std::move(lung_mask);
  s.disease_mask_ = std::move(disease_mask);
  s.labels_ = labels;
  s.patient_id_ = std::move(patient_id);
  s.sample_id_ = std::move(sample_id);
  return s;
}

}  // namespace cmtnet
