#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

namespace milrefine {

using json = nlohmann::json;

/// Axis-aligned box in image coordinates, corners (u1,v1) and (u2,v2).
struct BoundingBox {
  double u1 = 0.0;
  double v1 = 0.0;
  double u2 = 0.0;
  double v2 = 0.0;

  double width() const { return u2 - u1; }
  double height() const { return v2 - v1; }
  double area() const { return width() * height(); }

  bool valid() const {
    return std::isfinite(u1) && std::isfinite(v1) && std::isfinite(u2) &&
           std::isfinite(v2) && u1 >= 0.0 && v1 >= 0.0 && u1 < u2 && v1 < v2;
  }

  bool operator==(const BoundingBox&) const = default;
};

/// One detected candidate: box, objectness, teacher class probabilities,
/// and the flattened feature vector the refinement model consumes.
struct ProposalRecord {
  BoundingBox box;
  double objectness = 0.0;
  std::vector<double> teacher_probs;
  std::vector<double> feature;

  bool operator==(const ProposalRecord&) const = default;
};

/// All proposals the teacher produced for one image. May be empty.
struct ImageDetections {
  std::string image_id;
  std::vector<ProposalRecord> proposals;

  bool operator==(const ImageDetections&) const = default;
};

/// Multi-hot image-level label over C classes.
struct ImageLabelVector {
  std::string image_id;
  std::vector<int> labels;

  bool operator==(const ImageLabelVector&) const = default;
};

struct GroundTruthBox {
  BoundingBox box;
  int category = 0;

  bool operator==(const GroundTruthBox&) const = default;
};

using GroundTruthMap =
    std::unordered_map<std::string, std::vector<GroundTruthBox>>;

struct DatasetManifest {
  int num_classes = 0;
  int feature_dim = 0;
  std::vector<std::string> class_names;
  std::int64_t num_full_images = 0;
  std::int64_t num_weak_images = 0;

  void validate() const {
    if (num_classes <= 0)
      throw std::invalid_argument("manifest: num_classes must be positive");
    if (feature_dim <= 0)
      throw std::invalid_argument("manifest: feature_dim must be positive");
    if (static_cast<int>(class_names.size()) != num_classes)
      throw std::invalid_argument(
          "manifest: class_names length must equal num_classes");
    if (num_full_images < 0 || num_weak_images < 0)
      throw std::invalid_argument("manifest: image counts must be nonnegative");
  }
};

namespace detail {

// shortest decimal form that parses back to the identical double
inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

[[noreturn]] inline void fail_line(const std::string& path, std::size_t line_no,
                                   const std::string& what) {
  throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + what);
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path + " for reading");
  return in;
}

inline std::ofstream open_output(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  return out;
}

inline std::vector<double> to_doubles(const json& arr, const char* what) {
  if (!arr.is_array()) throw std::runtime_error(std::string(what) + " must be an array");
  std::vector<double> out;
  out.reserve(arr.size());
  for (const auto& v : arr) {
    if (!v.is_number()) throw std::runtime_error(std::string(what) + " must contain numbers");
    out.push_back(v.get<double>());
  }
  return out;
}

inline BoundingBox parse_box(const json& arr) {
  const auto coords = to_doubles(arr, "box");
  if (coords.size() != 4) throw std::runtime_error("box must have 4 coordinates");
  BoundingBox box{coords[0], coords[1], coords[2], coords[3]};
  if (!box.valid())
    throw std::runtime_error("invalid box: coordinates must be finite, >= 0, u1<u2, v1<v2");
  return box;
}

inline json box_to_json(const BoundingBox& box) {
  return json::array({box.u1, box.v1, box.u2, box.v2});
}

inline void validate_proposal(const ProposalRecord& p, const DatasetManifest& m,
                              const std::string& image_id) {
  if (!p.box.valid())
    throw std::runtime_error("image " + image_id + ": invalid box");
  if (!std::isfinite(p.objectness) || p.objectness < 0.0 || p.objectness > 1.0)
    throw std::runtime_error("image " + image_id + ": objectness outside [0,1]");
  if (static_cast<int>(p.teacher_probs.size()) != m.num_classes)
    throw std::runtime_error("image " + image_id + ": teacher_probs length " +
                             std::to_string(p.teacher_probs.size()) +
                             " does not match num_classes " +
                             std::to_string(m.num_classes));
  for (double v : p.teacher_probs)
    if (!std::isfinite(v) || v < 0.0 || v > 1.0)
      throw std::runtime_error("image " + image_id + ": teacher prob outside [0,1]");
  if (static_cast<int>(p.feature.size()) != m.feature_dim)
    throw std::runtime_error("image " + image_id + ": feature length " +
                             std::to_string(p.feature.size()) +
                             " does not match feature_dim " +
                             std::to_string(m.feature_dim));
  for (double v : p.feature)
    if (!std::isfinite(v))
      throw std::runtime_error("image " + image_id + ": non-finite feature value");
}

// Applies fn(line_json, line_no) to every nonempty line of a JSONL file.
template <typename Fn>
void for_each_jsonl(const std::string& path, Fn&& fn) {
  auto in = open_input(path);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::exception& e) {
      fail_line(path, line_no, std::string("malformed JSON: ") + e.what());
    }
    try {
      fn(obj, line_no);
    } catch (const std::exception& e) {
      fail_line(path, line_no, e.what());
    }
  }
}

}  // namespace detail

// --- Detections file: one {"image_id", "proposals": [...]} object per line.

inline std::vector<ImageDetections> load_detections(
    const std::string& path, const DatasetManifest& manifest) {
  manifest.validate();
  std::vector<ImageDetections> out;
  std::unordered_set<std::string> seen;
  detail::for_each_jsonl(path, [&](const json& obj, std::size_t) {
    ImageDetections det;
    det.image_id = obj.at("image_id").get<std::string>();
    if (det.image_id.empty()) throw std::runtime_error("empty image_id");
    if (!seen.insert(det.image_id).second)
      throw std::runtime_error("duplicate image_id " + det.image_id);
    const json& props = obj.at("proposals");
    if (!props.is_array()) throw std::runtime_error("proposals must be an array");
    for (const json& pj : props) {
      ProposalRecord p;
      p.box = detail::parse_box(pj.at("box"));
      p.objectness = pj.at("objectness").get<double>();
      p.teacher_probs = detail::to_doubles(pj.at("probs"), "probs");
      p.feature = detail::to_doubles(pj.at("feature"), "feature");
      detail::validate_proposal(p, manifest, det.image_id);
      det.proposals.push_back(std::move(p));
    }
    out.push_back(std::move(det));
  });
  return out;
}

inline json proposal_to_json(const ProposalRecord& p) {
  return json{{"box", detail::box_to_json(p.box)},
              {"objectness", p.objectness},
              {"probs", p.teacher_probs},
              {"feature", p.feature}};
}

inline void save_detections(const std::string& path,
                            const std::vector<ImageDetections>& detections) {
  auto out = detail::open_output(path);
  for (const auto& det : detections) {
    json props = json::array();
    for (const auto& p : det.proposals) props.push_back(proposal_to_json(p));
    out << json{{"image_id", det.image_id}, {"proposals", std::move(props)}}
        << '\n';
  }
  if (!out) throw std::runtime_error("write failed for " + path);
}

// --- Labels file: one {"image_id", "labels": [0/1 x C]} object per line.

inline std::vector<ImageLabelVector> load_labels(
    const std::string& path, const DatasetManifest& manifest) {
  manifest.validate();
  std::vector<ImageLabelVector> out;
  std::unordered_set<std::string> seen;
  detail::for_each_jsonl(path, [&](const json& obj, std::size_t) {
    ImageLabelVector lv;
    lv.image_id = obj.at("image_id").get<std::string>();
    if (lv.image_id.empty()) throw std::runtime_error("empty image_id");
    if (!seen.insert(lv.image_id).second)
      throw std::runtime_error("duplicate image_id " + lv.image_id);
    const json& labels = obj.at("labels");
    if (!labels.is_array()) throw std::runtime_error("labels must be an array");
    for (const json& v : labels) {
      if (!v.is_number_integer() || (v.get<int>() != 0 && v.get<int>() != 1))
        throw std::runtime_error("image " + lv.image_id +
                                 ": labels must be 0 or 1");
      lv.labels.push_back(v.get<int>());
    }
    if (static_cast<int>(lv.labels.size()) != manifest.num_classes)
      throw std::runtime_error("image " + lv.image_id + ": labels length " +
                               std::to_string(lv.labels.size()) +
                               " does not match num_classes " +
                               std::to_string(manifest.num_classes));
    out.push_back(std::move(lv));
  });
  return out;
}

inline void save_labels(const std::string& path,
                        const std::vector<ImageLabelVector>& labels) {
  auto out = detail::open_output(path);
  for (const auto& lv : labels)
    out << json{{"image_id", lv.image_id}, {"labels", lv.labels}} << '\n';
  if (!out) throw std::runtime_error("write failed for " + path);
}

// --- Ground-truth file: one {"image_id", "boxes": [...]} object per line.

inline GroundTruthMap load_groundtruth(const std::string& path,
                                       const DatasetManifest& manifest) {
  manifest.validate();
  GroundTruthMap out;
  detail::for_each_jsonl(path, [&](const json& obj, std::size_t) {
    const auto image_id = obj.at("image_id").get<std::string>();
    if (image_id.empty()) throw std::runtime_error("empty image_id");
    if (out.count(image_id))
      throw std::runtime_error("duplicate image_id " + image_id);
    std::vector<GroundTruthBox> boxes;
    const json& arr = obj.at("boxes");
    if (!arr.is_array()) throw std::runtime_error("boxes must be an array");
    for (const json& bj : arr) {
      GroundTruthBox gt;
      gt.box = detail::parse_box(bj.at("box"));
      gt.category = bj.at("category").get<int>();
      if (gt.category < 0 || gt.category >= manifest.num_classes)
        throw std::runtime_error("image " + image_id + ": category " +
                                 std::to_string(gt.category) +
                                 " outside [0, num_classes)");
      boxes.push_back(gt);
    }
    out.emplace(image_id, std::move(boxes));
  });
  return out;
}

inline void save_groundtruth(
    const std::string& path,
    const std::vector<std::pair<std::string, std::vector<GroundTruthBox>>>&
        groundtruth) {
  auto out = detail::open_output(path);
  for (const auto& [image_id, boxes] : groundtruth) {
    json arr = json::array();
    for (const auto& gt : boxes)
      arr.push_back(json{{"box", detail::box_to_json(gt.box)},
                         {"category", gt.category}});
    out << json{{"image_id", image_id}, {"boxes", std::move(arr)}} << '\n';
  }
  if (!out) throw std::runtime_error("write failed for " + path);
}

// --- Manifest file: a single JSON object.

inline DatasetManifest load_manifest(const std::string& path) {
  auto in = detail::open_input(path);
  json obj;
  try {
    obj = json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error(path + ": malformed JSON: " + e.what());
  }
  DatasetManifest m;
  m.num_classes = obj.at("num_classes").get<int>();
  m.feature_dim = obj.at("feature_dim").get<int>();
  m.class_names = obj.at("class_names").get<std::vector<std::string>>();
  m.num_full_images = obj.value("num_full_images", std::int64_t{0});
  m.num_weak_images = obj.value("num_weak_images", std::int64_t{0});
  try {
    m.validate();
  } catch (const std::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  return m;
}

inline void save_manifest(const std::string& path, const DatasetManifest& m) {
  m.validate();
  auto out = detail::open_output(path);
  out << json{{"num_classes", m.num_classes},
              {"feature_dim", m.feature_dim},
              {"class_names", m.class_names},
              {"num_full_images", m.num_full_images},
              {"num_weak_images", m.num_weak_images}}
             .dump(2)
      << '\n';
  if (!out) throw std::runtime_error("write failed for " + path);
}

}  // namespace milrefine
