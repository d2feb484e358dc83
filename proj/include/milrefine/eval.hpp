#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "milrefine/core.hpp"
#include "milrefine/refine.hpp"

namespace milrefine {

inline double iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::min(a.u2, b.u2) - std::max(a.u1, b.u1);
  const double ih = std::min(a.v2, b.v2) - std::max(a.v1, b.v1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

inline std::vector<double> iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.50 + 0.05 * i);
  return t;
}

/// One class-labeled, confidence-scored box, flattened out of either raw or
/// refined detections. order is the global input position used to break
/// score ties deterministically.
struct ScoredBox {
  std::string image_id;
  std::int64_t order = 0;
  BoundingBox box;
  int category = 0;
  double score = 0.0;
};

enum class ScoreMode {
  objectness_times_class,  // default: teacher objectness x class probability
  class_prob,
  objectness,
};

inline int teacher_argmax(const ProposalRecord& p) {
  int best = 0;
  for (std::size_t k = 1; k < p.teacher_probs.size(); ++k)
    if (p.teacher_probs[k] > p.teacher_probs[static_cast<std::size_t>(best)])
      best = static_cast<int>(k);
  return best;
}

inline std::vector<ScoredBox> to_scored(
    const std::vector<ImageDetections>& detections,
    ScoreMode mode = ScoreMode::objectness_times_class) {
  std::vector<ScoredBox> out;
  std::int64_t order = 0;
  for (const auto& image : detections) {
    for (const auto& p : image.proposals) {
      ScoredBox sb;
      sb.image_id = image.image_id;
      sb.order = order++;
      sb.box = p.box;
      sb.category = p.teacher_probs.empty() ? 0 : teacher_argmax(p);
      const double class_p =
          p.teacher_probs.empty() ? 1.0
                                  : p.teacher_probs[static_cast<std::size_t>(sb.category)];
      switch (mode) {
        case ScoreMode::objectness_times_class: sb.score = p.objectness * class_p; break;
        case ScoreMode::class_prob: sb.score = class_p; break;
        case ScoreMode::objectness: sb.score = p.objectness; break;
      }
      out.push_back(std::move(sb));
    }
  }
  return out;
}

inline std::vector<ScoredBox> to_scored(
    const std::vector<RefinedDetections>& detections,
    ScoreMode mode = ScoreMode::objectness_times_class) {
  std::vector<ScoredBox> out;
  std::int64_t order = 0;
  for (const auto& image : detections) {
    for (const auto& rp : image.proposals) {
      ScoredBox sb;
      sb.image_id = image.image_id;
      sb.order = order++;
      sb.box = rp.proposal.box;
      sb.category = rp.refined_category;
      const double class_p = rp.refined_probs[static_cast<std::size_t>(rp.refined_category)];
      switch (mode) {
        case ScoreMode::objectness_times_class:
          sb.score = rp.proposal.objectness * class_p;
          break;
        case ScoreMode::class_prob: sb.score = class_p; break;
        case ScoreMode::objectness: sb.score = rp.proposal.objectness; break;
      }
      out.push_back(std::move(sb));
    }
  }
  return out;
}

struct MatchCounts {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
};

struct EvalReport {
  std::vector<double> thresholds;                 // the 10 IoU thresholds
  std::vector<std::vector<double>> per_class_ap;  // C x T
  std::vector<bool> class_in_gt;                  // classes with >= 1 GT box
  double map = 0.0;                               // mean over present classes and thresholds
  std::vector<MatchCounts> counts;                // per threshold, summed over classes
};

namespace detail {

inline bool scored_before(const ScoredBox& a, const ScoredBox& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.image_id != b.image_id) return a.image_id < b.image_id;
  return a.order < b.order;
}

// 101-point interpolated AP: precision envelope over the cumulative PR
// points, sampled at recalls 0.00, 0.01, ..., 1.00.
inline double interpolated_ap(const std::vector<char>& tp_flags,
                              std::int64_t gt_count) {
  if (gt_count <= 0) return 0.0;
  const std::size_t n = tp_flags.size();
  std::vector<double> precision(n), recall(n);
  std::int64_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (tp_flags[i]) ++tp;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(gt_count);
  }
  for (std::size_t i = n; i-- > 1;)
    precision[i - 1] = std::max(precision[i - 1], precision[i]);

  double ap = 0.0;
  for (int r = 0; r <= 100; ++r) {
    const double target = static_cast<double>(r) / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), target);
    if (it != recall.end())
      ap += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return ap / 101.0;
}

}  // namespace detail

/// COCO-style evaluation over scored boxes: per class and IoU threshold,
/// detections are taken in descending score order (ties by image_id, then
/// input order) and greedily matched to the highest-IoU unmatched same-class
/// ground-truth box at or above the threshold. mAP averages the 101-point AP
/// over thresholds and over classes that appear in the ground truth.
inline EvalReport evaluate_scored(std::vector<ScoredBox> predictions,
                                  const GroundTruthMap& groundtruth,
                                  int num_classes) {
  if (num_classes <= 0)
    throw std::invalid_argument("evaluate: num_classes must be positive");
  for (const auto& sb : predictions) {
    if (!groundtruth.count(sb.image_id))
      throw std::invalid_argument("evaluate: prediction image_id " +
                                  sb.image_id + " not present in ground truth");
    if (sb.category < 0 || sb.category >= num_classes)
      throw std::invalid_argument("evaluate: prediction category outside [0, num_classes)");
  }
  std::sort(predictions.begin(), predictions.end(), detail::scored_before);

  EvalReport report;
  report.thresholds = iou_thresholds();
  report.per_class_ap.assign(num_classes,
                             std::vector<double>(report.thresholds.size(), 0.0));
  report.class_in_gt.assign(num_classes, false);
  report.counts.assign(report.thresholds.size(), MatchCounts{});

  std::vector<std::int64_t> gt_per_class(num_classes, 0);
  for (const auto& [id, boxes] : groundtruth)
    for (const auto& gt : boxes) {
      if (gt.category < 0 || gt.category >= num_classes)
        throw std::invalid_argument("evaluate: ground-truth category outside [0, num_classes)");
      ++gt_per_class[static_cast<std::size_t>(gt.category)];
      report.class_in_gt[static_cast<std::size_t>(gt.category)] = true;
    }

  double ap_sum = 0.0;
  std::int64_t ap_terms = 0;
  for (int cls = 0; cls < num_classes; ++cls) {
    std::vector<const ScoredBox*> dets;
    for (const auto& sb : predictions)
      if (sb.category == cls) dets.push_back(&sb);

    for (std::size_t t = 0; t < report.thresholds.size(); ++t) {
      const double threshold = report.thresholds[t];
      // per image: which same-class GT boxes are already matched
      std::unordered_map<std::string, std::vector<char>> used;
      std::vector<char> tp_flags(dets.size(), 0);
      std::int64_t tp = 0;
      for (std::size_t i = 0; i < dets.size(); ++i) {
        const auto& gt_boxes = groundtruth.at(dets[i]->image_id);
        auto& taken = used[dets[i]->image_id];
        taken.resize(gt_boxes.size(), 0);
        int best = -1;
        double best_iou = 0.0;
        for (std::size_t gidx = 0; gidx < gt_boxes.size(); ++gidx) {
          if (gt_boxes[gidx].category != cls || taken[gidx]) continue;
          const double overlap = iou(dets[i]->box, gt_boxes[gidx].box);
          if (overlap >= threshold && overlap > best_iou) {
            best_iou = overlap;
            best = static_cast<int>(gidx);
          }
        }
        if (best >= 0) {
          taken[static_cast<std::size_t>(best)] = 1;
          tp_flags[i] = 1;
          ++tp;
        }
      }
      const std::int64_t gt_count = gt_per_class[static_cast<std::size_t>(cls)];
      report.per_class_ap[static_cast<std::size_t>(cls)][t] =
          detail::interpolated_ap(tp_flags, gt_count);
      report.counts[t].tp += tp;
      report.counts[t].fp += static_cast<std::int64_t>(dets.size()) - tp;
      report.counts[t].fn += gt_count - tp;
      if (gt_count > 0) {
        ap_sum += report.per_class_ap[static_cast<std::size_t>(cls)][t];
        ++ap_terms;
      }
    }
  }
  report.map = ap_terms > 0 ? ap_sum / static_cast<double>(ap_terms) : 0.0;
  return report;
}

inline EvalReport evaluate(const std::vector<ImageDetections>& predictions,
                           const GroundTruthMap& groundtruth, int num_classes,
                           ScoreMode mode = ScoreMode::objectness_times_class) {
  return evaluate_scored(to_scored(predictions, mode), groundtruth, num_classes);
}

inline EvalReport evaluate(const std::vector<RefinedDetections>& predictions,
                           const GroundTruthMap& groundtruth, int num_classes,
                           ScoreMode mode = ScoreMode::objectness_times_class) {
  return evaluate_scored(to_scored(predictions, mode), groundtruth, num_classes);
}

// --- Annotation-cost accounting.

struct BudgetRates {
  double seconds_per_box = 10.0;
  double seconds_per_image_label = 1.0;
};

struct BudgetReport {
  std::int64_t num_boxes = 0;
  std::int64_t num_weak_images = 0;
  double seconds_per_box = 10.0;
  double seconds_per_image_label = 1.0;
  double total_seconds = 0.0;
};

inline BudgetReport annotation_budget(std::int64_t num_boxes,
                                      std::int64_t num_weak_images,
                                      BudgetRates rates = {}) {
  if (num_boxes < 0 || num_weak_images < 0)
    throw std::invalid_argument("annotation_budget: counts must be nonnegative");
  BudgetReport report;
  report.num_boxes = num_boxes;
  report.num_weak_images = num_weak_images;
  report.seconds_per_box = rates.seconds_per_box;
  report.seconds_per_image_label = rates.seconds_per_image_label;
  report.total_seconds = rates.seconds_per_box * static_cast<double>(num_boxes) +
                         rates.seconds_per_image_label * static_cast<double>(num_weak_images);
  return report;
}

enum class LabelCostMode { per_image, per_present_class };

/// Number of weak-label units to charge for: one per image, or one per
/// present class per image (the timing source measures per-class responses).
inline std::int64_t weak_label_units(const std::vector<ImageLabelVector>& labels,
                                     LabelCostMode mode) {
  std::int64_t units = 0;
  for (const auto& lv : labels) {
    if (mode == LabelCostMode::per_image) {
      ++units;
    } else {
      for (int v : lv.labels) units += v;
    }
  }
  return units;
}

// --- Report serialization: JSON plus a flat (class, threshold, AP) CSV.

inline json eval_report_to_json(const EvalReport& report) {
  json per_class = json::array();
  for (std::size_t c = 0; c < report.per_class_ap.size(); ++c) {
    if (report.class_in_gt[c]) {
      per_class.push_back(report.per_class_ap[c]);
    } else {
      per_class.push_back(nullptr);  // class absent from ground truth
    }
  }
  json counts = json::array();
  for (const auto& mc : report.counts)
    counts.push_back(json{{"tp", mc.tp}, {"fp", mc.fp}, {"fn", mc.fn}});
  return json{{"map", report.map},
              {"thresholds", report.thresholds},
              {"per_class_ap", std::move(per_class)},
              {"counts", std::move(counts)}};
}

inline void save_eval_report(const std::string& path, const EvalReport& report) {
  auto out = detail::open_output(path);
  out << eval_report_to_json(report).dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed for " + path);
}

inline void save_eval_csv(const std::string& path, const EvalReport& report) {
  auto out = detail::open_output(path);
  out << "class,threshold,ap\n";
  for (std::size_t c = 0; c < report.per_class_ap.size(); ++c) {
    if (!report.class_in_gt[c]) continue;
    for (std::size_t t = 0; t < report.thresholds.size(); ++t)
      out << c << ',' << detail::format_double(report.thresholds[t]) << ','
          << detail::format_double(report.per_class_ap[c][t]) << '\n';
  }
  if (!out) throw std::runtime_error("write failed for " + path);
}

inline json budget_report_to_json(const BudgetReport& report) {
  return json{{"num_boxes", report.num_boxes},
              {"num_weak_images", report.num_weak_images},
              {"seconds_per_box", report.seconds_per_box},
              {"seconds_per_image_label", report.seconds_per_image_label},
              {"total_seconds", report.total_seconds}};
}

}  // namespace milrefine
