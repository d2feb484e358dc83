#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "milrefine/core.hpp"
#include "milrefine/eval.hpp"
#include "milrefine/rng.hpp"

namespace milrefine {

/// A class pair the teacher confuses: their feature prototypes sit
/// `separation` apart instead of the global prototype separation.
struct ConfusablePair {
  int first = 0;
  int second = 0;
  double separation = 1.0;
};

struct CooccurBoost {
  int first = 0;
  int second = 0;
  double boost = 0.0;  // probability that the pair is sampled jointly
};

struct SynthConfig {
  int num_classes = 4;
  int feature_dim = 8;
  int num_images = 500;
  double prototype_separation = 6.0;
  std::vector<ConfusablePair> confusable_pairs;
  std::vector<CooccurBoost> cooccur_boost;
  double class_prob = 0.35;  // independent per-class presence probability
  int min_instances_per_class = 1;
  int max_instances_per_class = 1;
  double noise_sigma = 1.0;
  double teacher_corruption_rate = 0.0;  // flip rate within confusable pairs
  double box_jitter = 0.0;               // relative box perturbation
  std::uint64_t seed = 0;
  double image_width = 1280.0;
  double image_height = 1024.0;

  void validate() const {
    if (num_classes <= 0) throw std::invalid_argument("synth: num_classes must be positive");
    if (feature_dim < num_classes)
      throw std::invalid_argument("synth: feature_dim must be >= num_classes");
    if (num_images <= 0) throw std::invalid_argument("synth: num_images must be positive");
    if (!(prototype_separation > 0.0))
      throw std::invalid_argument("synth: prototype_separation must be > 0");
    for (const auto& cp : confusable_pairs) {
      if (cp.first < 0 || cp.first >= num_classes || cp.second < 0 ||
          cp.second >= num_classes || cp.first == cp.second)
        throw std::invalid_argument("synth: invalid confusable pair");
      if (!(cp.separation > 0.0))
        throw std::invalid_argument("synth: pair separation must be > 0");
    }
    for (const auto& cb : cooccur_boost) {
      if (cb.first < 0 || cb.first >= num_classes || cb.second < 0 ||
          cb.second >= num_classes || cb.first == cb.second)
        throw std::invalid_argument("synth: invalid co-occurrence boost pair");
      if (cb.boost < 0.0 || cb.boost > 1.0)
        throw std::invalid_argument("synth: boost must be in [0, 1]");
    }
    if (class_prob < 0.0 || class_prob > 1.0)
      throw std::invalid_argument("synth: class_prob must be in [0, 1]");
    if (min_instances_per_class < 1 ||
        max_instances_per_class < min_instances_per_class)
      throw std::invalid_argument("synth: instance count range is invalid");
    if (noise_sigma < 0.0) throw std::invalid_argument("synth: noise_sigma must be >= 0");
    if (teacher_corruption_rate < 0.0 || teacher_corruption_rate > 1.0)
      throw std::invalid_argument("synth: teacher_corruption_rate must be in [0, 1]");
    if (box_jitter < 0.0 || box_jitter > 0.4)
      throw std::invalid_argument("synth: box_jitter must be in [0, 0.4]");
    if (image_width <= 1.0 || image_height <= 1.0)
      throw std::invalid_argument("synth: image frame is too small");
  }
};

struct SynthDataset {
  DatasetManifest manifest;
  std::vector<std::pair<std::string, std::vector<GroundTruthBox>>> groundtruth;
  std::vector<ImageDetections> detections;  // teacher pseudo-labels
  std::vector<ImageLabelVector> labels;     // weak image-level labels

  GroundTruthMap groundtruth_map() const {
    GroundTruthMap m;
    for (const auto& [id, boxes] : groundtruth) m.emplace(id, boxes);
    return m;
  }
};

/// Class feature prototypes. Classes sit on scaled axes; a confusable pair's
/// second member is moved next to the first at the pair's separation, along
/// a direction outside the class axes when the feature width allows.
inline std::vector<std::vector<double>> class_prototypes(const SynthConfig& cfg) {
  std::vector<std::vector<double>> protos(
      cfg.num_classes, std::vector<double>(cfg.feature_dim, 0.0));
  for (int k = 0; k < cfg.num_classes; ++k)
    protos[static_cast<std::size_t>(k)][static_cast<std::size_t>(k % cfg.feature_dim)] =
        cfg.prototype_separation;
  for (std::size_t idx = 0; idx < cfg.confusable_pairs.size(); ++idx) {
    const auto& cp = cfg.confusable_pairs[idx];
    const int axis = (cfg.num_classes + static_cast<int>(idx)) % cfg.feature_dim;
    protos[static_cast<std::size_t>(cp.second)] = protos[static_cast<std::size_t>(cp.first)];
    protos[static_cast<std::size_t>(cp.second)][static_cast<std::size_t>(axis)] +=
        cp.separation;
  }
  return protos;
}

namespace detail {

inline BoundingBox random_box(Rng& rng, double width, double height) {
  const double w = rng.uniform(0.08, 0.25) * width;
  const double h = rng.uniform(0.08, 0.25) * height;
  const double u1 = rng.uniform(0.0, width - w);
  const double v1 = rng.uniform(0.0, height - h);
  return BoundingBox{u1, v1, u1 + w, v1 + h};
}

inline BoundingBox jitter_box(Rng& rng, const BoundingBox& box, double jitter,
                              double width, double height) {
  if (jitter == 0.0) return box;
  const double w = box.width();
  const double h = box.height();
  BoundingBox out{box.u1 + rng.uniform(-jitter, jitter) * w,
                  box.v1 + rng.uniform(-jitter, jitter) * h,
                  box.u2 + rng.uniform(-jitter, jitter) * w,
                  box.v2 + rng.uniform(-jitter, jitter) * h};
  out.u1 = std::clamp(out.u1, 0.0, width - 1.0);
  out.v1 = std::clamp(out.v1, 0.0, height - 1.0);
  out.u2 = std::clamp(out.u2, out.u1 + 1.0, width);
  out.v2 = std::clamp(out.v2, out.v1 + 1.0, height);
  return out;
}

}  // namespace detail

/// Generates a synthetic weak-label detection dataset. Per image: a class
/// subset is drawn (pairs with a co-occurrence boost are forced to appear
/// jointly at the boosted rate, so their PMI is positive), each present class
/// contributes instances whose features are the class prototype plus
/// Gaussian noise, and the teacher copies the ground-truth boxes with jitter
/// and an optionally corrupted class drawn within the confusable pair.
/// Deterministic for a given config; every image has its own derived seed.
inline SynthDataset generate(const SynthConfig& cfg) {
  cfg.validate();
  const auto protos = class_prototypes(cfg);

  // partner[k] = the class k gets confused with, -1 when not in any pair
  std::vector<int> partner(cfg.num_classes, -1);
  for (const auto& cp : cfg.confusable_pairs) {
    partner[static_cast<std::size_t>(cp.first)] = cp.second;
    partner[static_cast<std::size_t>(cp.second)] = cp.first;
  }

  SynthDataset data;
  data.manifest.num_classes = cfg.num_classes;
  data.manifest.feature_dim = cfg.feature_dim;
  for (int k = 0; k < cfg.num_classes; ++k)
    data.manifest.class_names.push_back("class_" + std::to_string(k));
  data.manifest.num_full_images = 0;
  data.manifest.num_weak_images = cfg.num_images;

  const Rng master(cfg.seed);
  for (int img = 0; img < cfg.num_images; ++img) {
    Rng rng = master.fork(static_cast<std::uint64_t>(img));
    const std::string image_id = "synth_" + std::to_string(img);

    std::vector<char> present(cfg.num_classes, 0);
    for (int k = 0; k < cfg.num_classes; ++k)
      present[static_cast<std::size_t>(k)] = rng.bernoulli(cfg.class_prob) ? 1 : 0;
    for (const auto& cb : cfg.cooccur_boost) {
      const bool joint = rng.bernoulli(cb.boost);
      if (joint && (present[static_cast<std::size_t>(cb.first)] ||
                    present[static_cast<std::size_t>(cb.second)])) {
        present[static_cast<std::size_t>(cb.first)] = 1;
        present[static_cast<std::size_t>(cb.second)] = 1;
      }
    }

    std::vector<GroundTruthBox> gt_boxes;
    ImageDetections det;
    det.image_id = image_id;
    for (int k = 0; k < cfg.num_classes; ++k) {
      if (!present[static_cast<std::size_t>(k)]) continue;
      const int count =
          cfg.min_instances_per_class +
          static_cast<int>(rng.below(static_cast<std::uint64_t>(
              cfg.max_instances_per_class - cfg.min_instances_per_class + 1)));
      for (int inst = 0; inst < count; ++inst) {
        GroundTruthBox gt;
        gt.category = k;
        gt.box = detail::random_box(rng, cfg.image_width, cfg.image_height);
        gt_boxes.push_back(gt);

        ProposalRecord proposal;
        proposal.box = detail::jitter_box(rng, gt.box, cfg.box_jitter,
                                          cfg.image_width, cfg.image_height);
        proposal.objectness = rng.uniform(0.6, 1.0);
        proposal.feature.resize(static_cast<std::size_t>(cfg.feature_dim));
        for (int d = 0; d < cfg.feature_dim; ++d)
          proposal.feature[static_cast<std::size_t>(d)] =
              protos[static_cast<std::size_t>(k)][static_cast<std::size_t>(d)] +
              rng.normal(0.0, cfg.noise_sigma);

        int teacher_class = k;
        if (partner[static_cast<std::size_t>(k)] >= 0 &&
            rng.bernoulli(cfg.teacher_corruption_rate))
          teacher_class = partner[static_cast<std::size_t>(k)];
        const double top = rng.uniform(0.7, 0.95);
        proposal.teacher_probs.assign(static_cast<std::size_t>(cfg.num_classes),
                                      cfg.num_classes > 1
                                          ? (1.0 - top) / (cfg.num_classes - 1)
                                          : 0.0);
        proposal.teacher_probs[static_cast<std::size_t>(teacher_class)] = top;
        det.proposals.push_back(std::move(proposal));
      }
    }

    ImageLabelVector lv;
    lv.image_id = image_id;
    lv.labels.assign(static_cast<std::size_t>(cfg.num_classes), 0);
    for (const auto& gt : gt_boxes)
      lv.labels[static_cast<std::size_t>(gt.category)] = 1;

    data.groundtruth.emplace_back(image_id, std::move(gt_boxes));
    data.detections.push_back(std::move(det));
    data.labels.push_back(std::move(lv));
  }
  return data;
}

namespace detail {

constexpr std::size_t kOracleMaxPerClass = 100;

}  // namespace detail

/// Independent reference AP: direct re-sort, linear-scan greedy matching and
/// a literal max-over-cutoffs precision sweep at each of the 101 recall
/// points. Intentionally simple and quadratic; refuses large inputs.
inline std::vector<std::vector<double>> oracle_ap(
    const std::vector<ScoredBox>& predictions, const GroundTruthMap& groundtruth,
    int num_classes) {
  const auto thresholds = iou_thresholds();
  std::vector<std::vector<double>> ap(
      static_cast<std::size_t>(num_classes),
      std::vector<double>(thresholds.size(), 0.0));

  for (int cls = 0; cls < num_classes; ++cls) {
    std::vector<ScoredBox> dets;
    for (const auto& sb : predictions)
      if (sb.category == cls) dets.push_back(sb);
    if (dets.size() > detail::kOracleMaxPerClass)
      throw std::invalid_argument(
          "oracle_ap: instance too large (" + std::to_string(dets.size()) +
          " predictions for one class)");

    // selection sort with the documented tie rule
    for (std::size_t i = 0; i < dets.size(); ++i) {
      std::size_t best = i;
      for (std::size_t j = i + 1; j < dets.size(); ++j) {
        const ScoredBox& a = dets[j];
        const ScoredBox& b = dets[best];
        const bool before = a.score > b.score ||
                            (a.score == b.score && a.image_id < b.image_id) ||
                            (a.score == b.score && a.image_id == b.image_id &&
                             a.order < b.order);
        if (before) best = j;
      }
      std::swap(dets[i], dets[best]);
    }

    std::int64_t gt_count = 0;
    for (const auto& [id, boxes] : groundtruth)
      for (const auto& gt : boxes)
        if (gt.category == cls) ++gt_count;

    for (std::size_t t = 0; t < thresholds.size(); ++t) {
      if (gt_count == 0) continue;
      std::unordered_map<std::string, std::vector<char>> taken;
      std::vector<char> is_tp(dets.size(), 0);
      for (std::size_t i = 0; i < dets.size(); ++i) {
        const auto it = groundtruth.find(dets[i].image_id);
        if (it == groundtruth.end())
          throw std::invalid_argument("oracle_ap: unknown image_id " +
                                      dets[i].image_id);
        auto& used = taken[dets[i].image_id];
        used.resize(it->second.size(), 0);
        int match = -1;
        double match_iou = 0.0;
        for (std::size_t g = 0; g < it->second.size(); ++g) {
          if (it->second[g].category != cls || used[g]) continue;
          const double overlap = iou(dets[i].box, it->second[g].box);
          if (overlap >= thresholds[t] && overlap > match_iou) {
            match_iou = overlap;
            match = static_cast<int>(g);
          }
        }
        if (match >= 0) {
          used[static_cast<std::size_t>(match)] = 1;
          is_tp[i] = 1;
        }
      }

      double total = 0.0;
      for (int r = 0; r <= 100; ++r) {
        const double target = static_cast<double>(r) / 100.0;
        double best_precision = 0.0;
        std::int64_t tp = 0;
        for (std::size_t cut = 0; cut < dets.size(); ++cut) {
          if (is_tp[cut]) ++tp;
          const double recall =
              static_cast<double>(tp) / static_cast<double>(gt_count);
          const double precision =
              static_cast<double>(tp) / static_cast<double>(cut + 1);
          if (recall >= target) best_precision = std::max(best_precision, precision);
        }
        total += best_precision;
      }
      ap[static_cast<std::size_t>(cls)][t] = total / 101.0;
    }
  }
  return ap;
}

}  // namespace milrefine
