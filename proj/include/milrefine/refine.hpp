#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "milrefine/core.hpp"
#include "milrefine/net.hpp"

namespace milrefine {

struct RefinedProposal {
  ProposalRecord proposal;           // box, objectness, teacher data unchanged
  int refined_category = 0;          // argmax of refined_probs
  std::vector<double> refined_probs;

  bool operator==(const RefinedProposal&) const = default;
};

struct RefinedDetections {
  std::string image_id;
  std::vector<RefinedProposal> proposals;

  bool operator==(const RefinedDetections&) const = default;
};

/// Rewrites the category of every pseudo-labeled proposal with the argmax of
/// the refinement model's instance probabilities. One forward pass per image
/// over the full proposal set, so self-attention sees every tool in the
/// frame. Boxes, objectness and teacher probabilities pass through untouched;
/// images with no proposals pass through unchanged. When min_prob is set,
/// proposals whose best refined probability falls below it are dropped.
inline std::vector<RefinedDetections> refine_labels(
    const RefinementModel& model, const std::vector<ImageDetections>& detections,
    std::optional<double> min_prob = std::nullopt) {
  std::vector<RefinedDetections> out;
  out.reserve(detections.size());
  for (const auto& image : detections) {
    RefinedDetections refined;
    refined.image_id = image.image_id;
    if (image.proposals.empty()) {
      out.push_back(std::move(refined));
      continue;
    }
    Matrix bag;
    try {
      bag = bag_features(image);
      if (bag.cols() != model.config.feature_dim)
        throw std::invalid_argument("feature length does not match the model");
    } catch (const std::exception& e) {
      throw std::invalid_argument("image " + image.image_id + ": " + e.what());
    }
    const BagActivations acts = forward(model, bag);
    for (std::size_t j = 0; j < image.proposals.size(); ++j) {
      RefinedProposal rp;
      rp.proposal = image.proposals[j];
      rp.refined_probs.resize(static_cast<std::size_t>(acts.probs.cols()));
      int best = 0;
      for (Eigen::Index k = 0; k < acts.probs.cols(); ++k) {
        const double p = acts.probs(static_cast<Eigen::Index>(j), k);
        rp.refined_probs[static_cast<std::size_t>(k)] = p;
        if (p > rp.refined_probs[static_cast<std::size_t>(best)]) best = static_cast<int>(k);
      }
      rp.refined_category = best;
      if (min_prob && rp.refined_probs[static_cast<std::size_t>(best)] < *min_prob)
        continue;
      refined.proposals.push_back(std::move(rp));
    }
    out.push_back(std::move(refined));
  }
  return out;
}

// Refined files reuse the detections format with two extra per-proposal
// fields: "refined_category" and "refined_probs".

inline void save_refined(const std::string& path,
                         const std::vector<RefinedDetections>& detections) {
  auto out = detail::open_output(path);
  for (const auto& det : detections) {
    json props = json::array();
    for (const auto& rp : det.proposals) {
      json pj = proposal_to_json(rp.proposal);
      pj["refined_category"] = rp.refined_category;
      pj["refined_probs"] = rp.refined_probs;
      props.push_back(std::move(pj));
    }
    out << json{{"image_id", det.image_id}, {"proposals", std::move(props)}}
        << '\n';
  }
  if (!out) throw std::runtime_error("write failed for " + path);
}

inline std::vector<RefinedDetections> load_refined(
    const std::string& path, const DatasetManifest& manifest) {
  manifest.validate();
  std::vector<RefinedDetections> out;
  std::unordered_set<std::string> seen;
  detail::for_each_jsonl(path, [&](const json& obj, std::size_t) {
    RefinedDetections det;
    det.image_id = obj.at("image_id").get<std::string>();
    if (det.image_id.empty()) throw std::runtime_error("empty image_id");
    if (!seen.insert(det.image_id).second)
      throw std::runtime_error("duplicate image_id " + det.image_id);
    for (const json& pj : obj.at("proposals")) {
      RefinedProposal rp;
      rp.proposal.box = detail::parse_box(pj.at("box"));
      rp.proposal.objectness = pj.at("objectness").get<double>();
      rp.proposal.teacher_probs = detail::to_doubles(pj.at("probs"), "probs");
      rp.proposal.feature = detail::to_doubles(pj.at("feature"), "feature");
      detail::validate_proposal(rp.proposal, manifest, det.image_id);
      rp.refined_category = pj.at("refined_category").get<int>();
      rp.refined_probs = detail::to_doubles(pj.at("refined_probs"), "refined_probs");
      if (static_cast<int>(rp.refined_probs.size()) != manifest.num_classes)
        throw std::runtime_error("image " + det.image_id +
                                 ": refined_probs length does not match num_classes");
      if (rp.refined_category < 0 || rp.refined_category >= manifest.num_classes)
        throw std::runtime_error("image " + det.image_id +
                                 ": refined_category outside [0, num_classes)");
      det.proposals.push_back(std::move(rp));
    }
    out.push_back(std::move(det));
  });
  return out;
}

}  // namespace milrefine
