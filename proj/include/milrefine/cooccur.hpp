#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "milrefine/core.hpp"

namespace milrefine {

/// Relative-frequency occurrence statistics over a weak-label set.
struct OccurrenceStats {
  std::vector<double> marginal;             // p(i), length C
  std::vector<std::vector<double>> joint;   // p(i,j), C x C, symmetric
  std::int64_t num_images = 0;
};

enum class CooccurVariant { literal, sigmoid };

inline const char* to_string(CooccurVariant v) {
  return v == CooccurVariant::literal ? "literal" : "sigmoid";
}

inline CooccurVariant cooccur_variant_from_string(const std::string& s) {
  if (s == "literal") return CooccurVariant::literal;
  if (s == "sigmoid") return CooccurVariant::sigmoid;
  throw std::invalid_argument("unknown co-occurrence variant: " + s);
}

/// Pairwise class weight matrix derived from PMI scores.
/// literal: S_ij = 1/(1+exp(s_ij)) for s_ij > 0, decreasing in s.
/// sigmoid: S_ij = 1/(1+exp(-s_ij)) for s_ij > 0, increasing in s.
/// Both map s_ij <= 0 to 0. The diagonal is zeroed unless requested.
struct CooccurrenceMatrix {
  std::vector<std::vector<double>> S;
  CooccurVariant variant = CooccurVariant::literal;

  int num_classes() const { return static_cast<int>(S.size()); }
};

struct CooccurOptions {
  bool include_diagonal = false;
  bool laplace = false;  // add one phantom image containing every class
};

inline OccurrenceStats estimate_stats(const std::vector<ImageLabelVector>& labels,
                                      int num_classes, bool laplace = false) {
  if (labels.empty())
    throw std::invalid_argument("estimate_stats: empty label list");
  if (num_classes <= 0)
    throw std::invalid_argument("estimate_stats: num_classes must be positive");

  std::vector<std::int64_t> count(num_classes, 0);
  std::vector<std::vector<std::int64_t>> pair_count(
      num_classes, std::vector<std::int64_t>(num_classes, 0));
  for (const auto& lv : labels) {
    if (static_cast<int>(lv.labels.size()) != num_classes)
      throw std::invalid_argument("estimate_stats: label vector for image " +
                                  lv.image_id + " has length " +
                                  std::to_string(lv.labels.size()));
    for (int i = 0; i < num_classes; ++i) {
      if (lv.labels[i] == 0) continue;
      ++count[i];
      for (int j = 0; j < num_classes; ++j)
        if (lv.labels[j] != 0) ++pair_count[i][j];
    }
  }

  std::int64_t n = static_cast<std::int64_t>(labels.size());
  if (laplace) {
    // one extra image with every class present
    n += 1;
    for (int i = 0; i < num_classes; ++i) {
      ++count[i];
      for (int j = 0; j < num_classes; ++j) ++pair_count[i][j];
    }
  }

  OccurrenceStats stats;
  stats.num_images = n;
  stats.marginal.resize(num_classes);
  stats.joint.assign(num_classes, std::vector<double>(num_classes, 0.0));
  for (int i = 0; i < num_classes; ++i) {
    stats.marginal[i] = static_cast<double>(count[i]) / static_cast<double>(n);
    for (int j = 0; j < num_classes; ++j)
      stats.joint[i][j] =
          static_cast<double>(pair_count[i][j]) / static_cast<double>(n);
  }
  return stats;
}

/// PMI score s_ij = log(p(i,j) / (p(i) p(j))). Degenerate probabilities map
/// to -infinity, which downstream treats as s <= 0.
inline double pmi(const OccurrenceStats& stats, int i, int j) {
  const int c = static_cast<int>(stats.marginal.size());
  if (i < 0 || i >= c || j < 0 || j >= c)
    throw std::out_of_range("pmi: class index outside [0, C)");
  const double pi = stats.marginal[i];
  const double pj = stats.marginal[j];
  const double pij = stats.joint[i][j];
  if (pij <= 0.0 || pi <= 0.0 || pj <= 0.0)
    return -std::numeric_limits<double>::infinity();
  return std::log(pij / (pi * pj));
}

inline CooccurrenceMatrix build_matrix(const OccurrenceStats& stats,
                                       CooccurVariant variant,
                                       bool include_diagonal = false) {
  const int c = static_cast<int>(stats.marginal.size());
  CooccurrenceMatrix m;
  m.variant = variant;
  m.S.assign(c, std::vector<double>(c, 0.0));
  for (int i = 0; i < c; ++i) {
    for (int j = i; j < c; ++j) {
      if (i == j && !include_diagonal) continue;
      const double s = pmi(stats, i, j);
      double value = 0.0;
      if (s > 0.0) {
        value = variant == CooccurVariant::literal ? 1.0 / (1.0 + std::exp(s))
                                                   : 1.0 / (1.0 + std::exp(-s));
      }
      m.S[i][j] = value;
      m.S[j][i] = value;
    }
  }
  return m;
}

inline void save_cooccurrence(const std::string& path,
                              const CooccurrenceMatrix& m) {
  auto out = detail::open_output(path);
  out << json{{"variant", to_string(m.variant)}, {"S", m.S}}.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed for " + path);
}

inline CooccurrenceMatrix load_cooccurrence(const std::string& path) {
  auto in = detail::open_input(path);
  json obj;
  try {
    obj = json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error(path + ": malformed JSON: " + e.what());
  }
  CooccurrenceMatrix m;
  m.variant = cooccur_variant_from_string(obj.at("variant").get<std::string>());
  m.S = obj.at("S").get<std::vector<std::vector<double>>>();
  const std::size_t c = m.S.size();
  for (const auto& row : m.S)
    if (row.size() != c)
      throw std::runtime_error(path + ": S must be a square matrix");
  return m;
}

}  // namespace milrefine
