#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "milrefine/cooccur.hpp"
#include "milrefine/net.hpp"
#include "milrefine/rng.hpp"
#include "milrefine/trainer.hpp"

namespace milrefine {

/// Scalar training objective for one bag, evaluated through the public
/// forward path only: forward -> max-pool -> BCE + alpha * co-occurrence.
inline double bag_loss(const RefinementModel& model, const Matrix& bag,
                       const ImageLabelVector& label,
                       const CooccurrenceMatrix& matrix, double alpha,
                       double clamp_eps = 1e-7) {
  const BagActivations acts = forward(model, bag);
  const BagProbability pooled = aggregate_maxpool(acts);
  return total_loss(pooled, label, matrix, alpha, clamp_eps).total;
}

/// Analytic gradient of the same objective via the reverse-mode pass.
inline void bag_loss_backward(RefinementModel& model, const Matrix& bag,
                              const ImageLabelVector& label,
                              const CooccurrenceMatrix& matrix, double alpha,
                              double clamp_eps = 1e-7) {
  const BagActivations acts = forward(model, bag);
  const BagProbability pooled = aggregate_maxpool(acts);
  const TotalLoss loss = total_loss(pooled, label, matrix, alpha, clamp_eps);
  Matrix upstream = Matrix::Zero(acts.probs.rows(), acts.probs.cols());
  for (Eigen::Index k = 0; k < acts.probs.cols(); ++k)
    upstream(pooled.argmax_instance[static_cast<std::size_t>(k)], k) =
        loss.grad[static_cast<std::size_t>(k)];
  backward(model, acts, upstream);
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::int64_t parameters_checked = 0;
  std::int64_t failures = 0;
};

struct GradCheckSettings {
  double rel_tolerance = 1e-4;
  double abs_tolerance = 1e-6;  // applied when both gradients are near zero
};

/// Central finite differences of bag_loss against the analytic gradients,
/// parameter by parameter. The numeric side only ever calls forward, which
/// keeps it an independent oracle for backward.
inline GradCheckResult check_gradients(RefinementModel& model, const Matrix& bag,
                                       const ImageLabelVector& label,
                                       const CooccurrenceMatrix& matrix,
                                       double alpha,
                                       const GradCheckSettings& settings = {}) {
  zero_gradients(model);
  bag_loss_backward(model, bag, label, matrix, alpha);

  GradCheckResult result;
  const auto grads = detail::tensor_pointers(model.grads);
  std::size_t tensor_index = 0;
  for_each_tensor(model.params, [&](const std::string& name, Matrix& m) {
    const Matrix& analytic = *grads[tensor_index++];
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        const double saved = m(r, c);
        const double h = 1e-5 * std::max(1.0, std::abs(saved));
        m(r, c) = saved + h;
        const double up = bag_loss(model, bag, label, matrix, alpha);
        m(r, c) = saved - h;
        const double down = bag_loss(model, bag, label, matrix, alpha);
        m(r, c) = saved;
        const double numeric = (up - down) / (2.0 * h);
        const double exact = analytic(r, c);

        ++result.parameters_checked;
        const double scale = std::max(std::abs(numeric), std::abs(exact));
        const double abs_err = std::abs(numeric - exact);
        const double rel_err = scale > 0.0 ? abs_err / scale : 0.0;
        const bool ok = abs_err <= settings.abs_tolerance ||
                        rel_err <= settings.rel_tolerance;
        if (!ok) ++result.failures;
        const double reported = abs_err <= settings.abs_tolerance ? 0.0 : rel_err;
        if (reported > result.max_rel_error) {
          result.max_rel_error = reported;
          result.worst_tensor = name;
        }
      }
    }
  });
  return result;
}

/// Random small configuration sweep used by both the acceptance suite and
/// the gradcheck CLI command. Each case draws a config, a bag, a label and a
/// valid co-occurrence matrix from the given seed.
inline GradCheckResult random_gradient_sweep(std::uint64_t seed, int num_cases,
                                             const GradCheckSettings& settings = {}) {
  GradCheckResult overall;
  Rng rng(seed);
  for (int case_idx = 0; case_idx < num_cases; ++case_idx) {
    NetworkConfig cfg;
    cfg.feature_dim = 2 + static_cast<int>(rng.below(7));   // <= 8
    cfg.num_classes = 2 + static_cast<int>(rng.below(3));   // <= 4
    cfg.num_heads = 1 + static_cast<int>(rng.below(2));     // 1 or 2
    cfg.model_dim = cfg.num_heads * (2 + static_cast<int>(rng.below(7)));  // <= 16
    cfg.num_encoder_layers = 1 + static_cast<int>(rng.below(2));  // <= 2
    cfg.mlp_hidden_dim = 2 + static_cast<int>(rng.below(7));
    cfg.ff_hidden_dim = 2 + static_cast<int>(rng.below(15));
    cfg.seed = rng.next_u64();
    RefinementModel model = init_model(cfg);

    const int n = 1 + static_cast<int>(rng.below(5));  // <= 5 instances
    Matrix bag(n, cfg.feature_dim);
    for (Eigen::Index r = 0; r < bag.rows(); ++r)
      for (Eigen::Index c = 0; c < bag.cols(); ++c)
        bag(r, c) = rng.normal(0.0, 1.0);

    ImageLabelVector label;
    label.image_id = "gradcheck_" + std::to_string(case_idx);
    label.labels.resize(static_cast<std::size_t>(cfg.num_classes));
    for (auto& v : label.labels) v = rng.bernoulli(0.5) ? 1 : 0;

    CooccurrenceMatrix matrix;
    matrix.variant = CooccurVariant::literal;
    matrix.S.assign(static_cast<std::size_t>(cfg.num_classes),
                    std::vector<double>(static_cast<std::size_t>(cfg.num_classes), 0.0));
    for (int i = 0; i < cfg.num_classes; ++i)
      for (int j = i + 1; j < cfg.num_classes; ++j) {
        const double v = rng.bernoulli(0.5) ? rng.uniform(0.0, 0.5) : 0.0;
        matrix.S[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = v;
        matrix.S[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] = v;
      }

    const double alpha = 0.05;
    const GradCheckResult r = check_gradients(model, bag, label, matrix, alpha, settings);
    overall.parameters_checked += r.parameters_checked;
    overall.failures += r.failures;
    if (r.max_rel_error > overall.max_rel_error) {
      overall.max_rel_error = r.max_rel_error;
      overall.worst_tensor = "case " + std::to_string(case_idx) + ": " + r.worst_tensor;
    }
  }
  return overall;
}

}  // namespace milrefine
