#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "milrefine/cooccur.hpp"
#include "milrefine/core.hpp"
#include "milrefine/net.hpp"
#include "milrefine/rng.hpp"

namespace milrefine {

struct TrainConfig {
  double alpha = 1e-4;       // co-occurrence loss weight
  double base_lr = 5e-3;
  int epochs = 50;
  std::uint64_t seed = 0;
  CooccurVariant s_variant = CooccurVariant::literal;
  double clamp_eps = 1e-7;   // probability clamp before log terms
  double momentum = 0.0;
  bool cosine_per_epoch = false;  // default: schedule stepped per iteration

  void validate() const {
    if (alpha < 0.0) throw std::invalid_argument("train config: alpha must be >= 0");
    if (!(base_lr > 0.0)) throw std::invalid_argument("train config: base_lr must be > 0");
    if (epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
    if (!(clamp_eps > 0.0 && clamp_eps < 0.5))
      throw std::invalid_argument("train config: clamp_eps must be in (0, 0.5)");
    if (momentum < 0.0 || momentum >= 1.0)
      throw std::invalid_argument("train config: momentum must be in [0, 1)");
  }
};

/// Bag-level probability per class plus which instance attained each max.
struct BagProbability {
  std::vector<double> p;
  std::vector<int> argmax_instance;
};

/// Max-pooling over instances; ties resolve to the lowest instance index, and
/// the loss gradient later routes only to the recorded argmax per class.
inline BagProbability aggregate_maxpool(const BagActivations& acts) {
  const auto n = acts.probs.rows();
  const auto c = acts.probs.cols();
  if (n == 0) throw std::invalid_argument("aggregate_maxpool: empty bag");
  BagProbability bag;
  bag.p.resize(static_cast<std::size_t>(c));
  bag.argmax_instance.resize(static_cast<std::size_t>(c));
  for (Eigen::Index k = 0; k < c; ++k) {
    int best = 0;
    double best_p = acts.probs(0, k);
    for (Eigen::Index j = 1; j < n; ++j) {
      if (acts.probs(j, k) > best_p) {
        best_p = acts.probs(j, k);
        best = static_cast<int>(j);
      }
    }
    bag.p[static_cast<std::size_t>(k)] = best_p;
    bag.argmax_instance[static_cast<std::size_t>(k)] = best;
  }
  return bag;
}

struct LossValue {
  double value = 0.0;
  std::vector<double> grad;  // d loss / d bag probability, length C
};

/// Multi-label binary cross-entropy against the bag probabilities, summed
/// over classes. Probabilities are clamped into [eps, 1-eps] before the logs;
/// the gradient is zero where the clamp is active.
inline LossValue bce_loss(const BagProbability& bag,
                          const ImageLabelVector& label, double clamp_eps) {
  const std::size_t c = bag.p.size();
  if (label.labels.size() != c)
    throw std::invalid_argument("bce_loss: label length " +
                                std::to_string(label.labels.size()) +
                                " does not match " + std::to_string(c) +
                                " classes");
  LossValue out;
  out.grad.assign(c, 0.0);
  for (std::size_t k = 0; k < c; ++k) {
    const double y = static_cast<double>(label.labels[k]);
    const double raw = bag.p[k];
    const double p = std::clamp(raw, clamp_eps, 1.0 - clamp_eps);
    out.value -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
    if (raw >= clamp_eps && raw <= 1.0 - clamp_eps)
      out.grad[k] = -y / p + (1.0 - y) / (1.0 - p);
  }
  return out;
}

/// Co-occurrence loss -p^T S p over the bag probability vector; with S
/// symmetric the gradient is -2 S p.
inline LossValue cooccurrence_loss(const BagProbability& bag,
                                   const CooccurrenceMatrix& matrix) {
  const std::size_t c = bag.p.size();
  if (matrix.S.size() != c)
    throw std::invalid_argument("cooccurrence_loss: S is " +
                                std::to_string(matrix.S.size()) + "x" +
                                std::to_string(matrix.S.size()) + " but bag has " +
                                std::to_string(c) + " classes");
  LossValue out;
  out.grad.assign(c, 0.0);
  for (std::size_t i = 0; i < c; ++i) {
    if (matrix.S[i].size() != c)
      throw std::invalid_argument("cooccurrence_loss: S is not square");
    double row = 0.0;
    for (std::size_t j = 0; j < c; ++j) row += matrix.S[i][j] * bag.p[j];
    out.value -= bag.p[i] * row;
    out.grad[i] = -2.0 * row;
  }
  return out;
}

struct TotalLoss {
  double total = 0.0;
  double bce = 0.0;
  double co = 0.0;
  std::vector<double> grad;  // d total / d bag probability
};

/// L = L_ce + alpha * L_co. With alpha == 0 the co-occurrence term is skipped
/// entirely so the trajectory is bit-identical to a BCE-only build.
inline TotalLoss total_loss(const BagProbability& bag,
                            const ImageLabelVector& label,
                            const CooccurrenceMatrix& matrix, double alpha,
                            double clamp_eps) {
  TotalLoss out;
  LossValue ce = bce_loss(bag, label, clamp_eps);
  out.bce = ce.value;
  out.grad = std::move(ce.grad);
  if (alpha != 0.0) {
    const LossValue co = cooccurrence_loss(bag, matrix);
    out.co = co.value;
    for (std::size_t k = 0; k < out.grad.size(); ++k)
      out.grad[k] += alpha * co.grad[k];
  }
  out.total = out.bce + alpha * out.co;
  return out;
}

/// Half-cosine decay from base_lr toward zero over total_steps.
inline double cosine_lr(std::int64_t step, std::int64_t total_steps,
                        double base_lr) {
  if (total_steps <= 0)
    throw std::invalid_argument("cosine_lr: total_steps must be positive");
  if (step < 0 || step >= total_steps)
    throw std::invalid_argument("cosine_lr: step " + std::to_string(step) +
                                " outside [0, " + std::to_string(total_steps) + ")");
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

struct EpochStats {
  int epoch = 0;  // 1-based
  double mean_loss = 0.0;
  double mean_bce = 0.0;
  double mean_co = 0.0;
  double lr = 0.0;  // learning rate at the first step of the epoch
};

struct TrainLog {
  std::vector<EpochStats> epochs;
  std::int64_t steps = 0;
  std::int64_t skipped_empty_bags = 0;
};

using WeakSample = std::pair<ImageDetections, ImageLabelVector>;

/// Joins detections and labels by image_id, preserving detection file order.
inline std::vector<WeakSample> join_weak_set(
    const std::vector<ImageDetections>& detections,
    const std::vector<ImageLabelVector>& labels) {
  std::unordered_map<std::string, const ImageLabelVector*> by_id;
  for (const auto& lv : labels) by_id.emplace(lv.image_id, &lv);
  std::vector<WeakSample> out;
  out.reserve(detections.size());
  for (const auto& det : detections) {
    const auto it = by_id.find(det.image_id);
    if (it == by_id.end())
      throw std::invalid_argument("no image-level label for image " + det.image_id);
    out.emplace_back(det, *it->second);
  }
  return out;
}

namespace detail {

inline std::vector<Matrix*> tensor_pointers(ModelTensors& t) {
  std::vector<Matrix*> out;
  for_each_tensor(t, [&out](const std::string&, Matrix& m) { out.push_back(&m); });
  return out;
}

inline void sgd_step(RefinementModel& model, ModelTensors* velocity, double lr,
                     double momentum) {
  const auto grads = tensor_pointers(model.grads);
  std::size_t i = 0;
  if (momentum == 0.0) {
    for_each_tensor(model.params, [&](const std::string&, Matrix& m) {
      m -= lr * (*grads[i++]);
    });
    return;
  }
  const auto vel = tensor_pointers(*velocity);
  for_each_tensor(model.params, [&](const std::string&, Matrix& m) {
    *vel[i] = momentum * (*vel[i]) + (*grads[i]);
    m -= lr * (*vel[i]);
    ++i;
  });
}

}  // namespace detail

/// MIL training loop: one image bag per SGD step, bags visited in a
/// seed-determined shuffled order each epoch. Single-threaded by contract so
/// a given (data, config, seed) triple always yields the same parameters.
inline TrainLog train(RefinementModel& model,
                      const std::vector<WeakSample>& weak_set,
                      const CooccurrenceMatrix& matrix,
                      const TrainConfig& config) {
  config.validate();
  if (static_cast<int>(matrix.S.size()) != model.config.num_classes &&
      config.alpha != 0.0)
    throw std::invalid_argument("train: co-occurrence matrix size does not match num_classes");

  TrainLog log;
  std::vector<std::size_t> bags;
  for (std::size_t i = 0; i < weak_set.size(); ++i) {
    const auto& [det, label] = weak_set[i];
    if (static_cast<int>(label.labels.size()) != model.config.num_classes)
      throw std::invalid_argument("train: label length mismatch for image " +
                                  label.image_id);
    if (det.proposals.empty()) {
      ++log.skipped_empty_bags;
      continue;
    }
    bags.push_back(i);
  }
  if (bags.empty())
    throw std::invalid_argument("train: every image has an empty proposal set");

  // Bag matrices are fixed across epochs; assemble once.
  std::vector<Matrix> features;
  features.reserve(bags.size());
  for (std::size_t i : bags) features.push_back(bag_features(weak_set[i].first));

  const std::int64_t steps_per_epoch = static_cast<std::int64_t>(bags.size());
  const std::int64_t total_steps =
      config.cosine_per_epoch ? config.epochs
                              : steps_per_epoch * config.epochs;

  ModelTensors velocity;
  if (config.momentum != 0.0) {
    velocity = model.grads;  // same shapes
    for_each_tensor(velocity, [](const std::string&, Matrix& m) { m.setZero(); });
  }

  Rng shuffler(config.seed);
  std::vector<std::size_t> order(bags.size());
  std::int64_t step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffler.shuffle(order);

    EpochStats stats;
    stats.epoch = epoch + 1;
    stats.lr = config.cosine_per_epoch
                   ? cosine_lr(epoch, total_steps, config.base_lr)
                   : cosine_lr(step, total_steps, config.base_lr);
    double sum_loss = 0.0, sum_bce = 0.0, sum_co = 0.0;

    for (std::size_t pos = 0; pos < order.size(); ++pos) {
      const std::size_t b = order[pos];
      const auto& label = weak_set[bags[b]].second;
      const BagActivations acts = forward(model, features[b]);
      const BagProbability bag = aggregate_maxpool(acts);
      const TotalLoss loss =
          total_loss(bag, label, matrix, config.alpha, config.clamp_eps);
      if (!std::isfinite(loss.total))
        throw std::runtime_error("train: non-finite loss at epoch " +
                                 std::to_string(epoch + 1) + ", image " +
                                 weak_set[bags[b]].first.image_id);

      // route the bag-probability gradient to each class's argmax instance
      Matrix upstream = Matrix::Zero(acts.probs.rows(), acts.probs.cols());
      for (Eigen::Index k = 0; k < acts.probs.cols(); ++k)
        upstream(bag.argmax_instance[static_cast<std::size_t>(k)], k) =
            loss.grad[static_cast<std::size_t>(k)];

      zero_gradients(model);
      backward(model, acts, upstream);
      const double lr = config.cosine_per_epoch
                            ? cosine_lr(epoch, total_steps, config.base_lr)
                            : cosine_lr(step, total_steps, config.base_lr);
      detail::sgd_step(model, &velocity, lr, config.momentum);

      sum_loss += loss.total;
      sum_bce += loss.bce;
      sum_co += loss.co;
      ++step;
    }

    const double n = static_cast<double>(order.size());
    stats.mean_loss = sum_loss / n;
    stats.mean_bce = sum_bce / n;
    stats.mean_co = sum_co / n;
    log.epochs.push_back(stats);
  }
  log.steps = step;

  for_each_tensor(model.params, [](const std::string& name, Matrix& m) {
    if (!m.allFinite())
      throw std::runtime_error("train: non-finite parameter tensor " + name +
                               " after training");
  });
  return log;
}

inline void save_loss_log(const std::string& path, const TrainLog& log) {
  auto out = detail::open_output(path);
  out << "epoch,mean_loss,mean_bce,mean_co,lr\n";
  for (const auto& e : log.epochs)
    out << e.epoch << ',' << detail::format_double(e.mean_loss) << ','
        << detail::format_double(e.mean_bce) << ','
        << detail::format_double(e.mean_co) << ','
        << detail::format_double(e.lr) << '\n';
  if (!out) throw std::runtime_error("write failed for " + path);
}

}  // namespace milrefine
