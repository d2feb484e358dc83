#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "milrefine/core.hpp"
#include "milrefine/rng.hpp"

namespace milrefine {

using Matrix = Eigen::MatrixXd;

struct NetworkConfig {
  int feature_dim = 0;        // D, per-proposal input width
  int model_dim = 64;         // transformer width
  int num_heads = 4;
  int num_encoder_layers = 5;
  int mlp_hidden_dim = 64;
  int ff_hidden_dim = 128;
  int num_classes = 0;        // C
  std::uint64_t seed = 0;

  void validate() const {
    if (feature_dim <= 0) throw std::invalid_argument("config: feature_dim must be positive");
    if (model_dim <= 0) throw std::invalid_argument("config: model_dim must be positive");
    if (num_heads <= 0) throw std::invalid_argument("config: num_heads must be positive");
    if (model_dim % num_heads != 0)
      throw std::invalid_argument("config: model_dim must be divisible by num_heads");
    if (num_encoder_layers < 1)
      throw std::invalid_argument("config: num_encoder_layers must be >= 1");
    if (mlp_hidden_dim <= 0) throw std::invalid_argument("config: mlp_hidden_dim must be positive");
    if (ff_hidden_dim <= 0) throw std::invalid_argument("config: ff_hidden_dim must be positive");
    if (num_classes <= 0) throw std::invalid_argument("config: num_classes must be positive");
  }

  bool operator==(const NetworkConfig&) const = default;
};

// All tensors are stored as double matrices; biases and layer-norm
// gains/biases are 1 x n rows so one visitor can walk every parameter.
struct Affine {
  Matrix weight;  // in x out
  Matrix bias;    // 1 x out
};

struct LayerNormParams {
  Matrix gain;  // 1 x d
  Matrix bias;  // 1 x d
};

struct EncoderLayerParams {
  LayerNormParams norm_attn;
  Affine query, key, value, out;
  LayerNormParams norm_ff;
  Affine ff1, ff2;
};

struct ModelTensors {
  Affine enc1, enc2;  // shared per-proposal MLP encoder
  std::vector<EncoderLayerParams> layers;
  Affine head;
};

struct RefinementModel {
  NetworkConfig config;
  ModelTensors params;
  ModelTensors grads;
};

namespace detail {

template <typename Fn>
void visit_affine(const std::string& name, Affine& a, Fn&& fn) {
  fn(name + ".weight", a.weight);
  fn(name + ".bias", a.bias);
}

template <typename Fn>
void visit_norm(const std::string& name, LayerNormParams& n, Fn&& fn) {
  fn(name + ".gain", n.gain);
  fn(name + ".bias", n.bias);
}

}  // namespace detail

// Walks every tensor in a fixed order; the checkpoint layout, the gradient
// check and the SGD update all rely on this order being stable.
template <typename Fn>
void for_each_tensor(ModelTensors& t, Fn&& fn) {
  detail::visit_affine("encoder.fc1", t.enc1, fn);
  detail::visit_affine("encoder.fc2", t.enc2, fn);
  for (std::size_t l = 0; l < t.layers.size(); ++l) {
    const std::string prefix = "layers." + std::to_string(l);
    auto& layer = t.layers[l];
    detail::visit_norm(prefix + ".norm_attn", layer.norm_attn, fn);
    detail::visit_affine(prefix + ".attn.query", layer.query, fn);
    detail::visit_affine(prefix + ".attn.key", layer.key, fn);
    detail::visit_affine(prefix + ".attn.value", layer.value, fn);
    detail::visit_affine(prefix + ".attn.out", layer.out, fn);
    detail::visit_norm(prefix + ".norm_ff", layer.norm_ff, fn);
    detail::visit_affine(prefix + ".ff1", layer.ff1, fn);
    detail::visit_affine(prefix + ".ff2", layer.ff2, fn);
  }
  detail::visit_affine("head", t.head, fn);
}

template <typename Fn>
void for_each_tensor(const ModelTensors& t, Fn&& fn) {
  for_each_tensor(const_cast<ModelTensors&>(t),
                  [&fn](const std::string& name, Matrix& m) {
                    fn(name, static_cast<const Matrix&>(m));
                  });
}

namespace detail {

constexpr double kLayerNormEps = 1e-5;

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::erf(x * std::numbers::inv_sqrt2));
}

inline double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::inv_sqrt2));
  const double pdf =
      std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

inline Matrix gelu(const Matrix& x) {
  return x.unaryExpr([](double v) { return gelu(v); });
}

inline Matrix affine_forward(const Matrix& x, const Affine& a) {
  return (x * a.weight).rowwise() + a.bias.row(0);
}

// dX = dY W^T, accumulating parameter gradients in place.
inline Matrix affine_backward(const Matrix& x, const Affine& a, Affine& grad,
                              const Matrix& dy) {
  grad.weight.noalias() += x.transpose() * dy;
  grad.bias.row(0) += dy.colwise().sum();
  return dy * a.weight.transpose();
}

struct LayerNormCache {
  Matrix xhat;              // (x - mean) / std, before gain
  Eigen::VectorXd inv_std;  // per row
};

inline Matrix layernorm_forward(const Matrix& x, const LayerNormParams& p,
                                LayerNormCache& cache) {
  const auto n = x.rows();
  const auto d = x.cols();
  cache.xhat.resize(n, d);
  cache.inv_std.resize(n);
  Matrix y(n, d);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    const double inv_std = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.inv_std(r) = inv_std;
    cache.xhat.row(r) = (x.row(r).array() - mean) * inv_std;
    y.row(r) = cache.xhat.row(r).cwiseProduct(p.gain.row(0)) + p.bias.row(0);
  }
  return y;
}

inline Matrix layernorm_backward(const LayerNormParams& p,
                                 LayerNormParams& grad,
                                 const LayerNormCache& cache,
                                 const Matrix& dy) {
  const auto n = dy.rows();
  const auto d = dy.cols();
  Matrix dx(n, d);
  for (Eigen::Index r = 0; r < n; ++r) {
    grad.gain.row(0) += dy.row(r).cwiseProduct(cache.xhat.row(r));
    grad.bias.row(0) += dy.row(r);
    const Eigen::RowVectorXd g = dy.row(r).cwiseProduct(p.gain.row(0));
    const double mean_g = g.mean();
    const double mean_gx = g.cwiseProduct(cache.xhat.row(r)).mean();
    dx.row(r) = cache.inv_std(r) *
                (g.array() - mean_g - cache.xhat.row(r).array() * mean_gx);
  }
  return dx;
}

inline Matrix softmax_rows(const Matrix& scores) {
  Matrix p(scores.rows(), scores.cols());
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    const double m = scores.row(r).maxCoeff();
    Eigen::RowVectorXd e = (scores.row(r).array() - m).exp();
    p.row(r) = e / e.sum();
  }
  return p;
}

// Given dL/dP for P = softmax(S) applied rowwise, returns dL/dS.
inline Matrix softmax_rows_backward(const Matrix& p, const Matrix& dp) {
  Matrix ds(p.rows(), p.cols());
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const double dot = dp.row(r).dot(p.row(r));
    ds.row(r) = (dp.row(r).array() - dot) * p.row(r).array();
  }
  return ds;
}

}  // namespace detail

struct EncoderLayerCache {
  Matrix input;                    // residual stream entering the layer
  detail::LayerNormCache ln_attn;
  Matrix normed_attn;              // after norm_attn
  Matrix q, k, v;                  // N x d projections
  std::vector<Matrix> attn;        // per head, N x N softmax weights
  Matrix concat_heads;             // N x d, pre output projection
  Matrix after_attn;               // input + attention output
  detail::LayerNormCache ln_ff;
  Matrix normed_ff;
  Matrix ff_pre;                   // before the feed-forward nonlinearity
  Matrix ff_act;
};

/// Per-bag forward results plus everything the backward pass needs.
struct BagActivations {
  Matrix logits;  // N x C
  Matrix probs;   // sigmoid(logits)

  Matrix input;      // N x D bag features
  Matrix mlp_pre;    // encoder fc1 output before the nonlinearity
  Matrix mlp_act;
  Matrix encoded;    // encoder fc2 output, enters the transformer stack
  std::vector<EncoderLayerCache> layers;
  Matrix final_state;  // residual stream entering the head
};

inline RefinementModel init_model(const NetworkConfig& config) {
  config.validate();
  RefinementModel model;
  model.config = config;

  auto shape = [](ModelTensors& t, const NetworkConfig& c) {
    t.enc1.weight.setZero(c.feature_dim, c.mlp_hidden_dim);
    t.enc1.bias.setZero(1, c.mlp_hidden_dim);
    t.enc2.weight.setZero(c.mlp_hidden_dim, c.model_dim);
    t.enc2.bias.setZero(1, c.model_dim);
    t.layers.resize(c.num_encoder_layers);
    for (auto& layer : t.layers) {
      layer.norm_attn.gain.setZero(1, c.model_dim);
      layer.norm_attn.bias.setZero(1, c.model_dim);
      for (Affine* a : {&layer.query, &layer.key, &layer.value, &layer.out}) {
        a->weight.setZero(c.model_dim, c.model_dim);
        a->bias.setZero(1, c.model_dim);
      }
      layer.norm_ff.gain.setZero(1, c.model_dim);
      layer.norm_ff.bias.setZero(1, c.model_dim);
      layer.ff1.weight.setZero(c.model_dim, c.ff_hidden_dim);
      layer.ff1.bias.setZero(1, c.ff_hidden_dim);
      layer.ff2.weight.setZero(c.ff_hidden_dim, c.model_dim);
      layer.ff2.bias.setZero(1, c.model_dim);
    }
    t.head.weight.setZero(c.model_dim, c.num_classes);
    t.head.bias.setZero(1, c.num_classes);
  };
  shape(model.params, config);
  shape(model.grads, config);

  // Glorot-uniform weights, zero biases, unit layer-norm gains. Tensors are
  // filled in visitor order so a given seed always produces the same bytes.
  Rng rng(config.seed);
  for_each_tensor(model.params, [&rng](const std::string& name, Matrix& m) {
    if (name.ends_with(".gain")) {
      m.setOnes();
    } else if (name.ends_with(".bias")) {
      m.setZero();
    } else {
      const double limit = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
      for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c)
          m(r, c) = rng.uniform(-limit, limit);
    }
  });
  return model;
}

inline void zero_gradients(RefinementModel& model) {
  for_each_tensor(model.grads,
                  [](const std::string&, Matrix& m) { m.setZero(); });
}

/// Runs the refinement network on one bag of N proposal features (N x D):
/// shared MLP encoder per instance, then pre-norm transformer encoder layers
/// with full self-attention across the bag (no positional encoding), then a
/// per-instance affine head producing C logits and sigmoid probabilities.
inline BagActivations forward(const RefinementModel& model, const Matrix& bag) {
  const auto& cfg = model.config;
  if (bag.rows() == 0)
    throw std::invalid_argument("forward: empty bag (caller must skip images with no proposals)");
  if (bag.cols() != cfg.feature_dim)
    throw std::invalid_argument("forward: bag feature width " +
                                std::to_string(bag.cols()) +
                                " does not match feature_dim " +
                                std::to_string(cfg.feature_dim));
  if (!bag.allFinite())
    throw std::invalid_argument("forward: bag features must be finite");

  const auto& p = model.params;
  const int heads = cfg.num_heads;
  const int head_dim = cfg.model_dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  BagActivations acts;
  acts.input = bag;
  acts.mlp_pre = detail::affine_forward(bag, p.enc1);
  acts.mlp_act = detail::gelu(acts.mlp_pre);
  acts.encoded = detail::affine_forward(acts.mlp_act, p.enc2);

  Matrix state = acts.encoded;
  acts.layers.resize(p.layers.size());
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& layer = p.layers[l];
    auto& cache = acts.layers[l];
    cache.input = state;

    cache.normed_attn = detail::layernorm_forward(state, layer.norm_attn, cache.ln_attn);
    cache.q = detail::affine_forward(cache.normed_attn, layer.query);
    cache.k = detail::affine_forward(cache.normed_attn, layer.key);
    cache.v = detail::affine_forward(cache.normed_attn, layer.value);

    cache.attn.resize(heads);
    cache.concat_heads.resize(state.rows(), cfg.model_dim);
    for (int h = 0; h < heads; ++h) {
      const auto qh = cache.q.middleCols(h * head_dim, head_dim);
      const auto kh = cache.k.middleCols(h * head_dim, head_dim);
      const auto vh = cache.v.middleCols(h * head_dim, head_dim);
      cache.attn[h] = detail::softmax_rows(qh * kh.transpose() * scale);
      cache.concat_heads.middleCols(h * head_dim, head_dim) = cache.attn[h] * vh;
    }
    cache.after_attn =
        state + detail::affine_forward(cache.concat_heads, layer.out);

    cache.normed_ff =
        detail::layernorm_forward(cache.after_attn, layer.norm_ff, cache.ln_ff);
    cache.ff_pre = detail::affine_forward(cache.normed_ff, layer.ff1);
    cache.ff_act = detail::gelu(cache.ff_pre);
    state = cache.after_attn + detail::affine_forward(cache.ff_act, layer.ff2);
  }

  acts.final_state = state;
  acts.logits = detail::affine_forward(state, p.head);
  acts.probs = acts.logits.unaryExpr(
      [](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  return acts;
}

/// Reverse-mode pass. upstream_grad is dLoss/dProbabilities (N x C, matching
/// forward's output); parameter gradients accumulate into model.grads.
inline void backward(RefinementModel& model, const BagActivations& acts,
                     const Matrix& upstream_grad) {
  const auto& cfg = model.config;
  if (upstream_grad.rows() != acts.probs.rows() ||
      upstream_grad.cols() != acts.probs.cols())
    throw std::invalid_argument("backward: upstream gradient shape mismatch");
  if (!upstream_grad.allFinite())
    throw std::invalid_argument("backward: upstream gradient must be finite");

  const auto& p = model.params;
  auto& g = model.grads;
  const int heads = cfg.num_heads;
  const int head_dim = cfg.model_dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  // through the sigmoid, then the head
  const Matrix dlogits = upstream_grad.array() * acts.probs.array() *
                         (1.0 - acts.probs.array());
  Matrix dstate =
      detail::affine_backward(acts.final_state, p.head, g.head, dlogits);

  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const auto& layer = p.layers[li];
    auto& grad = g.layers[li];
    const auto& cache = acts.layers[li];

    // feed-forward block: out = after_attn + ff2(gelu(ff1(LN(after_attn))))
    Matrix d_ff_act =
        detail::affine_backward(cache.ff_act, layer.ff2, grad.ff2, dstate);
    Matrix d_ff_pre =
        d_ff_act.array() *
        cache.ff_pre.unaryExpr([](double v) { return detail::gelu_derivative(v); }).array();
    Matrix d_normed_ff =
        detail::affine_backward(cache.normed_ff, layer.ff1, grad.ff1, d_ff_pre);
    Matrix d_after_attn =
        dstate + detail::layernorm_backward(layer.norm_ff, grad.norm_ff,
                                            cache.ln_ff, d_normed_ff);

    // attention block: after_attn = input + Wo(concat_h softmax(QK^T/s) V_h)
    Matrix d_concat = detail::affine_backward(cache.concat_heads, layer.out,
                                              grad.out, d_after_attn);
    Matrix dq(cache.q.rows(), cache.q.cols());
    Matrix dk(cache.k.rows(), cache.k.cols());
    Matrix dv(cache.v.rows(), cache.v.cols());
    for (int h = 0; h < heads; ++h) {
      const auto qh = cache.q.middleCols(h * head_dim, head_dim);
      const auto kh = cache.k.middleCols(h * head_dim, head_dim);
      const auto vh = cache.v.middleCols(h * head_dim, head_dim);
      const auto d_oh = d_concat.middleCols(h * head_dim, head_dim);
      const Matrix d_attn = d_oh * vh.transpose();
      dv.middleCols(h * head_dim, head_dim) = cache.attn[h].transpose() * d_oh;
      const Matrix d_scores = detail::softmax_rows_backward(cache.attn[h], d_attn);
      dq.middleCols(h * head_dim, head_dim) = d_scores * kh * scale;
      dk.middleCols(h * head_dim, head_dim) = d_scores.transpose() * qh * scale;
    }
    Matrix d_normed_attn =
        detail::affine_backward(cache.normed_attn, layer.query, grad.query, dq);
    d_normed_attn +=
        detail::affine_backward(cache.normed_attn, layer.key, grad.key, dk);
    d_normed_attn +=
        detail::affine_backward(cache.normed_attn, layer.value, grad.value, dv);
    dstate = d_after_attn +
             detail::layernorm_backward(layer.norm_attn, grad.norm_attn,
                                        cache.ln_attn, d_normed_attn);
  }

  // shared MLP encoder
  Matrix d_mlp_act =
      detail::affine_backward(acts.mlp_act, p.enc2, g.enc2, dstate);
  Matrix d_mlp_pre =
      d_mlp_act.array() *
      acts.mlp_pre.unaryExpr([](double v) { return detail::gelu_derivative(v); }).array();
  detail::affine_backward(acts.input, p.enc1, g.enc1, d_mlp_pre);
}

/// Stacks the proposal features of one image into the N x D bag matrix.
inline Matrix bag_features(const ImageDetections& image) {
  if (image.proposals.empty()) return Matrix(0, 0);
  const auto d = static_cast<Eigen::Index>(image.proposals[0].feature.size());
  Matrix bag(static_cast<Eigen::Index>(image.proposals.size()), d);
  for (Eigen::Index i = 0; i < bag.rows(); ++i) {
    const auto& f = image.proposals[static_cast<std::size_t>(i)].feature;
    if (static_cast<Eigen::Index>(f.size()) != d)
      throw std::invalid_argument("image " + image.image_id +
                                  ": inconsistent feature lengths");
    for (Eigen::Index j = 0; j < d; ++j) bag(i, j) = f[static_cast<std::size_t>(j)];
  }
  return bag;
}

// --- Checkpoint file: one-line JSON header (config, version, tensor
// directory with byte offsets) followed by little-endian float64 data.

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

constexpr int kCheckpointVersion = 1;
constexpr const char* kCheckpointFormat = "milrefine-checkpoint";

inline json config_to_json(const NetworkConfig& c) {
  return json{{"feature_dim", c.feature_dim},
              {"model_dim", c.model_dim},
              {"num_heads", c.num_heads},
              {"num_encoder_layers", c.num_encoder_layers},
              {"mlp_hidden_dim", c.mlp_hidden_dim},
              {"ff_hidden_dim", c.ff_hidden_dim},
              {"num_classes", c.num_classes},
              {"seed", c.seed}};
}

inline NetworkConfig config_from_json(const json& obj) {
  NetworkConfig c;
  c.feature_dim = obj.at("feature_dim").get<int>();
  c.model_dim = obj.at("model_dim").get<int>();
  c.num_heads = obj.at("num_heads").get<int>();
  c.num_encoder_layers = obj.at("num_encoder_layers").get<int>();
  c.mlp_hidden_dim = obj.at("mlp_hidden_dim").get<int>();
  c.ff_hidden_dim = obj.at("ff_hidden_dim").get<int>();
  c.num_classes = obj.at("num_classes").get<int>();
  c.seed = obj.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace detail

inline void save_checkpoint(const RefinementModel& model,
                            const std::string& path) {
  json directory = json::array();
  std::uint64_t offset = 0;
  for_each_tensor(model.params, [&](const std::string& name, const Matrix& m) {
    directory.push_back(json{{"name", name},
                             {"rows", m.rows()},
                             {"cols", m.cols()},
                             {"offset", offset}});
    offset += static_cast<std::uint64_t>(m.size()) * sizeof(double);
  });
  const json header{{"format", detail::kCheckpointFormat},
                    {"version", detail::kCheckpointVersion},
                    {"config", detail::config_to_json(model.config)},
                    {"tensors", std::move(directory)}};

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << header << '\n';
  for_each_tensor(model.params, [&](const std::string&, const Matrix& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        const double v = m(r, c);
        out.write(reinterpret_cast<const char*>(&v), sizeof(double));
      }
  });
  if (!out) throw std::runtime_error("write failed for " + path);
}

inline RefinementModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path + " for reading");
  std::string header_line;
  if (!std::getline(in, header_line))
    throw std::runtime_error(path + ": missing checkpoint header");
  json header;
  try {
    header = json::parse(header_line);
  } catch (const json::exception& e) {
    throw std::runtime_error(path + ": malformed header: " + e.what());
  }
  if (header.value("format", std::string{}) != detail::kCheckpointFormat)
    throw std::runtime_error(path + ": not a milrefine checkpoint");
  if (header.at("version").get<int>() != detail::kCheckpointVersion)
    throw std::runtime_error(path + ": unsupported checkpoint version " +
                             std::to_string(header.at("version").get<int>()));

  RefinementModel model = init_model(detail::config_from_json(header.at("config")));
  const json& directory = header.at("tensors");
  std::size_t index = 0;
  for_each_tensor(model.params, [&](const std::string& name, Matrix& m) {
    if (index >= directory.size())
      throw std::runtime_error(path + ": tensor directory too short");
    const json& entry = directory[index++];
    if (entry.at("name").get<std::string>() != name ||
        entry.at("rows").get<Eigen::Index>() != m.rows() ||
        entry.at("cols").get<Eigen::Index>() != m.cols())
      throw std::runtime_error(
          path + ": tensor " + name +
          " does not match the header config (check num_classes, feature_dim "
          "and the architecture fields)");
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        double v = 0.0;
        in.read(reinterpret_cast<char*>(&v), sizeof(double));
        m(r, c) = v;
      }
  });
  if (index != directory.size())
    throw std::runtime_error(path + ": tensor directory has extra entries");
  if (!in) throw std::runtime_error(path + ": truncated tensor data");
  zero_gradients(model);
  return model;
}

}  // namespace milrefine
