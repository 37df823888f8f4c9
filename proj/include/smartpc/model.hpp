#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "smartpc/batchnorm.hpp"
#include "smartpc/geometry.hpp"
#include "smartpc/ops.hpp"
#include "smartpc/random.hpp"
#include "smartpc/skeleton.hpp"
#include "smartpc/tape.hpp"

namespace smartpc {

struct ModelConfig {
  std::size_t patches = 32;     // M
  std::size_t neighbors = 16;   // K_nbr
  std::size_t width = 128;      // d
  std::size_t encoder_blocks = 2;
  std::size_t decoder_blocks = 2;
  std::size_t classes = 8;      // K_cls
  std::size_t head_width = 0;   // hidden width of every head; 0 means d / 2
  double dropout = 0.3;
  bool feature_summation = true;
  double bn_momentum = 0.1;
  double bn_epsilon = 1e-5;
  std::uint64_t seed = 0;

  std::size_t hidden() const noexcept { return head_width == 0 ? width / 2 : head_width; }

  void validate() const {
    if (width < 8) throw InvalidArgument("model config: width d must be >= 8");
    if (encoder_blocks < 1 || decoder_blocks < 1) throw InvalidArgument("model config: need >= 1 encoder and decoder block");
    if (classes < 2) throw InvalidArgument("model config: need >= 2 classes");
    if (patches < 1 || neighbors < 1) throw InvalidArgument("model config: patches and neighbors must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw InvalidArgument("model config: dropout must lie in [0, 1)");
    if (hidden() < 1) throw InvalidArgument("model config: head width must be >= 1");
    if (!(bn_momentum >= 0.0 && bn_momentum <= 1.0)) throw InvalidArgument("model config: bn_momentum must lie in [0, 1]");
    if (!(bn_epsilon > 0.0)) throw InvalidArgument("model config: bn_epsilon must be > 0");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"patches", c.patches},         {"neighbors", c.neighbors},
                     {"width", c.width},             {"encoder_blocks", c.encoder_blocks},
                     {"decoder_blocks", c.decoder_blocks}, {"classes", c.classes},
                     {"head_width", c.head_width},   {"dropout", c.dropout},
                     {"feature_summation", c.feature_summation}, {"bn_momentum", c.bn_momentum},
                     {"bn_epsilon", c.bn_epsilon},   {"seed", c.seed}};
}

/// Strict reader: unknown keys are rejected, missing keys keep defaults.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (!j.is_object()) throw InvalidArgument("model config: expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key == "patches") c.patches = value.get<std::size_t>();
    else if (key == "neighbors") c.neighbors = value.get<std::size_t>();
    else if (key == "width") c.width = value.get<std::size_t>();
    else if (key == "encoder_blocks") c.encoder_blocks = value.get<std::size_t>();
    else if (key == "decoder_blocks") c.decoder_blocks = value.get<std::size_t>();
    else if (key == "classes") c.classes = value.get<std::size_t>();
    else if (key == "head_width") c.head_width = value.get<std::size_t>();
    else if (key == "dropout") c.dropout = value.get<double>();
    else if (key == "feature_summation") c.feature_summation = value.get<bool>();
    else if (key == "bn_momentum") c.bn_momentum = value.get<double>();
    else if (key == "bn_epsilon") c.bn_epsilon = value.get<double>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else throw InvalidArgument("model config: unknown key '" + key + "'");
  }
}

template <class T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out) : weight({in, out}), bias({out}) {}

  template <class U>
  Linear<U> cast() const {
    Linear<U> l;
    l.weight = weight.template cast<U>();
    l.bias = bias.template cast<U>();
    return l;
  }
};

/// linear([token || global max]) -> BN -> relu, added back to the token.
template <class T>
struct MixBlock {
  Linear<T> mix;
  BatchNormState<T> bn;

  template <class U>
  MixBlock<U> cast() const {
    return {mix.template cast<U>(), bn.template cast<U>()};
  }
};

enum class TensorRole { weight, bias, bn_gamma, bn_beta, bn_running_mean, bn_running_var };

inline bool is_trainable(TensorRole r) noexcept {
  return r != TensorRole::bn_running_mean && r != TensorRole::bn_running_var;
}

/// Patch embedder, token-mixing encoder and decoder, skeletal heads and a
/// classifier head. Every stage below the heads carries a BatchNorm layer so
/// a statistics-only pass touches every depth.
template <class T>
struct Model {
  ModelConfig config;

  Linear<T> embed_in;      // 3 -> h, per neighbourhood point
  BatchNormState<T> embed_bn;
  Linear<T> embed_out;     // h -> d, then max over the K points
  Linear<T> center_embed;  // 3 -> d, added to each token
  std::vector<MixBlock<T>> encoder;
  std::vector<MixBlock<T>> decoder;
  Linear<T> center_hidden, center_out;  // d -> h -> 3
  Linear<T> radius_hidden, radius_out;  // d -> h -> 1
  Linear<T> cls_hidden;                 // d -> h, per token
  BatchNormState<T> cls_bn;
  Linear<T> cls_out;                    // h -> K_cls
  std::uint64_t dropout_counter = 0;

  /// Visits every named tensor in a fixed order: fn(name, tensor, role).
  template <class F>
  void visit(F&& fn) {
    visit_impl(*this, fn);
  }
  template <class F>
  void visit(F&& fn) const {
    visit_impl(*this, fn);
  }

  /// Every BatchNorm layer with its name, in network order.
  template <class F>
  void visit_batchnorm(F&& fn) {
    visit_bn_impl(*this, fn);
  }
  template <class F>
  void visit_batchnorm(F&& fn) const {
    visit_bn_impl(*this, fn);
  }

  void set_bn_momentum(double momentum) {
    visit_batchnorm([&](const std::string&, BatchNormState<T>& bn) {
      bn.momentum = momentum;
      bn.validate();
    });
  }

  template <class U>
  Model<U> cast() const {
    Model<U> m;
    m.config = config;
    m.embed_in = embed_in.template cast<U>();
    m.embed_bn = embed_bn.template cast<U>();
    m.embed_out = embed_out.template cast<U>();
    m.center_embed = center_embed.template cast<U>();
    for (const auto& b : encoder) m.encoder.push_back(b.template cast<U>());
    for (const auto& b : decoder) m.decoder.push_back(b.template cast<U>());
    m.center_hidden = center_hidden.template cast<U>();
    m.center_out = center_out.template cast<U>();
    m.radius_hidden = radius_hidden.template cast<U>();
    m.radius_out = radius_out.template cast<U>();
    m.cls_hidden = cls_hidden.template cast<U>();
    m.cls_bn = cls_bn.template cast<U>();
    m.cls_out = cls_out.template cast<U>();
    m.dropout_counter = dropout_counter;
    return m;
  }

 private:
  template <class F>
  static void visit_linear(const std::string& name, auto& lin, F& fn) {
    fn(name + ".weight", lin.weight, TensorRole::weight);
    fn(name + ".bias", lin.bias, TensorRole::bias);
  }
  template <class F>
  static void visit_bn(const std::string& name, auto& bn, F& fn) {
    fn(name + ".gamma", bn.gamma, TensorRole::bn_gamma);
    fn(name + ".beta", bn.beta, TensorRole::bn_beta);
    fn(name + ".running_mean", bn.running_mean, TensorRole::bn_running_mean);
    fn(name + ".running_var", bn.running_var, TensorRole::bn_running_var);
  }
  template <class Self, class F>
  static void visit_impl(Self& m, F& fn) {
    visit_linear("embed.in", m.embed_in, fn);
    visit_bn("embed.bn", m.embed_bn, fn);
    visit_linear("embed.out", m.embed_out, fn);
    visit_linear("embed.center", m.center_embed, fn);
    for (std::size_t i = 0; i < m.encoder.size(); ++i) {
      visit_linear("encoder." + std::to_string(i) + ".mix", m.encoder[i].mix, fn);
      visit_bn("encoder." + std::to_string(i) + ".bn", m.encoder[i].bn, fn);
    }
    for (std::size_t i = 0; i < m.decoder.size(); ++i) {
      visit_linear("decoder." + std::to_string(i) + ".mix", m.decoder[i].mix, fn);
      visit_bn("decoder." + std::to_string(i) + ".bn", m.decoder[i].bn, fn);
    }
    visit_linear("skel.center.hidden", m.center_hidden, fn);
    visit_linear("skel.center.out", m.center_out, fn);
    visit_linear("skel.radius.hidden", m.radius_hidden, fn);
    visit_linear("skel.radius.out", m.radius_out, fn);
    visit_linear("cls.hidden", m.cls_hidden, fn);
    visit_bn("cls.bn", m.cls_bn, fn);
    visit_linear("cls.out", m.cls_out, fn);
  }
  template <class Self, class F>
  static void visit_bn_impl(Self& m, F& fn) {
    fn(std::string("embed.bn"), m.embed_bn);
    for (std::size_t i = 0; i < m.encoder.size(); ++i) fn("encoder." + std::to_string(i) + ".bn", m.encoder[i].bn);
    for (std::size_t i = 0; i < m.decoder.size(); ++i) fn("decoder." + std::to_string(i) + ".bn", m.decoder[i].bn);
    fn(std::string("cls.bn"), m.cls_bn);
  }
};

/// Number of trainable scalars (weights, biases, BN gamma and beta).
template <class T>
std::size_t parameter_count(const Model<T>& model) {
  std::size_t n = 0;
  model.visit([&](const std::string&, const Tensor<T>& t, TensorRole role) {
    if (is_trainable(role)) n += t.size();
  });
  return n;
}

namespace detail {

template <class T>
void init_linear(Linear<T>& lin, std::size_t in, std::size_t out, Rng& rng) {
  lin = Linear<T>(in, out);
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : lin.weight.values()) v = static_cast<T>(dist(rng));
  for (auto& v : lin.bias.values()) v = static_cast<T>(dist(rng));
}

}  // namespace detail

/// Fan-in scaled uniform weights U(-1/sqrt(in), 1/sqrt(in)); BN gamma 1,
/// beta 0, running mean 0, running var 1. Deterministic in config.seed.
template <class T = float>
Model<T> model_init(const ModelConfig& config) {
  config.validate();
  Model<T> m;
  m.config = config;
  Rng rng(mix_seed(config.seed, 0x6d6f64656cULL));
  const std::size_t d = config.width;
  const std::size_t h = config.hidden();
  const auto bn = [&](std::size_t c) { return BatchNormState<T>(c, config.bn_momentum, config.bn_epsilon); };
  detail::init_linear(m.embed_in, 3, h, rng);
  m.embed_bn = bn(h);
  detail::init_linear(m.embed_out, h, d, rng);
  detail::init_linear(m.center_embed, 3, d, rng);
  for (std::size_t i = 0; i < config.encoder_blocks; ++i) {
    MixBlock<T> b;
    detail::init_linear(b.mix, 2 * d, d, rng);
    b.bn = bn(d);
    m.encoder.push_back(std::move(b));
  }
  for (std::size_t i = 0; i < config.decoder_blocks; ++i) {
    MixBlock<T> b;
    detail::init_linear(b.mix, 2 * d, d, rng);
    b.bn = bn(d);
    m.decoder.push_back(std::move(b));
  }
  detail::init_linear(m.center_hidden, d, h, rng);
  detail::init_linear(m.center_out, h, 3, rng);
  detail::init_linear(m.radius_hidden, d, h, rng);
  detail::init_linear(m.radius_out, h, 1, rng);
  detail::init_linear(m.cls_hidden, d, h, rng);
  m.cls_bn = bn(h);
  detail::init_linear(m.cls_out, h, config.classes, rng);
  return m;
}

/// Tape leaves for every trainable tensor, in Model::visit order.
template <class T>
struct ParameterVars {
  std::vector<Var> vars;
  std::vector<Tensor<T>*> tensors;

  Var of(const Tensor<T>& t) const {
    for (std::size_t i = 0; i < tensors.size(); ++i)
      if (tensors[i] == &t) return vars[i];
    throw InvalidArgument("ParameterVars: tensor is not a bound parameter");
  }
};

template <class T>
ParameterVars<T> bind_parameters(Tape<T>& tape, Model<T>& model) {
  ParameterVars<T> pv;
  model.visit([&](const std::string&, Tensor<T>& t, TensorRole role) {
    if (!is_trainable(role)) return;
    pv.vars.push_back(tape.parameter(t));
    pv.tensors.push_back(&t);
  });
  return pv;
}

/// Graph nodes produced by one forward pass over a batch of B samples.
/// Token tensors are [B*M, d], sample-major.
struct GraphOutputs {
  Var f_enc, f_dec, f_combined;
  Var centers;  // [B*M, 3], absolute coordinates
  Var radii;    // [B*M, 1]
  Var logits;   // [B, K_cls]
  std::size_t batch = 0;
};

namespace detail {

template <class T>
Var mix_block(Tape<T>& tape, const ParameterVars<T>& pv, MixBlock<T>& block, Var x, std::size_t tokens_per_sample,
              BnMode mode) {
  const Var global = ops::maxpool_groups(tape, x, tokens_per_sample);
  const Var spread = ops::repeat_groups(tape, global, tokens_per_sample);
  const Var joined = ops::concat_cols(tape, x, spread);
  Var h = ops::linear(tape, joined, pv.of(block.mix.weight), pv.of(block.mix.bias));
  h = ops::batchnorm(tape, h, pv.of(block.bn.gamma), pv.of(block.bn.beta), block.bn, mode);
  h = ops::relu(tape, h);
  return ops::add(tape, x, h);
}

}  // namespace detail

/// How much of the graph to build. `statistics` stops after the last
/// BatchNorm layer: centers, radii and logits are left invalid.
enum class GraphScope { full, statistics };

/// Builds the forward graph on `tape`. BN layers follow `mode`; dropout is
/// active only in train mode and advances model.dropout_counter.
template <class T>
GraphOutputs forward_graph(Tape<T>& tape, const ParameterVars<T>& pv, Model<T>& model,
                           std::span<const PatchSet> batch, BnMode mode, GraphScope scope = GraphScope::full) {
  const auto& cfg = model.config;
  const std::size_t b = batch.size();
  const std::size_t m = cfg.patches;
  const std::size_t k = cfg.neighbors;
  if (b == 0) throw InvalidArgument("forward: empty batch");
  for (const auto& ps : batch) {
    if (ps.patches() != m || ps.k != k || ps.offsets.size() != m * k)
      throw InvalidArgument("forward: patch set shape (" + std::to_string(ps.patches()) + " x " +
                            std::to_string(ps.k) + ") does not match config (" + std::to_string(m) + " x " +
                            std::to_string(k) + ")");
  }

  Tensor<T> offsets({b * m * k, 3}, uninitialized);
  Tensor<T> centers({b * m, 3}, uninitialized);
  for (std::size_t s = 0; s < b; ++s) {
    for (std::size_t i = 0; i < m * k; ++i)
      for (std::size_t a = 0; a < 3; ++a) offsets[(s * m * k + i) * 3 + a] = static_cast<T>(batch[s].offsets[i][a]);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t a = 0; a < 3; ++a) centers[(s * m + i) * 3 + a] = static_cast<T>(batch[s].centers[i][a]);
  }
  const Var x_off = tape.constant(std::move(offsets));
  const Var x_ctr = tape.constant(std::move(centers));

  // Patch embedder: shared point MLP, max over each neighbourhood.
  Var e = ops::linear(tape, x_off, pv.of(model.embed_in.weight), pv.of(model.embed_in.bias));
  e = ops::batchnorm(tape, e, pv.of(model.embed_bn.gamma), pv.of(model.embed_bn.beta), model.embed_bn, mode);
  e = ops::relu(tape, e);
  e = ops::linear(tape, e, pv.of(model.embed_out.weight), pv.of(model.embed_out.bias));
  e = ops::maxpool_groups(tape, e, k);
  const Var c_emb = ops::linear(tape, x_ctr, pv.of(model.center_embed.weight), pv.of(model.center_embed.bias));
  Var tokens = ops::add(tape, e, c_emb);

  for (auto& block : model.encoder) tokens = detail::mix_block(tape, pv, block, tokens, m, mode);
  const Var f_enc = tokens;
  for (auto& block : model.decoder) tokens = detail::mix_block(tape, pv, block, tokens, m, mode);
  const Var f_dec = tokens;
  const Var f_comb = cfg.feature_summation ? ops::add(tape, f_enc, f_dec) : f_enc;
  if (scope == GraphScope::statistics) {
    const Var c = ops::linear(tape, f_comb, pv.of(model.cls_hidden.weight), pv.of(model.cls_hidden.bias));
    ops::batchnorm(tape, c, pv.of(model.cls_bn.gamma), pv.of(model.cls_bn.beta), model.cls_bn, mode);
    return {f_enc, f_dec, f_comb, {}, {}, {}, b};
  }

  // Skeletal heads: center offset from the patch center, softplus radius.
  Var sc = ops::linear(tape, f_dec, pv.of(model.center_hidden.weight), pv.of(model.center_hidden.bias));
  sc = ops::relu(tape, sc);
  sc = ops::linear(tape, sc, pv.of(model.center_out.weight), pv.of(model.center_out.bias));
  const Var sphere_centers = ops::add(tape, sc, x_ctr);
  Var sr = ops::linear(tape, f_dec, pv.of(model.radius_hidden.weight), pv.of(model.radius_hidden.bias));
  sr = ops::relu(tape, sr);
  sr = ops::linear(tape, sr, pv.of(model.radius_out.weight), pv.of(model.radius_out.bias));
  const Var radii = ops::softplus(tape, sr);

  // Classifier: per-token hidden layer with BN, global max over the sample's
  // tokens, dropout, output layer.
  Var c = ops::linear(tape, f_comb, pv.of(model.cls_hidden.weight), pv.of(model.cls_hidden.bias));
  c = ops::batchnorm(tape, c, pv.of(model.cls_bn.gamma), pv.of(model.cls_bn.beta), model.cls_bn, mode);
  c = ops::relu(tape, c);
  c = ops::maxpool_groups(tape, c, m);
  if (mode == BnMode::train && cfg.dropout > 0.0) {
    c = ops::dropout(tape, c, cfg.dropout, mix_seed(cfg.seed, 0x64726f70ULL), model.dropout_counter++);
  }
  const Var logits = ops::linear(tape, c, pv.of(model.cls_out.weight), pv.of(model.cls_out.bias));
  return {f_enc, f_dec, f_comb, sphere_centers, radii, logits, b};
}

/// Materialized forward results for a batch.
template <class T>
struct ForwardOutput {
  Tensor<T> f_enc;       // [B*M, d]
  Tensor<T> f_dec;       // [B*M, d]
  Tensor<T> f_combined;  // [B*M, d]
  std::vector<SkeletalCloud> skeletons;  // B clouds of M spheres
  Tensor<T> logits;      // [B, K_cls]
};

template <class T>
std::vector<SkeletalCloud> skeletons_from(const Tensor<T>& centers, const Tensor<T>& radii, std::size_t batch) {
  const std::size_t m = radii.size() / batch;
  std::vector<SkeletalCloud> out(batch);
  for (std::size_t s = 0; s < batch; ++s) {
    out[s].reserve(m);
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t r = s * m + i;
      out[s].push_back({{static_cast<double>(centers[3 * r]), static_cast<double>(centers[3 * r + 1]),
                         static_cast<double>(centers[3 * r + 2])},
                        static_cast<double>(radii[r])});
    }
  }
  return out;
}

/// Gradient-free forward pass. In train and adapt-stats modes the BN running
/// statistics are updated; eval leaves the model untouched.
template <class T>
ForwardOutput<T> forward(Model<T>& model, std::span<const PatchSet> batch, BnMode mode) {
  Tape<T> tape(false);
  const auto pv = bind_parameters(tape, model);
  const auto g = forward_graph(tape, pv, model, batch, mode);
  ForwardOutput<T> out;
  out.f_enc = tape.value(g.f_enc);
  out.f_dec = tape.value(g.f_dec);
  out.f_combined = tape.value(g.f_combined);
  out.skeletons = skeletons_from(tape.value(g.centers), tape.value(g.radii), g.batch);
  out.logits = tape.value(g.logits);
  return out;
}

/// Eval-mode logits only; the model is not modified.
template <class T>
Tensor<T> predict_logits(const Model<T>& model, std::span<const PatchSet> batch) {
  // Eval mode neither writes BN state nor advances the dropout counter.
  auto& mutable_model = const_cast<Model<T>&>(model);
  Tape<T> tape(false);
  const auto pv = bind_parameters(tape, mutable_model);
  const auto g = forward_graph(tape, pv, mutable_model, batch, BnMode::eval);
  return tape.value(g.logits);
}

template <class T>
std::size_t argmax_row(const Tensor<T>& logits, std::size_t row) {
  const std::size_t k = logits.cols();
  std::size_t best = 0;
  for (std::size_t j = 1; j < k; ++j)
    if (logits[row * k + j] > logits[row * k + best]) best = j;
  return best;
}

}  // namespace smartpc
