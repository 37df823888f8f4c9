#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "smartpc/errors.hpp"
#include "smartpc/losses.hpp"
#include "smartpc/model.hpp"
#include "smartpc/random.hpp"

namespace smartpc {

enum class AdaptMode { online_bn, online_bp, standard };
enum class Augmentation { rotation, hflip, translation, none };

inline std::string to_string(AdaptMode m) {
  switch (m) {
    case AdaptMode::online_bn: return "online-bn";
    case AdaptMode::online_bp: return "online-bp";
    case AdaptMode::standard: return "standard";
  }
  return "?";
}

inline AdaptMode parse_adapt_mode(std::string_view s) {
  if (s == "online-bn") return AdaptMode::online_bn;
  if (s == "online-bp") return AdaptMode::online_bp;
  if (s == "standard") return AdaptMode::standard;
  throw InvalidArgument("unknown adaptation mode '" + std::string(s) + "' (online-bn, online-bp, standard)");
}

inline std::string to_string(Augmentation a) {
  switch (a) {
    case Augmentation::rotation: return "rotation";
    case Augmentation::hflip: return "hflip";
    case Augmentation::translation: return "translation";
    case Augmentation::none: return "none";
  }
  return "?";
}

inline Augmentation parse_augmentation(std::string_view s) {
  if (s == "rotation") return Augmentation::rotation;
  if (s == "hflip") return Augmentation::hflip;
  if (s == "translation") return Augmentation::translation;
  if (s == "none") return Augmentation::none;
  throw InvalidArgument("unknown augmentation '" + std::string(s) + "' (rotation, hflip, translation, none)");
}

struct OptimizerConfig {
  std::string kind = "adam";
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  void validate() const {
    if (kind != "adam") throw InvalidArgument("optimizer: only 'adam' is supported");
    if (!(lr >= 0.0)) throw InvalidArgument("optimizer: lr must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
      throw InvalidArgument("optimizer: betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw InvalidArgument("optimizer: eps must be > 0");
    if (!(weight_decay >= 0.0)) throw InvalidArgument("optimizer: weight_decay must be >= 0");
  }
  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

struct TrainConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 16;
  bool scale_augmentation = true;  // uniform factor in [0.8, 1.25] per sample and step

  void validate() const {
    if (batch_size < 1) throw InvalidArgument("train: batch_size must be >= 1");
  }
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct AdaptConfig {
  AdaptMode mode = AdaptMode::online_bn;
  std::size_t views = 48;
  double momentum = 0.1;
  /// Unset means the mode default: 1 for online modes, 20 for standard.
  std::optional<std::size_t> iterations;
  Augmentation augmentation = Augmentation::rotation;
  OptimizerConfig optimizer{.lr = 1e-4};
  /// Samples adapted together in standard mode (batch-size sweep); 1 is the
  /// per-sample protocol.
  std::size_t batch_size = 1;

  std::size_t effective_iterations() const {
    if (iterations) return *iterations;
    return mode == AdaptMode::standard ? 20 : 1;
  }

  void validate() const {
    if (views < 1) throw InvalidArgument("adapt: views must be >= 1");
    if (!(momentum >= 0.0 && momentum <= 1.0)) throw InvalidArgument("adapt: momentum must lie in [0, 1]");
    if (batch_size < 1) throw InvalidArgument("adapt: batch_size must be >= 1");
    if (batch_size > 1 && mode != AdaptMode::standard)
      throw InvalidArgument("adapt: batch_size > 1 is only defined for standard mode");
    optimizer.validate();
  }
  friend bool operator==(const AdaptConfig&, const AdaptConfig&) = default;
};

/// Everything a run needs. `seed` is the root of every random stream; the
/// model init seed is derived from it (model_config()).
struct RunConfig {
  ModelConfig model;
  SkeletalLossWeights loss;
  std::size_t n_per_sphere = 8;
  OptimizerConfig optimizer;
  TrainConfig train;
  AdaptConfig adapt;
  std::uint64_t seed = 0;

  ModelConfig model_config() const {
    ModelConfig m = model;
    m.seed = mix_seed(seed, 0x696e6974ULL);
    return m;
  }

  void validate() const {
    model.validate();
    loss.validate();
    if (n_per_sphere < 1) throw InvalidArgument("config: n_per_sphere must be >= 1");
    optimizer.validate();
    train.validate();
    adapt.validate();
  }
};

namespace detail {

inline void require_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed, const std::string& ctx) {
  if (!j.is_object()) throw InvalidArgument(ctx + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || key == a;
    if (!ok) throw InvalidArgument(ctx + ": unknown key '" + key + "'");
  }
}

template <class V>
void read_opt(const nlohmann::json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const OptimizerConfig& o) {
  j = {{"kind", o.kind}, {"lr", o.lr}, {"beta1", o.beta1}, {"beta2", o.beta2}, {"eps", o.eps},
       {"weight_decay", o.weight_decay}};
}
inline void from_json(const nlohmann::json& j, OptimizerConfig& o) {
  detail::require_keys(j, {"kind", "lr", "beta1", "beta2", "eps", "weight_decay"}, "optimizer");
  detail::read_opt(j, "kind", o.kind);
  detail::read_opt(j, "lr", o.lr);
  detail::read_opt(j, "beta1", o.beta1);
  detail::read_opt(j, "beta2", o.beta2);
  detail::read_opt(j, "eps", o.eps);
  detail::read_opt(j, "weight_decay", o.weight_decay);
}

inline void to_json(nlohmann::json& j, const SkeletalLossWeights& w) {
  j = {{"w_p2s", w.w_p2s},
       {"w_sampling", w.w_sampling},
       {"w_radius", w.w_radius},
       {"reduction", to_string(w.reduction)},
       {"p2s_signed", w.p2s_signed}};
}
inline void from_json(const nlohmann::json& j, SkeletalLossWeights& w) {
  detail::require_keys(j, {"w_p2s", "w_sampling", "w_radius", "reduction", "p2s_signed"}, "loss");
  detail::read_opt(j, "p2s_signed", w.p2s_signed);
  detail::read_opt(j, "w_p2s", w.w_p2s);
  detail::read_opt(j, "w_sampling", w.w_sampling);
  detail::read_opt(j, "w_radius", w.w_radius);
  if (j.contains("reduction")) {
    const auto r = j.at("reduction").get<std::string>();
    if (r == "mean") w.reduction = Reduction::mean;
    else if (r == "sum") w.reduction = Reduction::sum;
    else throw InvalidArgument("loss: reduction must be 'mean' or 'sum'");
  }
}

inline void to_json(nlohmann::json& j, const TrainConfig& t) {
  j = {{"epochs", t.epochs}, {"batch_size", t.batch_size}, {"scale_augmentation", t.scale_augmentation}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& t) {
  detail::require_keys(j, {"epochs", "batch_size", "scale_augmentation"}, "train");
  detail::read_opt(j, "epochs", t.epochs);
  detail::read_opt(j, "batch_size", t.batch_size);
  detail::read_opt(j, "scale_augmentation", t.scale_augmentation);
}

inline void to_json(nlohmann::json& j, const AdaptConfig& a) {
  j = {{"mode", to_string(a.mode)},
       {"views", a.views},
       {"momentum", a.momentum},
       {"iterations", a.iterations ? nlohmann::json(*a.iterations) : nlohmann::json(nullptr)},
       {"augmentation", to_string(a.augmentation)},
       {"optimizer", a.optimizer},
       {"batch_size", a.batch_size}};
}
inline void from_json(const nlohmann::json& j, AdaptConfig& a) {
  detail::require_keys(j, {"mode", "views", "momentum", "iterations", "augmentation", "optimizer", "batch_size"}, "adapt");
  if (j.contains("mode")) a.mode = parse_adapt_mode(j.at("mode").get<std::string>());
  detail::read_opt(j, "views", a.views);
  detail::read_opt(j, "momentum", a.momentum);
  if (j.contains("iterations")) {
    const auto& it = j.at("iterations");
    a.iterations = it.is_null() ? std::nullopt : std::optional<std::size_t>(it.get<std::size_t>());
  }
  if (j.contains("augmentation")) a.augmentation = parse_augmentation(j.at("augmentation").get<std::string>());
  if (j.contains("optimizer")) j.at("optimizer").get_to(a.optimizer);
  detail::read_opt(j, "batch_size", a.batch_size);
}

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  nlohmann::json model = c.model;
  model.erase("seed");
  j = {{"model", model},       {"loss", c.loss},   {"n_per_sphere", c.n_per_sphere}, {"optimizer", c.optimizer},
       {"train", c.train},     {"adapt", c.adapt}, {"seed", c.seed}};
}
/// Strict: unknown keys anywhere are rejected; missing keys keep defaults.
/// The model section takes no seed of its own (it is derived from `seed`).
inline void from_json(const nlohmann::json& j, RunConfig& c) {
  detail::require_keys(j, {"model", "loss", "n_per_sphere", "optimizer", "train", "adapt", "seed"}, "config");
  if (j.contains("model")) {
    if (j.at("model").contains("seed"))
      throw InvalidArgument("config: unknown key 'model.seed' (the model seed is derived from 'seed')");
    j.at("model").get_to(c.model);
  }
  if (j.contains("loss")) j.at("loss").get_to(c.loss);
  detail::read_opt(j, "n_per_sphere", c.n_per_sphere);
  if (j.contains("optimizer")) j.at("optimizer").get_to(c.optimizer);
  if (j.contains("train")) j.at("train").get_to(c.train);
  if (j.contains("adapt")) j.at("adapt").get_to(c.adapt);
  detail::read_opt(j, "seed", c.seed);
}

inline RunConfig parse_run_config(const std::string& text, const std::string& origin = "<config>") {
  RunConfig c;
  try {
    nlohmann::json::parse(text).get_to(c);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(origin + ": " + e.what());
  } catch (const InvalidArgument& e) {
    throw InvalidArgument(origin + ": " + e.what());
  }
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return parse_run_config(text, path.string());
}

}  // namespace smartpc
