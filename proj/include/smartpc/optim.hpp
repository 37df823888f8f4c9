#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "smartpc/config.hpp"
#include "smartpc/model.hpp"
#include "smartpc/tape.hpp"

namespace smartpc {

/// Adam moments for every trainable tensor, in Model::visit order.
template <class T>
struct OptimState {
  OptimizerConfig config;
  std::vector<Tensor<T>> m, v;
  std::uint64_t step = 0;

  OptimState() = default;
  OptimState(const Model<T>& model, OptimizerConfig cfg) : config(std::move(cfg)) {
    config.validate();
    model.visit([&](const std::string&, const Tensor<T>& t, TensorRole role) {
      if (!is_trainable(role)) return;
      m.emplace_back(t.shape());
      v.emplace_back(t.shape());
    });
  }
};

/// Adam with L2 weight decay folded into the gradient. Gradients come from
/// the tape the parameters were bound on.
template <class T>
void adam_step(OptimState<T>& state, Tape<T>& tape, const ParameterVars<T>& pv) {
  if (state.m.size() != pv.vars.size()) throw InvalidArgument("adam_step: optimizer state does not match parameters");
  const auto& c = state.config;
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < pv.vars.size(); ++i) {
    Tensor<T>& theta = *pv.tensors[i];
    const Tensor<T>& g = tape.grad(pv.vars[i]);
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double gj = static_cast<double>(g[j]) + c.weight_decay * static_cast<double>(theta[j]);
      const double mj = c.beta1 * static_cast<double>(m[j]) + (1.0 - c.beta1) * gj;
      const double vj = c.beta2 * static_cast<double>(v[j]) + (1.0 - c.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      theta[j] = static_cast<T>(static_cast<double>(theta[j]) - c.lr * (mj / bc1) / (std::sqrt(vj / bc2) + c.eps));
    }
  }
}

}  // namespace smartpc
