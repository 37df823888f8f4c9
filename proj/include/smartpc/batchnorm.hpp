#pragma once

#include <cstddef>
#include <span>
#include <string>

#include "smartpc/errors.hpp"
#include "smartpc/tensor.hpp"

namespace smartpc {

enum class BnMode { train, eval, adapt_stats };

inline const char* to_string(BnMode m) {
  switch (m) {
    case BnMode::train: return "train";
    case BnMode::eval: return "eval";
    case BnMode::adapt_stats: return "adapt-stats";
  }
  return "?";
}

/// Affine parameters plus running statistics of one BatchNorm layer.
template <class T>
struct BatchNormState {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels, double momentum_ = 0.1, double epsilon_ = 1e-5)
      : gamma({channels}, T{1}),
        beta({channels}, T{0}),
        running_mean({channels}, T{0}),
        running_var({channels}, T{1}),
        momentum(momentum_),
        epsilon(epsilon_) {
    validate();
  }

  std::size_t channels() const noexcept { return gamma.size(); }

  void validate() const {
    if (!(momentum >= 0.0 && momentum <= 1.0)) throw InvalidArgument("batchnorm: momentum must lie in [0, 1]");
    if (!(epsilon > 0.0)) throw InvalidArgument("batchnorm: epsilon must be > 0");
  }

  /// running <- (1 - momentum) running + momentum batch, with the variance
  /// fed in as the unbiased estimate of `count` samples.
  void fold_batch_statistics(std::span<const double> mean, std::span<const double> biased_var, std::size_t count) {
    const double rho = momentum;
    const double unbias = static_cast<double>(count) / static_cast<double>(count - 1);
    for (std::size_t j = 0; j < channels(); ++j) {
      running_mean[j] = static_cast<T>((1.0 - rho) * static_cast<double>(running_mean[j]) + rho * mean[j]);
      running_var[j] =
          static_cast<T>((1.0 - rho) * static_cast<double>(running_var[j]) + rho * biased_var[j] * unbias);
    }
  }

  template <class U>
  BatchNormState<U> cast() const {
    BatchNormState<U> out;
    out.gamma = gamma.template cast<U>();
    out.beta = beta.template cast<U>();
    out.running_mean = running_mean.template cast<U>();
    out.running_var = running_var.template cast<U>();
    out.momentum = momentum;
    out.epsilon = epsilon;
    return out;
  }
};

}  // namespace smartpc
