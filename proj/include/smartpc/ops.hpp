#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "smartpc/batchnorm.hpp"
#include "smartpc/tape.hpp"

// Differentiable primitives over a Tape. Every op computes its value eagerly
// and, when the tape records and some input needs a gradient, registers a
// closure that maps the output gradient to input gradients.
namespace smartpc::ops {

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw InvalidArgument(what);
}

template <class T>
bool any_grad(const Tape<T>& tape, std::initializer_list<Var> vars) {
  for (Var v : vars)
    if (tape.requires_grad(v)) return true;
  return false;
}

}  // namespace detail

/// y = x W + b for x [N, in], W [in, out], b [out].
template <class T>
Var linear(Tape<T>& tape, Var x, Var w, Var b) {
  const auto& xv = tape.value(x);
  const auto& wv = tape.value(w);
  const auto& bv = tape.value(b);
  detail::require(wv.shape().size() == 2, "linear: weight must be rank 2");
  detail::require(xv.cols() == wv.rows(), "linear: input width " + std::to_string(xv.cols()) +
                                              " does not match weight " + shape_string(wv.shape()));
  detail::require(bv.size() == wv.cols(), "linear: bias length does not match weight");
  Tensor<T> y({xv.rows(), wv.cols()}, uninitialized);
  auto ym = y.matrix();
  // Seeding with the bias lets the product accumulate in place; a plain
  // assignment would zero-fill y first.
  ym.rowwise() = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bv.data(), static_cast<Eigen::Index>(bv.size()));
  ym.noalias() += xv.matrix() * wv.matrix();
  return tape.push(std::move(y), detail::any_grad(tape, {x, w, b}), [x, w, b](Tape<T>& t, std::size_t self) {
    const auto gy = t.grad_buffer(self).matrix();
    if (t.requires_grad(x)) t.grad_buffer(x.id).matrix().noalias() += gy * t.value(w).matrix().transpose();
    if (t.requires_grad(w)) t.grad_buffer(w.id).matrix().noalias() += t.value(x).matrix().transpose() * gy;
    if (t.requires_grad(b)) {
      // Row-ordered loop rather than colwise().sum(): Eigen's packet path
      // there depends on buffer alignment, so identical runs could round
      // differently.
      auto& gb = t.grad_buffer(b.id);
      const std::size_t cols = gb.size();
      for (Eigen::Index r = 0; r < gy.rows(); ++r) {
        const T* row = gy.data() + r * gy.cols();
        for (std::size_t c = 0; c < cols; ++c) gb[c] += row[c];
      }
    }
  });
}

template <class T>
Var add(Tape<T>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  detail::require(av.size() == bv.size(), "add: shape mismatch " + shape_string(av.shape()) + " vs " +
                                              shape_string(bv.shape()));
  Tensor<T> y = av;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  return tape.push(std::move(y), detail::any_grad(tape, {a, b}), [a, b](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    for (Var v : {a, b}) {
      if (!t.requires_grad(v)) continue;
      auto& gv = t.grad_buffer(v.id);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
    }
  });
}

template <class T>
Var scale(Tape<T>& tape, Var a, T factor) {
  Tensor<T> y = tape.value(a);
  for (auto& v : y.values()) v *= factor;
  return tape.push(std::move(y), tape.requires_grad(a), [a, factor](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
  });
}

/// max(0, x); the subgradient at 0 is 0.
template <class T>
Var relu(Tape<T>& tape, Var x) {
  Tensor<T> y = tape.value(x);
  for (auto& v : y.values()) v = v > T{0} ? v : T{0};
  if (tape.tracks_signature()) {
    std::uint64_t h = y.size();
    for (std::size_t i = 0; i < y.size(); ++i) h = mix_seed(h, y[i] > T{0} ? i : ~i);
    tape.mix_signature(h);
  }
  return tape.push(std::move(y), tape.requires_grad(x), [x](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const auto& xv = t.value(x);
    auto& gx = t.grad_buffer(x.id);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > T{0}) gx[i] += g[i];
  });
}

template <class T>
T softplus_value(T v) {
  // log(1 + e^v) = max(v, 0) + log1p(e^{-|v|})
  return std::max(v, T{0}) + std::log1p(std::exp(-std::abs(v)));
}

template <class T>
T logistic(T v) {
  if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
  const T e = std::exp(v);
  return e / (T{1} + e);
}

template <class T>
Var softplus(Tape<T>& tape, Var x) {
  Tensor<T> y = tape.value(x);
  for (auto& v : y.values()) v = softplus_value(v);
  return tape.push(std::move(y), tape.requires_grad(x), [x](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const auto& xv = t.value(x);
    auto& gx = t.grad_buffer(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * logistic(xv[i]);
  });
}

/// Per-channel max over consecutive groups of `group` rows:
/// x [G*group, C] -> [G, C]. Gradient goes to the first maximal row.
template <class T>
Var maxpool_groups(Tape<T>& tape, Var x, std::size_t group) {
  const auto& xv = tape.value(x);
  detail::require(group >= 1 && xv.rows() >= 1 && xv.rows() % group == 0,
                  "maxpool: token count " + std::to_string(xv.rows()) + " not divisible by group " +
                      std::to_string(group));
  const std::size_t groups = xv.rows() / group;
  const std::size_t c = xv.cols();
  Tensor<T> y({groups, c}, uninitialized);
  const bool needs_grad = tape.requires_grad(x);
  if (!needs_grad && !tape.tracks_signature()) {
    for (std::size_t g = 0; g < groups; ++g) {
      const T* base = xv.data() + g * group * c;
      T* out = y.data() + g * c;
      std::copy(base, base + c, out);
      for (std::size_t r = 1; r < group; ++r) {
        const T* row = base + r * c;
        for (std::size_t j = 0; j < c; ++j) out[j] = std::max(out[j], row[j]);
      }
    }
    return tape.push(std::move(y), false, [](Tape<T>&, std::size_t) {});
  }
  std::vector<std::uint32_t> arg(groups * c);
  for (std::size_t g = 0; g < groups; ++g) {
    const T* base = xv.data() + g * group * c;
    T* out = y.data() + g * c;
    std::uint32_t* a = arg.data() + g * c;
    std::copy(base, base + c, out);
    std::fill(a, a + c, 0u);
    for (std::size_t r = 1; r < group; ++r) {
      const T* row = base + r * c;
      for (std::size_t j = 0; j < c; ++j) {
        if (row[j] > out[j]) {
          out[j] = row[j];
          a[j] = static_cast<std::uint32_t>(r);
        }
      }
    }
  }
  if (tape.tracks_signature()) {
    std::uint64_t h = arg.size();
    for (auto v : arg) h = mix_seed(h, v);
    tape.mix_signature(h);
  }
  return tape.push(std::move(y), needs_grad,
                   [x, group, c, arg = std::move(arg)](Tape<T>& t, std::size_t self) {
                     const auto& gy = t.grad_buffer(self);
                     auto& gx = t.grad_buffer(x.id);
                     const std::size_t groups = gy.rows();
                     for (std::size_t g = 0; g < groups; ++g)
                       for (std::size_t j = 0; j < c; ++j)
                         gx[(g * group + arg[g * c + j]) * c + j] += gy[g * c + j];
                   });
}

/// Max over all rows: x [T, C] -> [1, C].
template <class T>
Var maxpool_tokens(Tape<T>& tape, Var x) {
  return maxpool_groups(tape, x, tape.value(x).rows());
}

/// Broadcasts each row of g [G, C] to `group` consecutive rows: [G*group, C].
template <class T>
Var repeat_groups(Tape<T>& tape, Var g, std::size_t group) {
  const auto& gv = tape.value(g);
  const std::size_t c = gv.cols();
  Tensor<T> y({gv.rows() * group, c}, uninitialized);
  for (std::size_t i = 0; i < gv.rows(); ++i)
    for (std::size_t r = 0; r < group; ++r) std::copy_n(gv.data() + i * c, c, y.data() + (i * group + r) * c);
  return tape.push(std::move(y), tape.requires_grad(g), [g, group, c](Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad_buffer(self);
    auto& gg = t.grad_buffer(g.id);
    const std::size_t rows = gg.rows();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t r = 0; r < group; ++r)
        for (std::size_t j = 0; j < c; ++j) gg[i * c + j] += gy[(i * group + r) * c + j];
  });
}

/// [N, C1] ++ [N, C2] -> [N, C1 + C2].
template <class T>
Var concat_cols(Tape<T>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  detail::require(av.rows() == bv.rows(), "concat_cols: row mismatch");
  const std::size_t ca = av.cols(), cb = bv.cols(), n = av.rows();
  Tensor<T> y({n, ca + cb}, uninitialized);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(av.data() + i * ca, ca, y.data() + i * (ca + cb));
    std::copy_n(bv.data() + i * cb, cb, y.data() + i * (ca + cb) + ca);
  }
  return tape.push(std::move(y), detail::any_grad(tape, {a, b}), [a, b, ca, cb](Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad_buffer(self);
    const std::size_t n = gy.rows();
    if (t.requires_grad(a)) {
      auto& ga = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < ca; ++j) ga[i * ca + j] += gy[i * (ca + cb) + j];
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < cb; ++j) gb[i * cb + j] += gy[i * (ca + cb) + ca + j];
    }
  });
}

/// Inverted dropout with a counter-addressed mask, so a given (seed, stream)
/// pair always drops the same units.
template <class T>
Var dropout(Tape<T>& tape, Var x, double rate, std::uint64_t seed, std::uint64_t stream) {
  if (rate <= 0.0) return x;
  detail::require(rate < 1.0, "dropout: rate must be < 1");
  const auto& xv = tape.value(x);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  Tensor<T> mask(xv.shape());
  const std::uint64_t base = mix_seed(seed, stream);
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = hash_uniform(base, i) >= rate ? keep_scale : T{0};
  Tensor<T> y = xv;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= mask[i];
  return tape.push(std::move(y), tape.requires_grad(x), [x, mask = std::move(mask)](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& gx = t.grad_buffer(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
  });
}

/// Per-channel batch normalization of x [N, C].
///
/// train: normalize with the batch mean and biased variance, then fold the
///   batch mean and unbiased variance into the running statistics.
/// eval: normalize with the running statistics; state untouched.
/// adapt_stats: train-mode statistics with no gradient path; reaching this
///   node during backward is a ContractViolation.
template <class T>
Var batchnorm(Tape<T>& tape, Var x, Var gamma, Var beta, BatchNormState<T>& state, BnMode mode) {
  const auto& xv = tape.value(x);
  const std::size_t n = xv.rows();
  const std::size_t c = xv.cols();
  detail::require(c == state.channels(), "batchnorm: channel mismatch " + std::to_string(c) + " vs " +
                                             std::to_string(state.channels()));
  const auto& g = tape.value(gamma);
  const auto& bt = tape.value(beta);
  const bool needs_grad = detail::any_grad(tape, {x, gamma, beta});

  std::vector<T> inv_std(c), shift(c);
  if (mode == BnMode::eval) {
    for (std::size_t j = 0; j < c; ++j) {
      inv_std[j] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(state.running_var[j]) + state.epsilon));
      shift[j] = state.running_mean[j];
    }
  } else {
    detail::require(n >= 2, "batchnorm: train/adapt-stats needs at least 2 rows, got " + std::to_string(n));
    std::vector<double> mean(c, 0.0), var(c, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const T* row = xv.data() + i * c;
      for (std::size_t j = 0; j < c; ++j) mean[j] += static_cast<double>(row[j]);
    }
    for (std::size_t j = 0; j < c; ++j) mean[j] /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const T* row = xv.data() + i * c;
      for (std::size_t j = 0; j < c; ++j) {
        const double d = static_cast<double>(row[j]) - mean[j];
        var[j] += d * d;
      }
    }
    for (std::size_t j = 0; j < c; ++j) {
      var[j] /= static_cast<double>(n);
      inv_std[j] = static_cast<T>(1.0 / std::sqrt(var[j] + state.epsilon));
      shift[j] = static_cast<T>(mean[j]);
    }
    state.fold_batch_statistics(mean, var, n);
  }

  // xhat is kept only when a backward pass can reach this node.
  const bool keep_xhat = needs_grad && mode != BnMode::adapt_stats;
  Tensor<T> y({n, c}, uninitialized);
  Tensor<T> xhat = keep_xhat ? Tensor<T>({n, c}, uninitialized) : Tensor<T>();
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = xv.data() + i * c;
    T* out = y.data() + i * c;
    for (std::size_t j = 0; j < c; ++j) out[j] = (row[j] - shift[j]) * inv_std[j];
    if (keep_xhat) std::copy_n(out, c, xhat.data() + i * c);
    for (std::size_t j = 0; j < c; ++j) out[j] = g[j] * out[j] + bt[j];
  }

  if (mode == BnMode::adapt_stats) {
    return tape.push(std::move(y), needs_grad, [](Tape<T>&, std::size_t) {
      throw ContractViolation("batchnorm: backward requested through an adapt-stats pass");
    });
  }
  const bool batch_stats = mode == BnMode::train;
  return tape.push(
      std::move(y), needs_grad,
      [x, gamma, beta, c, batch_stats, inv_std = std::move(inv_std), xhat = std::move(xhat)](Tape<T>& t,
                                                                                            std::size_t self) {
        const auto& gy = t.grad_buffer(self);
        const auto& gv = t.value(gamma);
        const std::size_t n = gy.rows();
        std::vector<T> sum_g(c, T{0}), sum_gx(c, T{0});
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            sum_g[j] += gy[i * c + j];
            sum_gx[j] += gy[i * c + j] * xhat[i * c + j];
          }
        if (t.requires_grad(x)) {
          auto& gx = t.grad_buffer(x.id);
          if (batch_stats) {
            // (g - mean(g) - xhat * mean(g * xhat)) * gamma / sigma
            const T inv_n = T{1} / static_cast<T>(n);
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t j = 0; j < c; ++j)
                gx[i * c + j] += gv[j] * inv_std[j] *
                                 (gy[i * c + j] - sum_g[j] * inv_n - xhat[i * c + j] * sum_gx[j] * inv_n);
          } else {
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += gy[i * c + j] * gv[j] * inv_std[j];
          }
        }
        if (t.requires_grad(gamma)) {
          auto& gg = t.grad_buffer(gamma.id);
          for (std::size_t j = 0; j < c; ++j) gg[j] += sum_gx[j];
        }
        if (t.requires_grad(beta)) {
          auto& gb = t.grad_buffer(beta.id);
          for (std::size_t j = 0; j < c; ++j) gb[j] += sum_g[j];
        }
      });
}

/// Mean over rows of -log softmax(logits)[label], log-sum-exp stabilized.
template <class T>
Var softmax_cross_entropy(Tape<T>& tape, Var logits, std::span<const std::size_t> labels) {
  const auto& z = tape.value(logits);
  const std::size_t b = z.rows();
  const std::size_t k = z.cols();
  detail::require(labels.size() == b, "softmax_cross_entropy: label count does not match batch");
  Tensor<T> probs({b, k});
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    detail::require(labels[i] < k, "softmax_cross_entropy: label " + std::to_string(labels[i]) + " out of range");
    const T* row = z.data() + i * k;
    const T mx = *std::max_element(row, row + k);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
    const double lse = static_cast<double>(mx) + std::log(sum);
    loss += lse - static_cast<double>(row[labels[i]]);
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - lse));
  }
  Tensor<T> y({1}, static_cast<T>(loss / static_cast<double>(b)));
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return tape.push(std::move(y), tape.requires_grad(logits),
                   [logits, probs = std::move(probs), lab = std::move(lab)](Tape<T>& t, std::size_t self) {
                     const T up = t.grad_buffer(self)[0];
                     auto& gz = t.grad_buffer(logits.id);
                     const std::size_t b = probs.rows(), k = probs.cols();
                     const T inv_b = T{1} / static_cast<T>(b);
                     for (std::size_t i = 0; i < b; ++i)
                       for (std::size_t j = 0; j < k; ++j)
                         gz[i * k + j] += up * inv_b * (probs[i * k + j] - (j == lab[i] ? T{1} : T{0}));
                   });
}

/// Scalar node whose value and input gradients were computed outside the
/// tape (the skeletal losses). grads[i] must be shaped like inputs[i].
template <class T>
Var external_scalar(Tape<T>& tape, std::vector<Var> inputs, T value, std::vector<Tensor<T>> grads) {
  detail::require(inputs.size() == grads.size(), "external_scalar: input/gradient count mismatch");
  bool needs = false;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    detail::require(tape.value(inputs[i]).size() == grads[i].size(), "external_scalar: gradient shape mismatch");
    needs = needs || tape.requires_grad(inputs[i]);
  }
  return tape.push(Tensor<T>({1}, value), needs,
                   [inputs = std::move(inputs), grads = std::move(grads)](Tape<T>& t, std::size_t self) {
                     const T up = t.grad_buffer(self)[0];
                     for (std::size_t i = 0; i < inputs.size(); ++i) {
                       if (!t.requires_grad(inputs[i])) continue;
                       auto& g = t.grad_buffer(inputs[i].id);
                       for (std::size_t j = 0; j < g.size(); ++j) g[j] += up * grads[i][j];
                     }
                   });
}

}  // namespace smartpc::ops
