#pragma once

#include <cstddef>
#include <cmath>
#include <cstdint>

#include "xgram/tensor.hpp"

namespace xgram::shortconv {

inline constexpr double kRmsEps = 1e-6;

// Gated depthwise causal convolution. Kernels are (width x k); column k-1
// multiplies the current position, column 0 the oldest one in the window.
struct Params {
  std::size_t kernel_size = 3;
  Mat content;  // psi_c
  Mat gate;     // psi_g
  Vec bias;     // b
  double rms_eps = kRmsEps;

  std::size_t width() const { return static_cast<std::size_t>(content.rows()); }
  void validate() const;
};

struct Grads {
  Mat content;
  Mat gate;
  Vec bias;

  static Grads zeros_like(const Params& p);
  void set_zero();
};

// content ~ N(0, 0.1 / sqrt(k)), gate ~ N(0, 0.02), bias = 0.
Params init_params(std::size_t width, std::size_t kernel_size, std::uint64_t seed);

// Per-row x / sqrt(mean(x^2) + eps).
Mat rmsnorm(const Mat& x, double eps = kRmsEps);
// Backward of rmsnorm at input x.
Mat rmsnorm_backward(const Mat& x, const Mat& upstream, double eps = kRmsEps);

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }
inline double silu_grad(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

// y[t, c] = sum_i kernels(c, i) * x[t - k + 1 + i, c], zero left padding.
Mat causal_depthwise_conv(const Mat& x, const Mat& kernels);

// C = DWConv(x; psi_c) * SiLU(DWConv(x; psi_g) + b).
Mat gated_dwconv(const Mat& normed, const Params& params);

// E + C(rmsnorm(E)).
Mat extract(const Mat& input, const Params& params);

// Intermediates kept by the forward pass for the backward pass.
struct Cache {
  Mat input;
  Mat normed;
  Mat content;   // DWConv(normed; psi_c)
  Mat gate_pre;  // DWConv(normed; psi_g) + b
};

Mat extract_forward(const Mat& input, const Params& params, Cache& cache);

// Adds parameter gradients into `grads` and returns dLoss/dInput.
Mat extract_backward(const Cache& cache, const Params& params, const Mat& upstream, Grads& grads);

struct ExtractGrads {
  Mat input;
  Grads params;
};

// Convenience form that recomputes the forward pass.
ExtractGrads extract_backward(const Mat& input, const Params& params, const Mat& upstream);

}  // namespace xgram::shortconv
