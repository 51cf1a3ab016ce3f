#include "xgram/shortconv.hpp"

#include <cmath>
#include <string>

#include "xgram/error.hpp"
#include "xgram/rng.hpp"

namespace xgram::shortconv {

void Params::validate() const {
  if (kernel_size < 1) throw ValidationError("shortconv kernel size must be at least 1");
  if (content.cols() != static_cast<Eigen::Index>(kernel_size) ||
      gate.cols() != static_cast<Eigen::Index>(kernel_size))
    throw ValidationError("shortconv kernel width does not match kernel_size " +
                          std::to_string(kernel_size));
  if (gate.rows() != content.rows() || bias.size() != content.rows())
    throw ValidationError("shortconv channel counts disagree");
  if (!(rms_eps > 0.0)) throw ValidationError("rms_eps must be positive");
}

Grads Grads::zeros_like(const Params& p) {
  return {Mat::Zero(p.content.rows(), p.content.cols()), Mat::Zero(p.gate.rows(), p.gate.cols()),
          Vec::Zero(p.bias.size())};
}

void Grads::set_zero() {
  content.setZero();
  gate.setZero();
  bias.setZero();
}

Params init_params(std::size_t width, std::size_t kernel_size, std::uint64_t seed) {
  if (width == 0 || kernel_size == 0)
    throw ValidationError("shortconv width and kernel size must be positive");
  SplitMix64 rng(seed);
  Params p;
  p.kernel_size = kernel_size;
  const auto w = static_cast<Eigen::Index>(width);
  const auto k = static_cast<Eigen::Index>(kernel_size);
  p.content.resize(w, k);
  p.gate.resize(w, k);
  const double content_std = 0.1 / std::sqrt(static_cast<double>(kernel_size));
  for (Eigen::Index i = 0; i < p.content.size(); ++i) p.content.data()[i] = content_std * rng.normal();
  for (Eigen::Index i = 0; i < p.gate.size(); ++i) p.gate.data()[i] = 0.02 * rng.normal();
  p.bias = Vec::Zero(w);
  return p;
}

Mat rmsnorm(const Mat& x, double eps) {
  Mat out(x.rows(), x.cols());
  const double n = static_cast<double>(x.cols());
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    const double inv = 1.0 / std::sqrt(x.row(t).squaredNorm() / n + eps);
    out.row(t) = x.row(t) * inv;
  }
  return out;
}

Mat rmsnorm_backward(const Mat& x, const Mat& upstream, double eps) {
  Mat dx(x.rows(), x.cols());
  const double n = static_cast<double>(x.cols());
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    const double inv = 1.0 / std::sqrt(x.row(t).squaredNorm() / n + eps);
    const double dot = x.row(t).dot(upstream.row(t));
    dx.row(t) = inv * upstream.row(t) - (inv * inv * inv * dot / n) * x.row(t);
  }
  return dx;
}

Mat causal_depthwise_conv(const Mat& x, const Mat& kernels) {
  if (kernels.rows() != x.cols())
    throw ValidationError("depthwise kernel channels do not match input width");
  const Eigen::Index T = x.rows();
  const Eigen::Index C = x.cols();
  const Eigen::Index k = kernels.cols();
  Mat y = Mat::Zero(T, C);
  for (Eigen::Index t = 0; t < T; ++t)
    for (Eigen::Index i = 0; i < k; ++i) {
      const Eigen::Index s = t - k + 1 + i;
      if (s < 0) continue;
      for (Eigen::Index c = 0; c < C; ++c) y(t, c) += kernels(c, i) * x(s, c);
    }
  return y;
}

Mat gated_dwconv(const Mat& normed, const Params& params) {
  params.validate();
  if (normed.cols() != static_cast<Eigen::Index>(params.width()))
    throw ValidationError("shortconv input width does not match parameters");
  const Mat content = causal_depthwise_conv(normed, params.content);
  Mat gate = causal_depthwise_conv(normed, params.gate);
  gate.rowwise() += params.bias.transpose();
  Mat out(content.rows(), content.cols());
  for (Eigen::Index i = 0; i < out.size(); ++i)
    out.data()[i] = content.data()[i] * silu(gate.data()[i]);
  return out;
}

Mat extract(const Mat& input, const Params& params) {
  Cache cache;
  return extract_forward(input, params, cache);
}

Mat extract_forward(const Mat& input, const Params& params, Cache& cache) {
  params.validate();
  if (input.cols() != static_cast<Eigen::Index>(params.width()))
    throw ValidationError("shortconv input width " + std::to_string(input.cols()) +
                          " does not match parameter width " + std::to_string(params.width()));
  cache.input = input;
  cache.normed = rmsnorm(input, params.rms_eps);
  cache.content = causal_depthwise_conv(cache.normed, params.content);
  cache.gate_pre = causal_depthwise_conv(cache.normed, params.gate);
  cache.gate_pre.rowwise() += params.bias.transpose();
  Mat out = input;
  for (Eigen::Index i = 0; i < out.size(); ++i)
    out.data()[i] += cache.content.data()[i] * silu(cache.gate_pre.data()[i]);
  return out;
}

Mat extract_backward(const Cache& cache, const Params& params, const Mat& upstream, Grads& grads) {
  if (upstream.rows() != cache.input.rows() || upstream.cols() != cache.input.cols())
    throw ValidationError("shortconv upstream gradient shape mismatch");
  const Eigen::Index T = upstream.rows();
  const Eigen::Index C = upstream.cols();
  const Eigen::Index k = static_cast<Eigen::Index>(params.kernel_size);

  Mat d_content(T, C);
  Mat d_gate(T, C);
  for (Eigen::Index i = 0; i < upstream.size(); ++i) {
    const double g = cache.gate_pre.data()[i];
    d_content.data()[i] = upstream.data()[i] * silu(g);
    d_gate.data()[i] = upstream.data()[i] * cache.content.data()[i] * silu_grad(g);
  }
  grads.bias += d_gate.colwise().sum().transpose();

  Mat d_normed = Mat::Zero(T, C);
  for (Eigen::Index t = 0; t < T; ++t)
    for (Eigen::Index i = 0; i < k; ++i) {
      const Eigen::Index s = t - k + 1 + i;
      if (s < 0) continue;
      for (Eigen::Index c = 0; c < C; ++c) {
        const double xn = cache.normed(s, c);
        grads.content(c, i) += d_content(t, c) * xn;
        grads.gate(c, i) += d_gate(t, c) * xn;
        d_normed(s, c) += d_content(t, c) * params.content(c, i) + d_gate(t, c) * params.gate(c, i);
      }
    }
  // Residual path contributes the identity.
  return upstream + rmsnorm_backward(cache.input, d_normed, params.rms_eps);
}

ExtractGrads extract_backward(const Mat& input, const Params& params, const Mat& upstream) {
  Cache cache;
  extract_forward(input, params, cache);
  ExtractGrads out{Mat(), Grads::zeros_like(params)};
  out.input = extract_backward(cache, params, upstream, out.params);
  return out;
}

}  // namespace xgram::shortconv
