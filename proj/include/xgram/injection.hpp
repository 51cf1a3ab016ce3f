#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "xgram/tensor.hpp"

namespace xgram::injection {

// Where a fused lookup signal enters a layer.
//   kQ, kK, kV  - added to the attention projections (width d_kv)
//   kO          - added to the attention output projection (width d)
//   kInterLayer - added to the residual stream before the block (width d)
enum class Site { kQ = 0, kK = 1, kV = 2, kO = 3, kInterLayer = 4 };
inline constexpr std::size_t kNumSites = 5;

const char* site_name(Site site);
// Accepts q, k, v, o, inter (alias: h, inter-layer).
Site parse_site(const std::string& name);

// Injected width for a site under GQA, d_kv = (h_kv / h) * d.
std::size_t site_width(Site site, std::size_t width, std::size_t kv_width);

struct ViewSpec {
  Site site = Site::kV;
  std::size_t kernel_size = 3;
  bool extract = true;       // false bypasses ShortConv (PLE baseline)
  bool enabled = true;
  double lambda_init = 0.1;
  double rho = 0.0;          // 0: whatever the routing plan uses; otherwise must match it

  friend bool operator==(const ViewSpec&, const ViewSpec&) = default;
};

// One list of views per backbone layer.
struct InjectionConfig {
  std::vector<std::vector<ViewSpec>> layers;

  bool empty() const;
  std::size_t num_views() const;
  friend bool operator==(const InjectionConfig&, const InjectionConfig&) = default;
};

// Named view allocations applied at every layer:
//   none - no views (vanilla backbone)
//   1x   - 2v, kernels {3, 5}
//   2x   - 1h{3} + 2v{3, 5}
//   4x   - 3h{3, 5, 7} + 2v{3, 5}
//   ple  - 2h without ShortConv (per-layer embedding baseline)
// Q/K score-path sites are never part of a preset.
InjectionConfig preset(const std::string& name, std::size_t num_layers);
std::vector<std::string> preset_names();

// w(u) = min(u / W, 1); W = 0 means no warmup.
struct WarmupSchedule {
  std::size_t total_warm_steps = 0;
  double operator()(std::size_t step) const;
};

// g = lambda * sqrt(layer + 1) * w(step).
double gate_value(double lambda, std::size_t layer, std::size_t step, const WarmupSchedule& schedule);

// Delta = (1 / sqrt(M)) * sum_m g_m * view_m.
Mat fuse(std::span<const Mat> views, std::span<const double> gates);

// Per-layer embedding fusion: the same normalized sum over raw retrievals.
Mat ple_fuse(std::span<const Mat> retrieved, std::span<const double> gates);

// Adds delta to `stream`. For a Q-site delta narrower than the query stream,
// each kv-head slice is broadcast over the query heads that share it.
void inject(Site site, Mat& stream, const Mat& delta, std::size_t head_dim = 0);

}  // namespace xgram::injection
