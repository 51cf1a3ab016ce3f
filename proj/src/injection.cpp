#include "xgram/injection.hpp"

#include <algorithm>
#include <cmath>

#include "xgram/error.hpp"

namespace xgram::injection {

const char* site_name(Site site) {
  switch (site) {
    case Site::kQ: return "q";
    case Site::kK: return "k";
    case Site::kV: return "v";
    case Site::kO: return "o";
    case Site::kInterLayer: return "inter";
  }
  return "unknown";
}

Site parse_site(const std::string& name) {
  std::string s = name;
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "q") return Site::kQ;
  if (s == "k") return Site::kK;
  if (s == "v") return Site::kV;
  if (s == "o") return Site::kO;
  if (s == "inter" || s == "h" || s == "inter-layer") return Site::kInterLayer;
  throw ValidationError("unknown injection site '" + name + "'");
}

std::size_t site_width(Site site, std::size_t width, std::size_t kv_width) {
  switch (site) {
    case Site::kQ:
    case Site::kK:
    case Site::kV: return kv_width;
    case Site::kO:
    case Site::kInterLayer: return width;
  }
  throw ValidationError("unknown injection site");
}

bool InjectionConfig::empty() const { return num_views() == 0; }

std::size_t InjectionConfig::num_views() const {
  std::size_t n = 0;
  for (const auto& layer : layers)
    for (const auto& v : layer) n += v.enabled ? 1 : 0;
  return n;
}

std::vector<std::string> preset_names() { return {"none", "1x", "2x", "4x", "ple"}; }

InjectionConfig preset(const std::string& name, std::size_t num_layers) {
  std::vector<ViewSpec> per_layer;
  const auto add = [&](Site site, std::size_t k, bool extract = true) {
    per_layer.push_back(ViewSpec{site, k, extract, true, 0.1, 0.0});
  };
  if (name == "none") {
  } else if (name == "1x") {
    add(Site::kV, 3);
    add(Site::kV, 5);
  } else if (name == "2x") {
    add(Site::kInterLayer, 3);
    add(Site::kV, 3);
    add(Site::kV, 5);
  } else if (name == "4x") {
    add(Site::kInterLayer, 3);
    add(Site::kInterLayer, 5);
    add(Site::kInterLayer, 7);
    add(Site::kV, 3);
    add(Site::kV, 5);
  } else if (name == "ple") {
    add(Site::kInterLayer, 1, false);
    add(Site::kInterLayer, 1, false);
  } else {
    throw ValidationError("unknown injection preset '" + name + "'");
  }
  InjectionConfig cfg;
  cfg.layers.assign(num_layers, per_layer);
  return cfg;
}

double WarmupSchedule::operator()(std::size_t step) const {
  if (total_warm_steps == 0) return 1.0;
  if (step >= total_warm_steps) return 1.0;
  return static_cast<double>(step) / static_cast<double>(total_warm_steps);
}

double gate_value(double lambda, std::size_t layer, std::size_t step, const WarmupSchedule& schedule) {
  return lambda * std::sqrt(static_cast<double>(layer + 1)) * schedule(step);
}

Mat fuse(std::span<const Mat> views, std::span<const double> gates) {
  if (views.empty()) throw ValidationError("fuse needs at least one view");
  if (views.size() != gates.size()) throw ValidationError("fuse: one gate per view required");
  const auto rows = views.front().rows();
  const auto cols = views.front().cols();
  for (const auto& v : views)
    if (v.rows() != rows || v.cols() != cols)
      throw ValidationError("fuse: views disagree on shape");
  const double norm = 1.0 / std::sqrt(static_cast<double>(views.size()));
  Mat delta = Mat::Zero(rows, cols);
  for (std::size_t m = 0; m < views.size(); ++m) delta += (gates[m] * norm) * views[m];
  return delta;
}

Mat ple_fuse(std::span<const Mat> retrieved, std::span<const double> gates) {
  return fuse(retrieved, gates);
}

void inject(Site site, Mat& stream, const Mat& delta, std::size_t head_dim) {
  if (delta.rows() != stream.rows())
    throw ValidationError("inject: delta and stream disagree on sequence length");
  if (delta.cols() == stream.cols()) {
    stream += delta;
    return;
  }
  if (site != Site::kQ || head_dim == 0 || delta.cols() % static_cast<Eigen::Index>(head_dim) != 0 ||
      stream.cols() % delta.cols() != 0)
    throw ValidationError(std::string("inject: delta width does not match the ") + site_name(site) +
                          " stream");
  const auto hd = static_cast<Eigen::Index>(head_dim);
  const Eigen::Index kv_heads = delta.cols() / hd;
  const Eigen::Index group = (stream.cols() / hd) / kv_heads;
  for (Eigen::Index h = 0; h < stream.cols() / hd; ++h)
    stream.middleCols(h * hd, hd) += delta.middleCols((h / group) * hd, hd);
}

}  // namespace xgram::injection
