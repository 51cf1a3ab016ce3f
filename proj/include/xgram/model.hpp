#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xgram/checkpoint.hpp"
#include "xgram/injection.hpp"
#include "xgram/memory.hpp"
#include "xgram/routing.hpp"
#include "xgram/shortconv.hpp"
#include "xgram/tensor.hpp"

namespace xgram::model {

using stats::TokenId;

struct BackboneConfig {
  std::size_t layers = 4;
  std::size_t width = 128;
  std::size_t ffn_width = 512;
  std::size_t heads = 4;
  std::size_t kv_heads = 2;
  std::size_t seq_len = 128;
  std::size_t vocab_size = 4096;

  std::size_t head_dim() const { return width / heads; }
  std::size_t kv_width() const { return kv_heads * head_dim(); }
  void validate() const;

  // desk (default), toy (acceptance runs), ref-small, ref-medium.
  static BackboneConfig preset(const std::string& name);
  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

struct OptimizerConfig {
  double base_lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip = 1.0;
  double warmup_fraction = 0.05;
  double min_lr_ratio = 0.1;  // cosine floor as a fraction of base_lr
  double lookup_lr_cap = 8.0;
  double lookup_ref_rows = 32768.0;  // S0
  double vip_lr_scale = 1.0;
  double body_lr_scale = 1.0;

  void validate() const;
  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

// min(sqrt(S / S0), cap).
double lookup_lr_multiplier(std::size_t rows, const OptimizerConfig& cfg);

enum class ParamGroup { kBackbone, kLookup };

// Flat view of one parameter tensor and its gradient buffer.
struct ParamRef {
  std::string name;
  std::span<double> value;
  std::span<double> grad;
  ParamGroup group = ParamGroup::kBackbone;
  bool decay = false;
  std::size_t row_width = 0;               // > 0: lookup tensor with per-row LR scale
  const std::vector<double>* row_scale = nullptr;
};

// One retrieval + extraction branch.
struct View {
  injection::ViewSpec spec;
  std::size_t width = 0;
  memory::LookupTable table;
  shortconv::Params conv;
  shortconv::Grads conv_grad;
  double lambda = 0.1;
  double grad_lambda = 0.0;
};

struct LayerWeights {
  Vec attn_norm, ffn_norm;
  Mat wq, wk, wv, wo, w1, w2;
};

struct BackboneWeights {
  Mat tok_emb, pos_emb;
  std::vector<LayerWeights> layers;
  Vec final_norm;
  Mat lm_head;

  static BackboneWeights zeros(const BackboneConfig& cfg);
  void set_zero();
};

// Everything the backward pass and the diagnostics need from a forward pass.
struct ForwardCache {
  struct ViewState {
    Mat retrieved;   // E, N x w
    Mat extracted;   // E~, N x w
    std::vector<shortconv::Cache> conv;  // one per sequence
    double gate = 0.0;
  };
  struct Layer {
    Mat h_in;
    Mat xa;
    Vec inv_a;
    Mat q, k, v;
    std::vector<Mat> probs;  // [seq * heads + head], T x T
    Mat attn;                // concatenated head outputs, N x d
    Mat attn_out;            // after Wo (+ O injection)
    Mat h1;
    Mat xf;
    Vec inv_f;
    Mat u;                   // FFN pre-activation
    Mat z;                   // silu(u)
    Mat ffn_out;
    std::vector<ViewState> views;
    std::array<std::optional<Mat>, injection::kNumSites> delta;
  };

  std::vector<TokenId> tokens;
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::size_t step = 0;
  Mat embedded;  // token + position embeddings
  std::vector<Layer> layers;
  Mat h_final;
  Mat xn;
  Vec inv_n;
  Mat logits;
};

class Model {
 public:
  // `plan` may be null only when `injection` has no enabled views.
  Model(BackboneConfig backbone, injection::InjectionConfig injection,
        std::shared_ptr<const routing::RoutingPlan> plan, std::uint64_t seed,
        std::size_t gate_warmup_steps = 0);

  const BackboneConfig& backbone() const { return cfg_; }
  const injection::InjectionConfig& injection() const { return inj_; }
  const routing::RoutingPlan* plan() const { return plan_.get(); }
  const injection::WarmupSchedule& gate_schedule() const { return schedule_; }
  void set_gate_warmup(std::size_t steps) { schedule_.total_warm_steps = steps; }

  BackboneWeights& weights() { return w_; }
  const BackboneWeights& weights() const { return w_; }
  std::vector<std::vector<View>>& views() { return views_; }
  const std::vector<std::vector<View>>& views() const { return views_; }

  // tokens holds `batch` sequences of equal length <= seq_len. Returns N x |V| logits.
  Mat forward(std::span<const TokenId> tokens, std::size_t batch, std::size_t step,
              ForwardCache* cache = nullptr, bool record_hits = false);

  // Mean next-token cross entropy; targets align with tokens.
  double loss(std::span<const TokenId> tokens, std::span<const TokenId> targets, std::size_t batch,
              std::size_t step);

  // Forward + backward; gradients accumulate into the grad buffers.
  double loss_and_backward(std::span<const TokenId> tokens, std::span<const TokenId> targets,
                           std::size_t batch, std::size_t step, bool record_hits = false);

  // Backward from an arbitrary upstream gradient on the logits.
  void backward(const ForwardCache& cache, const Mat& dlogits);

  void zero_grad();
  std::vector<ParamRef> parameters();
  std::size_t lookup_rows() const;
  const routing::AccessIndex& access_index() const { return index_; }
  // Per-row LR multipliers for the lookup group: VIP rows vs body rows.
  void set_lookup_lr_scales(double vip, double body);

  checkpoint::Archive save(std::string meta) const;
  void load(const checkpoint::Archive& archive);

  void reset_hits();

 private:
  void init_backbone(std::uint64_t seed);
  void init_views(std::uint64_t seed);
  void compute_views(std::size_t layer, std::size_t step, std::span<const TokenId> tokens,
                     std::size_t batch, std::size_t seq_len, ForwardCache::Layer& lc,
                     bool record_hits);
  void backward_views(std::size_t layer, const ForwardCache& cache, const ForwardCache::Layer& lc,
                      const std::array<std::optional<Mat>, injection::kNumSites>& d_delta);

  BackboneConfig cfg_;
  injection::InjectionConfig inj_;
  std::shared_ptr<const routing::RoutingPlan> plan_;
  routing::AccessIndex index_;
  injection::WarmupSchedule schedule_;
  BackboneWeights w_;
  BackboneWeights g_;
  std::vector<std::vector<View>> views_;
  std::vector<double> lookup_row_scale_;
};

// Mean cross entropy of logits against targets; optionally writes dLoss/dLogits.
double cross_entropy(const Mat& logits, std::span<const TokenId> targets, Mat* dlogits = nullptr);

// Causal grouped-query attention over one sequence. q is T x (h*hd), k and v
// are T x (h_kv*hd). Returns T x (h*hd).
Mat grouped_attention(const Mat& q, const Mat& k, const Mat& v, std::size_t heads,
                      std::size_t kv_heads);

// Clips the global gradient norm to max_norm; returns the norm before clipping.
double clip_global_norm(std::span<ParamRef> params, double max_norm);
double global_grad_norm(std::span<const ParamRef> params);

// AdamW with a backbone group and a lookup group. Both follow the cosine
// schedule with linear warmup; the lookup group additionally gets
// lookup_lr_multiplier(S) times the same warmup factor, and per-row VIP/body scales.
class AdamW {
 public:
  AdamW(OptimizerConfig cfg, std::size_t total_steps, std::size_t lookup_rows);

  double lr_at(std::size_t step) const;
  double lookup_lr_at(std::size_t step) const;
  std::size_t warmup_steps() const { return warmup_; }

  void step(std::span<ParamRef> params, std::size_t step_index);

 private:
  OptimizerConfig cfg_;
  std::size_t total_steps_;
  std::size_t warmup_;
  double lookup_mult_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace xgram::model
