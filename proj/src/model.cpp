#include "xgram/model.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "xgram/error.hpp"
#include "xgram/rng.hpp"

namespace xgram::model {

namespace {

using injection::Site;

constexpr double kNormEps = 1e-6;

void fill_normal(Mat& m, SplitMix64& rng, double stddev) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
}

// y = x / rms(x); inv receives the per-row 1 / rms.
Mat rms_normalize(const Mat& x, Vec& inv) {
  const double n = static_cast<double>(x.cols());
  inv.resize(x.rows());
  Mat out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    inv[r] = 1.0 / std::sqrt(x.row(r).squaredNorm() / n + kNormEps);
    out.row(r) = x.row(r) * inv[r];
  }
  return out;
}

// Gradient through x -> x / rms(x), given the normalized rows and 1 / rms.
Mat rms_normalize_backward(const Mat& normed, const Vec& inv, const Mat& upstream) {
  const double n = static_cast<double>(normed.cols());
  Mat dx(normed.rows(), normed.cols());
  for (Eigen::Index r = 0; r < normed.rows(); ++r) {
    const double dot = normed.row(r).dot(upstream.row(r)) / n;
    dx.row(r) = inv[r] * (upstream.row(r) - dot * normed.row(r));
  }
  return dx;
}

Mat scale_columns(const Mat& x, const Vec& w) {
  return (x.array().rowwise() * w.transpose().array()).matrix();
}

// Causal softmax attention for one head; returns probabilities (T x T).
Mat attend_head(const Mat& q, const Mat& k, const Mat& v, Mat& out) {
  const Eigen::Index T = q.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Mat probs = Mat::Zero(T, T);
  const Mat scores = (q * k.transpose()) * scale;
  for (Eigen::Index t = 0; t < T; ++t) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index s = 0; s <= t; ++s) mx = std::max(mx, scores(t, s));
    double sum = 0.0;
    for (Eigen::Index s = 0; s <= t; ++s) {
      const double e = std::exp(scores(t, s) - mx);
      probs(t, s) = e;
      sum += e;
    }
    probs.row(t).head(t + 1) /= sum;
  }
  out = probs * v;
  return probs;
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }

double silu_grad(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

std::span<double> span_of(Mat& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }
std::span<double> span_of(Vec& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

}  // namespace

void BackboneConfig::validate() const {
  if (layers == 0 || width == 0 || ffn_width == 0 || heads == 0 || kv_heads == 0 ||
      seq_len == 0 || vocab_size == 0)
    throw ValidationError("backbone dimensions must be positive");
  if (width % heads != 0) throw ValidationError("width must be divisible by heads");
  if (heads % kv_heads != 0) throw ValidationError("heads must be divisible by kv_heads");
  if ((kv_heads * width) % heads != 0) throw ValidationError("d_kv = (h_kv / h) * d must be integral");
}

BackboneConfig BackboneConfig::preset(const std::string& name) {
  if (name == "desk") return {};
  if (name == "toy") return {2, 64, 256, 4, 2, 64, 1024};
  if (name == "ref-small") return {10, 1536, 4096, 12, 6, 8192, 151936};
  if (name == "ref-medium") return {12, 2048, 5120, 16, 8, 8192, 151936};
  throw ValidationError("unknown backbone preset '" + name + "'");
}

void OptimizerConfig::validate() const {
  if (!(base_lr > 0.0)) throw ValidationError("base_lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
    throw ValidationError("adam betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw ValidationError("adam eps must be positive");
  if (!(weight_decay >= 0.0)) throw ValidationError("weight_decay must be non-negative");
  if (!(grad_clip > 0.0)) throw ValidationError("grad_clip must be positive");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0))
    throw ValidationError("warmup_fraction must lie in [0, 1)");
  if (!(min_lr_ratio >= 0.0 && min_lr_ratio <= 1.0))
    throw ValidationError("min_lr_ratio must lie in [0, 1]");
  if (!(lookup_lr_cap >= 1.0)) throw ValidationError("lookup_lr_cap must be at least 1");
  if (!(lookup_ref_rows > 0.0)) throw ValidationError("lookup_ref_rows must be positive");
  if (!(vip_lr_scale > 0.0 && body_lr_scale > 0.0))
    throw ValidationError("lookup row LR scales must be positive");
}

double lookup_lr_multiplier(std::size_t rows, const OptimizerConfig& cfg) {
  if (rows == 0) throw ValidationError("lookup table must have at least one row");
  return std::min(std::sqrt(static_cast<double>(rows) / cfg.lookup_ref_rows), cfg.lookup_lr_cap);
}

BackboneWeights BackboneWeights::zeros(const BackboneConfig& cfg) {
  const auto d = static_cast<Eigen::Index>(cfg.width);
  const auto dkv = static_cast<Eigen::Index>(cfg.kv_width());
  const auto ff = static_cast<Eigen::Index>(cfg.ffn_width);
  const auto V = static_cast<Eigen::Index>(cfg.vocab_size);
  BackboneWeights w;
  w.tok_emb = Mat::Zero(V, d);
  w.pos_emb = Mat::Zero(static_cast<Eigen::Index>(cfg.seq_len), d);
  w.layers.resize(cfg.layers);
  for (auto& l : w.layers) {
    l.attn_norm = Vec::Zero(d);
    l.ffn_norm = Vec::Zero(d);
    l.wq = Mat::Zero(d, d);
    l.wk = Mat::Zero(d, dkv);
    l.wv = Mat::Zero(d, dkv);
    l.wo = Mat::Zero(d, d);
    l.w1 = Mat::Zero(d, ff);
    l.w2 = Mat::Zero(ff, d);
  }
  w.final_norm = Vec::Zero(d);
  w.lm_head = Mat::Zero(d, V);
  return w;
}

void BackboneWeights::set_zero() {
  tok_emb.setZero();
  pos_emb.setZero();
  for (auto& l : layers) {
    l.attn_norm.setZero();
    l.ffn_norm.setZero();
    l.wq.setZero();
    l.wk.setZero();
    l.wv.setZero();
    l.wo.setZero();
    l.w1.setZero();
    l.w2.setZero();
  }
  final_norm.setZero();
  lm_head.setZero();
}

Model::Model(BackboneConfig backbone, injection::InjectionConfig injection,
             std::shared_ptr<const routing::RoutingPlan> plan, std::uint64_t seed,
             std::size_t gate_warmup_steps)
    : cfg_(backbone), inj_(std::move(injection)), plan_(std::move(plan)) {
  cfg_.validate();
  schedule_.total_warm_steps = gate_warmup_steps;
  if (inj_.layers.empty()) inj_.layers.resize(cfg_.layers);
  if (inj_.layers.size() != cfg_.layers)
    throw ValidationError("injection config lists " + std::to_string(inj_.layers.size()) +
                          " layers but the backbone has " + std::to_string(cfg_.layers));
  if (!inj_.empty()) {
    if (!plan_) throw ValidationError("injected views require a routing plan");
    if (plan_->vocab_size != cfg_.vocab_size)
      throw ValidationError("routing plan vocabulary (" + std::to_string(plan_->vocab_size) +
                            ") does not match the backbone (" + std::to_string(cfg_.vocab_size) +
                            ")");
    index_ = routing::AccessIndex(*plan_);
    lookup_row_scale_.assign(plan_->physical_rows, 1.0);
  }
  init_backbone(seed);
  init_views(seed);
}

void Model::init_backbone(std::uint64_t seed) {
  w_ = BackboneWeights::zeros(cfg_);
  g_ = BackboneWeights::zeros(cfg_);
  SplitMix64 rng(mix_combine(seed, 1));
  const double d = static_cast<double>(cfg_.width);
  const double depth_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg_.layers));
  fill_normal(w_.tok_emb, rng, 1.0 / std::sqrt(d));
  fill_normal(w_.pos_emb, rng, 0.1 / std::sqrt(d));
  for (auto& l : w_.layers) {
    l.attn_norm.setOnes();
    l.ffn_norm.setOnes();
    fill_normal(l.wq, rng, 1.0 / std::sqrt(d));
    fill_normal(l.wk, rng, 1.0 / std::sqrt(d));
    fill_normal(l.wv, rng, 1.0 / std::sqrt(d));
    fill_normal(l.wo, rng, depth_scale / std::sqrt(d));
    fill_normal(l.w1, rng, 1.0 / std::sqrt(d));
    fill_normal(l.w2, rng, depth_scale / std::sqrt(static_cast<double>(cfg_.ffn_width)));
  }
  w_.final_norm.setOnes();
  fill_normal(w_.lm_head, rng, 1.0 / std::sqrt(d));
}

void Model::init_views(std::uint64_t seed) {
  views_.assign(cfg_.layers, {});
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    for (std::size_t m = 0; m < inj_.layers[l].size(); ++m) {
      const auto& spec = inj_.layers[l][m];
      if (!spec.enabled) continue;
      if (spec.rho > 0.0 && std::abs(spec.rho - plan_->config.rho) > 1e-12)
        throw ValidationError("view at layer " + std::to_string(l) + " asks for rho " +
                              std::to_string(spec.rho) + " but the routing plan uses " +
                              std::to_string(plan_->config.rho));
      if (spec.extract && spec.kernel_size < 1)
        throw ValidationError("view kernel size must be at least 1");
      View v;
      v.spec = spec;
      v.width = injection::site_width(spec.site, cfg_.width, cfg_.kv_width());
      const std::uint64_t key = mix_combine(mix_combine(seed, 1000 + l), m);
      v.table = memory::init_table(plan_->physical_rows, v.width, mix_combine(key, 1));
      v.conv = shortconv::init_params(v.width, std::max<std::size_t>(spec.kernel_size, 1),
                                      mix_combine(key, 2));
      v.conv_grad = shortconv::Grads::zeros_like(v.conv);
      v.lambda = spec.lambda_init;
      views_[l].push_back(std::move(v));
    }
  }
}

void Model::set_lookup_lr_scales(double vip, double body) {
  if (!plan_) return;
  for (std::size_t r = 0; r < lookup_row_scale_.size(); ++r)
    lookup_row_scale_[r] = plan_->is_vip_row(static_cast<routing::RowIndex>(r)) ? vip : body;
}

std::size_t Model::lookup_rows() const { return plan_ ? plan_->physical_rows : 0; }

void Model::compute_views(std::size_t layer, std::size_t step, std::span<const TokenId> tokens,
                          std::size_t batch, std::size_t seq_len, ForwardCache::Layer& lc,
                          bool record_hits) {
  auto& vs = views_[layer];
  lc.views.clear();
  for (auto& d : lc.delta) d.reset();
  if (vs.empty()) return;

  const auto N = static_cast<Eigen::Index>(tokens.size());
  const auto T = static_cast<Eigen::Index>(seq_len);
  std::array<std::size_t, injection::kNumSites> per_site{};
  for (const auto& v : vs) ++per_site[static_cast<std::size_t>(v.spec.site)];

  lc.views.resize(vs.size());
  for (std::size_t m = 0; m < vs.size(); ++m) {
    auto& view = vs[m];
    auto& st = lc.views[m];
    const auto w = static_cast<Eigen::Index>(view.width);
    st.retrieved.resize(N, w);
    for (Eigen::Index i = 0; i < N; ++i) {
      const auto acc = index_.entries(tokens[static_cast<std::size_t>(i)]);
      memory::retrieve_into(view.table, acc,
                            std::span(st.retrieved.data() + i * w, static_cast<std::size_t>(w)));
      if (record_hits) view.table.hits().record(acc);
    }
    if (view.spec.extract) {
      st.extracted.resize(N, w);
      st.conv.resize(batch);
      for (std::size_t b = 0; b < batch; ++b) {
        const auto rows = static_cast<Eigen::Index>(b) * T;
        st.extracted.middleRows(rows, T) =
            shortconv::extract_forward(st.retrieved.middleRows(rows, T), view.conv, st.conv[b]);
      }
    } else {
      st.extracted = st.retrieved;
    }
    st.gate = injection::gate_value(view.lambda, layer, step, schedule_);

    const auto site = static_cast<std::size_t>(view.spec.site);
    auto& delta = lc.delta[site];
    if (!delta) delta = Mat::Zero(N, w);
    const double norm = 1.0 / std::sqrt(static_cast<double>(per_site[site]));
    *delta += (st.gate * norm) * st.extracted;
  }
}

Mat Model::forward(std::span<const TokenId> tokens, std::size_t batch, std::size_t step,
                   ForwardCache* cache, bool record_hits) {
  if (batch == 0 || tokens.empty() || tokens.size() % batch != 0)
    throw ValidationError("token count must be a positive multiple of the batch size");
  const std::size_t T = tokens.size() / batch;
  if (T > cfg_.seq_len)
    throw ValidationError("sequence length " + std::to_string(T) + " exceeds configured maximum " +
                          std::to_string(cfg_.seq_len));
  for (std::size_t i = 0; i < tokens.size(); ++i)
    if (tokens[i] >= cfg_.vocab_size) throw TokenRangeError(i, tokens[i], cfg_.vocab_size);

  ForwardCache local;
  ForwardCache& c = cache ? *cache : local;
  c.tokens.assign(tokens.begin(), tokens.end());
  c.batch = batch;
  c.seq_len = T;
  c.step = step;

  const auto N = static_cast<Eigen::Index>(tokens.size());
  const auto Ti = static_cast<Eigen::Index>(T);
  const auto d = static_cast<Eigen::Index>(cfg_.width);
  const auto hd = static_cast<Eigen::Index>(cfg_.head_dim());
  const auto H = static_cast<Eigen::Index>(cfg_.heads);
  const auto group = static_cast<Eigen::Index>(cfg_.heads / cfg_.kv_heads);

  Mat h(N, d);
  for (Eigen::Index i = 0; i < N; ++i)
    h.row(i) = w_.tok_emb.row(tokens[static_cast<std::size_t>(i)]) + w_.pos_emb.row(i % Ti);
  c.embedded = h;
  c.layers.resize(cfg_.layers);

  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    auto& lc = c.layers[l];
    const auto& lw = w_.layers[l];
    compute_views(l, step, tokens, batch, T, lc, record_hits);

    if (const auto& di = lc.delta[static_cast<std::size_t>(Site::kInterLayer)])
      injection::inject(Site::kInterLayer, h, *di);
    lc.h_in = h;
    lc.xa = rms_normalize(h, lc.inv_a);
    const Mat ya = scale_columns(lc.xa, lw.attn_norm);
    lc.q.noalias() = ya * lw.wq;
    lc.k.noalias() = ya * lw.wk;
    lc.v.noalias() = ya * lw.wv;
    if (const auto& dq = lc.delta[static_cast<std::size_t>(Site::kQ)])
      injection::inject(Site::kQ, lc.q, *dq, cfg_.head_dim());
    if (const auto& dk = lc.delta[static_cast<std::size_t>(Site::kK)])
      injection::inject(Site::kK, lc.k, *dk);
    if (const auto& dv = lc.delta[static_cast<std::size_t>(Site::kV)])
      injection::inject(Site::kV, lc.v, *dv);

    lc.attn.resize(N, d);
    lc.probs.resize(batch * cfg_.heads);
    for (std::size_t b = 0; b < batch; ++b) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(b) * Ti;
      for (Eigen::Index hh = 0; hh < H; ++hh) {
        const Eigen::Index g = hh / group;
        Mat out;
        lc.probs[b * cfg_.heads + static_cast<std::size_t>(hh)] =
            attend_head(lc.q.block(r0, hh * hd, Ti, hd), lc.k.block(r0, g * hd, Ti, hd),
                        lc.v.block(r0, g * hd, Ti, hd), out);
        lc.attn.block(r0, hh * hd, Ti, hd) = out;
      }
    }
    lc.attn_out.noalias() = lc.attn * lw.wo;
    if (const auto& dout = lc.delta[static_cast<std::size_t>(Site::kO)])
      injection::inject(Site::kO, lc.attn_out, *dout);
    lc.h1 = lc.h_in + lc.attn_out;

    lc.xf = rms_normalize(lc.h1, lc.inv_f);
    lc.u.noalias() = scale_columns(lc.xf, lw.ffn_norm) * lw.w1;
    lc.z = lc.u.unaryExpr([](double x) { return silu(x); });
    lc.ffn_out.noalias() = lc.z * lw.w2;
    h = lc.h1 + lc.ffn_out;
  }

  c.h_final = h;
  c.xn = rms_normalize(h, c.inv_n);
  c.logits.noalias() = scale_columns(c.xn, w_.final_norm) * w_.lm_head;
  return c.logits;
}

double cross_entropy(const Mat& logits, std::span<const TokenId> targets, Mat* dlogits) {
  if (static_cast<std::size_t>(logits.rows()) != targets.size())
    throw ValidationError("cross entropy: one target per logit row required");
  const double inv_n = 1.0 / static_cast<double>(logits.rows());
  if (dlogits) dlogits->resize(logits.rows(), logits.cols());
  double total = 0.0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const auto target = static_cast<Eigen::Index>(targets[static_cast<std::size_t>(r)]);
    if (target >= logits.cols()) throw TokenRangeError(static_cast<std::size_t>(r), targets[r], logits.cols());
    const double mx = logits.row(r).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) sum += std::exp(logits(r, c) - mx);
    const double log_z = mx + std::log(sum);
    total += log_z - logits(r, target);
    if (dlogits) {
      for (Eigen::Index c = 0; c < logits.cols(); ++c)
        (*dlogits)(r, c) = std::exp(logits(r, c) - log_z) * inv_n;
      (*dlogits)(r, target) -= inv_n;
    }
  }
  return total * inv_n;
}

double Model::loss(std::span<const TokenId> tokens, std::span<const TokenId> targets,
                   std::size_t batch, std::size_t step) {
  return cross_entropy(forward(tokens, batch, step), targets);
}

double Model::loss_and_backward(std::span<const TokenId> tokens, std::span<const TokenId> targets,
                                std::size_t batch, std::size_t step, bool record_hits) {
  ForwardCache cache;
  const Mat logits = forward(tokens, batch, step, &cache, record_hits);
  Mat dlogits;
  const double value = cross_entropy(logits, targets, &dlogits);
  backward(cache, dlogits);
  return value;
}

void Model::backward(const ForwardCache& c, const Mat& dlogits) {
  const auto N = static_cast<Eigen::Index>(c.tokens.size());
  const auto Ti = static_cast<Eigen::Index>(c.seq_len);
  const auto d = static_cast<Eigen::Index>(cfg_.width);
  const auto hd = static_cast<Eigen::Index>(cfg_.head_dim());
  const auto H = static_cast<Eigen::Index>(cfg_.heads);
  const auto dkv = static_cast<Eigen::Index>(cfg_.kv_width());
  const auto group = static_cast<Eigen::Index>(cfg_.heads / cfg_.kv_heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  if (dlogits.rows() != N || dlogits.cols() != static_cast<Eigen::Index>(cfg_.vocab_size))
    throw ValidationError("backward: logit gradient shape mismatch");

  g_.lm_head.noalias() += scale_columns(c.xn, w_.final_norm).transpose() * dlogits;
  const Mat dyn = dlogits * w_.lm_head.transpose();
  g_.final_norm += (dyn.array() * c.xn.array()).colwise().sum().transpose().matrix();
  Mat dh = rms_normalize_backward(c.xn, c.inv_n, scale_columns(dyn, w_.final_norm));

  for (std::size_t li = cfg_.layers; li-- > 0;) {
    const auto& lc = c.layers[li];
    const auto& lw = w_.layers[li];
    auto& lg = g_.layers[li];

    // FFN block.
    Mat dh1 = dh;
    g_.layers[li].w2.noalias() += lc.z.transpose() * dh;
    Mat du = dh * lw.w2.transpose();
    for (Eigen::Index i = 0; i < du.size(); ++i) du.data()[i] *= silu_grad(lc.u.data()[i]);
    const Mat yf = scale_columns(lc.xf, lw.ffn_norm);
    lg.w1.noalias() += yf.transpose() * du;
    const Mat dyf = du * lw.w1.transpose();
    lg.ffn_norm += (dyf.array() * lc.xf.array()).colwise().sum().transpose().matrix();
    dh1 += rms_normalize_backward(lc.xf, lc.inv_f, scale_columns(dyf, lw.ffn_norm));

    // Attention block.
    Mat dh_in = dh1;
    lg.wo.noalias() += lc.attn.transpose() * dh1;
    const Mat dattn = dh1 * lw.wo.transpose();
    Mat dq = Mat::Zero(N, d);
    Mat dk = Mat::Zero(N, dkv);
    Mat dv = Mat::Zero(N, dkv);
    for (std::size_t b = 0; b < c.batch; ++b) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(b) * Ti;
      for (Eigen::Index hh = 0; hh < H; ++hh) {
        const Eigen::Index g = hh / group;
        const Mat& P = lc.probs[b * cfg_.heads + static_cast<std::size_t>(hh)];
        const Mat dO = dattn.block(r0, hh * hd, Ti, hd);
        const Mat Vg = lc.v.block(r0, g * hd, Ti, hd);
        const Mat Kg = lc.k.block(r0, g * hd, Ti, hd);
        const Mat Qh = lc.q.block(r0, hh * hd, Ti, hd);
        const Mat dP = dO * Vg.transpose();
        dv.block(r0, g * hd, Ti, hd).noalias() += P.transpose() * dO;
        Mat dS = P.cwiseProduct(dP);
        const Vec rowdot = dS.rowwise().sum();
        dS = P.cwiseProduct(dP.colwise() - rowdot) * scale;
        dq.block(r0, hh * hd, Ti, hd).noalias() += dS * Kg;
        dk.block(r0, g * hd, Ti, hd).noalias() += dS.transpose() * Qh;
      }
    }

    std::array<std::optional<Mat>, injection::kNumSites> d_delta;
    if (lc.delta[static_cast<std::size_t>(Site::kO)]) d_delta[static_cast<std::size_t>(Site::kO)] = dh1;
    if (lc.delta[static_cast<std::size_t>(Site::kV)]) d_delta[static_cast<std::size_t>(Site::kV)] = dv;
    if (lc.delta[static_cast<std::size_t>(Site::kK)]) d_delta[static_cast<std::size_t>(Site::kK)] = dk;
    if (const auto& dq_delta = lc.delta[static_cast<std::size_t>(Site::kQ)]) {
      Mat folded = Mat::Zero(N, dq_delta->cols());
      for (Eigen::Index hh = 0; hh < H; ++hh)
        folded.middleCols((hh / group) * hd, hd) += dq.middleCols(hh * hd, hd);
      d_delta[static_cast<std::size_t>(Site::kQ)] = std::move(folded);
    }

    const Mat ya = scale_columns(lc.xa, lw.attn_norm);
    lg.wq.noalias() += ya.transpose() * dq;
    lg.wk.noalias() += ya.transpose() * dk;
    lg.wv.noalias() += ya.transpose() * dv;
    Mat dya = dq * lw.wq.transpose();
    dya.noalias() += dk * lw.wk.transpose();
    dya.noalias() += dv * lw.wv.transpose();
    lg.attn_norm += (dya.array() * lc.xa.array()).colwise().sum().transpose().matrix();
    dh_in += rms_normalize_backward(lc.xa, lc.inv_a, scale_columns(dya, lw.attn_norm));

    if (lc.delta[static_cast<std::size_t>(Site::kInterLayer)])
      d_delta[static_cast<std::size_t>(Site::kInterLayer)] = dh_in;
    backward_views(li, c, lc, d_delta);
    dh = std::move(dh_in);
  }

  for (Eigen::Index i = 0; i < N; ++i) {
    g_.tok_emb.row(c.tokens[static_cast<std::size_t>(i)]) += dh.row(i);
    g_.pos_emb.row(i % Ti) += dh.row(i);
  }
}

void Model::backward_views(std::size_t layer, const ForwardCache& cache,
                           const ForwardCache::Layer& lc,
                           const std::array<std::optional<Mat>, injection::kNumSites>& d_delta) {
  auto& vs = views_[layer];
  if (vs.empty()) return;
  const auto T = static_cast<Eigen::Index>(cache.seq_len);
  std::array<std::size_t, injection::kNumSites> per_site{};
  for (const auto& v : vs) ++per_site[static_cast<std::size_t>(v.spec.site)];
  const double depth_warm =
      std::sqrt(static_cast<double>(layer + 1)) * schedule_(cache.step);

  for (std::size_t m = 0; m < vs.size(); ++m) {
    auto& view = vs[m];
    const auto& st = lc.views[m];
    const auto site = static_cast<std::size_t>(view.spec.site);
    const auto& dd = d_delta[site];
    if (!dd) continue;
    const double norm = 1.0 / std::sqrt(static_cast<double>(per_site[site]));
    view.grad_lambda += depth_warm * norm * dd->cwiseProduct(st.extracted).sum();

    const Mat d_ext = (st.gate * norm) * (*dd);
    Mat d_ret;
    if (view.spec.extract) {
      d_ret.resize(d_ext.rows(), d_ext.cols());
      for (std::size_t b = 0; b < cache.batch; ++b) {
        const auto rows = static_cast<Eigen::Index>(b) * T;
        d_ret.middleRows(rows, T) =
            shortconv::extract_backward(st.conv[b], view.conv, d_ext.middleRows(rows, T), view.conv_grad);
      }
    } else {
      d_ret = d_ext;
    }
    const auto w = static_cast<std::size_t>(view.width);
    for (Eigen::Index i = 0; i < d_ret.rows(); ++i)
      memory::retrieve_backward(view.table, index_.entries(cache.tokens[static_cast<std::size_t>(i)]),
                                std::span<const double>(d_ret.data() + i * d_ret.cols(), w));
  }
}

void Model::zero_grad() {
  g_.set_zero();
  for (auto& layer : views_)
    for (auto& v : layer) {
      v.table.zero_grad();
      v.conv_grad.set_zero();
      v.grad_lambda = 0.0;
    }
}

void Model::reset_hits() {
  for (auto& layer : views_)
    for (auto& v : layer) v.table.hits().reset();
}

std::vector<ParamRef> Model::parameters() {
  std::vector<ParamRef> out;
  const auto add = [&](std::string name, auto& value, auto& grad, bool decay) {
    out.push_back({std::move(name), span_of(value), span_of(grad), ParamGroup::kBackbone, decay, 0,
                   nullptr});
  };
  add("tok_emb", w_.tok_emb, g_.tok_emb, false);
  add("pos_emb", w_.pos_emb, g_.pos_emb, false);
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    auto& lw = w_.layers[l];
    auto& lg = g_.layers[l];
    add(p + "attn_norm", lw.attn_norm, lg.attn_norm, false);
    add(p + "wq", lw.wq, lg.wq, true);
    add(p + "wk", lw.wk, lg.wk, true);
    add(p + "wv", lw.wv, lg.wv, true);
    add(p + "wo", lw.wo, lg.wo, true);
    add(p + "ffn_norm", lw.ffn_norm, lg.ffn_norm, false);
    add(p + "w1", lw.w1, lg.w1, true);
    add(p + "w2", lw.w2, lg.w2, true);
  }
  add("final_norm", w_.final_norm, g_.final_norm, false);
  add("lm_head", w_.lm_head, g_.lm_head, true);

  for (std::size_t l = 0; l < views_.size(); ++l)
    for (std::size_t m = 0; m < views_[l].size(); ++m) {
      auto& v = views_[l][m];
      const std::string p = "views." + std::to_string(l) + "." + std::to_string(m) + ".";
      out.push_back({p + "values", span_of(v.table.values()), span_of(v.table.grad_values()),
                     ParamGroup::kLookup, false, v.width, &lookup_row_scale_});
      out.push_back({p + "gates", span_of(v.table.gates()), span_of(v.table.grad_gates()),
                     ParamGroup::kLookup, false, 1, &lookup_row_scale_});
      if (v.spec.extract) {
        add(p + "conv_content", v.conv.content, v.conv_grad.content, false);
        add(p + "conv_gate", v.conv.gate, v.conv_grad.gate, false);
        add(p + "conv_bias", v.conv.bias, v.conv_grad.bias, false);
      }
      out.push_back({p + "lambda", std::span<double>(&v.lambda, 1), std::span<double>(&v.grad_lambda, 1),
                     ParamGroup::kBackbone, false, 0, nullptr});
    }
  return out;
}

checkpoint::Archive Model::save(std::string meta) const {
  checkpoint::Archive a;
  a.meta = std::move(meta);
  a.put("tok_emb", w_.tok_emb);
  a.put("pos_emb", w_.pos_emb);
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    const auto& lw = w_.layers[l];
    a.put(p + "attn_norm", lw.attn_norm);
    a.put(p + "wq", lw.wq);
    a.put(p + "wk", lw.wk);
    a.put(p + "wv", lw.wv);
    a.put(p + "wo", lw.wo);
    a.put(p + "ffn_norm", lw.ffn_norm);
    a.put(p + "w1", lw.w1);
    a.put(p + "w2", lw.w2);
  }
  a.put("final_norm", w_.final_norm);
  a.put("lm_head", w_.lm_head);
  for (std::size_t l = 0; l < views_.size(); ++l)
    for (std::size_t m = 0; m < views_[l].size(); ++m) {
      const auto& v = views_[l][m];
      const std::string p = "views." + std::to_string(l) + "." + std::to_string(m) + ".";
      a.put(p + "values", v.table.values());
      a.put(p + "gates", v.table.gates());
      a.put(p + "init", v.table.init_snapshot());
      a.put(p + "conv_content", v.conv.content);
      a.put(p + "conv_gate", v.conv.gate);
      a.put(p + "conv_bias", v.conv.bias);
      a.put_scalar(p + "lambda", v.lambda);
    }
  return a;
}

void Model::load(const checkpoint::Archive& a) {
  const auto assign = [&](const std::string& name, auto& dst) {
    using T = std::decay_t<decltype(dst)>;
    T src;
    if constexpr (std::is_same_v<T, Vec>)
      src = a.get_vec(name);
    else
      src = a.get_mat(name);
    if (src.rows() != dst.rows() || src.cols() != dst.cols())
      throw FormatError("checkpoint tensor '" + name + "' has the wrong shape");
    dst = std::move(src);
  };
  assign("tok_emb", w_.tok_emb);
  assign("pos_emb", w_.pos_emb);
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    auto& lw = w_.layers[l];
    assign(p + "attn_norm", lw.attn_norm);
    assign(p + "wq", lw.wq);
    assign(p + "wk", lw.wk);
    assign(p + "wv", lw.wv);
    assign(p + "wo", lw.wo);
    assign(p + "ffn_norm", lw.ffn_norm);
    assign(p + "w1", lw.w1);
    assign(p + "w2", lw.w2);
  }
  assign("final_norm", w_.final_norm);
  assign("lm_head", w_.lm_head);
  for (std::size_t l = 0; l < views_.size(); ++l)
    for (std::size_t m = 0; m < views_[l].size(); ++m) {
      auto& v = views_[l][m];
      const std::string p = "views." + std::to_string(l) + "." + std::to_string(m) + ".";
      Mat values = v.table.values();
      Vec gates = v.table.gates();
      Mat init = v.table.init_snapshot();
      assign(p + "values", values);
      assign(p + "gates", gates);
      assign(p + "init", init);
      v.table.restore(std::move(values), std::move(gates), std::move(init));
      assign(p + "conv_content", v.conv.content);
      assign(p + "conv_gate", v.conv.gate);
      assign(p + "conv_bias", v.conv.bias);
      v.lambda = a.get_scalar(p + "lambda");
    }
}

Mat grouped_attention(const Mat& q, const Mat& k, const Mat& v, std::size_t heads,
                      std::size_t kv_heads) {
  if (heads == 0 || kv_heads == 0 || heads % kv_heads != 0 ||
      q.cols() % static_cast<Eigen::Index>(heads) != 0)
    throw ValidationError("grouped attention: inconsistent head counts");
  const Eigen::Index hd = q.cols() / static_cast<Eigen::Index>(heads);
  if (k.cols() != hd * static_cast<Eigen::Index>(kv_heads) || v.cols() != k.cols() ||
      k.rows() != q.rows() || v.rows() != q.rows())
    throw ValidationError("grouped attention: key/value shape mismatch");
  const Eigen::Index group = static_cast<Eigen::Index>(heads / kv_heads);
  Mat out(q.rows(), q.cols());
  for (Eigen::Index h = 0; h < static_cast<Eigen::Index>(heads); ++h) {
    Mat o;
    attend_head(q.middleCols(h * hd, hd), k.middleCols((h / group) * hd, hd),
                v.middleCols((h / group) * hd, hd), o);
    out.middleCols(h * hd, hd) = o;
  }
  return out;
}

double global_grad_norm(std::span<const ParamRef> params) {
  double sq = 0.0;
  for (const auto& p : params)
    for (const double g : p.grad) sq += g * g;
  return std::sqrt(sq);
}

double clip_global_norm(std::span<ParamRef> params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& p : params)
      for (double& g : p.grad) g *= s;
  }
  return norm;
}

AdamW::AdamW(OptimizerConfig cfg, std::size_t total_steps, std::size_t lookup_rows)
    : cfg_(cfg), total_steps_(total_steps) {
  cfg_.validate();
  warmup_ = static_cast<std::size_t>(std::llround(cfg_.warmup_fraction * static_cast<double>(total_steps)));
  lookup_mult_ = lookup_rows > 0 ? lookup_lr_multiplier(lookup_rows, cfg_) : 1.0;
}

double AdamW::lr_at(std::size_t step) const {
  const double warm = injection::WarmupSchedule{warmup_}(step);
  double cosine = 1.0;
  if (total_steps_ > warmup_) {
    const double progress = std::clamp(
        static_cast<double>(step >= warmup_ ? step - warmup_ : 0) /
            static_cast<double>(total_steps_ - warmup_), 0.0, 1.0);
    cosine = cfg_.min_lr_ratio +
             (1.0 - cfg_.min_lr_ratio) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
  }
  return cfg_.base_lr * warm * cosine;
}

double AdamW::lookup_lr_at(std::size_t step) const {
  return lr_at(step) * lookup_mult_ * injection::WarmupSchedule{warmup_}(step);
}

void AdamW::step(std::span<ParamRef> params, std::size_t step_index) {
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i].value.size(), 0.0);
      v_[i].assign(params[i].value.size(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw ValidationError("optimizer parameter list changed");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const double lr = lr_at(step_index);
  const double lookup_lr = lookup_lr_at(step_index);

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& m = m_[i];
    auto& v = v_[i];
    const bool lookup = p.group == ParamGroup::kLookup;
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad[j];
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
      double eta = lr;
      if (lookup) {
        eta = lookup_lr;
        if (p.row_scale && p.row_width > 0) eta *= (*p.row_scale)[j / p.row_width];
      }
      if (p.decay) p.value[j] -= eta * cfg_.weight_decay * p.value[j];
      p.value[j] -= eta * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
    }
  }
}

}  // namespace xgram::model
