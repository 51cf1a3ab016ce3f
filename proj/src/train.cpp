#include "xgram/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <unordered_set>

#include "xgram/error.hpp"

namespace xgram::train {

namespace {

constexpr char kHitsMagic[] = {'X', 'G', 'R', 'M', 'H', 'I', 'T', 'S'};
constexpr char kAccessMagic[] = {'X', 'G', 'R', 'M', 'A', 'C', 'C', 'S'};
constexpr std::uint32_t kHitsVersion = 1;
constexpr std::uint32_t kAccessVersion = 1;

std::string_view magic(const char (&m)[8]) { return {m, 8}; }

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

[[noreturn]] void numeric_failure(const model::Model& m, std::size_t step, const std::string& what,
                                  double value) {
  std::ostringstream os;
  os << "non-finite " << what << " (" << value << ") at step " << step;
  const auto& views = m.views();
  for (std::size_t l = 0; l < views.size(); ++l) {
    if (views[l].empty()) continue;
    os << "\n  layer " << l << ":";
    for (const auto& v : views[l]) {
      const auto& a = v.table.gates();
      os << " [" << injection::site_name(v.spec.site) << " lambda=" << v.lambda
         << " g=" << injection::gate_value(v.lambda, l, step, m.gate_schedule())
         << " a in [" << (a.size() ? a.minCoeff() : 0.0) << ", " << (a.size() ? a.maxCoeff() : 0.0)
         << "]]";
    }
  }
  throw NumericError(os.str());
}

}  // namespace

void TrainConfig::validate() const {
  if (steps == 0) throw ValidationError("steps must be positive");
  if (batch == 0) throw ValidationError("batch must be positive");
  if (eval_batches == 0) throw ValidationError("eval_batches must be positive");
}

void make_batch(const data::Source& source, bool validation, std::uint64_t first_index,
                std::size_t batch, std::size_t seq_len, std::vector<stats::TokenId>& inputs,
                std::vector<stats::TokenId>& targets) {
  inputs.resize(batch * seq_len);
  targets.resize(batch * seq_len);
  std::vector<stats::TokenId> seq(seq_len + 1);
  for (std::size_t b = 0; b < batch; ++b) {
    source.sequence(validation, first_index + b, seq);
    std::copy(seq.begin(), seq.end() - 1, inputs.begin() + static_cast<std::ptrdiff_t>(b * seq_len));
    std::copy(seq.begin() + 1, seq.end(), targets.begin() + static_cast<std::ptrdiff_t>(b * seq_len));
  }
}

double evaluate(model::Model& model, const data::Source& source, std::size_t batches,
                std::size_t batch, std::size_t step) {
  std::vector<stats::TokenId> inputs, targets;
  double total = 0.0;
  for (std::size_t i = 0; i < batches; ++i) {
    make_batch(source, true, i * batch, batch, model.backbone().seq_len, inputs, targets);
    total += model.loss(inputs, targets, batch, step);
  }
  return total / static_cast<double>(batches);
}

std::vector<AccessRecord> batch_access(const model::Model& model,
                                       std::span<const stats::TokenId> tokens) {
  std::vector<AccessRecord> out;
  if (!model.plan() || model.access_index().vocab_size() == 0) return out;
  const auto& index = model.access_index();
  const std::unordered_set<stats::TokenId> unique(tokens.begin(), tokens.end());
  std::unordered_set<routing::RowIndex> rows;
  for (const auto t : unique)
    for (const auto& e : index.entries(t)) rows.insert(e.row);
  const auto& views = model.views();
  for (std::size_t l = 0; l < views.size(); ++l)
    for (std::size_t m = 0; m < views[l].size(); ++m)
      out.push_back({static_cast<std::uint32_t>(l), static_cast<std::uint32_t>(m),
                     static_cast<std::uint32_t>(views[l][m].width), index.physical_rows(),
                     static_cast<std::uint32_t>(index.max_entries()), unique.size(), rows.size()});
  return out;
}

TrainResult train(model::Model& model, const data::Source& source, const TrainConfig& cfg,
                  const model::OptimizerConfig& opt,
                  const std::function<void(const TraceRow&)>& on_step) {
  cfg.validate();
  opt.validate();
  if (source.vocab_size() != model.backbone().vocab_size)
    throw ValidationError("data vocabulary (" + std::to_string(source.vocab_size()) +
                          ") does not match the model (" +
                          std::to_string(model.backbone().vocab_size) + ")");
  const std::size_t T = model.backbone().seq_len;
  const std::size_t L = model.backbone().layers;
  model::AdamW adam(opt, cfg.steps, model.lookup_rows());
  model.set_gate_warmup(adam.warmup_steps());
  model.set_lookup_lr_scales(opt.vip_lr_scale, opt.body_lr_scale);
  auto params = model.parameters();

  TrainResult result;
  result.trace.reserve(cfg.steps);
  std::vector<stats::TokenId> inputs, targets;
  const std::uint64_t base = cfg.seed << 32;
  for (std::size_t u = 0; u < cfg.steps; ++u) {
    make_batch(source, false, base + u * cfg.batch, cfg.batch, T, inputs, targets);
    model.zero_grad();
    model::ForwardCache cache;
    const Mat logits = model.forward(inputs, cfg.batch, u, &cache, cfg.record_hits);
    Mat dlogits;
    const double loss = model::cross_entropy(logits, targets, &dlogits);
    if (!std::isfinite(loss)) numeric_failure(model, u, "training loss", loss);
    model.backward(cache, dlogits);
    const double norm = model::clip_global_norm(params, opt.grad_clip);
    if (!std::isfinite(norm)) numeric_failure(model, u, "gradient norm", norm);
    adam.step(params, u);

    TraceRow row;
    row.step = u;
    row.train_loss = loss;
    row.layer_gate.assign(L, 0.0);
    std::size_t sites = 0;
    for (std::size_t l = 0; l < L; ++l) {
      const auto& lc = cache.layers[l];
      for (const auto& d : lc.delta)
        if (d) {
          row.delta_rms += std::sqrt(d->squaredNorm() / static_cast<double>(d->size()));
          ++sites;
        }
      for (const auto& v : lc.views) row.layer_gate[l] += v.gate;
      if (!lc.views.empty()) row.layer_gate[l] /= static_cast<double>(lc.views.size());
    }
    if (sites) row.delta_rms /= static_cast<double>(sites);
    if (u + 1 == cfg.steps) {
      result.last_batch_access = batch_access(model, inputs);
      row.val_loss = evaluate(model, source, cfg.eval_batches, cfg.batch, cfg.steps);
      if (!std::isfinite(row.val_loss)) numeric_failure(model, u, "validation loss", row.val_loss);
      result.final_val_loss = row.val_loss;
    } else if (cfg.eval_every && (u + 1) % cfg.eval_every == 0) {
      row.val_loss = evaluate(model, source, cfg.eval_batches, cfg.batch, u + 1);
    }
    if (on_step) on_step(row);
    result.trace.push_back(std::move(row));
  }
  return result;
}

std::string trace_csv(const std::vector<TraceRow>& trace, std::size_t layers) {
  std::string out = "step,train_loss,val_loss,delta_rms";
  for (std::size_t l = 0; l < layers; ++l) out += ",g_" + std::to_string(l);
  out += '\n';
  for (const auto& r : trace) {
    out += std::to_string(r.step) + ',' + fmt(r.train_loss) + ',';
    if (!std::isnan(r.val_loss)) out += fmt(r.val_loss);
    out += ',' + fmt(r.delta_rms);
    for (std::size_t l = 0; l < layers; ++l)
      out += ',' + fmt(l < r.layer_gate.size() ? r.layer_gate[l] : 0.0);
    out += '\n';
  }
  return out;
}

std::vector<TableHits> collect_hits(const model::Model& model) {
  std::vector<TableHits> out;
  const auto& views = model.views();
  for (std::size_t l = 0; l < views.size(); ++l)
    for (std::size_t m = 0; m < views[l].size(); ++m)
      out.push_back({static_cast<std::uint32_t>(l), static_cast<std::uint32_t>(m),
                     views[l][m].table.hits()});
  return out;
}

io::Bytes serialize_hits(const std::vector<TableHits>& tables) {
  io::Writer w;
  io::begin_artifact(w, magic(kHitsMagic), kHitsVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tables.size()));
  for (const auto& t : tables) {
    w.put<std::uint32_t>(t.layer);
    w.put<std::uint32_t>(t.view);
    w.put<std::uint64_t>(t.hits.entries.size());
    w.put<std::uint64_t>(t.hits.lookups);
    w.put_array<std::uint64_t>(t.hits.entries);
    w.put_array<double>(t.hits.mass);
  }
  return io::finish_artifact(w);
}

std::vector<TableHits> deserialize_hits(std::span<const std::uint8_t> bytes) {
  auto r = io::open_artifact(bytes, magic(kHitsMagic), kHitsVersion, "hits");
  std::vector<TableHits> out(r.get<std::uint32_t>());
  for (auto& t : out) {
    t.layer = r.get<std::uint32_t>();
    t.view = r.get<std::uint32_t>();
    const auto rows = r.get<std::uint64_t>();
    t.hits.lookups = r.get<std::uint64_t>();
    t.hits.entries = r.get_array<std::uint64_t>(rows);
    t.hits.mass = r.get_array<double>(rows);
    t.hits.total_entries = 0;
    for (const auto e : t.hits.entries) t.hits.total_entries += e;
  }
  if (r.remaining() != 0) r.fail("trailing bytes");
  return out;
}

io::Bytes serialize_access(const std::vector<AccessRecord>& records) {
  io::Writer w;
  io::begin_artifact(w, magic(kAccessMagic), kAccessVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(records.size()));
  for (const auto& a : records) {
    w.put(a.layer);
    w.put(a.view);
    w.put(a.width);
    w.put(a.rows);
    w.put(a.max_paths);
    w.put(a.unique_tokens);
    w.put(a.unique_rows);
  }
  return io::finish_artifact(w);
}

std::vector<AccessRecord> deserialize_access(std::span<const std::uint8_t> bytes) {
  auto r = io::open_artifact(bytes, magic(kAccessMagic), kAccessVersion, "access trace");
  std::vector<AccessRecord> out(r.get<std::uint32_t>());
  for (auto& a : out) {
    a.layer = r.get<std::uint32_t>();
    a.view = r.get<std::uint32_t>();
    a.width = r.get<std::uint32_t>();
    a.rows = r.get<std::uint64_t>();
    a.max_paths = r.get<std::uint32_t>();
    a.unique_tokens = r.get<std::uint64_t>();
    a.unique_rows = r.get<std::uint64_t>();
  }
  if (r.remaining() != 0) r.fail("trailing bytes");
  return out;
}

}  // namespace xgram::train
