#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "xgram/data.hpp"
#include "xgram/io.hpp"
#include "xgram/model.hpp"

namespace xgram::train {

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch = 8;
  std::uint64_t seed = 0;        // model init and batch order
  std::size_t eval_every = 100;  // 0: evaluate only after the last step
  std::size_t eval_batches = 8;
  bool record_hits = true;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct TraceRow {
  std::size_t step = 0;
  double train_loss = 0.0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();  // NaN when not evaluated
  double delta_rms = 0.0;           // mean RMS(Delta) over injected (layer, site) pairs
  std::vector<double> layer_gate;   // mean g over each layer's views, 0 without views
};

// Unique rows touched by one batch in one table, for the offload model.
struct AccessRecord {
  std::uint32_t layer = 0;
  std::uint32_t view = 0;
  std::uint32_t width = 0;          // d_s
  std::uint64_t rows = 0;           // S
  std::uint32_t max_paths = 0;      // K
  std::uint64_t unique_tokens = 0;  // U
  std::uint64_t unique_rows = 0;    // U_l
};

struct TrainResult {
  std::vector<TraceRow> trace;
  double final_val_loss = std::numeric_limits<double>::quiet_NaN();
  std::vector<AccessRecord> last_batch_access;
};

// Trains in place. Batch b of step u is training sequence seed * 2^32 + u * batch + b
// of the source, each seq_len + 1 tokens long.
TrainResult train(model::Model& model, const data::Source& source, const TrainConfig& cfg,
                  const model::OptimizerConfig& opt,
                  const std::function<void(const TraceRow&)>& on_step = {});

// Mean validation loss over the fixed validation sequences [0, batches * batch).
double evaluate(model::Model& model, const data::Source& source, std::size_t batches,
                std::size_t batch, std::size_t step);

// Inputs / next-token targets for a batch of sequences.
void make_batch(const data::Source& source, bool validation, std::uint64_t first_index,
                std::size_t batch, std::size_t seq_len, std::vector<stats::TokenId>& inputs,
                std::vector<stats::TokenId>& targets);

std::vector<AccessRecord> batch_access(const model::Model& model,
                                       std::span<const stats::TokenId> tokens);

// CSV with columns step,train_loss,val_loss,delta_rms,g_0..g_{L-1}.
std::string trace_csv(const std::vector<TraceRow>& trace, std::size_t layers);

// Per-table hit counts: "XGRMHITS", u32 version, u32 table count, then per
// table u32 layer, u32 view, u64 rows, u64 lookups, u64 entries[rows], f64 mass[rows];
// trailing u64 checksum.
struct TableHits {
  std::uint32_t layer = 0;
  std::uint32_t view = 0;
  memory::HitCounter hits;
};
io::Bytes serialize_hits(const std::vector<TableHits>& tables);
std::vector<TableHits> deserialize_hits(std::span<const std::uint8_t> bytes);
std::vector<TableHits> collect_hits(const model::Model& model);

// "XGRMACCS", u32 version, u32 record count, packed records, trailing u64 checksum.
io::Bytes serialize_access(const std::vector<AccessRecord>& records);
std::vector<AccessRecord> deserialize_access(std::span<const std::uint8_t> bytes);

}  // namespace xgram::train
