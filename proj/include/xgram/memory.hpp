#pragma once

#include <cstddef>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "xgram/routing.hpp"
#include "xgram/tensor.hpp"

namespace xgram::memory {

using routing::AccessEntry;

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Per-row access counts. `entries` counts access-list entries; `mass` spreads
// one unit per lookup across the entries in proportion to their coefficients.
struct HitCounter {
  std::vector<std::uint64_t> entries;
  std::vector<double> mass;
  std::uint64_t lookups = 0;
  std::uint64_t total_entries = 0;

  explicit HitCounter(std::size_t rows = 0) : entries(rows, 0), mass(rows, 0.0) {}
  void record(std::span<const AccessEntry> acc);
  void reset();
};

// Physical table B (rows x width) with pre-sigmoid row gates a and the
// values it was initialized with.
class LookupTable {
 public:
  LookupTable() = default;
  LookupTable(Mat values, Vec gates);

  std::size_t rows() const { return static_cast<std::size_t>(values_.rows()); }
  std::size_t width() const { return static_cast<std::size_t>(values_.cols()); }

  Mat& values() { return values_; }
  const Mat& values() const { return values_; }
  Vec& gates() { return gates_; }
  const Vec& gates() const { return gates_; }
  const Mat& init_snapshot() const { return init_; }

  Mat& grad_values() { return grad_values_; }
  const Mat& grad_values() const { return grad_values_; }
  Vec& grad_gates() { return grad_gates_; }
  const Vec& grad_gates() const { return grad_gates_; }
  void zero_grad();

  HitCounter& hits() { return hits_; }
  const HitCounter& hits() const { return hits_; }

  // Restores a checkpointed state including the snapshot.
  void restore(Mat values, Vec gates, Mat init_snapshot);

 private:
  Mat values_;
  Vec gates_;
  Mat init_;
  Mat grad_values_;
  Vec grad_gates_;
  HitCounter hits_;
};

// values ~ Normal(0, width^-1/2), gates = 0.
LookupTable init_table(std::size_t rows, std::size_t width, std::uint64_t seed);

// e = sum_j c_j * sigmoid(a_j) * B[j]. Records the access in the table's hit counter.
Vec retrieve(LookupTable& table, std::span<const AccessEntry> acc);

// Same sum written to `out` (width entries); no hit recording.
void retrieve_into(const LookupTable& table, std::span<const AccessEntry> acc,
                   std::span<double> out);

// Accumulates dB[j] += c sigmoid(a_j) g and da_j += c sigmoid'(a_j) <g, B[j]>.
void retrieve_backward(LookupTable& table, std::span<const AccessEntry> acc,
                       std::span<const double> upstream);

}  // namespace xgram::memory
