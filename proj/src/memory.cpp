#include "xgram/memory.hpp"

#include <cmath>
#include <string>

#include "xgram/error.hpp"
#include "xgram/rng.hpp"

namespace xgram::memory {

namespace {

void check_rows(const LookupTable& table, std::span<const AccessEntry> acc) {
  for (const auto& e : acc)
    if (e.row >= table.rows())
      throw ValidationError("access row " + std::to_string(e.row) + " outside table of " +
                            std::to_string(table.rows()) + " rows");
}

}  // namespace

void HitCounter::record(std::span<const AccessEntry> acc) {
  double coeff_sum = 0.0;
  for (const auto& e : acc) coeff_sum += e.coeff;
  for (const auto& e : acc) {
    ++entries[e.row];
    if (coeff_sum > 0.0) mass[e.row] += e.coeff / coeff_sum;
  }
  ++lookups;
  total_entries += acc.size();
}

void HitCounter::reset() {
  std::fill(entries.begin(), entries.end(), 0);
  std::fill(mass.begin(), mass.end(), 0.0);
  lookups = 0;
  total_entries = 0;
}

LookupTable::LookupTable(Mat values, Vec gates)
    : values_(std::move(values)), gates_(std::move(gates)), init_(values_),
      grad_values_(Mat::Zero(values_.rows(), values_.cols())),
      grad_gates_(Vec::Zero(gates_.size())), hits_(static_cast<std::size_t>(values_.rows())) {
  if (gates_.size() != values_.rows()) throw ValidationError("gate count must equal table rows");
}

void LookupTable::zero_grad() {
  grad_values_.setZero();
  grad_gates_.setZero();
}

void LookupTable::restore(Mat values, Vec gates, Mat init_snapshot) {
  if (values.rows() != init_snapshot.rows() || values.cols() != init_snapshot.cols() ||
      gates.size() != values.rows())
    throw FormatError("lookup table checkpoint has inconsistent shapes");
  *this = LookupTable(std::move(values), std::move(gates));
  init_ = std::move(init_snapshot);
}

LookupTable init_table(std::size_t rows, std::size_t width, std::uint64_t seed) {
  if (rows == 0 || width == 0) throw ValidationError("lookup table dimensions must be positive");
  SplitMix64 rng(seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(width));
  Mat values(rows, width);
  for (Eigen::Index i = 0; i < values.size(); ++i) values.data()[i] = scale * rng.normal();
  return LookupTable(std::move(values), Vec::Zero(static_cast<Eigen::Index>(rows)));
}

void retrieve_into(const LookupTable& table, std::span<const AccessEntry> acc,
                   std::span<double> out) {
  const std::size_t w = table.width();
  std::fill(out.begin(), out.end(), 0.0);
  for (const auto& e : acc) {
    const double scale = e.coeff * sigmoid(table.gates()[e.row]);
    const double* row = table.values().data() + static_cast<std::size_t>(e.row) * w;
    for (std::size_t c = 0; c < w; ++c) out[c] += scale * row[c];
  }
}

Vec retrieve(LookupTable& table, std::span<const AccessEntry> acc) {
  check_rows(table, acc);
  Vec out(static_cast<Eigen::Index>(table.width()));
  retrieve_into(table, acc, std::span(out.data(), table.width()));
  table.hits().record(acc);
  return out;
}

void retrieve_backward(LookupTable& table, std::span<const AccessEntry> acc,
                       std::span<const double> upstream) {
  const std::size_t w = table.width();
  if (upstream.size() != w)
    throw ValidationError("upstream gradient width " + std::to_string(upstream.size()) +
                          " does not match table width " + std::to_string(w));
  check_rows(table, acc);
  for (const auto& e : acc) {
    const double s = sigmoid(table.gates()[e.row]);
    const double* row = table.values().data() + static_cast<std::size_t>(e.row) * w;
    double* grow = table.grad_values().data() + static_cast<std::size_t>(e.row) * w;
    double dot = 0.0;
    const double scale = e.coeff * s;
    for (std::size_t c = 0; c < w; ++c) {
      grow[c] += scale * upstream[c];
      dot += upstream[c] * row[c];
    }
    table.grad_gates()[e.row] += e.coeff * s * (1.0 - s) * dot;
  }
}

}  // namespace xgram::memory
