#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xgram/io.hpp"
#include "xgram/tensor.hpp"

namespace xgram::checkpoint {

// Named float64 tensors plus a free-form metadata string (the run config as JSON).
//
// Layout: "XGRMCKPT", u32 version, string meta, u32 tensor count, then per
// tensor: string name, u32 ndim, u64 dims[ndim], f64 data (row-major);
// trailing u64 FNV-1a checksum over everything before it.
struct Tensor {
  std::vector<std::uint64_t> shape;
  std::vector<double> data;
};

inline constexpr std::uint32_t kVersion = 1;

class Archive {
 public:
  std::string meta;

  void put(std::string name, const Mat& m);
  void put(std::string name, const Vec& v);
  void put_scalar(std::string name, double value);

  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;
  Mat get_mat(const std::string& name) const;
  Vec get_vec(const std::string& name) const;
  double get_scalar(const std::string& name) const;

  const std::vector<std::pair<std::string, Tensor>>& tensors() const { return tensors_; }

  io::Bytes serialize() const;
  static Archive deserialize(std::span<const std::uint8_t> bytes);

 private:
  std::vector<std::pair<std::string, Tensor>> tensors_;
};

}  // namespace xgram::checkpoint
