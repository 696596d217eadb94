#pragma once

// Named parameter sets and the binary checkpoint format.

#include "end2reg/tensor.hpp"

#include <json.hpp>

#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace end2reg {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

// Ordered, named trainable leaves.
class ParamSet {
 public:
  // Uniform in [-bound, bound] drawn from rng; bound 0 gives zeros.
  Tensor add(const std::string& name, Shape shape, double bound, std::mt19937_64& rng);
  Tensor add_constant(const std::string& name, Shape shape, double value);

  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::size_t size() const { return entries_.size(); }
  std::size_t numel() const;
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<Tensor> tensors() const;

  void zero_grad();
  std::vector<NamedArray> to_arrays(const std::string& prefix = "") const;
  // Copies values into existing tensors; names and shapes must match exactly.
  void load_arrays(const std::vector<NamedArray>& arrays, const std::string& prefix = "");

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

struct Checkpoint {
  nlohmann::json config;
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Little-endian layout: magic "E2RCKPT\0", u32 version, u64 config length,
// config JSON bytes, u64 array count, then per array: u64 name length, name,
// u64 rank, rank x u64 dims, numel x f64 values.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace end2reg
