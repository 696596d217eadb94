#pragma once

// Segmentation U-Net and the shared registration backbone, both built from
// kernel point convolutions over a PointPyramid.

#include "end2reg/kpconv.hpp"
#include "end2reg/params.hpp"

#include <json.hpp>

namespace end2reg {

struct SegNetConfig {
  PyramidConfig pyramid{5, 0.04, 2.5, 15, 24, 42};
  std::vector<std::size_t> widths{16, 32, 64, 128, 256};
  double width_scale = 0.25;
  double leaky_slope = 0.1;
  std::uint64_t seed = 1;

  std::vector<std::size_t> scaled_widths() const;
};

struct RegBackboneConfig {
  // three downsampling stages, so four levels
  PyramidConfig pyramid{4, 0.025, 7.0, 20, 24, 43};
  std::vector<std::size_t> widths{32, 64, 128, 256};
  double width_scale = 1.0;
  std::size_t superpoint_dim = 64;
  std::size_t dense_dim = 32;
  double leaky_slope = 0.1;
  std::uint64_t seed = 2;

  std::vector<std::size_t> scaled_widths() const;
};

nlohmann::json to_json(const PyramidConfig& c);
nlohmann::json to_json(const SegNetConfig& c);
nlohmann::json to_json(const RegBackboneConfig& c);
void from_json(const nlohmann::json& j, PyramidConfig& c);
void from_json(const nlohmann::json& j, SegNetConfig& c);
void from_json(const nlohmann::json& j, RegBackboneConfig& c);

class SegNet {
 public:
  explicit SegNet(SegNetConfig config = {});

  PointPyramid pyramid(const PointCloud& cloud) const;
  // Per-point 2-class logits at input resolution. Requires colors.
  Tensor forward(const PointCloud& cloud) const;
  Tensor forward(const PointCloud& cloud, const PointPyramid& pyr) const;

  const SegNetConfig& config() const { return config_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

 private:
  SegNetConfig config_;
  ParamSet params_;
};

struct BackboneOutput {
  Tensor superpoints;  // M x superpoint_dim, one row per point of the coarsest level
  Tensor dense;        // N0 x dense_dim, one row per level-0 point
};

class RegBackbone {
 public:
  explicit RegBackbone(RegBackboneConfig config = {});

  PointPyramid pyramid(const PointCloud& cloud) const;
  // point_features: N x 1 over the pyramid input (mask or constant ones).
  BackboneOutput forward(const PointPyramid& pyr, const Tensor& point_features) const;
  // The mask-gated first convolution, before normalization.
  Tensor input_conv(const PointPyramid& pyr, const Tensor& point_features) const;

  const RegBackboneConfig& config() const { return config_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

 private:
  RegBackboneConfig config_;
  ParamSet params_;
};

}  // namespace end2reg
