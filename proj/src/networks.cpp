#include "end2reg/networks.hpp"

#include <cmath>

namespace end2reg {

namespace {

std::vector<std::size_t> scale_widths(const std::vector<std::size_t>& widths, double scale) {
  std::vector<std::size_t> out;
  for (auto w : widths)
    out.push_back(std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(w * scale))));
  return out;
}

void add_kpconv(ParamSet& p, const std::string& name, std::size_t k, std::size_t cin,
                std::size_t cout, std::mt19937_64& rng) {
  p.add(name + ".w", {k, cin, cout}, 1.0 / std::sqrt(static_cast<double>(k * cin)), rng);
}

void add_norm(ParamSet& p, const std::string& name, std::size_t c) {
  p.add_constant(name + ".gamma", {c}, 1.0);
  p.add_constant(name + ".beta", {c}, 0.0);
}

void add_linear(ParamSet& p, const std::string& name, std::size_t cin, std::size_t cout,
                bool bias, std::mt19937_64& rng) {
  p.add(name + ".w", {cin, cout}, 1.0 / std::sqrt(static_cast<double>(cin)), rng);
  if (bias) p.add_constant(name + ".b", {cout}, 0.0);
}

Tensor norm_act(const ParamSet& p, const std::string& name, const Tensor& x, double slope) {
  auto y = ops::standardize_cols(x);
  y = ops::add_rowvec(ops::mul_rowvec(y, p.get(name + ".gamma")), p.get(name + ".beta"));
  return ops::leaky_relu(y, slope);
}

Tensor conv_block(const ParamSet& p, const std::string& name, const Tensor& x,
                  const ConvGeometry& g, double slope) {
  return norm_act(p, name, kpconv(x, g, p.get(name + ".w")), slope);
}

Tensor linear(const ParamSet& p, const std::string& name, const Tensor& x) {
  auto y = ops::matmul(x, p.get(name + ".w"));
  return p.contains(name + ".b") ? ops::add_rowvec(y, p.get(name + ".b")) : y;
}

// Encoder convs and decoder unaries shared by both networks. The encoder of
// stage 0 is supplied by the caller.
void add_encoder(ParamSet& p, const std::vector<std::size_t>& w, std::size_t k, std::mt19937_64& rng) {
  add_kpconv(p, "enc0.conv", k, w[0], w[0], rng);
  add_norm(p, "enc0.conv", w[0]);
  for (std::size_t l = 1; l < w.size(); ++l) {
    const auto s = std::to_string(l);
    add_kpconv(p, "enc" + s + ".down", k, w[l - 1], w[l], rng);
    add_norm(p, "enc" + s + ".down", w[l]);
    add_kpconv(p, "enc" + s + ".conv", k, w[l], w[l], rng);
    add_norm(p, "enc" + s + ".conv", w[l]);
  }
  for (std::size_t l = w.size() - 1; l >= 1; --l) {
    const auto s = std::to_string(l);
    add_linear(p, "dec" + s, w[l] + w[l - 1], w[l - 1], false, rng);
    add_norm(p, "dec" + s, w[l - 1]);
  }
}

// Runs stages 1.. of the encoder from the stage-0 features, returning every
// stage output.
std::vector<Tensor> encode(const ParamSet& p, const PointPyramid& pyr, Tensor h0, double slope) {
  std::vector<Tensor> skips{conv_block(p, "enc0.conv", h0, pyr.levels[0].conv, slope)};
  for (std::size_t l = 1; l < pyr.stages(); ++l) {
    const auto s = std::to_string(l);
    auto d = conv_block(p, "enc" + s + ".down", skips.back(), pyr.levels[l].strided, slope);
    skips.push_back(conv_block(p, "enc" + s + ".conv", d, pyr.levels[l].conv, slope));
  }
  return skips;
}

Tensor decode(const ParamSet& p, const PointPyramid& pyr, const std::vector<Tensor>& skips,
              double slope) {
  Tensor x = skips.back();
  for (std::size_t l = pyr.stages() - 1; l >= 1; --l) {
    auto up = ops::gather_rows(x, pyr.levels[l].upsample);
    x = norm_act(p, "dec" + std::to_string(l), linear(p, "dec" + std::to_string(l),
                                                      ops::concat_cols(up, skips[l - 1])),
                 slope);
  }
  return x;
}

void check_stages(const PointPyramid& pyr, std::size_t expected, const char* who) {
  if (pyr.stages() != expected)
    throw std::invalid_argument(std::string(who) + ": pyramid has " + std::to_string(pyr.stages()) +
                                " stages, network expects " + std::to_string(expected));
}

}  // namespace

std::vector<std::size_t> SegNetConfig::scaled_widths() const {
  return scale_widths(widths, width_scale);
}

std::vector<std::size_t> RegBackboneConfig::scaled_widths() const {
  return scale_widths(widths, width_scale);
}

nlohmann::json to_json(const PyramidConfig& c) {
  return {{"stages", c.stages},           {"initial_voxel", c.initial_voxel},
          {"radius_mult", c.radius_mult}, {"kernel_size", c.kernel_size},
          {"max_neighbors", c.max_neighbors}, {"kernel_seed", c.kernel_seed}};
}

nlohmann::json to_json(const SegNetConfig& c) {
  return {{"pyramid", to_json(c.pyramid)}, {"widths", c.widths}, {"width_scale", c.width_scale},
          {"leaky_slope", c.leaky_slope}, {"seed", c.seed}};
}

nlohmann::json to_json(const RegBackboneConfig& c) {
  return {{"pyramid", to_json(c.pyramid)},     {"widths", c.widths},
          {"width_scale", c.width_scale},      {"superpoint_dim", c.superpoint_dim},
          {"dense_dim", c.dense_dim},          {"leaky_slope", c.leaky_slope},
          {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, PyramidConfig& c) {
  j.at("stages").get_to(c.stages);
  j.at("initial_voxel").get_to(c.initial_voxel);
  j.at("radius_mult").get_to(c.radius_mult);
  j.at("kernel_size").get_to(c.kernel_size);
  j.at("max_neighbors").get_to(c.max_neighbors);
  j.at("kernel_seed").get_to(c.kernel_seed);
}

void from_json(const nlohmann::json& j, SegNetConfig& c) {
  from_json(j.at("pyramid"), c.pyramid);
  j.at("widths").get_to(c.widths);
  j.at("width_scale").get_to(c.width_scale);
  j.at("leaky_slope").get_to(c.leaky_slope);
  j.at("seed").get_to(c.seed);
}

void from_json(const nlohmann::json& j, RegBackboneConfig& c) {
  from_json(j.at("pyramid"), c.pyramid);
  j.at("widths").get_to(c.widths);
  j.at("width_scale").get_to(c.width_scale);
  j.at("superpoint_dim").get_to(c.superpoint_dim);
  j.at("dense_dim").get_to(c.dense_dim);
  j.at("leaky_slope").get_to(c.leaky_slope);
  j.at("seed").get_to(c.seed);
}

SegNet::SegNet(SegNetConfig config) : config_(std::move(config)) {
  const auto w = config_.scaled_widths();
  if (w.size() != config_.pyramid.stages)
    throw std::invalid_argument("SegNet: widths must list one entry per stage");
  std::mt19937_64 rng(config_.seed);
  const std::size_t k = config_.pyramid.kernel_size;
  add_kpconv(params_, "enc0.input", k, 4, w[0], rng);
  add_norm(params_, "enc0.input", w[0]);
  add_encoder(params_, w, k, rng);
  add_linear(params_, "head", w[0], 2, true, rng);
}

PointPyramid SegNet::pyramid(const PointCloud& cloud) const {
  return build_pyramid(cloud, config_.pyramid);
}

Tensor SegNet::forward(const PointCloud& cloud) const { return forward(cloud, pyramid(cloud)); }

Tensor SegNet::forward(const PointCloud& cloud, const PointPyramid& pyr) const {
  if (!cloud.has_colors()) throw std::invalid_argument("SegNet: input cloud has no colors");
  check_stages(pyr, config_.pyramid.stages, "SegNet");
  const auto& l0 = pyr.levels[0];
  const std::size_t n0 = l0.points.size();
  std::vector<double> x(n0 * 4);
  for (std::size_t i = 0; i < n0; ++i) {
    for (int c = 0; c < 3; ++c) x[i * 4 + c] = l0.colors.at(i)[c];
    x[i * 4 + 3] = 1.0;
  }
  const double slope = config_.leaky_slope;
  auto h0 = conv_block(params_, "enc0.input", Tensor::from({n0, 4}, std::move(x)), l0.conv, slope);
  auto skips = encode(params_, pyr, h0, slope);
  auto logits = linear(params_, "head", decode(params_, pyr, skips, slope));
  return ops::gather_rows(logits, l0.pool);
}

RegBackbone::RegBackbone(RegBackboneConfig config) : config_(std::move(config)) {
  const auto w = config_.scaled_widths();
  if (w.size() != config_.pyramid.stages)
    throw std::invalid_argument("RegBackbone: widths must list one entry per stage");
  std::mt19937_64 rng(config_.seed);
  const std::size_t k = config_.pyramid.kernel_size;
  add_kpconv(params_, "enc0.input", k, 1, w[0], rng);
  add_norm(params_, "enc0.input", w[0]);
  add_encoder(params_, w, k, rng);
  add_linear(params_, "superpoint", w.back(), config_.superpoint_dim, true, rng);
  add_linear(params_, "dense", w[0], config_.dense_dim, true, rng);
}

PointPyramid RegBackbone::pyramid(const PointCloud& cloud) const {
  return build_pyramid(cloud, config_.pyramid);
}

Tensor RegBackbone::input_conv(const PointPyramid& pyr, const Tensor& point_features) const {
  if (point_features.rank() != 2 || point_features.dim(0) != pyr.input.size() ||
      point_features.dim(1) != 1)
    throw ShapeError("RegBackbone: point features " + shape_str(point_features.shape()) +
                     ", expected [" + std::to_string(pyr.input.size()) + ",1]");
  return kpconv(point_features, pyr.levels[0].strided, params_.get("enc0.input.w"));
}

BackboneOutput RegBackbone::forward(const PointPyramid& pyr, const Tensor& point_features) const {
  check_stages(pyr, config_.pyramid.stages, "RegBackbone");
  const double slope = config_.leaky_slope;
  auto h0 = norm_act(params_, "enc0.input", input_conv(pyr, point_features), slope);
  auto skips = encode(params_, pyr, h0, slope);
  BackboneOutput out;
  out.superpoints = linear(params_, "superpoint", skips.back());
  out.dense = linear(params_, "dense", decode(params_, pyr, skips, slope));
  return out;
}

}  // namespace end2reg
