#include "end2reg/gradcheck.hpp"
#include "end2reg/matcher.hpp"
#include "end2reg/networks.hpp"
#include "end2reg/stgs.hpp"

#include <cmath>
#include <random>

namespace end2reg {

namespace {

using namespace ops;

// Forward value f, backward -df: stop(2f) - f.
Tensor flip(const Tensor& f) { return sub(stop_gradient(scale(f, 2.0)), f); }

struct Suite {
  std::uint64_t seed;
  bool wrong_sign;
  std::vector<SuiteCheck> out;

  unsigned long long next() { return seed * 1000003ull + out.size() * 7919ull + 1; }

  std::vector<double> targets(std::size_t n) {
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i) w[i] = std::sin(0.37 * static_cast<double>(i) + static_cast<double>(seed));
    return w;
  }

  // Scalarizes fn with fixed random weights.
  void scalar(const std::string& component, const std::string& name, const std::function<Tensor()>& fn,
              std::vector<Tensor> inputs, double tol, double h = 1e-5) {
    const auto w = targets(fn().numel());
    auto loss = [&] {
      Tensor l = weighted_sum(fn(), w);
      return wrong_sign ? flip(l) : l;
    };
    out.push_back({component, check_gradient(name, loss, std::move(inputs), tol, h)});
  }

  void jacobian(const std::string& component, const std::string& name, const std::function<Tensor()>& fn,
                std::vector<Tensor> inputs, double tol) {
    auto f = [&] { return wrong_sign ? flip(fn()) : fn(); };
    out.push_back({component, check_jacobian(name, f, std::move(inputs), tol)});
  }
};

std::vector<Vec3> sphere(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::vector<Vec3> p;
  for (std::size_t i = 0; i < n; ++i) p.push_back(Vec3(g(rng), g(rng), g(rng)).normalized() * 0.8);
  return p;
}

void tensor_checks(Suite& s) {
  const double tol = 1e-5;
  auto a = random_tensor({4, 5}, s.next());
  auto b = random_tensor({4, 5}, s.next());
  auto pos = random_tensor({4, 5}, s.next(), 0.5, 2.0);
  s.scalar("tensor", "add", [&] { return add(a, b); }, {a, b}, tol);
  s.scalar("tensor", "sub", [&] { return sub(a, b); }, {a, b}, tol);
  s.scalar("tensor", "mul", [&] { return mul(a, b); }, {a, b}, tol);
  s.scalar("tensor", "exp", [&] { return exp(a); }, {a}, tol);
  s.scalar("tensor", "log", [&] { return log(pos); }, {pos}, tol);
  s.scalar("tensor", "square", [&] { return square(a); }, {a}, tol);
  s.scalar("tensor", "leaky_relu", [&] { return leaky_relu(pos, 0.1); }, {pos}, tol);
  auto m = random_tensor({5, 3}, s.next());
  s.scalar("tensor", "matmul", [&] { return matmul(a, m); }, {a, m}, tol);
  s.scalar("tensor", "transpose", [&] { return transpose(a); }, {a}, tol);
  s.scalar("tensor", "softmax", [&] { return softmax(a); }, {a}, tol);
  s.scalar("tensor", "log_softmax", [&] { return log_softmax(a); }, {a}, tol);
  const std::vector<std::size_t> idx{3, 0, 0, 2, 1, 3};
  s.scalar("tensor", "gather_rows", [&] { return gather_rows(a, idx); }, {a}, tol);
  auto v = random_tensor({1, 5}, s.next());
  s.scalar("tensor", "add_rowvec", [&] { return add_rowvec(a, v); }, {a, v}, tol);
  s.scalar("tensor", "mul_rowvec", [&] { return mul_rowvec(a, v); }, {a, v}, tol);
  s.scalar("tensor", "standardize_cols", [&] { return standardize_cols(a); }, {a}, tol);
  s.scalar("tensor", "l2_normalize_rows", [&] { return l2_normalize_rows(a); }, {a}, tol);
  s.scalar("tensor", "pairwise_distance", [&] { return pairwise_distance(a, b); }, {a, b}, tol);
  const std::vector<double> targets{0.0, 0.0, 0.0, std::log(2.0)};
  s.scalar("tensor", "log_normalize_rows", [&] { return log_normalize_rows(a, targets); }, {a}, tol);
  s.scalar("tensor", "concat", [&] { return concat_cols(concat_rows(a, b), concat_rows(b, a)); }, {a, b}, tol);
}

void stgs_checks(Suite& s) {
  auto z = random_tensor({6, 2}, s.next());
  std::mt19937_64 rng(s.seed);
  const Tensor g = sample_gumbel(6, 2, rng);
  for (double tau : {0.5, 1.0, 2.0})
    s.jacobian("stgs", "gumbel_softmax tau=" + std::to_string(tau).substr(0, 3),
               [&] { return gumbel_softmax(z, g, tau); }, {z}, 1e-6);
}

void kpconv_checks(Suite& s) {
  const auto support = sphere(30, s.seed + 1);
  const auto query = sphere(12, s.seed + 2);
  const auto& kernel = kernel_disposition(5, 42);
  const auto geom = conv_geometry(query, support, 0.6, 10, kernel);
  auto f = random_tensor({30, 3}, s.next());
  auto w = random_tensor({5, 3, 4}, s.next(), -0.5, 0.5);
  s.scalar("kpconv", "kpconv", [&] { return kpconv(f, geom, w); }, {f, w}, 1e-5);
}

void segnet_checks(Suite& s) {
  SegNetConfig c;
  c.widths = {2, 3, 4, 5, 6};
  c.width_scale = 1.0;
  c.pyramid.kernel_size = 4;
  c.pyramid.max_neighbors = 8;
  c.seed = s.seed;
  SegNet net(c);
  PointCloud cloud;
  cloud.positions = sphere(80, s.seed + 3);
  std::mt19937_64 rng(s.seed + 4);
  std::uniform_real_distribution<double> u;
  cloud.colors.emplace();
  for (std::size_t i = 0; i < cloud.size(); ++i) cloud.colors->emplace_back(u(rng), u(rng), u(rng));
  const auto pyr = net.pyramid(cloud);
  // h = 1e-6 keeps the stencil clear of leaky-relu kinks on this input
  s.scalar("segnet", "segnet all parameters", [&] { return net.forward(cloud, pyr); }, net.params().tensors(),
           1e-4, 1e-6);
}

void backbone_checks(Suite& s) {
  RegBackboneConfig c;
  c.widths = {4, 6, 8, 10};
  c.superpoint_dim = 5;
  c.dense_dim = 3;
  c.pyramid.initial_voxel = 0.1;
  c.pyramid.kernel_size = 5;
  c.pyramid.max_neighbors = 10;
  c.seed = s.seed;
  RegBackbone net(c);
  PointCloud cloud;
  cloud.positions = sphere(150, s.seed + 5);
  const auto pyr = net.pyramid(cloud);
  auto mask = random_tensor({150, 1}, s.next(), 0.0, 1.0);
  std::vector<Tensor> inputs = net.params().tensors();
  inputs.push_back(mask);
  s.scalar("backbone", "backbone dense+superpoints",
           [&] {
             const auto o = net.forward(pyr, mask);
             return concat_rows(reshape(o.dense, {o.dense.numel(), 1}),
                                reshape(o.superpoints, {o.superpoints.numel(), 1}));
           },
           inputs, 1e-4, 1e-6);
}

void matcher_checks(Suite& s) {
  auto a = random_tensor({5, 4}, s.next(), -0.6, 0.6);
  auto b = random_tensor({6, 4}, s.next(), -0.6, 0.6);
  OverlapMatrix o{5, 6, std::vector<double>(30, 0.0)};
  for (std::size_t i = 0; i < 30; i += 4) o.values[i] = 0.3 + 0.02 * static_cast<double>(i);
  o.values[1] = 0.05;
  auto loss_c = [&] { return s.wrong_sign ? flip(coarse_loss(a, b, o)) : coarse_loss(a, b, o); };
  s.out.push_back({"matcher", check_gradient("coarse_loss", loss_c, {a, b}, 1e-4)});

  auto na = random_tensor({5, 4}, s.next(), -0.6, 0.6);
  auto nb = random_tensor({6, 4}, s.next(), -0.6, 0.6);
  auto loss_n = [&] {
    Tensor l = coarse_loss(l2_normalize_rows(na), l2_normalize_rows(nb), o);
    return s.wrong_sign ? flip(l) : l;
  };
  s.out.push_back({"matcher", check_gradient("coarse_loss normalized", loss_n, {na, nb}, 1e-4)});

  auto pa = random_tensor({4, 3}, s.next());
  auto pb = random_tensor({3, 3}, s.next());
  auto slack = Tensor::scalar(0.2, true);
  const std::vector<std::vector<IndexPair>> gt{{{0, 1}, {1, 0}, {2, 3}, {3, 2}, {4, 1}}};
  auto loss_f = [&] {
    Tensor l = fine_loss({slack_log_assignment(pa, pb, slack)}, gt);
    return s.wrong_sign ? flip(l) : l;
  };
  s.out.push_back({"matcher", check_gradient("fine_loss", loss_f, {pa, pb, slack}, 1e-4)});
  s.scalar("matcher", "slack_log_assignment", [&] { return slack_log_assignment(pa, pb, slack); },
           {pa, pb, slack}, 1e-5);
}

}  // namespace

const std::vector<std::string>& gradcheck_components() {
  static const std::vector<std::string> names{"tensor", "stgs", "kpconv", "segnet", "backbone", "matcher"};
  return names;
}

std::vector<SuiteCheck> run_gradcheck_suite(const std::string& component, std::uint64_t seed, bool wrong_sign) {
  const auto& names = gradcheck_components();
  if (!component.empty() && std::find(names.begin(), names.end(), component) == names.end())
    throw std::invalid_argument("unknown gradcheck component '" + component + "'");
  Suite s{seed, wrong_sign, {}};
  auto want = [&](const char* c) { return component.empty() || component == c; };
  if (want("tensor")) tensor_checks(s);
  if (want("stgs")) stgs_checks(s);
  if (want("kpconv")) kpconv_checks(s);
  if (want("segnet")) segnet_checks(s);
  if (want("backbone")) backbone_checks(s);
  if (want("matcher")) matcher_checks(s);
  return s.out;
}

}  // namespace end2reg
