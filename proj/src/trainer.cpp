#include "end2reg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

namespace end2reg {

using nlohmann::json;

void TrainConfig::validate() const {
  if (!(lr0 > 0.0)) throw std::invalid_argument("TrainConfig: lr0 must be positive");
  if (warmup_iters >= total_iters)
    throw std::invalid_argument("TrainConfig: warmup_iters must be below total_iters");
  if (!(tau_start > 0.0) || !(tau_end > 0.0)) throw std::invalid_argument("TrainConfig: tau must be positive");
  if (!(clip_norm > 0.0)) throw std::invalid_argument("TrainConfig: clip_norm must be positive");
  if (mode == TrainMode::two_step && phase1_iters == 0)
    throw std::invalid_argument("TrainConfig: two_step needs phase1_iters > 0");
}

std::string to_string(TrainMode m) { return m == TrainMode::end_to_end ? "end_to_end" : "two_step"; }

TrainMode parse_train_mode(const std::string& s) {
  if (s == "end_to_end") return TrainMode::end_to_end;
  if (s == "two_step") return TrainMode::two_step;
  throw std::invalid_argument("unknown training mode '" + s + "'");
}

json to_json(const TrainConfig& c) {
  return {{"lr0", c.lr0},
          {"warmup_iters", c.warmup_iters},
          {"total_iters", c.total_iters},
          {"phase1_iters", c.phase1_iters},
          {"tau_start", c.tau_start},
          {"tau_end", c.tau_end},
          {"tau_anneal", c.tau_anneal},
          {"seed", c.seed},
          {"mode", to_string(c.mode)},
          {"optimizer", c.optimizer == OptimizerKind::adam ? "adam" : "sgd_momentum"},
          {"momentum", c.momentum},
          {"adam_beta2", c.adam_beta2},
          {"clip_norm", c.clip_norm},
          {"pose_variants", c.pose_variants},
          {"weak_label_mm", c.weak_label_mm}};
}

void from_json(const json& j, TrainConfig& c) {
  j.at("lr0").get_to(c.lr0);
  j.at("warmup_iters").get_to(c.warmup_iters);
  j.at("total_iters").get_to(c.total_iters);
  j.at("phase1_iters").get_to(c.phase1_iters);
  j.at("tau_start").get_to(c.tau_start);
  j.at("tau_end").get_to(c.tau_end);
  j.at("tau_anneal").get_to(c.tau_anneal);
  j.at("seed").get_to(c.seed);
  c.mode = parse_train_mode(j.at("mode").get<std::string>());
  const auto opt = j.at("optimizer").get<std::string>();
  if (opt == "adam") c.optimizer = OptimizerKind::adam;
  else if (opt == "sgd_momentum") c.optimizer = OptimizerKind::sgd_momentum;
  else throw std::invalid_argument("unknown optimizer '" + opt + "'");
  j.at("momentum").get_to(c.momentum);
  j.at("adam_beta2").get_to(c.adam_beta2);
  j.at("clip_norm").get_to(c.clip_norm);
  j.at("pose_variants").get_to(c.pose_variants);
  j.at("weak_label_mm").get_to(c.weak_label_mm);
}

double lr_at(std::size_t step, double lr0, std::size_t warmup, std::size_t total) {
  if (step >= total) return 0.0;
  if (step < warmup) return lr0 * static_cast<double>(step) / static_cast<double>(warmup);
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double lr_at(std::size_t step, const TrainConfig& cfg) {
  return lr_at(step, cfg.lr0, cfg.warmup_iters, cfg.total_iters);
}

TrainingExample make_training_example(const std::string& id, const RegistrationSample& sample,
                                      const ModelConfig& model, const TrainConfig& train,
                                      std::size_t index) {
  TrainingExample ex;
  ex.id = id;
  ex.intra = prepare_intraoperative(sample.intraoperative, model);
  ex.gt_mask = sample.gt_mask;
  ex.weak_mask = weak_labels(sample.intraoperative, sample.preoperative, sample.t_gt,
                             sample.mm(train.weak_label_mm));
  ex.pre.push_back(prepare_preoperative(sample.preoperative, model));
  ex.supervision.push_back(make_supervision(ex.pre.back(), ex.intra, sample.t_gt, model));
  const PointCloud bone = apply(sample.t_gt, sample.preoperative);  // intraoperative frame
  for (std::size_t v = 1; v <= train.pose_variants; ++v) {
    std::seed_seq seq{train.seed, static_cast<std::uint64_t>(index), static_cast<std::uint64_t>(v)};
    std::mt19937_64 rng(seq);
    const auto t = random_rigid(0.1, 45.0, rng);
    ex.pre.push_back(prepare_preoperative(apply(invert(t), bone), model));
    ex.supervision.push_back(make_supervision(ex.pre.back(), ex.intra, t, model));
  }
  return ex;
}

Trainer::Trainer(End2RegModel& model, std::vector<TrainingExample> data, TrainConfig config)
    : model_(model), data_(std::move(data)), config_(std::move(config)) {
  config_.validate();
  if (data_.empty()) throw std::invalid_argument("Trainer: no training samples");
  for (const auto& a : model_.to_arrays()) names_.push_back(a.name);
  params_ = model_.parameters(true);
  seg_count_ = model_.seg().params().size();
  if (names_.size() != params_.size()) throw std::logic_error("Trainer: parameter list mismatch");
  for (const auto& p : params_) {
    m1_.emplace_back(p.numel(), 0.0);
    m2_.emplace_back(config_.optimizer == OptimizerKind::adam ? p.numel() : 0, 0.0);
  }
}

std::size_t Trainer::total_steps() const {
  return config_.total_iters + (config_.mode == TrainMode::two_step ? config_.phase1_iters : 0);
}

int Trainer::phase_of(std::size_t step) const {
  return config_.mode == TrainMode::two_step && step < config_.phase1_iters ? 1 : 2;
}

std::size_t Trainer::example_at(std::size_t step) const {
  const std::size_t n = data_.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::seed_seq seq{config_.seed, static_cast<std::uint64_t>(step / n), std::uint64_t{11}};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  return order[step % n];
}

namespace {

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace

StepReport Trainer::step_once() {
  if (done()) throw std::logic_error("Trainer: training already finished");
  StepReport r;
  r.step = step_;
  r.phase = phase_of(step_);
  const bool phase1 = r.phase == 1;
  const std::size_t local = phase1 || config_.mode == TrainMode::end_to_end ? step_ : step_ - config_.phase1_iters;
  const std::size_t phase_total = phase1 ? config_.phase1_iters : config_.total_iters;
  const std::size_t warmup = phase1 ? config_.warmup_iters * config_.phase1_iters / config_.total_iters
                                    : config_.warmup_iters;
  r.lr = lr_at(local, config_.lr0, std::min(warmup, phase_total - 1), phase_total);
  r.tau = temperature_at(local, config_.total_iters, config_.tau_start, config_.tau_end, config_.tau_anneal);

  std::seed_seq seq{config_.seed, static_cast<std::uint64_t>(step_), std::uint64_t{7}};
  std::mt19937_64 rng(seq);
  const TrainingExample& ex = data_[example_at(step_)];
  r.sample = ex.id;
  r.variant = rng() % ex.pre.size();

  for (auto& p : params_) p.zero_grad();
  Tensor loss;
  if (phase1) {
    const Tensor z = model_.seg_logits(ex.intra);
    const std::size_t n = z.dim(0);
    std::vector<double> w(n * 2, 0.0);
    for (std::size_t i = 0; i < n; ++i) w[i * 2 + static_cast<std::size_t>(ex.weak_mask[i])] = -1.0 / static_cast<double>(n);
    loss = ops::weighted_sum(ops::log_softmax(z), w);
    r.seg_ce = r.total = loss.item();
  } else {
    const MaskMode mode = config_.mode == TrainMode::end_to_end ? MaskMode::gumbel : MaskMode::frozen;
    try {
      auto out = model_.loss(ex.pre[r.variant], ex.intra, ex.supervision[r.variant], mode, r.tau, &rng);
      loss = out.loss.total;
      r.total = out.loss.total.item();
      r.coarse = out.loss.coarse.item();
      r.fine = out.loss.fine.item();
    } catch (const std::domain_error&) {
      r.skipped = true;
      ++step_;
      curve_.push_back(r);
      return r;
    }
  }
  if (!std::isfinite(r.total))
    throw TrainingDiverged("non-finite loss at step " + std::to_string(step_) + " on sample " + ex.id, ex.id, step_);
  backward(loss);

  const std::size_t begin = phase1 ? 0 : (config_.mode == TrainMode::two_step ? seg_count_ : 0);
  const std::size_t end = phase1 ? seg_count_ : params_.size();
  double sq = 0.0;
  for (std::size_t i = begin; i < end; ++i) {
    if (!params_[i].has_grad()) continue;
    const auto g = params_[i].grad();
    if (!all_finite(g))
      throw TrainingDiverged("non-finite gradient for " + names_[i] + " at step " + std::to_string(step_) +
                                 " on sample " + ex.id,
                             ex.id, step_);
    for (double v : g) sq += v * v;
  }
  r.grad_norm = std::sqrt(sq);
  const double clip = r.grad_norm > config_.clip_norm ? config_.clip_norm / r.grad_norm : 1.0;
  const double b1 = config_.momentum, b2 = config_.adam_beta2;
  const double t = static_cast<double>(local + 1);
  for (std::size_t i = begin; i < end; ++i) {
    if (!params_[i].has_grad()) continue;
    const auto g = params_[i].grad();
    auto p = params_[i].mutable_data();
    auto& m = m1_[i];
    if (config_.optimizer == OptimizerKind::sgd_momentum) {
      for (std::size_t k = 0; k < p.size(); ++k) {
        m[k] = b1 * m[k] + clip * g[k];
        p[k] -= r.lr * m[k];
      }
    } else {
      auto& v = m2_[i];
      const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double gk = clip * g[k];
        m[k] = b1 * m[k] + (1.0 - b1) * gk;
        v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
        p[k] -= r.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + 1e-8);
      }
    }
  }
  for (auto& p : params_) p.zero_grad();
  ++step_;
  curve_.push_back(r);
  return r;
}

void Trainer::run(std::size_t steps, const std::function<void(const StepReport&)>& on_step) {
  for (std::size_t k = 0; k < steps && !done(); ++k) {
    const auto r = step_once();
    if (on_step) on_step(r);
  }
}

double Trainer::segmentation_accuracy() const {
  std::size_t hit = 0, total = 0;
  for (const auto& ex : data_) {
    const Tensor z = model_.seg_logits(ex.intra);
    for (std::size_t i = 0; i < ex.gt_mask.size(); ++i) {
      const int pred = z.at(i, 1) > z.at(i, 0) ? 1 : 0;
      hit += pred == ex.gt_mask[i];
      ++total;
    }
  }
  return static_cast<double>(hit) / static_cast<double>(total);
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.config = {{"model", to_json(model_.config())}, {"train", to_json(config_)}, {"step", step_},
              {"samples", json::array()}};
  for (const auto& ex : data_) c.config["samples"].push_back(ex.id);
  c.arrays = model_.to_arrays();
  for (std::size_t i = 0; i < params_.size(); ++i) {
    c.arrays.push_back({"opt.m1." + names_[i], params_[i].shape(), m1_[i]});
    if (!m2_[i].empty()) c.arrays.push_back({"opt.m2." + names_[i], params_[i].shape(), m2_[i]});
  }
  return c;
}

void Trainer::restore(const Checkpoint& ckpt) {
  std::vector<std::string> ids;
  for (const auto& ex : data_) ids.push_back(ex.id);
  if (ckpt.config.at("samples").get<std::vector<std::string>>() != ids)
    throw CheckpointError("checkpoint was trained on a different sample list");
  model_.load_arrays(ckpt.arrays);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto* a = ckpt.find("opt.m1." + names_[i]);
    if (!a || a->values.size() != m1_[i].size()) throw CheckpointError("missing optimizer state for " + names_[i]);
    m1_[i] = a->values;
    if (!m2_[i].empty()) {
      const auto* b = ckpt.find("opt.m2." + names_[i]);
      if (!b || b->values.size() != m2_[i].size()) throw CheckpointError("missing optimizer state for " + names_[i]);
      m2_[i] = b->values;
    }
  }
  step_ = ckpt.config.at("step").get<std::size_t>();
}

void write_curve_csv(const std::filesystem::path& path, const std::vector<StepReport>& curve) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.precision(10);
  os << "step,phase,sample,variant,total,coarse,fine,seg_ce,lr,tau,grad_norm,skipped\n";
  for (const auto& r : curve)
    os << r.step << ',' << r.phase << ',' << r.sample << ',' << r.variant << ',' << r.total << ',' << r.coarse
       << ',' << r.fine << ',' << r.seg_ce << ',' << r.lr << ',' << r.tau << ',' << r.grad_norm << ','
       << r.skipped << '\n';
}

}  // namespace end2reg
