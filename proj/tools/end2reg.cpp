// Command-line front end: generate, train, register, eval, ablate, gradcheck.

#include "end2reg/gradcheck.hpp"
#include "end2reg/io.hpp"
#include "end2reg/pipeline.hpp"
#include "end2reg/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace end2reg;

namespace {

constexpr const char* kVersion = "end2reg 0.1.0";

enum Exit { ok = 0, usage = 1, data = 2, numerical = 3 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericalFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(p.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& p, const json& j) {
  std::ofstream os(p);
  if (!os) throw DataError("cannot write " + p.string());
  os << j.dump(2) << '\n';
}

void write_run_manifest(const fs::path& dir, const std::string& command, const json& resolved, int argc,
                        char** argv) {
  json args = json::array();
  for (int i = 0; i < argc; ++i) args.push_back(argv[i]);
  write_json_file(dir / "run.json",
                  {{"version", kVersion}, {"command", command}, {"argv", args}, {"config", resolved}});
}

// Precedence: flags > config file section > defaults.
json layered(const json& defaults, const std::string& config_file, const std::string& section) {
  json out = defaults;
  if (!config_file.empty()) {
    const json file = read_json_file(config_file);
    if (file.contains(section)) out.merge_patch(file.at(section));
  }
  return out;
}

template <class T>
void flag(json& j, const std::string& key, const CLI::Option* opt, const T& value) {
  if (opt->count() > 0) j[key] = value;
}

json phantom_json(const PhantomConfig& c) {
  return {{"n_vertebrae", c.n_vertebrae},   {"points_pre", c.points_pre},
          {"points_intra", c.points_intra}, {"exposure_fraction", c.exposure_fraction},
          {"clutter_fraction", c.clutter_fraction}, {"noise_sigma", c.noise_sigma},
          {"occlusion_patches", c.occlusion_patches}, {"occlusion_radius", c.occlusion_radius},
          {"tissue_clearance", c.tissue_clearance}, {"max_translation", c.max_translation},
          {"max_rotation_deg", c.max_rotation_deg}, {"max_retries", c.max_retries},
          {"seed", c.seed}};
}

PhantomConfig phantom_from(const json& j) {
  PhantomConfig c;
  j.at("n_vertebrae").get_to(c.n_vertebrae);
  j.at("points_pre").get_to(c.points_pre);
  j.at("points_intra").get_to(c.points_intra);
  j.at("exposure_fraction").get_to(c.exposure_fraction);
  j.at("clutter_fraction").get_to(c.clutter_fraction);
  j.at("noise_sigma").get_to(c.noise_sigma);
  j.at("occlusion_patches").get_to(c.occlusion_patches);
  j.at("occlusion_radius").get_to(c.occlusion_radius);
  j.at("tissue_clearance").get_to(c.tissue_clearance);
  j.at("max_translation").get_to(c.max_translation);
  j.at("max_rotation_deg").get_to(c.max_rotation_deg);
  j.at("max_retries").get_to(c.max_retries);
  j.at("seed").get_to(c.seed);
  return c;
}

std::string sample_name(std::size_t i) {
  std::ostringstream s;
  s << "sample_" << std::setw(4) << std::setfill('0') << i;
  return s.str();
}

struct Dataset {
  std::vector<std::string> ids;
  std::vector<RegistrationSample> samples;
};

Dataset load_dataset(const fs::path& root) {
  Dataset d;
  for (const auto& dir : read_manifest(root)) {
    d.ids.push_back(dir.filename().string());
    d.samples.push_back(read_sample(dir));
  }
  if (d.samples.empty()) throw DataError(root.string() + ": manifest lists no samples");
  return d;
}

End2RegModel load_model(const fs::path& path) {
  const auto ck = load_checkpoint(path);
  if (!ck.config.contains("model")) throw CheckpointError(path.string() + ": no model configuration");
  ModelConfig mc;
  from_json(ck.config.at("model"), mc);
  End2RegModel model(mc);
  model.load_arrays(ck.arrays);
  return model;
}

std::string summary_line(const Summary& s, int precision = 2) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(precision) << s.median << " [" << s.q1 << ", " << s.q3 << "]  mean "
    << s.mean << " (+-" << s.sd << ")  outliers " << std::setprecision(1) << 100.0 * s.outlier_rate << "%";
  return o.str();
}

json summary_json(const Summary& s) {
  return {{"n", s.n},       {"median", s.median}, {"q1", s.q1},         {"q3", s.q3},
          {"mean", s.mean}, {"sd", s.sd},         {"outlier_rate", s.outlier_rate}};
}

// ---- generate ---------------------------------------------------------------

int cmd_generate(const fs::path& out, std::size_t n, const json& cfg, int argc, char** argv) {
  const PhantomConfig base = phantom_from(cfg);
  base.validate();
  fs::create_directories(out);
  std::vector<std::string> names;
  for (std::size_t i = 0; i < n; ++i) {
    PhantomConfig c = base;
    c.seed = base.seed + i;
    const auto s = generate_phantom(c);
    names.push_back(sample_name(i));
    write_sample(out / names.back(), s, c);
    std::cerr << names.back() << ": " << s.intraoperative.size() << " intraoperative points, overlap "
              << overlap_fraction(s) << ", occluded " << s.occluded_fraction << "\n";
  }
  write_manifest(out, names, base);
  write_run_manifest(out, "generate", {{"n", n}, {"phantom", cfg}}, argc, argv);
  return ok;
}

// ---- train ------------------------------------------------------------------

int cmd_train(const fs::path& data_dir, const fs::path& out, const json& model_cfg, const json& train_cfg,
              const std::string& resume, std::size_t checkpoint_every, int argc, char** argv) {
  ModelConfig mc;
  from_json(model_cfg, mc);
  TrainConfig tc;
  from_json(train_cfg, tc);
  tc.validate();
  const auto ds = load_dataset(data_dir);
  fs::create_directories(out);
  write_run_manifest(out, "train", {{"model", model_cfg}, {"train", train_cfg}, {"data", data_dir.string()}},
                     argc, argv);

  std::cerr << "preparing " << ds.samples.size() << " samples\n";
  std::vector<TrainingExample> examples;
  for (std::size_t i = 0; i < ds.samples.size(); ++i)
    examples.push_back(make_training_example(ds.ids[i], ds.samples[i], mc, tc, i));
  End2RegModel model(mc);
  Trainer trainer(model, std::move(examples), tc);
  if (!resume.empty()) {
    const auto ck = load_checkpoint(resume);
    ModelConfig saved;
    from_json(ck.config.at("model"), saved);
    if (to_json(saved) != to_json(mc)) throw CheckpointError(resume + ": model configuration differs from this run");
    trainer.restore(ck);
    std::cerr << "resumed at step " << trainer.step() << "\n";
  }

  Checkpoint last_good = trainer.checkpoint();
  bool reported_phase1 = false;
  auto report_phase1 = [&] {
    const double acc = trainer.segmentation_accuracy();
    write_json_file(out / "phase1_report.json",
                    {{"phase1_iters", tc.phase1_iters}, {"segmentation_accuracy_vs_gt", acc},
                     {"weak_label_mm", tc.weak_label_mm}});
    std::cerr << "phase 1 segmentation accuracy vs gt_mask: " << acc << "\n";
    reported_phase1 = true;
  };
  double window = 0.0;
  std::size_t count = 0;
  try {
    while (!trainer.done()) {
      const auto r = trainer.step_once();
      window += r.total;
      ++count;
      if (tc.mode == TrainMode::two_step && !reported_phase1 && trainer.step() == tc.phase1_iters) report_phase1();
      if (count == 50 || trainer.done()) {
        std::cerr << "step " << trainer.step() << "/" << trainer.total_steps() << " phase " << r.phase << " loss "
                  << window / static_cast<double>(count) << " lr " << r.lr << "\n";
        window = 0.0;
        count = 0;
      }
      if (checkpoint_every > 0 && trainer.step() % checkpoint_every == 0) {
        last_good = trainer.checkpoint();
        std::ostringstream name;
        name << "checkpoint_" << std::setw(6) << std::setfill('0') << trainer.step() << ".ckpt";
        save_checkpoint(out / name.str(), last_good);
      }
    }
  } catch (const TrainingDiverged& e) {
    save_checkpoint(out / "last_good.ckpt", last_good);
    write_curve_csv(out / "loss.csv", trainer.curve());
    throw NumericalFailure(std::string(e.what()) + " (sample " + e.sample + "); last good checkpoint saved to " +
                           (out / "last_good.ckpt").string());
  }
  if (tc.mode == TrainMode::two_step && !reported_phase1) report_phase1();
  save_checkpoint(out / "model.ckpt", trainer.checkpoint());
  write_curve_csv(out / "loss.csv", trainer.curve());
  std::cerr << "wrote " << (out / "model.ckpt").string() << "\n";
  return ok;
}

// ---- register ---------------------------------------------------------------

int cmd_register(const std::string& checkpoint, const std::string& baseline, const std::string& pre_path,
                 const std::string& intra_path, const std::string& data_dir, const fs::path& out,
                 const std::string& emit_mask, bool no_mask, std::uint64_t seed, int argc, char** argv) {
  if (checkpoint.empty() == baseline.empty()) throw UsageError("give exactly one of --checkpoint or --baseline");
  Method method = baseline.empty() ? (no_mask ? Method::end2reg_unmasked : Method::end2reg) : parse_method(baseline);
  if (!baseline.empty() && (method == Method::end2reg || method == Method::end2reg_unmasked))
    throw UsageError("--baseline takes icp or ransac_icp");
  std::optional<End2RegModel> model;
  if (!checkpoint.empty()) model.emplace(load_model(checkpoint));
  const End2RegModel* mp = model ? &*model : nullptr;

  if (!data_dir.empty()) {
    // batch mode: one pose file per sample
    const auto ds = load_dataset(data_dir);
    fs::create_directories(out);
    std::size_t failures = 0;
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
      const auto& s = ds.samples[i];
      const auto r = run_method(method, mp, s.preoperative, s.intraoperative, seed);
      if (r.failed) {
        ++failures;
        std::cerr << ds.ids[i] << ": registration failed: " << r.diagnostic << "\n";
        continue;
      }
      save_pose(out / (ds.ids[i] + ".json"), r.transform, s.normalization);
      if (!r.mask.empty()) {
        std::ofstream m(out / (ds.ids[i] + ".mask.txt"));
        for (int v : r.mask) m << v << '\n';
      }
      std::cerr << ds.ids[i] << ": " << r.seconds << " s\n";
    }
    write_run_manifest(out, "register", {{"method", to_string(method)}, {"checkpoint", checkpoint}, {"seed", seed}},
                       argc, argv);
    return failures ? numerical : ok;
  }

  if (pre_path.empty() || intra_path.empty()) throw UsageError("give --pre and --intra, or --data");
  const PointCloud pre = load_ply(pre_path);
  PointCloud intra = load_ply(intra_path);
  if ((method == Method::end2reg) && !intra.colors)
    throw DataError(intra_path + ": the segmentation network needs red/green/blue properties");
  const auto r = run_method(method, mp, pre, intra, seed);
  if (r.failed) throw NumericalFailure("registration failed: " + r.diagnostic);
  // outputs only after success
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_pose(out, r.transform);
  if (!emit_mask.empty()) {
    if (r.mask.empty()) throw UsageError("--emit-mask needs a learned method with the mask enabled");
    intra.labels = r.mask;
    save_ply(emit_mask, intra);
  }
  std::cerr << "registered in " << r.seconds << " s\n";
  return ok;
}

// ---- eval -------------------------------------------------------------------

struct Evaluated {
  std::vector<EvalRecord> records;
  std::vector<std::string> missing;
};

Evaluated evaluate_predictions(const Dataset& ds, const fs::path& pred_dir, const std::string& method) {
  Evaluated e;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const fs::path p = pred_dir / (ds.ids[i] + ".json");
    if (!fs::exists(p)) {
      e.missing.push_back(ds.ids[i]);
      continue;
    }
    const auto pose = load_pose(p);
    e.records.push_back(score(ds.ids[i], method, ds.samples[i], pose.transform));
  }
  return e;
}

json describe(const std::vector<EvalRecord>& records) {
  std::vector<double> tre_mm, tre_u, rmse_mm, rot, trans;
  for (const auto& r : records) {
    tre_mm.insert(tre_mm.end(), r.tre_mm.begin(), r.tre_mm.end());
    tre_u.insert(tre_u.end(), r.tre.begin(), r.tre.end());
    rmse_mm.push_back(r.rmse_mm);
    rot.push_back(r.rotation_deg);
    trans.push_back(r.translation);
  }
  return {{"tre_mm", summary_json(summarize(tre_mm))},     {"tre_unit", summary_json(summarize(tre_u))},
          {"rmse_mm", summary_json(summarize(rmse_mm))},   {"rotation_deg", summary_json(summarize(rot))},
          {"translation_unit", summary_json(summarize(trans))}};
}

int cmd_eval(const fs::path& data_dir, const fs::path& pred_dir, const fs::path& out, const std::string& method,
             int argc, char** argv) {
  const auto ds = load_dataset(data_dir);
  auto e = evaluate_predictions(ds, pred_dir, method);
  fs::create_directories(out);
  write_records_csv(out / "records.csv", e.records);
  json summary = {{"method", method}, {"samples", e.records.size()}, {"missing", e.missing}};
  if (!e.records.empty()) summary["metrics"] = describe(e.records);
  write_json_file(out / "summary.json", summary);
  write_run_manifest(out, "eval", {{"data", data_dir.string()}, {"predictions", pred_dir.string()}}, argc, argv);
  if (!e.records.empty()) {
    std::vector<double> tre_mm, rmse_mm;
    for (const auto& r : e.records) {
      tre_mm.insert(tre_mm.end(), r.tre_mm.begin(), r.tre_mm.end());
      rmse_mm.push_back(r.rmse_mm);
    }
    std::cout << "method " << method << ", " << e.records.size() << " samples\n";
    std::cout << "TRE (mm)   " << summary_line(summarize(tre_mm)) << "\n";
    std::cout << "RMSE (mm)  " << summary_line(summarize(rmse_mm)) << "\n";
  }
  for (const auto& m : e.missing) std::cerr << "missing prediction: " << m << "\n";
  return e.missing.empty() ? ok : data;
}

// ---- ablate -----------------------------------------------------------------

// Paired per-landmark TRE comparison of two methods, Table-3 style.
json ablation_report(const std::vector<EvalRecord>& a, const std::vector<EvalRecord>& b, const std::string& name_a,
                     const std::string& name_b, std::ostream& text) {
  std::vector<double> ta, tb;
  for (const auto& r : a) ta.insert(ta.end(), r.tre_mm.begin(), r.tre_mm.end());
  for (const auto& r : b) tb.insert(tb.end(), r.tre_mm.begin(), r.tre_mm.end());
  const auto sa = summarize(ta), sb = summarize(tb);
  json report = {{name_a, summary_json(sa)}, {name_b, summary_json(sb)}, {"pairs", ta.size()}};
  text << std::left << std::setw(14) << name_a << "TRE (mm) " << summary_line(sa) << "\n";
  text << std::left << std::setw(14) << name_b << "TRE (mm) " << summary_line(sb) << "\n";
  try {
    const auto w = wilcoxon_signed_rank(ta, tb);
    report["wilcoxon"] = {{"n", w.n},           {"w_plus", w.w_plus},     {"w_minus", w.w_minus},
                          {"z", w.z},           {"p_normal", w.p_value},  {"p_exact", w.p_exact},
                          {"p", w.p_reported()}, {"effect_r", w.effect_r},
                          {"direction", sb.median < sa.median ? name_b + " lower" : name_a + " lower"}};
    text << "Wilcoxon signed-rank (" << name_b << " - " << name_a << "): n " << w.n << ", W+ " << w.w_plus
         << ", z " << w.z << ", p " << w.p_reported() << (w.p_exact >= 0 ? " (exact)" : " (normal)")
         << ", r " << w.effect_r << "\n";
  } catch (const std::invalid_argument& e) {
    report["wilcoxon"] = {{"error", e.what()}};
    text << "Wilcoxon test not computed: " << e.what() << "\n";
    throw NumericalFailure(e.what());
  }
  return report;
}

int cmd_ablate(const fs::path& data_dir, const std::string& a, const std::string& b, const std::string& name_a,
               const std::string& name_b, const fs::path& out, int argc, char** argv) {
  const auto ds = load_dataset(data_dir);
  auto records_for = [&](const std::string& src, const std::string& name) {
    if (fs::is_directory(src)) {
      auto e = evaluate_predictions(ds, src, name);
      if (!e.missing.empty()) throw DataError(src + ": missing prediction for " + e.missing.front());
      return e.records;
    }
    const auto model = load_model(src);
    std::vector<EvalRecord> recs;
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
      const auto& s = ds.samples[i];
      const auto r = run_method(Method::end2reg, &model, s.preoperative, s.intraoperative, 0);
      recs.push_back(score(ds.ids[i], name, s, r.transform, r.seconds, r.failed));
    }
    return recs;
  };
  const auto ra = records_for(a, name_a);
  const auto rb = records_for(b, name_b);
  fs::create_directories(out);
  auto all = ra;
  all.insert(all.end(), rb.begin(), rb.end());
  write_records_csv(out / "records.csv", all);
  write_run_manifest(out, "ablate", {{"a", a}, {"b", b}}, argc, argv);
  std::ostringstream text;
  try {
    const auto report = ablation_report(ra, rb, name_a, name_b, text);
    write_json_file(out / "ablation.json", report);
  } catch (...) {
    std::ofstream(out / "ablation.txt") << text.str();
    std::cout << text.str();
    throw;
  }
  std::ofstream(out / "ablation.txt") << text.str();
  std::cout << text.str();
  return ok;
}

// ---- gradcheck --------------------------------------------------------------

int cmd_gradcheck(const std::string& component, std::uint64_t seed, bool wrong_sign) {
  const auto start = std::chrono::steady_clock::now();
  const auto checks = run_gradcheck_suite(component, seed, wrong_sign);
  std::size_t failed = 0;
  for (const auto& c : checks) {
    std::printf("%-4s %-9s %-28s max rel error %.3e (tol %.0e)\n", c.result.passed() ? "ok" : "FAIL",
                c.component.c_str(), c.result.name.c_str(), c.result.max_rel_error, c.result.tolerance);
    failed += !c.result.passed();
  }
  std::printf("%zu checks, %zu failed, %.1f s\n", checks.size(), failed,
              std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  return failed ? numerical : ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint segmentation and rigid registration of spine point clouds"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "Write a synthetic phantom dataset");
  std::string gen_out, gen_config;
  std::size_t gen_n = 1;
  PhantomConfig pd;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("-n,--samples", gen_n, "Number of samples")->check(CLI::PositiveNumber);
  gen->add_option("--config", gen_config, "JSON file with a \"phantom\" section");
  auto* o_seed = gen->add_option("--seed", pd.seed, "Seed of the first sample");
  auto* o_vert = gen->add_option("--vertebrae", pd.n_vertebrae);
  auto* o_ppre = gen->add_option("--points-pre", pd.points_pre);
  auto* o_pint = gen->add_option("--points-intra", pd.points_intra);
  auto* o_expo = gen->add_option("--exposure", pd.exposure_fraction);
  auto* o_clut = gen->add_option("--clutter", pd.clutter_fraction);
  auto* o_nois = gen->add_option("--noise", pd.noise_sigma, "Position noise in meters");
  auto* o_occl = gen->add_option("--occlusions", pd.occlusion_patches);

  // train
  auto* train = app.add_subcommand("train", "Train on a dataset");
  std::string tr_data, tr_out, tr_config, tr_resume, tr_mode_s, tr_opt;
  std::size_t tr_every = 1000;
  TrainConfig td;
  double reg_scale = 1.0, seg_scale = 0.25;
  train->add_option("--data", tr_data, "Dataset directory")->required();
  train->add_option("--out", tr_out, "Output directory")->required();
  train->add_option("--config", tr_config, "JSON file with \"model\" and \"train\" sections");
  train->add_option("--resume", tr_resume, "Checkpoint to continue from");
  train->add_option("--checkpoint-every", tr_every, "Checkpoint period in steps (0 = final only)");
  auto* o_mode = train->add_option("--mode", tr_mode_s, "end_to_end or two_step");
  auto* o_iters = train->add_option("--iters", td.total_iters);
  auto* o_p1 = train->add_option("--phase1-iters", td.phase1_iters);
  auto* o_warm = train->add_option("--warmup", td.warmup_iters);
  auto* o_lr = train->add_option("--lr", td.lr0);
  auto* o_opt = train->add_option("--optimizer", tr_opt, "sgd_momentum or adam");
  auto* o_tseed = train->add_option("--seed", td.seed);
  auto* o_tau = train->add_option("--tau", td.tau_start);
  auto* o_anneal = train->add_flag("--anneal-tau", td.tau_anneal);
  auto* o_var = train->add_option("--pose-variants", td.pose_variants);
  auto* o_rscale = train->add_option("--reg-width-scale", reg_scale);
  auto* o_sscale = train->add_option("--seg-width-scale", seg_scale);

  // register
  auto* reg = app.add_subcommand("register", "Estimate the preoperative-to-intraoperative pose");
  std::string rg_ckpt, rg_base, rg_pre, rg_intra, rg_data, rg_out, rg_mask;
  bool rg_nomask = false;
  std::uint64_t rg_seed = 0;
  auto* o_ckpt = reg->add_option("--checkpoint", rg_ckpt, "Trained model");
  reg->add_option("--baseline", rg_base, "icp or ransac_icp")->excludes(o_ckpt);
  reg->add_option("--pre", rg_pre, "Preoperative PLY");
  reg->add_option("--intra", rg_intra, "Intraoperative PLY with colors");
  reg->add_option("--data", rg_data, "Register every sample of a dataset instead");
  reg->add_option("--out", rg_out, "Pose file (or directory with --data)")->required();
  reg->add_option("--emit-mask", rg_mask, "Also write the intraoperative cloud with predicted labels");
  reg->add_flag("--no-mask", rg_nomask, "Keep every intraoperative point (skip segmentation)");
  reg->add_option("--seed", rg_seed, "Seed for RANSAC");

  // eval
  auto* ev = app.add_subcommand("eval", "Score pose predictions against a dataset");
  std::string ev_data, ev_pred, ev_out, ev_method = "predictions";
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--predictions", ev_pred, "Directory of <sample>.json poses")->required();
  ev->add_option("--out", ev_out)->required();
  ev->add_option("--method", ev_method, "Label used in the tables");

  // ablate
  auto* ab = app.add_subcommand("ablate", "Paired comparison of two models or prediction sets");
  std::string ab_data, ab_a, ab_b, ab_out, ab_na = "two_step", ab_nb = "end_to_end";
  ab->add_option("--data", ab_data)->required();
  ab->add_option("--a", ab_a, "Checkpoint or prediction directory (reference)")->required();
  ab->add_option("--b", ab_b, "Checkpoint or prediction directory (compared)")->required();
  ab->add_option("--name-a", ab_na);
  ab->add_option("--name-b", ab_nb);
  ab->add_option("--out", ab_out)->required();

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference checks of every differentiable operator");
  std::string gc_comp;
  std::uint64_t gc_seed = 0;
  bool gc_wrong = false;
  gc->add_option("--component", gc_comp, "One of tensor, stgs, kpconv, segnet, backbone, matcher")
      ->check(CLI::IsMember(gradcheck_components()));
  gc->add_option("--seed", gc_seed);
  gc->add_flag("--inject-wrong-sign", gc_wrong, "Flip every analytic gradient (the checks must fail)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : usage;
  }

  try {
    if (*gen) {
      json cfg = layered(phantom_json(PhantomConfig{}), gen_config, "phantom");
      flag(cfg, "seed", o_seed, pd.seed);
      flag(cfg, "n_vertebrae", o_vert, pd.n_vertebrae);
      flag(cfg, "points_pre", o_ppre, pd.points_pre);
      flag(cfg, "points_intra", o_pint, pd.points_intra);
      flag(cfg, "exposure_fraction", o_expo, pd.exposure_fraction);
      flag(cfg, "clutter_fraction", o_clut, pd.clutter_fraction);
      flag(cfg, "noise_sigma", o_nois, pd.noise_sigma);
      flag(cfg, "occlusion_patches", o_occl, pd.occlusion_patches);
      return cmd_generate(gen_out, gen_n, cfg, argc, argv);
    }
    if (*train) {
      json model_cfg = layered(to_json(ModelConfig{}), tr_config, "model");
      if (o_rscale->count()) model_cfg["reg"]["width_scale"] = reg_scale;
      if (o_sscale->count()) model_cfg["seg"]["width_scale"] = seg_scale;
      json train_cfg = layered(to_json(TrainConfig{}), tr_config, "train");
      flag(train_cfg, "mode", o_mode, tr_mode_s);
      flag(train_cfg, "total_iters", o_iters, td.total_iters);
      flag(train_cfg, "phase1_iters", o_p1, td.phase1_iters);
      flag(train_cfg, "warmup_iters", o_warm, td.warmup_iters);
      flag(train_cfg, "lr0", o_lr, td.lr0);
      flag(train_cfg, "optimizer", o_opt, tr_opt);
      flag(train_cfg, "seed", o_tseed, td.seed);
      flag(train_cfg, "tau_start", o_tau, td.tau_start);
      flag(train_cfg, "tau_anneal", o_anneal, td.tau_anneal);
      flag(train_cfg, "pose_variants", o_var, td.pose_variants);
      return cmd_train(tr_data, tr_out, model_cfg, train_cfg, tr_resume, tr_every, argc, argv);
    }
    if (*reg)
      return cmd_register(rg_ckpt, rg_base, rg_pre, rg_intra, rg_data, rg_out, rg_mask, rg_nomask, rg_seed, argc,
                          argv);
    if (*ev) return cmd_eval(ev_data, ev_pred, ev_out, ev_method, argc, argv);
    if (*ab) return cmd_ablate(ab_data, ab_a, ab_b, ab_na, ab_nb, ab_out, argc, argv);
    if (*gc) return cmd_gradcheck(gc_comp, gc_seed, gc_wrong);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return usage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return usage;
  } catch (const json::exception& e) {
    std::cerr << "error: bad configuration: " << e.what() << "\n";
    return usage;
  } catch (const NumericalFailure& e) {
    std::cerr << "error: " << e.what() << "\n";
    return numerical;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return data;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return data;
  } catch (const GeometryError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return data;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return data;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return numerical;
  }
  return usage;
}
