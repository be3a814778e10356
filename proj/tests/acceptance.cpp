// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "mdgp/mdgp.hpp"

#ifndef MDGP_CONFIG_DIR
#error "MDGP_CONFIG_DIR must point at the configs directory"
#endif

using namespace mdgp;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

const fs::path kWork = fs::temp_directory_path() / "mdgp_acceptance";

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

RunConfig config(const std::string& name, const std::string& out, const std::vector<std::string>& extra = {}) {
  std::vector<std::string> overrides{"output_dir=\"" + (kWork / out).string() + "\""};
  overrides.insert(overrides.end(), extra.begin(), extra.end());
  return load_config((fs::path(MDGP_CONFIG_DIR) / name).string(), overrides);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// The oracle suite runs once; several criteria read its entries.
std::map<std::string, CheckResult> g_suite;
double g_suite_seconds = 0.0;

Outcome suite_entries(const std::vector<std::string>& names) {
  Outcome o{true, ""};
  for (const auto& n : names) {
    const auto it = g_suite.find(n);
    if (it == g_suite.end()) return {false, "missing check " + n};
    o.pass = o.pass && it->second.passed;
    o.detail += n + "=" + fmt("%.2e", it->second.deviation) + "<=" + fmt("%.0e", it->second.tolerance) + " ";
  }
  return o;
}

Outcome criterion1() {
  const RunConfig cfg = config("default.json", "c1");
  const auto t0 = std::chrono::steady_clock::now();
  try {
    cmd_verify(cfg);
  } catch (const VerificationFailed&) {
  }
  g_suite_seconds = seconds_since(t0);
  const nlohmann::json rep = nlohmann::json::parse(slurp(kWork / "c1" / "verify_report.json"));
  for (const auto& c : rep.at("checks"))
    g_suite[c.at("name")] = {c.at("name"), c.at("deviation"), c.at("tolerance"), c.at("passed")};
  Outcome o = suite_entries({"inference.ngd_equivalence_softmax", "inference.ngd_equivalence_gaussian"});
  o.pass = o.pass && g_suite_seconds < 30.0 && cfg.ngd_instances == 10;
  o.detail += "instances=10 suite_time=" + fmt("%.1fs", g_suite_seconds);
  return o;
}

Outcome criterion2() {
  Outcome o = suite_entries({"inference.conjugate_rho1"});
  // Absolute-error cross-check against dense GP regression.
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Mat x = standard_normals(derive_seed(s, {31}), 5, 2);
    std::vector<GramResult> priors{gram(BaseKernelConfig::make(KernelKind::Rbf, 1.2), x, 1e-3),
                                   gram(BaseKernelConfig::make(KernelKind::Pol2, 1.0, 0.5), x, 1e-3)};
    const Mat y = standard_normals(derive_seed(s, {32}), 5, 2);
    const double s2 = 0.6;
    const VariationalState st = md_step(md_init(priors), y, 1.0, GaussianTestLikelihood{s2}, 0);
    for (Index c = 0; c < 2; ++c) {
      const Mat k = priors[c].prior_cov();
      Mat ky = k;
      ky.diagonal().array() += s2;
      const Eigen::FullPivLU<Mat> lu(ky);
      worst = std::max(worst, (st.posteriors[c].cov - (k - k * lu.solve(k))).cwiseAbs().maxCoeff());
      worst = std::max(worst, (st.posteriors[c].mean - k * lu.solve(Vec(y.col(c)))).cwiseAbs().maxCoeff());
    }
  }
  o.pass = o.pass && worst <= 1e-8;
  o.detail += "dense_abs_err=" + fmt("%.2e", worst);
  return o;
}

Outcome criterion3() {
  return suite_entries(
      {"likelihood.mv_gradients_crn_fd", "likelihood.mean_param_gradients_fd", "likelihood.gradient_bounds"});
}

Outcome criterion4() {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o{true, ""};
  for (const char* name : {"compare_inner_1shot.json", "compare_inner_5shot.json"}) {
    const RunConfig cfg = config(name, std::string("c4_") + name);
    const InnerComparison r = cmd_compare_inner(cfg);
    int wins = 0;
    for (double g : r.final_gap) wins += g >= 0.0;
    const double frac = static_cast<double>(wins) / static_cast<double>(r.final_gap.size());
    o.pass = o.pass && r.final_gap.size() == 20 && cfg.ci_rate == 0.005 && cfg.ci_steps == 30 && frac >= 0.9;
    o.detail += std::string(name).substr(14, 5) + " MD>=GD " + std::to_string(wins) + "/" +
                std::to_string(r.final_gap.size()) + "; ";
  }
  const double t = seconds_since(t0);
  o.pass = o.pass && t < 120.0;
  o.detail += "time=" + fmt("%.1fs", t);
  return o;
}

Outcome criterion5() {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o{true, ""};
  for (const char* name : {"compare_outer_1shot.json", "compare_outer_5shot.json"}) {
    const RunConfig cfg = config(name, std::string("c5_") + name);
    const OuterComparison r = cmd_compare_outer(cfg);
    int wins = 0;
    for (std::size_t i = 0; i < r.final_ce_md.size(); ++i) wins += r.final_ce_md[i] <= r.final_ce_gd[i];
    const double frac = static_cast<double>(wins) / static_cast<double>(r.final_ce_md.size());
    o.pass = o.pass && r.final_ce_md.size() == 10 && cfg.co_iterations == 30 && cfg.co_inner_steps == 2 &&
             cfg.lr_net == 1e-3 && frac >= 0.7;
    o.detail += std::string(name).substr(14, 5) + " MD<=GD " + std::to_string(wins) + "/" +
                std::to_string(r.final_ce_md.size()) + "; ";
  }
  const double t = seconds_since(t0);
  o.pass = o.pass && t < 600.0;
  o.detail += "time=" + fmt("%.1fs", t);
  return o;
}

Outcome criterion6() { return suite_entries({"meta.outer_grad_fd", "meta.outer_grad_prior_zero"}); }

Outcome criterion7() {
  return suite_entries({"expfam.round_trips", "expfam.fenchel_equality", "expfam.bregman_equals_kl",
                        "expfam.dual_gradients_fd"});
}

Outcome criterion8() {
  Outcome o = suite_entries({"model.prior_predictive"});
  // Conjugate fit against direct conditioning of the joint Gaussian.
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    DeepKernel k;
    k.extractor = FeatureExtractor::random({3, 5, 4}, derive_seed(s, {41}));
    k.base = {BaseKernelConfig::make(KernelKind::Rbf, 1.3), BaseKernelConfig::make(KernelKind::Rbf, 0.9, 1.0, 1.7)};
    k.jitter = 1e-3;
    const double s2 = 0.3;
    const Mat xs = standard_normals(derive_seed(s, {42}), 6, 3), xq = standard_normals(derive_seed(s, {43}), 4, 3);
    const Mat y = standard_normals(derive_seed(s, {44}), 6, 2);
    const FittedEpisode fit = fit_episode(k, xs, y, {1.0, 1, {8, 0}}, GaussianTestLikelihood{s2});
    const LatentPrediction lat = predict_latent(fit, xq);
    Mat z(10, 4);
    z << extract(k.extractor, xs).features, extract(k.extractor, xq).features;
    for (Index c = 0; c < 2; ++c) {
      const BaseKernelConfig& b = k.base[c];
      Mat joint(10, 10);
      for (Index i = 0; i < 10; ++i)
        for (Index j = 0; j < 10; ++j)
          joint(i, j) = b.output_scale() * std::exp(-(z.row(i) - z.row(j)).squaredNorm() / (2 * b.length_scale() * b.length_scale()));
      joint.topLeftCorner(6, 6).diagonal().array() += fit.grams[c].jitter_used + s2;
      const Eigen::FullPivLU<Mat> lu(Mat(joint.topLeftCorner(6, 6)));
      const Mat cross = joint.bottomLeftCorner(4, 6);
      const Vec mean = cross * lu.solve(Vec(y.col(c)));
      const Vec var = joint.bottomRightCorner(4, 4).diagonal() - (cross * lu.solve(Mat(cross.transpose()))).diagonal();
      worst = std::max({worst, (lat.mean.col(c) - mean).cwiseAbs().maxCoeff(),
                        (lat.var.col(c) - var).cwiseAbs().maxCoeff()});
    }
  }
  o.pass = o.pass && worst <= 1e-8;
  o.detail += "dense_conditioning_err=" + fmt("%.2e", worst);
  return o;
}

Outcome criterion9() {
  const auto t0 = std::chrono::steady_clock::now();
  const RunConfig cfg = config("end_to_end.json", "c9");
  const RunConfig untrained_cfg = config("end_to_end.json", "c9_untrained");
  cmd_train(cfg);
  const double trained = cmd_eval(cfg, (kWork / "c9" / "checkpoint.json").string()).accuracy_mean;
  save_checkpoint((kWork / "c9_init.json").string(), initial_kernel(cfg, cfg.task.dim), cfg.resolved);
  const double untrained = cmd_eval(untrained_cfg, (kWork / "c9_init.json").string()).accuracy_mean;

  Mat calibrated(6, 2);
  calibrated << 0.75, 0.25, 0.75, 0.25, 0.25, 0.75, 0.75, 0.25, 1.0, 0.0, 0.0, 1.0;
  Mat calibrated_y = Mat::Zero(6, 2);
  for (Index i : {0, 1, 4}) calibrated_y(i, 0) = 1.0;
  for (Index i : {2, 3, 5}) calibrated_y(i, 1) = 1.0;
  const double ece_cal = ece(calibrated, calibrated_y);

  Mat two_bin(20, 2), two_bin_y = Mat::Zero(20, 2);
  for (Index i = 0; i < 20; ++i) {
    if (i < 10) two_bin.row(i) << 0.9, 0.1;
    else two_bin.row(i) << 0.6, 0.4;
    two_bin_y(i, (i % 10) < 6 ? 0 : 1) = 1.0;
  }
  const double e2 = ece(two_bin, two_bin_y), m2 = mce(two_bin, two_bin_y);

  const bool ok = cfg.epochs == 30 && cfg.task.ways == 5 && cfg.task.shots == 5 && trained >= 0.90 &&
                  std::abs(untrained - 0.2) <= 0.05 && ece_cal == 0.0 && std::abs(e2 - 0.15) <= 1e-12 &&
                  std::abs(m2 - 0.30) <= 1e-12;
  return {ok, "trained_acc=" + fmt("%.4f", trained) + " untrained_acc=" + fmt("%.4f", untrained) +
                  " calibrated_ece=" + fmt("%.1e", ece_cal) + " two_bin_ece=" + fmt("%.15f", e2) +
                  " two_bin_mce=" + fmt("%.15f", m2) + " time=" + fmt("%.1fs", seconds_since(t0))};
}

Outcome criterion10() {
  const RunConfig cfg = config("smoke.json", "c10");
  const char* files[] = {"outer_trace.csv", "checkpoint.json", "inner_trace.csv", "outer_compare.csv"};
  std::vector<std::string> first;
  bool same = true;
  for (int run = 0; run < 2; ++run) {
    cmd_train(cfg);
    cmd_compare_inner(cfg);
    cmd_compare_outer(cfg);
    for (std::size_t f = 0; f < 4; ++f) {
      const std::string bytes = slurp(kWork / "c10" / files[f]);
      if (run == 0) first.push_back(bytes);
      else same = same && !bytes.empty() && bytes == first[f];
    }
  }
  return {same, "train, compare-inner and compare-outer artifacts identical across two sequential runs"};
}

}  // namespace

int main() {
  fs::remove_all(kWork);
  fs::create_directories(kWork);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"1 mirror descent equals natural gradient", criterion1},
      {"2 conjugate unit step", criterion2},
      {"3 likelihood gradients and bounds", criterion3},
      {"4 inner-loop ELBO ordering", criterion4},
      {"5 outer-loop cross-entropy ordering", criterion5},
      {"6 outer gradient", criterion6},
      {"7 exponential-family identities", criterion7},
      {"8 prediction algebra", criterion8},
      {"9 end-to-end learning and calibration", criterion9},
      {"10 determinism", criterion10},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s criterion %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  fs::remove_all(kWork);
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
