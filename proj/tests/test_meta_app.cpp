#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "mdgp/mdgp.hpp"

using namespace mdgp;
namespace fs = std::filesystem;

namespace {

DeepKernel small_kernel(KernelKind kind, Index classes = 3, std::uint64_t seed = 1) {
  DeepKernel k;
  k.extractor = FeatureExtractor::random({4, 6, 3}, seed);
  for (auto& l : k.extractor.layers()) l.bias.setConstant(0.05);
  for (Index c = 0; c < classes; ++c) k.base.push_back(BaseKernelConfig::make(kind, 1.1 + 0.2 * c, 0.8, 1.0 + 0.1 * c));
  k.jitter = 1e-2;
  return k;
}

TaskGenConfig small_task() {
  TaskGenConfig t;
  t.ways = 3;
  t.shots = 2;
  t.queries = 3;
  t.dim = 4;
  return t;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t line_count(const fs::path& p) {
  const std::string s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) : path_(fs::temp_directory_path() / ("mdgp_" + tag)) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }
  std::string str(const std::string& sub = "") const { return (path_ / sub).string(); }

 private:
  fs::path path_;
};

// A small but complete run configuration.
Json small_config(const std::string& out) {
  Json j = Json::parse(R"({
    "seed": 3,
    "task": {"C": 3, "L": 2, "M": 3, "D": 4},
    "kernel": {"net_dims": [8, 4]},
    "inner": {"steps": 2, "mc_samples": 16},
    "eval_inner": {"steps": 5, "mc_samples": 16},
    "outer": {"epochs": 2, "episodes_per_epoch": 3},
    "eval": {"episodes": 4, "predict_samples": 32},
    "compare_inner": {"episodes": 2},
    "compare_outer": {"seeds": 2, "iterations": 3, "monitor_episodes": 2},
    "verify": {"ngd_instances": 2}
  })");
  j["output_dir"] = out;
  return j;
}

}  // namespace

// ---------------------------------------------------------------------------
// parameter layout and outer gradient

TEST(Params, FlattenUnflattenRoundTrip) {
  const DeepKernel k = small_kernel(KernelKind::Pol2);
  const Vec v = flatten_params(k);
  EXPECT_EQ(v.size(), param_count(k));
  EXPECT_EQ(param_count(k), (6 * 4 + 6) + (3 * 6 + 3) + 3 * 3);
  EXPECT_EQ(net_param_count(k.extractor), 51);
  const auto mask = net_mask(k);
  EXPECT_EQ(std::count(mask.begin(), mask.end(), true), 51);
  const DeepKernel back = unflatten_params(k, v);
  EXPECT_EQ(flatten_params(back), v);
  EXPECT_EQ(back.base[2].offset_raw, k.base[2].offset_raw);
  EXPECT_THROW(unflatten_params(k, Vec::Zero(3)), DimensionMismatch);
}

TEST(OuterGrad, MatchesFiniteDifferencesOfTheEtaTerm) {
  for (KernelKind kind : {KernelKind::Cos, KernelKind::Rbf, KernelKind::Pol1, KernelKind::Pol2}) {
    const DeepKernel k = small_kernel(kind);
    const Mat x = standard_normals(4, 6, 4);
    const FittedEpisode fit = fit_episode(k, x, one_hot_blocks(3, 2), {0.7, 3, {32, 1}}, SoftmaxMc{32});
    const Vec g = outer_grad(fit);
    const Vec theta = flatten_params(k);
    const std::vector<double> jit = fitted_jitters(fit);
    Vec fd(theta.size());
    for (Index i = 0; i < theta.size(); ++i) {
      const double h = 1e-5 * std::max(1.0, std::abs(theta(i)));
      Vec a = theta, b = theta;
      a(i) += h;
      b(i) -= h;
      fd(i) = (eta_objective(unflatten_params(k, a), x, fit.posteriors(), jit) -
               eta_objective(unflatten_params(k, b), x, fit.posteriors(), jit)) /
              (2 * h);
    }
    EXPECT_LE((g - fd).norm() / std::max(1e-12, fd.norm()), 1e-3) << to_string(kind);
  }
}

TEST(OuterGrad, ExactlyZeroAtThePrior) {
  const DeepKernel k = small_kernel(KernelKind::Rbf);
  const FittedEpisode fit =
      fit_episode(k, standard_normals(2, 6, 4), one_hot_blocks(3, 2), {1.0, 0, {8, 0}}, SoftmaxMc{8});
  EXPECT_EQ(outer_grad(fit).cwiseAbs().maxCoeff(), 0.0);
}

// ---------------------------------------------------------------------------
// Adam

TEST(Adam, MatchesReferenceRecursion) {
  const DeepKernel k = small_kernel(KernelKind::Rbf, 2);
  Vec p = flatten_params(k);
  AdamState st = AdamState::init(k, 1e-3, 1e-4);
  const auto mask = net_mask(k);
  // Independent scalar transcription of the update rule.
  std::vector<double> rp(p.data(), p.data() + p.size()), rm(p.size(), 0.0), rv(p.size(), 0.0);
  for (int t = 1; t <= 6; ++t) {
    const Vec g = standard_normals(static_cast<std::uint64_t>(t), p.size(), 1).col(0);
    adam_step(p, st, g);
    for (std::size_t i = 0; i < rp.size(); ++i) {
      rm[i] = 0.9 * rm[i] + 0.1 * g(static_cast<Index>(i));
      rv[i] = 0.999 * rv[i] + 0.001 * g(static_cast<Index>(i)) * g(static_cast<Index>(i));
      const double mhat = rm[i] / (1 - std::pow(0.9, t)), vhat = rv[i] / (1 - std::pow(0.999, t));
      rp[i] += (mask[i] ? 1e-3 : 1e-4) * mhat / (std::sqrt(vhat) + 1e-8);
    }
  }
  for (std::size_t i = 0; i < rp.size(); ++i) EXPECT_NEAR(p(static_cast<Index>(i)), rp[i], 1e-14);
  EXPECT_EQ(st.t, 6);
}

TEST(Adam, FirstStepMovesByTheRateTowardTheGradient) {
  const DeepKernel k = small_kernel(KernelKind::Rbf, 2);
  Vec p = flatten_params(k);
  const Vec p0 = p;
  AdamState st = AdamState::init(k, 1e-3, 1e-4);
  const Vec g = Vec::Constant(p.size(), -2.0);
  adam_step(p, st, g);
  EXPECT_NEAR(p(0) - p0(0), -1e-3, 1e-10);
  EXPECT_NEAR(p(p.size() - 1) - p0(p.size() - 1), -1e-4, 1e-10);
  EXPECT_THROW(adam_step(p, st, Vec::Zero(2)), DimensionMismatch);
}

// ---------------------------------------------------------------------------
// training and evaluation

TEST(Train, TraceLengthAndEpochCallbacks) {
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.episodes_per_epoch = 3;
  cfg.inner = {1.0, 2, {16, 0}};
  cfg.predict_samples = 16;
  int calls = 0;
  cfg.on_epoch = [&](int epoch, const DeepKernel&) { EXPECT_EQ(epoch, ++calls); };
  const TrainResult r = train(small_kernel(KernelKind::Cos), synthetic_source(small_task()), cfg);
  ASSERT_EQ(r.trace.size(), 6u);
  EXPECT_EQ(r.trace.front().iter, 1);
  EXPECT_EQ(r.trace.back().iter, 6);
  EXPECT_EQ(calls, 2);
  EXPECT_EQ(r.adam.t, 6);
  for (const auto& row : r.trace) {
    EXPECT_TRUE(std::isfinite(row.objective));
    EXPECT_GE(row.query_acc, 0.0);
    EXPECT_LE(row.query_acc, 1.0);
  }
}

TEST(Train, ZeroEpochsKeepsTheInitialization) {
  TrainConfig cfg;
  cfg.epochs = 0;
  const DeepKernel init = small_kernel(KernelKind::Cos);
  const TrainResult r = train(init, synthetic_source(small_task()), cfg);
  EXPECT_TRUE(r.trace.empty());
  EXPECT_EQ(flatten_params(r.kernel), flatten_params(init));
}

TEST(Train, DeterministicAndParallelGroupsStayFinite) {
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.episodes_per_epoch = 4;
  cfg.inner = {1.0, 2, {16, 0}};
  cfg.predict_samples = 16;
  const DeepKernel init = small_kernel(KernelKind::Cos);
  const TrainResult a = train(init, synthetic_source(small_task()), cfg);
  const TrainResult b = train(init, synthetic_source(small_task()), cfg);
  EXPECT_EQ(flatten_params(a.kernel), flatten_params(b.kernel));
  cfg.parallel_episodes = 2;
  const TrainResult p = train(init, synthetic_source(small_task()), cfg);
  ASSERT_EQ(p.trace.size(), 4u);
  EXPECT_TRUE(flatten_params(p.kernel).allFinite());
  // The first group sees the same hyperparameters, so its scores match.
  EXPECT_EQ(p.trace[0].objective, a.trace[0].objective);
}

TEST(Train, MonitoringRowsIncludeTheInitialState) {
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.episodes_per_epoch = 2;
  cfg.inner = {0.1, 2, {16, 0}};
  cfg.predict_samples = 16;
  cfg.record_initial = true;
  EXPECT_THROW(cfg.validate(), ConfigError);
  const TaskSource src = synthetic_source(small_task());
  cfg.monitor = {src(100), src(101)};
  const TrainResult r = train(small_kernel(KernelKind::Cos), src, cfg);
  ASSERT_EQ(r.trace.size(), 3u);
  EXPECT_EQ(r.trace.front().iter, 0);
}

TEST(Evaluate, PoolsQueriesAndReportsStderr) {
  EvalConfig ec;
  ec.episodes = 3;
  ec.batches = 2;
  ec.inner = {0.5, 3, {16, 0}};
  ec.predict_samples = 16;
  const EvalResult r = evaluate(small_kernel(KernelKind::Cos), synthetic_source(small_task()), ec);
  EXPECT_EQ(r.probs.rows(), 2 * 3 * 9);
  EXPECT_EQ(r.episode_accuracy.size(), 6u);
  ASSERT_EQ(r.batch_accuracy.size(), 2u);
  const double d = r.batch_accuracy[0] - r.batch_accuracy[1];
  EXPECT_NEAR(r.accuracy_stderr, std::abs(d) / 2.0, 1e-12);
  EXPECT_NEAR(r.ece, r.calibration.ece(), 1e-15);
  EXPECT_NEAR(r.nll, nll(r.probs, r.labels), 1e-15);
}

// ---------------------------------------------------------------------------
// config

TEST(Config, DefaultsFollowTheReferenceProtocol) {
  const RunConfig c = resolve_config(Json::object());
  EXPECT_EQ(c.inner.steps, 3);
  EXPECT_EQ(c.inner.rho, 1.0);
  EXPECT_EQ(c.eval_inner.steps, 50);
  EXPECT_EQ(c.eval_inner.rho, 0.5);
  EXPECT_EQ(c.lr_net, 1e-3);
  EXPECT_EQ(c.lr_kernel, 1e-4);
  EXPECT_EQ(c.episodes_per_epoch, 100);
  EXPECT_EQ(c.ci_rate, 0.005);
  EXPECT_EQ(c.ci_steps, 30);
  EXPECT_EQ(c.co_iterations, 30);
  EXPECT_EQ(c.co_inner_steps, 2);
  EXPECT_EQ(c.bins, 15);
  EXPECT_EQ(c.resolved, default_config_json());
}

TEST(Config, RejectsUnknownKeysAndWrongTypes) {
  EXPECT_THROW(resolve_config(Json::parse(R"({"sed": 1})")), ConfigError);
  EXPECT_THROW(resolve_config(Json::parse(R"({"task": {"ways": 5}})")), ConfigError);
  EXPECT_THROW(resolve_config(Json::parse(R"({"task": {"C": "five"}})")), ConfigError);
  EXPECT_THROW(resolve_config(Json::parse(R"({"task": {"C": 2.5}})")), ConfigError);
  EXPECT_THROW(resolve_config(Json::parse(R"({"kernel": {"kind": "linear"}})")), ConfigError);
  EXPECT_THROW(resolve_config(Json::parse(R"({"inner": {"rho": 0.0}})")), ConfigError);
  EXPECT_THROW(resolve_config(Json::parse(R"({"eval": {"domain_shift": {"angle": 3}}})")), ConfigError);
  EXPECT_THROW(resolve_config(Json::parse(R"([1, 2])")), ConfigError);
}

TEST(Config, AcceptsIntegersForRealsAndOptionalSections) {
  const RunConfig c = resolve_config(Json::parse(R"({"task": {"tau": 4}, "eval": {"domain_shift": {"angle_deg": 10}}})"));
  EXPECT_EQ(c.task.tau, 4.0);
  ASSERT_TRUE(c.eval_shift.has_value());
  EXPECT_EQ(c.eval_shift->angle_deg, 10.0);
  EXPECT_EQ(c.eval_shift->scale, 1.5);
  EXPECT_TRUE(c.resolved.at("task").at("tau").is_number_float());
}

TEST(Config, OverridesApplyInOrder) {
  Json doc = Json::object();
  apply_override(doc, "outer.epochs=4");
  apply_override(doc, "kernel.kind=rbf");
  apply_override(doc, "kernel.net_dims=[5,2]");
  apply_override(doc, "outer.epochs=7");
  const RunConfig c = resolve_config(doc);
  EXPECT_EQ(c.epochs, 7);
  EXPECT_EQ(c.kind, KernelKind::Rbf);
  EXPECT_EQ(c.net_dims, (std::vector<int>{5, 2}));
  EXPECT_THROW(apply_override(doc, "noequals"), ConfigError);
  EXPECT_THROW(apply_override(doc, "a..b=1"), ConfigError);
}

TEST(Config, InitialKernelShape) {
  const RunConfig c = resolve_config(Json::parse(R"({"task": {"C": 4, "D": 6}, "kernel": {"net_dims": [5, 3]}})"));
  const DeepKernel k = initial_kernel(c, 6);
  EXPECT_EQ(k.num_classes(), 4);
  EXPECT_EQ(k.extractor.layer_dims(), (std::vector<int>{6, 5, 3}));
  EXPECT_EQ(k.jitter, 0.01);
}

// ---------------------------------------------------------------------------
// checkpoint

TEST(Checkpoint, RoundTripIsExact) {
  const TempDir dir("ckpt");
  const DeepKernel k = small_kernel(KernelKind::Pol1, 4);
  save_checkpoint(dir.str("c.json"), k, Json{{"note", 1}});
  const DeepKernel back = load_checkpoint(dir.str("c.json"));
  EXPECT_EQ(flatten_params(back), flatten_params(k));
  EXPECT_EQ(back.jitter, k.jitter);
  EXPECT_EQ(back.base[1].kind, KernelKind::Pol1);
  const Json doc = Json::parse(slurp(dir.path() / "c.json"));
  EXPECT_EQ(doc.at("format_version"), 1);
  EXPECT_EQ(doc.at("config").at("note"), 1);
}

TEST(Checkpoint, RejectsBadFiles) {
  const TempDir dir("ckpt_bad");
  EXPECT_THROW(load_checkpoint(dir.str("missing.json")), InvalidArgument);
  std::ofstream(dir.path() / "junk.json") << "{not json";
  EXPECT_THROW(load_checkpoint(dir.str("junk.json")), ParseError);
  std::ofstream(dir.path() / "v2.json") << R"({"format_version": 2, "kernel": {}})";
  EXPECT_THROW(load_checkpoint(dir.str("v2.json")), ParseError);
  std::ofstream(dir.path() / "shape.json")
      << R"({"format_version": 1, "kernel": {"jitter": 0.01, "layers": [{"shape": [2, 2], "weight": [1, 2, 3], "bias": [0, 0]}], "base": []}})";
  EXPECT_THROW(load_checkpoint(dir.str("shape.json")), ParseError);
}

// ---------------------------------------------------------------------------
// commands

TEST(Commands, TrainWritesTraceCheckpointAndResolvedConfig) {
  const TempDir dir("train");
  const RunConfig cfg = resolve_config(small_config(dir.str("out")));
  cmd_train(cfg);
  const fs::path out = dir.path() / "out";
  EXPECT_EQ(line_count(out / "outer_trace.csv"), 1u + 2u * 3u);
  EXPECT_EQ(slurp(out / "outer_trace.csv").substr(0, 35), "iter,objective,query_ce,query_acc\n1");
  EXPECT_TRUE(fs::exists(out / "checkpoint.json"));
  EXPECT_EQ(Json::parse(slurp(out / "resolved_config.json")), cfg.resolved);
  const DeepKernel k = load_checkpoint((out / "checkpoint.json").string());
  EXPECT_EQ(k.extractor.layer_dims(), (std::vector<int>{4, 8, 4}));
}

TEST(Commands, ZeroEpochCheckpointEqualsInitialization) {
  const TempDir dir("train0");
  Json j = small_config(dir.str("out"));
  j["outer"]["epochs"] = 0;
  const RunConfig cfg = resolve_config(j);
  cmd_train(cfg);
  EXPECT_EQ(flatten_params(load_checkpoint(dir.str("out/checkpoint.json"))), flatten_params(initial_kernel(cfg, 4)));
  EXPECT_EQ(line_count(dir.path() / "out" / "outer_trace.csv"), 1u);
}

TEST(Commands, PeriodicCheckpoints) {
  const TempDir dir("train_ckpt");
  Json j = small_config(dir.str("out"));
  j["outer"]["checkpoint_every"] = 1;
  cmd_train(resolve_config(j));
  EXPECT_TRUE(fs::exists(dir.path() / "out" / "checkpoint_epoch1.json"));
  EXPECT_TRUE(fs::exists(dir.path() / "out" / "checkpoint_epoch2.json"));
}

TEST(Commands, EvalMetricsSchemaAndCrossArtifactEce) {
  const TempDir dir("eval");
  const RunConfig cfg = resolve_config(small_config(dir.str("out")));
  save_checkpoint(dir.str("init.json"), initial_kernel(cfg, 4), cfg.resolved);
  const EvalResult r = cmd_eval(cfg, dir.str("init.json"));
  const Json m = Json::parse(slurp(dir.path() / "out" / "metrics.json"));
  ASSERT_EQ(m.size(), 5u);
  for (const char* key : {"accuracy_mean", "accuracy_stderr", "nll", "ece", "mce"}) EXPECT_TRUE(m.contains(key)) << key;
  EXPECT_EQ(m.at("ece").get<double>(), r.ece);

  std::ifstream in(dir.path() / "out" / "calibration.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "bin,lower,upper,count,confidence,accuracy");
  double e = 0.0, total = 0.0;
  std::vector<std::array<double, 3>> rows;
  while (std::getline(in, line)) {
    std::vector<double> v;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) v.push_back(std::stod(cell));
    ASSERT_EQ(v.size(), 6u);
    rows.push_back({v[3], v[4], v[5]});
    total += v[3];
  }
  EXPECT_EQ(rows.size(), 15u);
  for (const auto& row : rows) e += row[0] / total * std::abs(row[2] - row[1]);
  EXPECT_NEAR(e, m.at("ece").get<double>(), 1e-12);
  EXPECT_EQ(total, 4.0 * 9.0);
}

TEST(Commands, EvalRejectsClassCountMismatch) {
  const TempDir dir("eval_bad");
  const RunConfig cfg = resolve_config(small_config(dir.str("out")));
  save_checkpoint(dir.str("k.json"), small_kernel(KernelKind::Cos, 5), cfg.resolved);
  EXPECT_THROW(cmd_eval(cfg, dir.str("k.json")), ConfigError);
}

TEST(Commands, CompareInnerRowCountAndSchema) {
  const TempDir dir("ci");
  const RunConfig cfg = resolve_config(small_config(dir.str("out")));
  const InnerComparison r = cmd_compare_inner(cfg);
  EXPECT_EQ(line_count(dir.path() / "out" / "inner_trace.csv"), 1u + 2u * 2u * 31u);
  EXPECT_EQ(slurp(dir.path() / "out" / "inner_trace.csv").substr(0, 24), "method,episode,step,elbo");
  EXPECT_EQ(r.final_gap.size(), 2u);
  ASSERT_EQ(r.rows.size(), 2u * 2u * 31u);
  EXPECT_EQ(r.rows[0].method, InnerMethod::MD);
  EXPECT_EQ(r.rows[31].method, InnerMethod::GD);
  EXPECT_NEAR(r.rows[0].elbo, r.rows[31].elbo, 1e-9);
}

TEST(Commands, CompareOuterRowCount) {
  const TempDir dir("co");
  const RunConfig cfg = resolve_config(small_config(dir.str("out")));
  const OuterComparison r = cmd_compare_outer(cfg);
  EXPECT_EQ(line_count(dir.path() / "out" / "outer_compare.csv"), 1u + 2u * 2u * 4u);
  EXPECT_EQ(r.final_ce_md.size(), 2u);
  EXPECT_EQ(r.rows.front().trace.iter, 0);
}

TEST(Commands, RerunsAreByteIdentical) {
  const TempDir dir("det");
  Json j = small_config(dir.str("out"));
  j["outer"]["epochs"] = 1;
  const RunConfig cfg = resolve_config(j);
  const char* files[] = {"outer_trace.csv", "checkpoint.json", "inner_trace.csv", "outer_compare.csv"};
  std::vector<std::string> first;
  for (int run = 0; run < 2; ++run) {
    cmd_train(cfg);
    cmd_compare_inner(cfg);
    cmd_compare_outer(cfg);
    for (std::size_t f = 0; f < 4; ++f) {
      const std::string bytes = slurp(dir.path() / "out" / files[f]);
      if (run == 0) first.push_back(bytes);
      else EXPECT_EQ(bytes, first[f]) << files[f];
    }
  }
}

TEST(Commands, VerifyReportAndNegativeControl) {
  const TempDir dir("verify");
  const RunConfig cfg = resolve_config(small_config(dir.str("out")));
  const auto checks = cmd_verify(cfg);
  const Json rep = Json::parse(slurp(dir.path() / "out" / "verify_report.json"));
  EXPECT_TRUE(rep.at("passed").get<bool>());
  ASSERT_EQ(rep.at("checks").size(), checks.size());
  for (const auto& c : rep.at("checks")) {
    EXPECT_TRUE(c.contains("name"));
    EXPECT_TRUE(c.contains("deviation"));
    EXPECT_TRUE(c.at("passed").get<bool>()) << c.at("name");
  }
  Json j = small_config(dir.str("neg"));
  j["verify"]["tolerance_scale"] = 1e-12;
  EXPECT_THROW(cmd_verify(resolve_config(j)), VerificationFailed);
  EXPECT_FALSE(Json::parse(slurp(dir.path() / "neg" / "verify_report.json")).at("passed").get<bool>());
}

TEST(Commands, GeneratedDatasetDrivesTraining) {
  const TempDir dir("data");
  const RunConfig gen_cfg = resolve_config(small_config(dir.str("gen")));
  cmd_gen_data(gen_cfg, 9, 6, dir.str("pool.csv"));
  const DatasetSource src = load_csv_dataset(dir.str("pool.csv"), {{0, 1, 2, 3}, {4, 5}, {6, 7, 8}});
  EXPECT_EQ(src.features().rows(), 54);
  Json j = small_config(dir.str("out"));
  j["dataset"] = Json::parse(R"({"split": {"train": [0, 1, 2, 3], "validation": [4, 5], "test": [6, 7, 8]}})");
  j["dataset"]["path"] = dir.str("pool.csv");
  const RunConfig cfg = resolve_config(j);
  const TrainResult r = cmd_train(cfg);
  EXPECT_EQ(r.trace.size(), 6u);
  save_checkpoint(dir.str("k.json"), r.kernel, cfg.resolved);
  EXPECT_NO_THROW(cmd_eval(cfg, dir.str("k.json")));
}
