#ifndef MDGP_APP_HPP
#define MDGP_APP_HPP

// Subcommand implementations behind the command-line tool. Each command
// writes resolved_config.json plus its own artifacts into cfg.output_dir.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdgp/checkpoint.hpp"
#include "mdgp/config.hpp"
#include "mdgp/meta.hpp"
#include "mdgp/metrics.hpp"
#include "mdgp/verify.hpp"

namespace mdgp {

/// Raised when the oracle suite reports a failed check.
class VerificationFailed : public Error {
 public:
  using Error::Error;
};

namespace app_detail {

inline std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline std::filesystem::path prepare_output(const RunConfig& cfg) {
  const std::filesystem::path dir(cfg.output_dir);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output_dir '" + cfg.output_dir + "': " + ec.message());
  std::ofstream out(dir / "resolved_config.json");
  if (!out) throw ConfigError("cannot write into output_dir '" + cfg.output_dir + "'");
  out << cfg.resolved.dump(2) << '\n';
  return dir;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p);
  if (!out) throw ConfigError("cannot write '" + p.string() + "'");
  return out;
}

inline std::shared_ptr<const DatasetSource> load_dataset(const RunConfig& cfg) {
  return std::make_shared<const DatasetSource>(load_csv_dataset(cfg.dataset->path, cfg.dataset->split));
}

inline Index input_dim(const RunConfig& cfg, const std::shared_ptr<const DatasetSource>& ds) {
  return ds ? ds->features().cols() : cfg.task.dim;
}

struct Sources {
  std::shared_ptr<const DatasetSource> dataset;
  TaskSource train;
  TaskSource eval;
};

inline Sources make_sources(const RunConfig& cfg) {
  Sources s;
  if (cfg.dataset) {
    s.dataset = load_dataset(cfg);
    s.train = dataset_source(s.dataset, cfg.dataset->train_split, cfg.task.ways, cfg.task.shots, cfg.task.queries);
    s.eval = dataset_source(s.dataset, cfg.dataset->eval_split, cfg.task.ways, cfg.task.shots, cfg.task.queries);
  } else {
    s.train = synthetic_source(cfg.task);
    TaskGenConfig shifted = cfg.task;
    if (cfg.eval_shift) shifted.domain_shift = cfg.eval_shift;
    s.eval = synthetic_source(shifted);
  }
  return s;
}

inline TrainConfig train_config(const RunConfig& cfg, int parallel) {
  TrainConfig tc;
  tc.epochs = cfg.epochs;
  tc.episodes_per_epoch = cfg.episodes_per_epoch;
  tc.inner = cfg.inner;
  tc.lr_net = cfg.lr_net;
  tc.lr_kernel = cfg.lr_kernel;
  tc.predict_samples = cfg.predict_samples;
  tc.seed = cfg.seed;
  tc.parallel_episodes = parallel;
  return tc;
}

inline void write_outer_trace(std::ostream& out, const std::vector<OuterTraceRow>& rows) {
  out << "iter,objective,query_ce,query_acc\n";
  for (const auto& r : rows)
    out << r.iter << ',' << fmt(r.objective) << ',' << fmt(r.query_ce) << ',' << fmt(r.query_acc) << '\n';
}

}  // namespace app_detail

inline TrainResult cmd_train(const RunConfig& cfg, int parallel_episodes = 1) {
  const auto dir = app_detail::prepare_output(cfg);
  const app_detail::Sources src = app_detail::make_sources(cfg);
  const DeepKernel init = initial_kernel(cfg, app_detail::input_dim(cfg, src.dataset));
  TrainConfig tc = app_detail::train_config(cfg, parallel_episodes);
  if (cfg.checkpoint_every > 0) {
    tc.on_epoch = [&](int epoch, const DeepKernel& k) {
      if (epoch % cfg.checkpoint_every == 0)
        save_checkpoint((dir / ("checkpoint_epoch" + std::to_string(epoch) + ".json")).string(), k, cfg.resolved);
    };
  }
  TrainResult r = train(init, src.train, tc);
  auto out = app_detail::open_out(dir / "outer_trace.csv");
  app_detail::write_outer_trace(out, r.trace);
  save_checkpoint((dir / "checkpoint.json").string(), r.kernel, cfg.resolved);
  return r;
}

inline EvalResult cmd_eval(const RunConfig& cfg, const std::string& checkpoint_path) {
  const auto dir = app_detail::prepare_output(cfg);
  const DeepKernel k = load_checkpoint(checkpoint_path);
  if (k.num_classes() != cfg.task.ways)
    throw ConfigError("checkpoint has " + std::to_string(k.num_classes()) + " classes, task.C is " +
                      std::to_string(cfg.task.ways));
  const app_detail::Sources src = app_detail::make_sources(cfg);
  EvalConfig ec;
  ec.episodes = cfg.eval_episodes;
  ec.batches = cfg.eval_batches;
  ec.inner = cfg.eval_inner;
  ec.predict_samples = cfg.predict_samples;
  ec.bins = cfg.bins;
  ec.seed = cfg.seed;
  const EvalResult r = evaluate(k, src.eval, ec);
  const nlohmann::ordered_json metrics{{"accuracy_mean", r.accuracy_mean},
                                       {"accuracy_stderr", r.accuracy_stderr},
                                       {"nll", r.nll},
                                       {"ece", r.ece},
                                       {"mce", r.mce}};
  app_detail::open_out(dir / "metrics.json") << metrics.dump(2) << '\n';
  auto cal = app_detail::open_out(dir / "calibration.csv");
  cal << "bin,lower,upper,count,confidence,accuracy\n";
  for (std::size_t b = 0; b < r.calibration.bins.size(); ++b) {
    const auto& bin = r.calibration.bins[b];
    cal << b + 1 << ',' << app_detail::fmt(bin.lower) << ',' << app_detail::fmt(bin.upper) << ',' << bin.count << ','
        << app_detail::fmt(bin.confidence) << ',' << app_detail::fmt(bin.accuracy) << '\n';
  }
  return r;
}

struct InnerComparison {
  std::vector<TraceRecord> rows;  // per episode: MD trace then GD trace
  std::vector<double> final_gap;  // ELBO_MD - ELBO_GD at the last step, per episode
};

/// MD and GD inner loops from the same initialization and matched rate, with
/// the hyperparameters frozen at the initial kernel.
inline InnerComparison cmd_compare_inner(const RunConfig& cfg) {
  const auto dir = app_detail::prepare_output(cfg);
  const app_detail::Sources src = app_detail::make_sources(cfg);
  const DeepKernel k = initial_kernel(cfg, app_detail::input_dim(cfg, src.dataset));
  InnerComparison cmp;
  auto out = app_detail::open_out(dir / "inner_trace.csv");
  out << "method,episode,step,elbo\n";
  for (int e = 0; e < cfg.ci_episodes; ++e) {
    const std::uint64_t s = derive_seed(cfg.seed, {0xc1ULL, static_cast<std::uint64_t>(e)});
    const Episode ep = src.train(s);
    const std::vector<GramResult> grams = k.class_grams(extract(k.extractor, ep.support_x).features);
    const InnerConfig ic{cfg.ci_rate, cfg.ci_steps, {cfg.inner.mc.samples, derive_seed(s, {1})}};
    const SoftmaxMc lik{ic.mc.samples};
    const InnerResult md = run_inner(InnerMethod::MD, grams, ep.support_y, ic, lik);
    const InnerResult gd = run_inner(InnerMethod::GD, grams, ep.support_y, ic, lik);
    for (const InnerResult* r : {&md, &gd}) {
      for (const auto& t : r->trace) {
        out << to_string(t.method) << ',' << e << ',' << t.step << ',' << app_detail::fmt(t.elbo) << '\n';
        cmp.rows.push_back(t);
      }
    }
    cmp.final_gap.push_back(md.trace.back().elbo - gd.trace.back().elbo);
  }
  return cmp;
}

struct OuterComparison {
  struct Row {
    InnerMethod method;
    int seed;
    OuterTraceRow trace;
  };
  std::vector<Row> rows;
  std::vector<double> final_ce_md;
  std::vector<double> final_ce_gd;
};

/// Full bi-level training with MD and GD inner loops under matched settings.
/// The recorded cross-entropy is the mean query NLL over fixed monitoring
/// episodes, refitted after every outer step.
inline OuterComparison cmd_compare_outer(const RunConfig& cfg) {
  const auto dir = app_detail::prepare_output(cfg);
  const app_detail::Sources src = app_detail::make_sources(cfg);
  const double rate = cfg.task.shots == 1 ? cfg.co_rate_1shot : cfg.co_rate_5shot;
  OuterComparison cmp;
  auto out = app_detail::open_out(dir / "outer_compare.csv");
  out << "method,seed,iter,objective,query_ce,query_acc\n";
  for (int s = 0; s < cfg.co_seeds; ++s) {
    RunConfig seeded = cfg;
    seeded.seed = derive_seed(cfg.seed, {0xc0ULL, static_cast<std::uint64_t>(s)});
    const DeepKernel init = initial_kernel(seeded, app_detail::input_dim(cfg, src.dataset));
    TrainConfig tc = app_detail::train_config(seeded, 1);
    tc.epochs = 1;
    tc.episodes_per_epoch = cfg.co_iterations;
    tc.inner = InnerConfig{rate, cfg.co_inner_steps, {cfg.inner.mc.samples, 0}};
    for (int e = 0; e < cfg.co_monitor; ++e)
      tc.monitor.push_back(src.train(derive_seed(seeded.seed, {0x30ULL, static_cast<std::uint64_t>(e)})));
    tc.record_initial = true;
    for (InnerMethod m : {InnerMethod::MD, InnerMethod::GD}) {
      tc.inner_method = m;
      const TrainResult r = train(init, src.train, tc);
      for (const auto& row : r.trace) {
        out << to_string(m) << ',' << s << ',' << row.iter << ',' << app_detail::fmt(row.objective) << ','
            << app_detail::fmt(row.query_ce) << ',' << app_detail::fmt(row.query_acc) << '\n';
        cmp.rows.push_back({m, s, row});
      }
      (m == InnerMethod::MD ? cmp.final_ce_md : cmp.final_ce_gd).push_back(r.trace.back().query_ce);
    }
  }
  return cmp;
}

/// Runs the oracle suite, writes verify_report.json and throws
/// VerificationFailed if any check exceeds its tolerance.
inline std::vector<CheckResult> cmd_verify(const RunConfig& cfg) {
  const auto dir = app_detail::prepare_output(cfg);
  const std::vector<CheckResult> checks = run_oracle_suite(cfg.tolerance_scale, cfg.ngd_instances);
  nlohmann::ordered_json list = nlohmann::ordered_json::array();
  bool ok = true;
  for (const auto& c : checks) {
    list.push_back({{"name", c.name}, {"deviation", c.deviation}, {"tolerance", c.tolerance}, {"passed", c.passed}});
    ok = ok && c.passed;
  }
  const nlohmann::ordered_json report{{"passed", ok}, {"tolerance_scale", cfg.tolerance_scale}, {"checks", list}};
  app_detail::open_out(dir / "verify_report.json") << report.dump(2) << '\n';
  if (!ok) throw VerificationFailed("one or more verification checks failed");
  return checks;
}

/// Writes a labelled CSV pool of `classes` synthetic classes with `rows` rows
/// each, drawn with the task generator settings of `cfg`.
inline void cmd_gen_data(const RunConfig& cfg, int classes, int rows, const std::string& path) {
  app_detail::prepare_output(cfg);
  if (classes < 1 || rows < 1) throw ConfigError("gen-data needs positive class and row counts");
  TaskGenConfig g = cfg.task;
  g.ways = classes;
  g.shots = rows;
  g.queries = 0;
  g.seed = cfg.seed;
  const auto [x, labels] = episode_pool(gen_episode(g));
  write_csv_dataset(path, x, labels);
}

}  // namespace mdgp

#endif  // MDGP_APP_HPP
