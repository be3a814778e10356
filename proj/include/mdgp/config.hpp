#ifndef MDGP_CONFIG_HPP
#define MDGP_CONFIG_HPP

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdgp/error.hpp"
#include "mdgp/inference.hpp"
#include "mdgp/kernels.hpp"
#include "mdgp/meta.hpp"
#include "mdgp/tasks.hpp"

namespace mdgp {

using Json = nlohmann::json;

/// Every recognised key with its default. A user document may only contain
/// keys that appear here; null entries are optional objects whose shape is
/// given by optional_schema().
inline Json default_config_json() {
  return Json::parse(R"({
    "seed": 0,
    "task": {"C": 5, "L": 5, "M": 16, "D": 8, "tau": 3.0, "sigma_w": 0.5,
             "nuisance_dims": 0, "nuisance_scale": 0.0, "domain_shift": null},
    "dataset": null,
    "kernel": {"kind": "cos", "net_dims": [32, 32, 16], "jitter": 0.01,
               "init_scales": {"net": 1.0, "length_scale": 1.0, "offset": 1.0, "output_scale": 1.0}},
    "inner": {"rho": 1.0, "steps": 3, "mc_samples": 64},
    "eval_inner": {"rho": 0.5, "steps": 50, "mc_samples": 64},
    "outer": {"lr_net": 0.001, "lr_kernel": 0.0001, "epochs": 30, "episodes_per_epoch": 100,
              "checkpoint_every": 0},
    "eval": {"episodes": 100, "batches": 1, "bins": 15, "predict_samples": 512, "domain_shift": null},
    "compare_inner": {"episodes": 20, "rate": 0.005, "steps": 30},
    "compare_outer": {"seeds": 10, "iterations": 30, "inner_steps": 2, "rate_1shot": 0.1,
                      "rate_5shot": 0.02, "monitor_episodes": 8},
    "verify": {"tolerance_scale": 1.0, "ngd_instances": 10},
    "output_dir": "out"
  })");
}

inline std::optional<Json> optional_schema(const std::string& path) {
  if (path == "task.domain_shift" || path == "eval.domain_shift")
    return Json::parse(R"({"angle_deg": 30.0, "scale": 1.5})");
  if (path == "dataset")
    return Json::parse(R"({"path": "", "split": {"train": [], "validation": [], "test": []},
                           "train_split": "train", "eval_split": "test"})");
  return std::nullopt;
}

namespace detail {

inline bool same_kind(const Json& a, const Json& b) {
  if (a.is_number() && b.is_number()) return !(a.is_number_integer() && b.is_number_float());
  return a.type() == b.type();
}

inline Json merge_checked(const Json& defaults, const Json& user, const std::string& path) {
  if (!user.is_object()) throw ConfigError("'" + (path.empty() ? std::string("<root>") : path) + "' must be an object");
  Json out = defaults;
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!defaults.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    const Json& def = defaults.at(it.key());
    const Json& val = it.value();
    if (def.is_null()) {
      if (val.is_null()) continue;
      const auto schema = optional_schema(key);
      if (!schema) throw ConfigError("'" + key + "' is not configurable");
      out[it.key()] = merge_checked(*schema, val, key);
    } else if (def.is_object()) {
      out[it.key()] = merge_checked(def, val, key);
    } else if (def.is_array()) {
      if (!val.is_array()) throw ConfigError("'" + key + "' must be an array");
      for (const auto& e : val)
        if (!e.is_number_integer()) throw ConfigError("'" + key + "' entries must be integers");
      out[it.key()] = val;
    } else {
      if (!same_kind(def, val)) throw ConfigError("'" + key + "' has the wrong type");
      out[it.key()] = def.is_number_float() ? Json(val.get<double>()) : val;
    }
  }
  return out;
}

}  // namespace detail

/// Applies `a.b.c=value` to a user document. The value is read as JSON when
/// it parses, otherwise as a string.
inline void apply_override(Json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(raw);
  } catch (const Json::parse_error&) {
    value = raw;
  }
  Json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("empty path component in '" + key + "'");
    if (!node->is_object()) *node = Json::object();
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

struct RunConfig {
  std::uint64_t seed = 0;
  TaskGenConfig task;
  std::optional<DomainShift> eval_shift;
  struct Dataset {
    std::string path;
    SplitSpec split;
    std::string train_split = "train";
    std::string eval_split = "test";
  };
  std::optional<Dataset> dataset;
  KernelKind kind = KernelKind::Cos;
  std::vector<int> net_dims{32, 32, 16};
  double jitter = 1e-2;
  double init_net = 1.0, init_length_scale = 1.0, init_offset = 1.0, init_output_scale = 1.0;
  InnerConfig inner{1.0, 3, {64, 0}};
  InnerConfig eval_inner{0.5, 50, {64, 0}};
  double lr_net = 1e-3, lr_kernel = 1e-4;
  int epochs = 30, episodes_per_epoch = 100, checkpoint_every = 0;
  int eval_episodes = 100, eval_batches = 1, bins = 15, predict_samples = 512;
  int ci_episodes = 20, ci_steps = 30;
  double ci_rate = 0.005;
  int co_seeds = 10, co_iterations = 30, co_inner_steps = 2, co_monitor = 8;
  double co_rate_1shot = 0.1, co_rate_5shot = 0.02;
  double tolerance_scale = 1.0;
  int ngd_instances = 10;
  std::string output_dir = "out";
  Json resolved;  // the full document after defaults and overrides
};

namespace detail {

inline DomainShift read_shift(const Json& j) { return {j.at("angle_deg").get<double>(), j.at("scale").get<double>()}; }

inline InnerConfig read_inner(const Json& j) {
  InnerConfig c;
  c.rho = j.at("rho").get<double>();
  c.steps = j.at("steps").get<int>();
  c.mc.samples = j.at("mc_samples").get<int>();
  return c;
}

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

}  // namespace detail

/// Builds a RunConfig from a user document, filling defaults and rejecting
/// unknown keys and out-of-range values.
inline RunConfig resolve_config(const Json& user) {
  const Json j = detail::merge_checked(default_config_json(), user, "");
  RunConfig c;
  c.resolved = j;
  const long long seed = j.at("seed").get<long long>();
  detail::require(seed >= 0, "seed must be nonnegative");
  c.seed = static_cast<std::uint64_t>(seed);

  const Json& t = j.at("task");
  c.task.ways = t.at("C").get<int>();
  c.task.shots = t.at("L").get<int>();
  c.task.queries = t.at("M").get<int>();
  c.task.dim = t.at("D").get<int>();
  c.task.tau = t.at("tau").get<double>();
  c.task.sigma_w = t.at("sigma_w").get<double>();
  c.task.nuisance_dims = t.at("nuisance_dims").get<int>();
  c.task.nuisance_scale = t.at("nuisance_scale").get<double>();
  if (!t.at("domain_shift").is_null()) c.task.domain_shift = detail::read_shift(t.at("domain_shift"));
  c.task.validate();
  detail::require(c.task.ways >= 2, "task.C must be at least 2");

  if (!j.at("dataset").is_null()) {
    const Json& d = j.at("dataset");
    RunConfig::Dataset ds;
    ds.path = d.at("path").get<std::string>();
    detail::require(!ds.path.empty(), "dataset.path must be set");
    ds.split.train = d.at("split").at("train").get<std::vector<int>>();
    ds.split.validation = d.at("split").at("validation").get<std::vector<int>>();
    ds.split.test = d.at("split").at("test").get<std::vector<int>>();
    ds.train_split = d.at("train_split").get<std::string>();
    ds.eval_split = d.at("eval_split").get<std::string>();
    c.dataset = ds;
  }

  const Json& k = j.at("kernel");
  try {
    c.kind = kernel_kind_from_string(k.at("kind").get<std::string>());
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  c.net_dims = k.at("net_dims").get<std::vector<int>>();
  detail::require(!c.net_dims.empty(), "kernel.net_dims must list at least the output width");
  for (int d : c.net_dims) detail::require(d > 0, "kernel.net_dims entries must be positive");
  c.jitter = k.at("jitter").get<double>();
  detail::require(c.jitter >= 0.0, "kernel.jitter must be nonnegative");
  const Json& is = k.at("init_scales");
  c.init_net = is.at("net").get<double>();
  c.init_length_scale = is.at("length_scale").get<double>();
  c.init_offset = is.at("offset").get<double>();
  c.init_output_scale = is.at("output_scale").get<double>();
  detail::require(c.init_net >= 0.0 && c.init_length_scale > 0.0 && c.init_offset > 0.0 && c.init_output_scale > 0.0,
                  "kernel.init_scales must be positive");

  try {
    c.inner = detail::read_inner(j.at("inner"));
    c.eval_inner = detail::read_inner(j.at("eval_inner"));
    c.inner.validate();
    c.eval_inner.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }

  const Json& o = j.at("outer");
  c.lr_net = o.at("lr_net").get<double>();
  c.lr_kernel = o.at("lr_kernel").get<double>();
  c.epochs = o.at("epochs").get<int>();
  c.episodes_per_epoch = o.at("episodes_per_epoch").get<int>();
  c.checkpoint_every = o.at("checkpoint_every").get<int>();
  detail::require(c.lr_net >= 0.0 && c.lr_kernel >= 0.0, "outer learning rates must be nonnegative");
  detail::require(c.epochs >= 0 && c.episodes_per_epoch >= 1 && c.checkpoint_every >= 0, "outer counts out of range");

  const Json& e = j.at("eval");
  c.eval_episodes = e.at("episodes").get<int>();
  c.eval_batches = e.at("batches").get<int>();
  c.bins = e.at("bins").get<int>();
  c.predict_samples = e.at("predict_samples").get<int>();
  if (!e.at("domain_shift").is_null()) c.eval_shift = detail::read_shift(e.at("domain_shift"));
  detail::require(c.eval_episodes >= 1 && c.eval_batches >= 1 && c.bins >= 1 && c.predict_samples >= 1,
                  "eval counts must be positive");

  const Json& ci = j.at("compare_inner");
  c.ci_episodes = ci.at("episodes").get<int>();
  c.ci_rate = ci.at("rate").get<double>();
  c.ci_steps = ci.at("steps").get<int>();
  detail::require(c.ci_episodes >= 1 && c.ci_steps >= 0, "compare_inner counts out of range");
  detail::require(c.ci_rate > 0.0 && c.ci_rate <= 1.0, "compare_inner.rate must lie in (0, 1]");

  const Json& co = j.at("compare_outer");
  c.co_seeds = co.at("seeds").get<int>();
  c.co_iterations = co.at("iterations").get<int>();
  c.co_inner_steps = co.at("inner_steps").get<int>();
  c.co_rate_1shot = co.at("rate_1shot").get<double>();
  c.co_rate_5shot = co.at("rate_5shot").get<double>();
  c.co_monitor = co.at("monitor_episodes").get<int>();
  detail::require(c.co_seeds >= 1 && c.co_iterations >= 1 && c.co_inner_steps >= 0 && c.co_monitor >= 1,
                  "compare_outer counts out of range");
  detail::require(c.co_rate_1shot > 0.0 && c.co_rate_1shot <= 1.0 && c.co_rate_5shot > 0.0 && c.co_rate_5shot <= 1.0,
                  "compare_outer rates must lie in (0, 1]");

  c.tolerance_scale = j.at("verify").at("tolerance_scale").get<double>();
  c.ngd_instances = j.at("verify").at("ngd_instances").get<int>();
  detail::require(c.tolerance_scale > 0.0 && c.ngd_instances >= 1, "verify settings out of range");
  c.output_dir = j.at("output_dir").get<std::string>();
  return c;
}

inline Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError("invalid JSON in '" + path + "': " + e.what());
  }
}

/// Loads an optional config file and applies overrides in order.
inline RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  Json doc = path.empty() ? Json::object() : read_json_file(path);
  for (const auto& o : overrides) apply_override(doc, o);
  return resolve_config(doc);
}

/// Fresh kernel for the configured task: extractor [D, net_dims...] and one
/// base kernel per class.
inline DeepKernel initial_kernel(const RunConfig& c, Index input_dim) {
  std::vector<int> dims{static_cast<int>(input_dim)};
  dims.insert(dims.end(), c.net_dims.begin(), c.net_dims.end());
  DeepKernel k;
  k.extractor = FeatureExtractor::random(dims, derive_seed(c.seed, {0x1a17ULL}), c.init_net);
  for (int i = 0; i < c.task.ways; ++i)
    k.base.push_back(BaseKernelConfig::make(c.kind, c.init_length_scale, c.init_offset, c.init_output_scale));
  k.jitter = c.jitter;
  return k;
}

}  // namespace mdgp

#endif  // MDGP_CONFIG_HPP
