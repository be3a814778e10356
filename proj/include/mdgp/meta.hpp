#ifndef MDGP_META_HPP
#define MDGP_META_HPP

#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "mdgp/inference.hpp"
#include "mdgp/kernels.hpp"
#include "mdgp/metrics.hpp"
#include "mdgp/model.hpp"
#include "mdgp/tasks.hpp"

namespace mdgp {

// ---------------------------------------------------------------------------
// Flat view of the trainable scalars of a DeepKernel. Layout: every layer's
// weight in row-major order followed by its bias, then per class the raws
// (length_scale, offset, output_scale).
// ---------------------------------------------------------------------------

inline constexpr Index kRawsPerClass = 3;

inline Index net_param_count(const FeatureExtractor& fe) {
  Index n = 0;
  for (const auto& l : fe.layers()) n += l.weight.size() + l.bias.size();
  return n;
}

inline Index param_count(const DeepKernel& k) {
  return net_param_count(k.extractor) + kRawsPerClass * k.num_classes();
}

/// true for network entries, false for base-kernel raws.
inline std::vector<bool> net_mask(const DeepKernel& k) {
  std::vector<bool> mask(static_cast<std::size_t>(param_count(k)), false);
  std::fill_n(mask.begin(), net_param_count(k.extractor), true);
  return mask;
}

namespace detail {

inline Vec pack(const std::vector<DenseLayer>& layers, const std::vector<BaseKernelGrad>& base, Index total) {
  Vec v(total);
  Index k = 0;
  for (const auto& l : layers) {
    for (Index i = 0; i < l.weight.rows(); ++i)
      for (Index j = 0; j < l.weight.cols(); ++j) v(k++) = l.weight(i, j);
    for (Index i = 0; i < l.bias.size(); ++i) v(k++) = l.bias(i);
  }
  for (const auto& b : base) {
    v(k++) = b.length_scale_raw;
    v(k++) = b.offset_raw;
    v(k++) = b.output_scale_raw;
  }
  if (k != total) throw DimensionMismatch("parameter layout mismatch");
  return v;
}

}  // namespace detail

inline Vec flatten_params(const DeepKernel& k) {
  std::vector<BaseKernelGrad> raws;
  for (const auto& b : k.base) raws.push_back({b.length_scale_raw, b.offset_raw, b.output_scale_raw});
  return detail::pack(k.extractor.layers(), raws, param_count(k));
}

/// Inverse of flatten_params, taking shapes and kernel kinds from `shape`.
inline DeepKernel unflatten_params(const DeepKernel& shape, const Vec& v) {
  if (v.size() != param_count(shape)) throw DimensionMismatch("unflatten_params: length");
  if (!v.allFinite()) throw NumericalError("non-finite hyperparameters");
  DeepKernel out = shape;
  Index k = 0;
  for (auto& l : out.extractor.layers()) {
    for (Index i = 0; i < l.weight.rows(); ++i)
      for (Index j = 0; j < l.weight.cols(); ++j) l.weight(i, j) = v(k++);
    for (Index i = 0; i < l.bias.size(); ++i) l.bias(i) = v(k++);
  }
  for (auto& b : out.base) {
    b.length_scale_raw = v(k++);
    b.offset_raw = v(k++);
    b.output_scale_raw = v(k++);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Outer gradient with q held fixed.
// ---------------------------------------------------------------------------

/// sum_c E_q[log N(f^c | 0, K^c)] with the given per-class jitters held fixed.
/// The only part of the ELBO that depends on the hyperparameters.
inline double eta_objective(const DeepKernel& k, const Mat& support_x, const std::vector<GaussianMoments>& post,
                            const std::vector<double>& jitters) {
  if (post.size() != k.base.size() || jitters.size() != k.base.size())
    throw DimensionMismatch("eta_objective: class count");
  const Mat z = extract(k.extractor, support_x).features;
  double value = 0.0;
  for (std::size_t c = 0; c < k.base.size(); ++c) {
    Mat prior = gram(k.base[c], z, jitters[c], {0.0, 0.0}).k;
    prior.diagonal().array() += jitters[c];
    const SpdFactor f = SpdFactor::factorize(prior, 0.0, {0.0, 0.0});
    const Mat m2 = post[c].cov + post[c].mean * post[c].mean.transpose();
    const double n = static_cast<double>(prior.rows());
    value -= 0.5 * (f.solve(m2).trace() + f.log_det() + n * kLog2Pi);
  }
  return value;
}

inline std::vector<double> fitted_jitters(const FittedEpisode& fit) {
  std::vector<double> j;
  for (const auto& g : fit.grams) j.push_back(g.jitter_used);
  return j;
}

/// Per class G_K = -1/2 K^-1 (K - Sigma - m m^T) K^-1, chained through the base
/// kernel and the extractor and summed over classes. Zero exactly when q is
/// the prior.
inline Vec outer_grad(const FittedEpisode& fit) {
  const DeepKernel& k = fit.kernel;
  const Mat& z = fit.support.features;
  Mat dz = Mat::Zero(z.rows(), z.cols());
  std::vector<BaseKernelGrad> d_base;
  for (std::size_t c = 0; c < k.base.size(); ++c) {
    const Mat prior = fit.grams[c].prior_cov();
    const GaussianMoments& q = fit.posteriors()[c];
    const SpdFactor f = SpdFactor::factorize(prior, 0.0, {0.0, 0.0});
    const Mat gap = prior - q.cov - q.mean * q.mean.transpose();
    const Mat g = symmetrize(-0.5 * f.solve(Mat(f.solve(gap).transpose())));
    const GramGrad gg = gram_backward(k.base[c], z, g);
    dz += gg.d_features;
    d_base.push_back(gg.d_base);
  }
  const ExtractorGrad eg = extractor_backward(k.extractor, fit.support.cache, dz);
  return detail::pack(eg, d_base, param_count(k));
}

// ---------------------------------------------------------------------------
// Adam, as ascent on the ELBO.
// ---------------------------------------------------------------------------

struct AdamState {
  Vec m;
  Vec v;
  long t = 0;
  double lr_net = 1e-3;
  double lr_kernel = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<bool> is_net;

  static AdamState init(const DeepKernel& k, double lr_net = 1e-3, double lr_kernel = 1e-4) {
    AdamState s;
    const Index n = param_count(k);
    s.m = Vec::Zero(n);
    s.v = Vec::Zero(n);
    s.lr_net = lr_net;
    s.lr_kernel = lr_kernel;
    s.is_net = net_mask(k);
    return s;
  }
};

inline void adam_step(Vec& params, AdamState& st, const Vec& grad) {
  if (grad.size() != params.size() || st.m.size() != params.size() || st.v.size() != params.size() ||
      static_cast<Index>(st.is_net.size()) != params.size())
    throw DimensionMismatch("adam_step: shapes differ");
  st.t += 1;
  st.m = st.beta1 * st.m + (1.0 - st.beta1) * grad;
  st.v = st.beta2 * st.v + (1.0 - st.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
  for (Index i = 0; i < params.size(); ++i) {
    const double lr = st.is_net[static_cast<std::size_t>(i)] ? st.lr_net : st.lr_kernel;
    params(i) += lr * (st.m(i) / c1) / (std::sqrt(st.v(i) / c2) + st.eps);
  }
}

// ---------------------------------------------------------------------------
// Bi-level training and evaluation.
// ---------------------------------------------------------------------------

/// Produces the episode for a given episode seed.
using TaskSource = std::function<Episode(std::uint64_t)>;

inline TaskSource synthetic_source(TaskGenConfig base) {
  base.validate();
  return [base](std::uint64_t seed) {
    TaskGenConfig cfg = base;
    cfg.seed = seed;
    return gen_episode(cfg);
  };
}

inline TaskSource dataset_source(std::shared_ptr<const DatasetSource> src, std::string split, int ways,
                                 int shots, int queries) {
  return [src = std::move(src), split = std::move(split), ways, shots, queries](std::uint64_t seed) {
    return sample_episode_from_dataset(*src, split, ways, shots, queries, seed);
  };
}

struct TrainConfig {
  int epochs = 1;
  int episodes_per_epoch = 100;
  InnerConfig inner{1.0, 3, {64, 0}};
  InnerMethod inner_method = InnerMethod::MD;
  double lr_net = 1e-3;
  double lr_kernel = 1e-4;
  int predict_samples = 512;
  std::uint64_t seed = 0;
  int parallel_episodes = 1;
  // When nonempty, the recorded objective and query metrics are averages over
  // these fixed episodes instead of the episode being trained on.
  std::vector<Episode> monitor;
  bool record_initial = false;  // adds an iteration-0 row; needs `monitor`
  std::function<void(int epoch, const DeepKernel&)> on_epoch;  // after each completed epoch

  void validate() const {
    if (epochs < 0 || episodes_per_epoch < 1) throw ConfigError("epochs >= 0 and episodes_per_epoch >= 1 required");
    inner.validate();
    if (!(lr_net >= 0.0) || !(lr_kernel >= 0.0)) throw ConfigError("learning rates must be nonnegative");
    if (predict_samples < 1) throw ConfigError("predict_samples must be positive");
    if (parallel_episodes < 1) throw ConfigError("parallel_episodes must be positive");
    if (record_initial && monitor.empty()) throw ConfigError("record_initial needs monitoring episodes");
  }
};

struct OuterTraceRow {
  long iter;
  double objective;
  double query_ce;
  double query_acc;
};

struct TrainResult {
  DeepKernel kernel;
  AdamState adam;
  std::vector<OuterTraceRow> trace;
};

struct EpisodeScore {
  double elbo;
  double ce;
  double acc;
};

/// Fits one episode and scores its query set.
inline EpisodeScore score_episode(const DeepKernel& k, const Episode& ep, const InnerConfig& inner,
                                  InnerMethod method, int predict_samples, std::uint64_t predict_seed) {
  const FittedEpisode fit = fit_episode(k, ep, inner, method);
  const SoftmaxMc lik{inner.mc.samples};
  EpisodeScore s{};
  s.elbo = elbo(fit.posteriors(), fit.grams, fit.labels, lik, inner_elbo_seed(inner.mc));
  if (ep.query_x.rows() > 0) {
    const PredictiveDist pd = predict_labels(fit, ep.query_x, {predict_samples, predict_seed});
    s.ce = nll(pd.probs, ep.query_y);
    s.acc = accuracy(pd.probs, ep.query_y);
  }
  return s;
}

namespace detail {

inline std::uint64_t episode_seed(std::uint64_t seed, long iter) {
  return derive_seed(seed, {0x3e11ULL, static_cast<std::uint64_t>(iter)});
}

inline InnerConfig seeded(InnerConfig cfg, std::uint64_t seed) {
  cfg.mc.seed = seed;
  return cfg;
}

inline OuterTraceRow monitor_row(const DeepKernel& k, const TrainConfig& cfg, long iter) {
  OuterTraceRow row{iter, 0.0, 0.0, 0.0};
  for (std::size_t e = 0; e < cfg.monitor.size(); ++e) {
    const std::uint64_t s = derive_seed(cfg.seed, {0x4d0eULL, e});
    const EpisodeScore sc = score_episode(k, cfg.monitor[e], seeded(cfg.inner, s), cfg.inner_method,
                                          cfg.predict_samples, derive_seed(s, {1}));
    row.objective += sc.elbo;
    row.query_ce += sc.ce;
    row.query_acc += sc.acc;
  }
  const double n = static_cast<double>(cfg.monitor.size());
  row.objective /= n;
  row.query_ce /= n;
  row.query_acc /= n;
  return row;
}

struct OuterStep {
  Vec grad;
  EpisodeScore score;
};

inline OuterStep outer_step_inputs(const DeepKernel& k, const Episode& ep, const TrainConfig& cfg, long iter) {
  const std::uint64_t s = episode_seed(cfg.seed, iter);
  const InnerConfig inner = seeded(cfg.inner, derive_seed(s, {1}));
  const FittedEpisode fit = fit_episode(k, ep, inner, cfg.inner_method);
  OuterStep out;
  out.grad = outer_grad(fit);
  const SoftmaxMc lik{inner.mc.samples};
  out.score.elbo = elbo(fit.posteriors(), fit.grams, fit.labels, lik, inner_elbo_seed(inner.mc));
  if (cfg.monitor.empty() && ep.query_x.rows() > 0) {
    const PredictiveDist pd = predict_labels(fit, ep.query_x, {cfg.predict_samples, derive_seed(s, {2})});
    out.score.ce = nll(pd.probs, ep.query_y);
    out.score.acc = accuracy(pd.probs, ep.query_y);
  }
  return out;
}

}  // namespace detail

/// Meta-training: per episode, inner fit then one Adam step on the
/// outer gradient. With parallel_episodes = P > 1, groups of P episodes are
/// fitted concurrently against the same hyperparameters and their updates
/// applied in episode order; results then depend on P.
inline TrainResult train(const DeepKernel& init, const TaskSource& source, const TrainConfig& cfg) {
  cfg.validate();
  init.validate();
  TrainResult r;
  r.kernel = init;
  r.adam = AdamState::init(init, cfg.lr_net, cfg.lr_kernel);
  Vec params = flatten_params(init);
  if (cfg.record_initial) r.trace.push_back(detail::monitor_row(r.kernel, cfg, 0));
  const long total = static_cast<long>(cfg.epochs) * cfg.episodes_per_epoch;
  const long group = cfg.parallel_episodes;
  for (long start = 1; start <= total; start += group) {
    const long stop = std::min(total, start + group - 1);
    std::vector<detail::OuterStep> steps(static_cast<std::size_t>(stop - start + 1));
    auto work = [&](long iter) {
      const Episode ep = source(derive_seed(detail::episode_seed(cfg.seed, iter), {0}));
      steps[static_cast<std::size_t>(iter - start)] = detail::outer_step_inputs(r.kernel, ep, cfg, iter);
    };
    if (group == 1) {
      work(start);
    } else {
      std::vector<std::thread> pool;
      std::vector<std::exception_ptr> errors(steps.size());
      for (long iter = start; iter <= stop; ++iter) {
        pool.emplace_back([&, iter] {
          try {
            work(iter);
          } catch (...) {
            errors[static_cast<std::size_t>(iter - start)] = std::current_exception();
          }
        });
      }
      for (auto& t : pool) t.join();
      for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    }
    for (long iter = start; iter <= stop; ++iter) {
      const detail::OuterStep& st = steps[static_cast<std::size_t>(iter - start)];
      if (!std::isfinite(st.score.elbo) || !st.grad.allFinite())
        throw NumericalError("non-finite outer objective at iteration " + std::to_string(iter));
      adam_step(params, r.adam, st.grad);
      r.kernel = unflatten_params(r.kernel, params);
      if (cfg.monitor.empty()) {
        r.trace.push_back({iter, st.score.elbo, st.score.ce, st.score.acc});
      } else {
        r.trace.push_back(detail::monitor_row(r.kernel, cfg, iter));
      }
      if (cfg.on_epoch && iter % cfg.episodes_per_epoch == 0)
        cfg.on_epoch(static_cast<int>(iter / cfg.episodes_per_epoch), r.kernel);
    }
  }
  return r;
}

struct EvalConfig {
  int episodes = 100;  // per batch
  int batches = 1;
  InnerConfig inner{0.5, 50, {64, 0}};
  int predict_samples = 512;
  int bins = kDefaultBins;
  std::uint64_t seed = 0;

  void validate() const {
    if (episodes < 1 || batches < 1) throw ConfigError("eval episodes and batches must be positive");
    inner.validate();
    if (predict_samples < 1) throw ConfigError("predict_samples must be positive");
    if (bins < 1) throw ConfigError("bins must be positive");
  }
};

struct EvalResult {
  double accuracy_mean = 0.0;
  double accuracy_stderr = 0.0;  // across batches when batches > 1, else across episodes
  double nll = 0.0;
  double ece = 0.0;
  double mce = 0.0;
  std::vector<double> episode_accuracy;
  std::vector<double> batch_accuracy;
  Mat probs;   // stacked query predictions
  Mat labels;  // stacked query labels
  CalibrationTable calibration;
};

namespace detail {

inline double stderr_of(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  const double n = static_cast<double>(xs.size());
  return std::sqrt(ss / (n - 1.0) / n);
}

}  // namespace detail

/// Held-out evaluation on batches of episodes; metrics pool all query rows.
inline EvalResult evaluate(const DeepKernel& k, const TaskSource& source, const EvalConfig& cfg) {
  cfg.validate();
  k.validate();
  EvalResult r;
  std::vector<Mat> probs, labels;
  Index rows = 0;
  for (int b = 0; b < cfg.batches; ++b) {
    double batch_acc = 0.0;
    for (int e = 0; e < cfg.episodes; ++e) {
      const std::uint64_t s = derive_seed(cfg.seed, {0xe7a1ULL, static_cast<std::uint64_t>(b),
                                                     static_cast<std::uint64_t>(e)});
      const Episode ep = source(s);
      if (ep.query_x.rows() == 0) throw EmptyInput("evaluation episode has no query rows");
      const FittedEpisode fit = fit_episode(k, ep, detail::seeded(cfg.inner, derive_seed(s, {1})));
      const PredictiveDist pd = predict_labels(fit, ep.query_x, {cfg.predict_samples, derive_seed(s, {2})});
      const double acc = accuracy(pd.probs, ep.query_y);
      r.episode_accuracy.push_back(acc);
      batch_acc += acc;
      rows += pd.probs.rows();
      probs.push_back(pd.probs);
      labels.push_back(ep.query_y);
    }
    r.batch_accuracy.push_back(batch_acc / cfg.episodes);
  }
  r.probs.resize(rows, k.num_classes());
  r.labels.resize(rows, k.num_classes());
  Index at = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    r.probs.middleRows(at, probs[i].rows()) = probs[i];
    r.labels.middleRows(at, labels[i].rows()) = labels[i];
    at += probs[i].rows();
  }
  double sum = 0.0;
  for (double a : r.episode_accuracy) sum += a;
  r.accuracy_mean = sum / static_cast<double>(r.episode_accuracy.size());
  r.accuracy_stderr = detail::stderr_of(cfg.batches > 1 ? r.batch_accuracy : r.episode_accuracy);
  r.nll = nll(r.probs, r.labels);
  r.calibration = reliability_table(r.probs, r.labels, cfg.bins);
  r.ece = r.calibration.ece();
  r.mce = r.calibration.mce();
  return r;
}

}  // namespace mdgp

#endif  // MDGP_META_HPP
