#ifndef MDGP_INFERENCE_HPP
#define MDGP_INFERENCE_HPP

#include <cmath>
#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include "mdgp/expfam.hpp"
#include "mdgp/kernels.hpp"
#include "mdgp/likelihood.hpp"
#include "mdgp/random.hpp"

namespace mdgp {

/// Site natural parameters, one column per support point, one row per class.
/// beta holds the diagonal second naturals and stays <= 0.
struct SiteParams {
  Mat alpha;  // C x N
  Mat beta;   // C x N
};

/// Mirror-descent state: sites plus the per-class moments obtained from
/// the conjugate combine with the prior.
struct VariationalState {
  SiteParams sites;
  std::vector<GaussianMoments> posteriors;
  std::vector<GramResult> priors;

  Index classes() const { return static_cast<Index>(priors.size()); }
  Index points() const { return priors.empty() ? 0 : priors.front().size(); }
};

enum class InnerMethod { MD, GD };

inline std::string_view to_string(InnerMethod m) { return m == InnerMethod::MD ? "MD" : "GD"; }

struct InnerConfig {
  double rho = 1.0;  // MD step size; GD learning rate for the baseline
  int steps = 3;
  McConfig mc{64, 0};

  void validate() const {
    if (!(rho > 0.0 && rho <= 1.0)) throw InvalidArgument("inner rho must lie in (0, 1]");
    if (steps < 0) throw InvalidArgument("inner steps must be nonnegative");
    if (mc.samples < 1) throw InvalidArgument("mc samples must be positive");
  }
};

struct TraceRecord {
  InnerMethod method;
  int step;
  double elbo;
};

namespace detail {

inline void check_priors(const std::vector<GramResult>& priors, const Mat& labels) {
  if (priors.empty()) throw InvalidArgument("no class priors");
  const Index n = priors.front().size();
  for (const auto& p : priors)
    if (p.size() != n) throw DimensionMismatch("class priors differ in size");
  if (labels.rows() != n || labels.cols() != static_cast<Index>(priors.size()))
    throw DimensionMismatch("labels must be N x C matching the priors");
}

inline std::uint64_t point_seed(std::uint64_t seed, Index n) {
  return derive_seed(seed, {static_cast<std::uint64_t>(n)});
}

}  // namespace detail

inline PointMarginal point_marginal(const std::vector<GaussianMoments>& post, Index n) {
  const Index c = static_cast<Index>(post.size());
  PointMarginal pm{Vec(c), Vec(c)};
  for (Index k = 0; k < c; ++k) {
    pm.mean(k) = post[k].mean(n);
    pm.var(k) = post[k].cov(n, n);
  }
  return pm;
}

/// q^c from prior N(0, K) and Gaussian sites (alpha, beta):
/// Sigma = (K^-1 - 2 diag(beta))^-1, m = Sigma alpha. Evaluated as
/// Sigma = K - K S B^-1 S K with S = diag(sqrt(-2 beta)), B = I + S K S,
/// which never forms K^-1.
inline GaussianMoments combine_sites(const Mat& prior_cov, const Vec& alpha, const Vec& beta) {
  const Index n = prior_cov.rows();
  if (alpha.size() != n || beta.size() != n) throw DimensionMismatch("combine_sites");
  if ((beta.array() > 0.0).any()) throw NotPositiveDefinite("site beta must be <= 0");
  const Vec s = (-2.0 * beta).cwiseSqrt();
  const Mat sk = s.asDiagonal() * prior_cov;
  Mat b = sk * s.asDiagonal();
  b.diagonal().array() += 1.0;
  const SpdFactor bf = SpdFactor::factorize(b);
  const Mat v = bf.half_solve(sk);
  GaussianMoments g;
  g.cov = symmetrize(prior_cov - v.transpose() * v);
  g.mean = g.cov * alpha;
  return g;
}

/// Natural parameters of q^c: site naturals plus prior naturals (0, -1/2 K^-1).
inline GaussianNatural posterior_naturals(const VariationalState& st, Index c) {
  const Mat kinv = SpdFactor::factorize(st.priors[c].prior_cov()).inverse();
  GaussianNatural th;
  th.theta1 = st.sites.alpha.row(c).transpose();
  th.theta2 = -0.5 * kinv;
  th.theta2.diagonal() += st.sites.beta.row(c).transpose();
  return th;
}

inline VariationalState md_init(std::vector<GramResult> priors) {
  if (priors.empty()) throw InvalidArgument("md_init: no class priors");
  const Index c = static_cast<Index>(priors.size());
  const Index n = priors.front().size();
  VariationalState st;
  st.sites = {Mat::Zero(c, n), Mat::Zero(c, n)};
  for (const auto& p : priors) {
    if (p.size() != n) throw DimensionMismatch("md_init: class priors differ in size");
    const Mat cov = p.prior_cov();
    SpdFactor::factorize(cov, 0.0, {0.0, 0.0});  // must already be SPD
    st.posteriors.push_back({Vec::Zero(n), cov});
  }
  st.priors = std::move(priors);
  return st;
}

/// Where md_step reads the current marginals from.
enum class MomentSource { Cached, FromNaturals };

/// One mirror-descent step: convex averaging of the sites toward the
/// mean-parameter gradient at the current q, then the conjugate combine.
template <PointLikelihood Lik>
VariationalState md_step(const VariationalState& st, const Mat& labels, double rho, const Lik& lik,
                         std::uint64_t seed, MomentSource source = MomentSource::Cached) {
  detail::check_priors(st.priors, labels);
  if (!(rho >= 0.0 && rho <= 1.0)) throw InvalidArgument("md_step: rho must lie in [0, 1]");
  std::vector<GaussianMoments> current = st.posteriors;
  if (source == MomentSource::FromNaturals) {
    for (Index c = 0; c < st.classes(); ++c) current[c] = natural_to_moments(posterior_naturals(st, c));
  }
  VariationalState next = st;
  for (Index n = 0; n < st.points(); ++n) {
    const PointMarginal pm = point_marginal(current, n);
    const MeanParamGrad d =
        mean_param_grads(lik.grad_mv(pm, labels.row(n).transpose(), detail::point_seed(seed, n)), pm.mean);
    next.sites.alpha.col(n) = (1.0 - rho) * st.sites.alpha.col(n) + rho * d.d_mu1;
    next.sites.beta.col(n) = ((1.0 - rho) * st.sites.beta.col(n) + rho * d.d_mu2).cwiseMin(0.0);
  }
  for (Index c = 0; c < st.classes(); ++c) {
    next.posteriors[c] = combine_sites(st.priors[c].prior_cov(), next.sites.alpha.row(c).transpose(),
                                       next.sites.beta.row(c).transpose());
  }
  return next;
}

/// sum_n E_q[log p(y_n | f_n)] - sum_c KL(q^c || N(0, K^c)).
template <PointLikelihood Lik>
double elbo(const std::vector<GaussianMoments>& post, const std::vector<GramResult>& priors,
            const Mat& labels, const Lik& lik, std::uint64_t seed) {
  detail::check_priors(priors, labels);
  if (post.size() != priors.size()) throw DimensionMismatch("elbo: posterior count");
  double value = 0.0;
  for (Index n = 0; n < labels.rows(); ++n) {
    value += lik.expected_loglik(point_marginal(post, n), labels.row(n).transpose(),
                                 detail::point_seed(seed, n));
  }
  for (std::size_t c = 0; c < priors.size(); ++c) {
    const GaussianMoments prior{Vec::Zero(priors[c].size()), priors[c].prior_cov()};
    value -= gaussian_kl(post[c], prior);
  }
  return value;
}

template <PointLikelihood Lik>
double elbo(const VariationalState& st, const Mat& labels, const Lik& lik, std::uint64_t seed) {
  return elbo(st.posteriors, st.priors, labels, lik, seed);
}

// ---------------------------------------------------------------------------
// Gradient-descent baseline over the same family, parameterized by the mean
// and a lower-triangular factor whose diagonal is stored as its logarithm.
// ---------------------------------------------------------------------------

struct GdState {
  std::vector<Vec> means;
  std::vector<Mat> factors;  // strictly lower part = L, diagonal = log L_ii
  std::vector<GramResult> priors;

  Index classes() const { return static_cast<Index>(priors.size()); }
};

struct GdGrad {
  std::vector<Vec> d_means;
  std::vector<Mat> d_factors;
};

inline Mat gd_lower_factor(const Mat& raw) {
  Mat l = raw.triangularView<Eigen::StrictlyLower>();
  l.diagonal() = raw.diagonal().array().exp();
  return l;
}

inline std::vector<GaussianMoments> gd_posteriors(const GdState& st) {
  std::vector<GaussianMoments> out;
  for (Index c = 0; c < st.classes(); ++c) {
    const Mat l = gd_lower_factor(st.factors[c]);
    out.push_back({st.means[c], l * l.transpose()});
  }
  return out;
}

/// Same starting distribution as md_init: m = 0, Sigma = K.
inline GdState gd_init(std::vector<GramResult> priors) {
  GdState st;
  for (const auto& p : priors) {
    const Mat l = SpdFactor::factorize(p.prior_cov(), 0.0, {0.0, 0.0}).lower();
    Mat raw = l;
    raw.diagonal() = l.diagonal().array().log();
    st.means.push_back(Vec::Zero(p.size()));
    st.factors.push_back(raw);
  }
  st.priors = std::move(priors);
  return st;
}

/// Euclidean ELBO gradient in (m, raw factor) coordinates.
template <PointLikelihood Lik>
GdGrad gd_gradient(const GdState& st, const Mat& labels, const Lik& lik, std::uint64_t seed) {
  detail::check_priors(st.priors, labels);
  const Index cls = st.classes();
  const Index n = labels.rows();
  const std::vector<GaussianMoments> post = gd_posteriors(st);
  Mat gm(cls, n), gv(cls, n);
  for (Index i = 0; i < n; ++i) {
    const MvGrad g = lik.grad_mv(point_marginal(post, i), labels.row(i).transpose(),
                                 detail::point_seed(seed, i));
    gm.col(i) = g.g_m;
    gv.col(i) = g.g_v;
  }
  GdGrad out;
  for (Index c = 0; c < cls; ++c) {
    const SpdFactor kf = SpdFactor::factorize(st.priors[c].prior_cov());
    const Mat l = gd_lower_factor(st.factors[c]);
    out.d_means.push_back(gm.row(c).transpose() - kf.solve(st.means[c]));
    // d/dL of tr(diag(gv) L L^T) - 1/2 tr(K^-1 L L^T) + sum log L_ii.
    Mat dl = 2.0 * gv.row(c).transpose().asDiagonal() * l - kf.solve(l);
    dl = dl.triangularView<Eigen::Lower>();
    dl.diagonal() += l.diagonal().cwiseInverse();
    dl.diagonal() = dl.diagonal().cwiseProduct(l.diagonal());
    out.d_factors.push_back(std::move(dl));
  }
  return out;
}

template <PointLikelihood Lik>
GdState gd_step(const GdState& st, const Mat& labels, double lr, const Lik& lik, std::uint64_t seed) {
  if (lr == 0.0) return st;
  const GdGrad g = gd_gradient(st, labels, lik, seed);
  GdState next = st;
  for (Index c = 0; c < st.classes(); ++c) {
    next.means[c] += lr * g.d_means[c];
    next.factors[c] += lr * g.d_factors[c];
    if (!next.means[c].allFinite() || !next.factors[c].allFinite() ||
        (next.factors[c].diagonal().array() < -700.0).any())
      throw NotPositiveDefinite("gradient-descent factor collapsed");
  }
  return next;
}

// ---------------------------------------------------------------------------

struct InnerResult {
  InnerMethod method = InnerMethod::MD;
  std::optional<VariationalState> md;
  std::optional<GdState> gd;
  std::vector<GaussianMoments> posteriors;
  std::vector<TraceRecord> trace;
};

/// Seed of the evaluation stream and of the gradient stream at step t >= 1.
inline std::uint64_t inner_elbo_seed(const McConfig& mc) { return derive_seed(mc.seed, {0}); }
inline std::uint64_t inner_step_seed(const McConfig& mc, int step) {
  return derive_seed(mc.seed, {static_cast<std::uint64_t>(step)});
}

/// Runs `steps` iterations from the prior, recording the ELBO at init and
/// after every step. Set `record_trace` false to skip ELBO evaluations.
template <PointLikelihood Lik>
InnerResult run_inner(InnerMethod method, const std::vector<GramResult>& priors, const Mat& labels,
                      const InnerConfig& cfg, const Lik& lik, bool record_trace = true) {
  if (cfg.steps < 0) throw InvalidArgument("inner steps must be nonnegative");
  detail::check_priors(priors, labels);
  InnerResult r;
  r.method = method;
  const std::uint64_t eval_seed = inner_elbo_seed(cfg.mc);
  auto record = [&](int step, const std::vector<GaussianMoments>& post) {
    if (!record_trace) return;
    const double value = elbo(post, priors, labels, lik, eval_seed);
    if (!std::isfinite(value)) throw NumericalError("non-finite ELBO in inner loop");
    r.trace.push_back({method, step, value});
  };
  if (method == InnerMethod::MD) {
    VariationalState st = md_init(priors);
    record(0, st.posteriors);
    for (int t = 1; t <= cfg.steps; ++t) {
      st = md_step(st, labels, cfg.rho, lik, inner_step_seed(cfg.mc, t));
      record(t, st.posteriors);
    }
    r.posteriors = st.posteriors;
    r.md = std::move(st);
  } else {
    GdState st = gd_init(priors);
    record(0, gd_posteriors(st));
    for (int t = 1; t <= cfg.steps; ++t) {
      st = gd_step(st, labels, cfg.rho, lik, inner_step_seed(cfg.mc, t));
      record(t, gd_posteriors(st));
    }
    r.posteriors = gd_posteriors(st);
    r.gd = std::move(st);
  }
  return r;
}

inline InnerResult run_inner(InnerMethod method, const std::vector<GramResult>& priors, const Mat& labels,
                      const InnerConfig& cfg) {
  return run_inner(method, priors, labels, cfg, SoftmaxMc{cfg.mc.samples});
}

}  // namespace mdgp

#endif  // MDGP_INFERENCE_HPP
