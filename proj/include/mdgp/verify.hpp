#ifndef MDGP_VERIFY_HPP
#define MDGP_VERIFY_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mdgp/expfam.hpp"
#include "mdgp/inference.hpp"
#include "mdgp/kernels.hpp"
#include "mdgp/likelihood.hpp"
#include "mdgp/meta.hpp"
#include "mdgp/model.hpp"
#include "mdgp/ngd_verify.hpp"

namespace mdgp {

struct CheckResult {
  std::string name;
  double deviation;
  double tolerance;
  bool passed;
};

namespace verify_detail {

inline double rel_err(const Vec& got, const Vec& want) {
  return max_abs(got - want) / std::max(max_abs(want), 1e-12);
}

inline double rel_err(const Mat& got, const Mat& want) {
  return max_abs(got - want) / std::max(max_abs(want), 1e-12);
}

/// Plain two-point central difference of a scalar function.
inline Vec fd_gradient(const std::function<double(const Vec&)>& f, const Vec& x, double h) {
  Vec g(x.size());
  for (Index i = 0; i < x.size(); ++i) {
    Vec up = x, dn = x;
    up(i) += h;
    dn(i) -= h;
    g(i) = (f(up) - f(dn)) / (2.0 * h);
  }
  return g;
}

inline Mat random_spd(std::uint64_t seed, Index n) {
  const Mat b = standard_normals(seed, n, n);
  Mat a = b * b.transpose();
  a.diagonal().array() += 0.5;
  return a;
}

inline GaussianMoments random_moments(std::uint64_t seed, Index n) {
  return {standard_normals(derive_seed(seed, {1}), n, 1).col(0), random_spd(derive_seed(seed, {2}), n)};
}

/// Mean coordinates [mu1; Mu2_ii; Mu2_ij (i<j)] with symmetric off-diagonals.
inline Vec pack_mean_plain(const FullMeanParams& mu) {
  Vec v = pack_mean(mu);
  const Index n = mu.dim();
  v.tail(v.size() - 2 * n) /= 2.0;
  return v;
}

inline FullMeanParams unpack_mean_plain(const Vec& v, Index n) {
  FullMeanParams mu{v.head(n), Mat::Zero(n, n)};
  Index k = n;
  for (Index i = 0; i < n; ++i) mu.mu2(i, i) = v(k++);
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) mu.mu2(i, j) = mu.mu2(j, i) = v(k++);
  return mu;
}

}  // namespace verify_detail

// Each check returns its measured deviation; the suite compares it with a
// tolerance multiplied by `tolerance_scale`.

inline double check_round_trips(int cases) {
  double worst = 0.0;
  for (int s = 0; s < cases; ++s) {
    const GaussianMoments g = verify_detail::random_moments(derive_seed(s, {11}), 4);
    const GaussianNatural th = moments_to_natural(g);
    const GaussianNatural th2 = moments_to_natural(natural_to_moments(th));
    worst = std::max({worst, verify_detail::rel_err(th2.theta1, th.theta1), verify_detail::rel_err(th2.theta2, th.theta2)});
    const GaussianMoments g2 = mean_params_to_moments(moments_to_mean_params(g));
    worst = std::max({worst, verify_detail::rel_err(g2.mean, g.mean), verify_detail::rel_err(g2.cov, g.cov)});
    const GaussianNatural th3 = mean_params_to_natural(natural_to_mean_params(th));
    worst = std::max({worst, verify_detail::rel_err(th3.theta1, th.theta1), verify_detail::rel_err(th3.theta2, th.theta2)});
  }
  return worst;
}

inline double check_fenchel(int cases) {
  double worst = 0.0;
  for (int s = 0; s < cases; ++s) {
    const GaussianMoments g = verify_detail::random_moments(derive_seed(s, {12}), 4);
    const GaussianNatural th = moments_to_natural(g);
    const FullMeanParams mu = moments_to_mean_params(g);
    const double p = pairing(th, mu);
    worst = std::max(worst, std::abs(log_partition(th) + neg_entropy(mu) - p) / std::max(1.0, std::abs(p)));
  }
  return worst;
}

inline double check_bregman_kl(int cases) {
  double worst = 0.0;
  for (int s = 0; s < cases; ++s) {
    const GaussianMoments a = verify_detail::random_moments(derive_seed(s, {13}), 4);
    const GaussianMoments b = verify_detail::random_moments(derive_seed(s, {14}), 4);
    const double kl = gaussian_kl(a, b);
    const double bh = bregman_h(moments_to_mean_params(a), moments_to_mean_params(b));
    worst = std::max(worst, std::abs(bh - kl) / std::max(1.0, std::abs(kl)));
  }
  return worst;
}

/// grad A against the mean map and grad H against the natural map.
inline double check_dual_gradients(int cases) {
  double worst = 0.0;
  const Index n = 3;
  for (int s = 0; s < cases; ++s) {
    const GaussianMoments g = verify_detail::random_moments(derive_seed(s, {15}), n);
    const GaussianNatural th = moments_to_natural(g);
    const Vec tv = pack_natural(th);
    const Vec ga = verify_detail::fd_gradient(
        [n](const Vec& t) { return log_partition(unpack_natural(t, n)); }, tv, 1e-6);
    worst = std::max(worst, verify_detail::rel_err(ga, pack_mean(natural_to_mean_params(th))));

    const FullMeanParams mu = moments_to_mean_params(g);
    const Vec mv = verify_detail::pack_mean_plain(mu);
    const Vec gh = verify_detail::fd_gradient(
        [n](const Vec& m) { return neg_entropy(verify_detail::unpack_mean_plain(m, n)); }, mv, 1e-6);
    Vec want = pack_natural(th);
    want.tail(want.size() - 2 * n) *= 2.0;
    worst = std::max(worst, verify_detail::rel_err(gh, want));
  }
  return worst;
}

/// g_m by CRN central differences in m; g_v by Price's identity,
/// g_v = 1/2 d^2/dm^2 E[log p], as a CRN second difference.
inline double check_mv_gradients(int cases) {
  double worst = 0.0;
  for (int s = 0; s < cases; ++s) {
    const Index c = 2 + s % 4;
    const Mat eps = mc_draws({256, derive_seed(s, {16})}, c);
    PointMarginal pm{2.0 * standard_normals(derive_seed(s, {17}), c, 1).col(0),
                     (standard_normals(derive_seed(s, {18}), c, 1).col(0).array().square() + 0.2).matrix()};
    Vec y = Vec::Zero(c);
    y(s % c) = 1.0;
    const MvGrad g = grad_mv_from_draws(pm, y, eps);
    const double f0 = expected_loglik_from_draws(pm, y, eps);
    Vec gm(c), gv(c);
    for (Index k = 0; k < c; ++k) {
      const double h1 = 1e-6, h2 = 1e-3;
      PointMarginal up = pm, dn = pm;
      up.mean(k) += h1;
      dn.mean(k) -= h1;
      gm(k) = (expected_loglik_from_draws(up, y, eps) - expected_loglik_from_draws(dn, y, eps)) / (2.0 * h1);
      up = pm;
      dn = pm;
      up.mean(k) += h2;
      dn.mean(k) -= h2;
      gv(k) = 0.5 * (expected_loglik_from_draws(up, y, eps) - 2.0 * f0 + expected_loglik_from_draws(dn, y, eps)) /
              (h2 * h2);
    }
    worst = std::max({worst, verify_detail::rel_err(g.g_m, gm), verify_detail::rel_err(g.g_v, gv)});
  }
  return worst;
}

/// Chain rule to (mu1, mu2) against central differences of the deterministic
/// binary quadrature expectation, with v = mu2 - mu1^2.
inline double check_mean_param_gradients(int cases) {
  const SoftmaxBinaryQuadrature q;
  double worst = 0.0;
  for (int s = 0; s < cases; ++s) {
    const Vec m = 2.0 * standard_normals(derive_seed(s, {19}), 2, 1).col(0);
    const Vec v = (standard_normals(derive_seed(s, {20}), 2, 1).col(0).array().square() + 0.3).matrix();
    Vec y = Vec::Zero(2);
    y(s % 2) = 1.0;
    const PointMeanParams mp = point_mean_params(m, v);
    Vec x(4);
    x << mp.mu1, mp.mu2;
    auto f = [&](const Vec& z) {
      const Vec mu1 = z.head(2), mu2 = z.tail(2);
      return q.expected_loglik({mu1, (mu2.array() - mu1.array().square()).matrix()}, y, 0);
    };
    const Vec fd = verify_detail::fd_gradient(f, x, 1e-6);
    const MeanParamGrad d = mean_param_grads(q.grad_mv({m, v}, y, 0), m);
    Vec want(4);
    want << d.d_mu1, d.d_mu2;
    worst = std::max(worst, verify_detail::rel_err(want, fd));
  }
  return worst;
}

/// Largest violation of g_m in [-1, 1] and g_v in [-1/8, 0].
inline double check_gradient_bounds(int evaluations) {
  Rng rng(0xb0b0ULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  double worst = 0.0;
  for (int e = 0; e < evaluations; ++e) {
    const Index c = 2 + static_cast<Index>(rng() % 5);
    PointMarginal pm{Vec(c), Vec(c)};
    for (Index k = 0; k < c; ++k) {
      pm.mean(k) = 5.0 * normal(rng);
      pm.var(k) = 10.0 * unif(rng);
    }
    Vec y = Vec::Zero(c);
    y(static_cast<Index>(rng() % static_cast<std::uint64_t>(c))) = 1.0;
    const MvGrad g = grad_mv(pm, y, {8, rng()});
    for (Index k = 0; k < c; ++k) {
      worst = std::max({worst, std::abs(g.g_m(k)) - 1.0, g.g_v(k), -0.125 - g.g_v(k)});
    }
  }
  return std::max(worst, 0.0);
}

inline double check_gram_backward() {
  double worst = 0.0;
  const Mat z = standard_normals(0x6a11ULL, 5, 3);
  Mat g = standard_normals(0x6a12ULL, 5, 5);
  g = symmetrize(g);
  for (KernelKind kind : {KernelKind::Cos, KernelKind::Rbf, KernelKind::Pol1, KernelKind::Pol2}) {
    const BaseKernelConfig base = BaseKernelConfig::make(kind, 1.3, 0.7, 1.2);
    const GramGrad gg = gram_backward(base, z, g);
    auto loss_z = [&](const Vec& flat) {
      const Mat zz = Eigen::Map<const Mat>(flat.data(), z.rows(), z.cols());
      return (g.array() * gram(base, zz).k.array()).sum();
    };
    const Vec zflat = Eigen::Map<const Vec>(z.data(), z.size());
    const Vec fd = verify_detail::fd_gradient(loss_z, zflat, 1e-6);
    worst = std::max(worst, verify_detail::rel_err(Vec(Eigen::Map<const Vec>(gg.d_features.data(), z.size())), fd));
    auto loss_raw = [&](const Vec& raws) {
      BaseKernelConfig b = base;
      b.length_scale_raw = raws(0);
      b.offset_raw = raws(1);
      b.output_scale_raw = raws(2);
      return (g.array() * gram(b, z).k.array()).sum();
    };
    Vec raws(3);
    raws << base.length_scale_raw, base.offset_raw, base.output_scale_raw;
    Vec want(3);
    want << gg.d_base.length_scale_raw, gg.d_base.offset_raw, gg.d_base.output_scale_raw;
    worst = std::max(worst, verify_detail::rel_err(want, verify_detail::fd_gradient(loss_raw, raws, 1e-6)));
  }
  return worst;
}

inline double check_extractor_backward() {
  DeepKernel shape;
  shape.extractor = FeatureExtractor::random({3, 4, 2}, 0xe1ULL);
  shape.base = {BaseKernelConfig::make(KernelKind::Rbf), BaseKernelConfig::make(KernelKind::Rbf)};
  for (auto& l : shape.extractor.layers()) l.bias = standard_normals(0xe2ULL + l.bias.size(), l.bias.size(), 1).col(0);
  const Mat x = standard_normals(0xe3ULL, 5, 3);
  const Mat r = standard_normals(0xe4ULL, 5, 2);
  const Extracted ex = extract(shape.extractor, x);
  const ExtractorGrad eg = extractor_backward(shape.extractor, ex.cache, r);
  std::vector<BaseKernelGrad> zero(2);
  const Index net = net_param_count(shape.extractor);
  const Vec analytic = detail::pack(eg, zero, param_count(shape)).head(net);
  const Vec p0 = flatten_params(shape);
  auto loss = [&](const Vec& head) {
    Vec p = p0;
    p.head(net) = head;
    return (extract(unflatten_params(shape, p).extractor, x).features.array() * r.array()).sum();
  };
  return verify_detail::rel_err(analytic, verify_detail::fd_gradient(loss, p0.head(net), 1e-6));
}

/// One rho = 1 step under the Gaussian likelihood against the closed form
/// Sigma = K - K (K + s2 I)^-1 K, m = K (K + s2 I)^-1 y.
inline double check_conjugate_step(int cases) {
  double worst = 0.0;
  const GaussianTestLikelihood lik{0.5};
  for (int s = 0; s < cases; ++s) {
    const NgdInstance inst = make_ngd_instance(derive_seed(s, {21}), 4);
    const Mat y = standard_normals(derive_seed(s, {22}), 4, 2);
    const VariationalState st = md_step(md_init(inst.priors), y, 1.0, lik, 0);
    for (Index c = 0; c < 2; ++c) {
      const Mat k = inst.priors[static_cast<std::size_t>(c)].prior_cov();
      Mat ks = k;
      ks.diagonal().array() += lik.noise_var;
      const Eigen::LLT<Mat> llt(ks);
      const Mat cov = k - k * llt.solve(k);
      const Vec mean = k * llt.solve(Vec(y.col(c)));
      worst = std::max({worst, verify_detail::rel_err(st.posteriors[static_cast<std::size_t>(c)].cov, cov),
                        verify_detail::rel_err(st.posteriors[static_cast<std::size_t>(c)].mean, mean)});
    }
  }
  return worst;
}

template <PointLikelihood Lik>
double check_ngd(int instances, const Lik& lik, bool gaussian_labels) {
  double worst = 0.0;
  for (int s = 0; s < instances; ++s) {
    NgdInstance inst = make_ngd_instance(static_cast<std::uint64_t>(s));
    if (gaussian_labels) inst.labels = standard_normals(derive_seed(s, {23}), inst.labels.rows(), 2);
    NgdConfig cfg;
    cfg.seed = static_cast<std::uint64_t>(s);
    worst = std::max(worst, ngd_verify(inst.priors, inst.labels, cfg, lik).max_rel_deviation);
  }
  return worst;
}

/// Under the Gaussian likelihood a unit natural-gradient step from any state
/// lands on the conjugate posterior naturals.
inline double check_ngd_unit_step(int instances) {
  const GaussianTestLikelihood lik{0.5};
  double worst = 0.0;
  for (int s = 0; s < instances; ++s) {
    const NgdInstance inst = make_ngd_instance(static_cast<std::uint64_t>(s));
    const Mat y = standard_normals(derive_seed(s, {24}), inst.labels.rows(), 2);
    NgdConfig cfg;
    cfg.seed = static_cast<std::uint64_t>(s);
    const NgdReport rep = ngd_verify(inst.priors, y, cfg, lik);
    const Index n = y.rows(), p = natural_coord_count(n);
    for (Index c = 0; c < 2; ++c) {
      GaussianNatural conj;
      conj.theta1 = y.col(c) / lik.noise_var;
      conj.theta2 = -0.5 * SpdFactor::factorize(inst.priors[static_cast<std::size_t>(c)].prior_cov()).inverse();
      conj.theta2.diagonal().array() -= 0.5 / lik.noise_var;
      const Vec landed = rep.theta.segment(c * p, p) + rep.ngd_direction.segment(c * p, p);
      worst = std::max(worst, verify_detail::rel_err(landed, pack_natural(conj)));
    }
  }
  return worst;
}

inline FittedEpisode outer_grad_fixture(KernelKind kind, int steps) {
  DeepKernel k;
  k.extractor = FeatureExtractor::random({2, 4, 3}, 0x0a7eULL);
  for (auto& l : k.extractor.layers()) l.bias = 0.1 * standard_normals(0x0a80ULL + l.bias.size(), l.bias.size(), 1).col(0);
  k.base = {BaseKernelConfig::make(kind, 1.2, 0.8, 1.1), BaseKernelConfig::make(kind, 0.9, 1.3, 0.7)};
  k.jitter = 1e-2;
  const Mat x = standard_normals(0x0a81ULL, 5, 2);
  Mat y = Mat::Zero(5, 2);
  for (Index i = 0; i < 5; ++i) y(i, i % 2) = 1.0;
  return fit_episode(k, x, y, InnerConfig{1.0, steps, {64, 3}}, SoftmaxMc{64});
}

inline double check_outer_grad_fd() {
  double worst = 0.0;
  for (KernelKind kind : {KernelKind::Cos, KernelKind::Rbf, KernelKind::Pol1, KernelKind::Pol2}) {
    const FittedEpisode fit = outer_grad_fixture(kind, 3);
    const Vec analytic = outer_grad(fit);
    const std::vector<double> jit = fitted_jitters(fit);
    auto f = [&](const Vec& p) { return eta_objective(unflatten_params(fit.kernel, p), fit.support_x, fit.posteriors(), jit); };
    worst = std::max(worst, verify_detail::rel_err(analytic, verify_detail::fd_gradient(f, flatten_params(fit.kernel), 1e-6)));
  }
  return worst;
}

inline double check_outer_grad_prior_zero() {
  double worst = 0.0;
  for (KernelKind kind : {KernelKind::Cos, KernelKind::Rbf, KernelKind::Pol1, KernelKind::Pol2})
    worst = std::max(worst, max_abs(outer_grad(outer_grad_fixture(kind, 0))));
  return worst;
}

/// Zero-site predictions: mean 0 and variance k** at arbitrary queries.
inline double check_prior_prediction() {
  double worst = 0.0;
  for (KernelKind kind : {KernelKind::Cos, KernelKind::Rbf, KernelKind::Pol1, KernelKind::Pol2}) {
    const FittedEpisode fit = outer_grad_fixture(kind, 0);
    const Mat xq = standard_normals(0x9e7ULL, 7, 2);
    const LatentPrediction lp = predict_latent(fit, xq);
    const Mat zq = extract(fit.kernel.extractor, xq).features;
    for (Index c = 0; c < 2; ++c) {
      const Vec kss = self_gram_diag(fit.kernel.base[static_cast<std::size_t>(c)], zq, fit.grams[static_cast<std::size_t>(c)]);
      worst = std::max({worst, verify_detail::rel_err(Vec(lp.var.col(c)), kss), max_abs(lp.mean.col(c))});
    }
  }
  return worst;
}

/// Runs every oracle check. Tolerances are the acceptance values times
/// `tolerance_scale`; a scale below the measured error makes checks fail.
inline std::vector<CheckResult> run_oracle_suite(double tolerance_scale = 1.0, int ngd_instances = 10) {
  std::vector<CheckResult> out;
  auto add = [&](std::string name, double dev, double tol) {
    const double t = tol * tolerance_scale;
    out.push_back({std::move(name), dev, t, std::isfinite(dev) && dev <= t});
  };
  add("expfam.round_trips", check_round_trips(100), 1e-8);
  add("expfam.fenchel_equality", check_fenchel(100), 1e-8);
  add("expfam.bregman_equals_kl", check_bregman_kl(100), 1e-8);
  add("expfam.dual_gradients_fd", check_dual_gradients(20), 1e-4);
  add("likelihood.mv_gradients_crn_fd", check_mv_gradients(20), 1e-4);
  add("likelihood.mean_param_gradients_fd", check_mean_param_gradients(20), 1e-4);
  add("likelihood.gradient_bounds", check_gradient_bounds(100000), 0.0);
  add("kernels.gram_backward_fd", check_gram_backward(), 1e-4);
  add("kernels.extractor_backward_fd", check_extractor_backward(), 1e-4);
  add("inference.conjugate_rho1", check_conjugate_step(10), 1e-8);
  add("inference.ngd_equivalence_softmax", check_ngd(ngd_instances, SoftmaxBinaryQuadrature{}, false), 1e-3);
  add("inference.ngd_equivalence_gaussian", check_ngd(ngd_instances, GaussianTestLikelihood{0.5}, true), 1e-3);
  add("inference.ngd_unit_step_conjugate", check_ngd_unit_step(ngd_instances), 1e-4);
  add("meta.outer_grad_fd", check_outer_grad_fd(), 1e-3);
  add("meta.outer_grad_prior_zero", check_outer_grad_prior_zero(), 0.0);
  add("model.prior_predictive", check_prior_prediction(), 1e-10);
  return out;
}

}  // namespace mdgp

#endif  // MDGP_VERIFY_HPP
