#ifndef MDGP_NGD_VERIFY_HPP
#define MDGP_NGD_VERIFY_HPP

// Numerical check that the mirror-descent update equals natural-gradient
// ascent in natural coordinates: (theta_{t+1} - theta_t) / rho must match
// [grad^2 A(theta_t)]^-1 grad_theta L(theta_t), with both the ELBO gradient
// and the Fisher matrix obtained by central finite differences.
//
// Natural coordinates per class are [theta1; Theta2_ii; Theta2_ij (i<j)] with
// Theta2 symmetric, so the dual mean coordinates are [mu1; Mu2_ii; 2 Mu2_ij].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <type_traits>
#include <vector>

#include "mdgp/inference.hpp"

namespace mdgp {

struct NgdConfig {
  double rho = 0.5;
  int warmup_steps = 2;      // MD steps taken before the check, so sites are nonzero
  double fd_step = 1e-4;     // relative central-difference step
  std::uint64_t seed = 0;
};

struct NgdReport {
  double max_rel_deviation = 0.0;
  Vec md_direction;
  Vec ngd_direction;
  Vec theta;  // natural coordinates at which both directions were taken
};

inline Index natural_coord_count(Index n) { return n + n * (n + 1) / 2; }

inline Vec pack_natural(const GaussianNatural& th) {
  const Index n = th.dim();
  Vec v(natural_coord_count(n));
  v.head(n) = th.theta1;
  const Mat t2 = symmetrize(th.theta2);
  Index k = n;
  for (Index i = 0; i < n; ++i) v(k++) = t2(i, i);
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) v(k++) = t2(i, j);
  return v;
}

inline GaussianNatural unpack_natural(const Vec& v, Index n) {
  if (v.size() != natural_coord_count(n)) throw DimensionMismatch("unpack_natural");
  GaussianNatural th{v.head(n), Mat::Zero(n, n)};
  Index k = n;
  for (Index i = 0; i < n; ++i) th.theta2(i, i) = v(k++);
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) th.theta2(i, j) = th.theta2(j, i) = v(k++);
  return th;
}

/// Mean coordinates dual to pack_natural.
inline Vec pack_mean(const FullMeanParams& mu) {
  const Index n = mu.dim();
  Vec v(natural_coord_count(n));
  v.head(n) = mu.mu1;
  const Mat m2 = symmetrize(mu.mu2);
  Index k = n;
  for (Index i = 0; i < n; ++i) v(k++) = m2(i, i);
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) v(k++) = 2.0 * m2(i, j);
  return v;
}

/// Fourth-order central difference of a vector-valued map along coordinate k.
template <typename F, typename R = std::invoke_result_t<const F&, const Vec&>>
R central_difference(const F& f, const Vec& x, Index k, double rel_step) {
  const double h = rel_step * std::max(1.0, std::abs(x(k)));
  auto at = [&](double offset) -> R {
    Vec y = x;
    y(k) += offset;
    return f(y);
  };
  return (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
}

/// Fisher matrix grad^2 A at theta, by central differences of theta -> mu(theta).
inline Mat fd_fisher(const Vec& theta, Index n, double rel_step) {
  const Index p = theta.size();
  auto mean_map = [n](const Vec& t) -> Vec {
    return pack_mean(natural_to_mean_params(unpack_natural(t, n)));
  };
  Mat fisher(p, p);
  for (Index l = 0; l < p; ++l) fisher.col(l) = central_difference(mean_map, theta, l, rel_step);
  return symmetrize(fisher);
}

/// Relative componentwise deviation, with components below 1e-3 of the
/// largest reference magnitude compared on that absolute scale.
inline double max_relative_deviation(const Vec& reference, const Vec& other) {
  const double floor = 1e-3 * std::max(max_abs(reference), 1e-300);
  double worst = 0.0;
  for (Index k = 0; k < reference.size(); ++k) {
    const double denom = std::max(std::abs(reference(k)), floor);
    worst = std::max(worst, std::abs(reference(k) - other(k)) / denom);
  }
  return worst;
}

template <PointLikelihood Lik>
NgdReport ngd_verify(const std::vector<GramResult>& priors, const Mat& labels, const NgdConfig& cfg,
                     const Lik& lik) {
  detail::check_priors(priors, labels);
  if (!(cfg.rho > 0.0 && cfg.rho <= 1.0)) throw InvalidArgument("ngd_verify: rho must lie in (0, 1]");
  const Index cls = static_cast<Index>(priors.size());
  const Index n = priors.front().size();
  const Index p = natural_coord_count(n);

  VariationalState st = md_init(priors);
  for (int t = 1; t <= cfg.warmup_steps; ++t)
    st = md_step(st, labels, cfg.rho, lik, derive_seed(cfg.seed, {static_cast<std::uint64_t>(t)}));
  const std::uint64_t seed = derive_seed(cfg.seed, {0xfeedULL});

  // (a) mirror-descent direction. The prior naturals cancel in the difference.
  const VariationalState next = md_step(st, labels, cfg.rho, lik, seed);
  NgdReport rep;
  rep.md_direction.resize(cls * p);
  rep.theta.resize(cls * p);
  for (Index c = 0; c < cls; ++c) {
    GaussianNatural delta{(next.sites.alpha.row(c) - st.sites.alpha.row(c)).transpose() / cfg.rho,
                          Mat::Zero(n, n)};
    delta.theta2.diagonal() = (next.sites.beta.row(c) - st.sites.beta.row(c)).transpose() / cfg.rho;
    rep.md_direction.segment(c * p, p) = pack_natural(delta);
    rep.theta.segment(c * p, p) = pack_natural(posterior_naturals(st, c));
  }

  // (b) natural-gradient direction from finite differences.
  auto elbo_at = [&](const Vec& theta) -> double {
    std::vector<GaussianMoments> post;
    for (Index c = 0; c < cls; ++c)
      post.push_back(natural_to_moments(unpack_natural(theta.segment(c * p, p), n)));
    return elbo(post, priors, labels, lik, seed);
  };
  Vec grad(cls * p);
  for (Index k = 0; k < cls * p; ++k) grad(k) = central_difference(elbo_at, rep.theta, k, cfg.fd_step);
  rep.ngd_direction.resize(cls * p);
  for (Index c = 0; c < cls; ++c) {
    const Mat fisher = fd_fisher(rep.theta.segment(c * p, p), n, cfg.fd_step);
    Eigen::LLT<Mat> llt(fisher);
    if (llt.info() != Eigen::Success) throw IllConditionedFisher("finite-difference Fisher is not SPD");
    const Vec d = llt.solve(grad.segment(c * p, p));
    if (!d.allFinite()) throw IllConditionedFisher("finite-difference Fisher solve produced non-finite values");
    rep.ngd_direction.segment(c * p, p) = d;
  }
  rep.max_rel_deviation = max_relative_deviation(rep.md_direction, rep.ngd_direction);
  return rep;
}

/// Seeded tiny binary instance: N points in 2-D with spread-out inputs and two
/// RBF priors carrying enough jitter to keep the precision well conditioned.
struct NgdInstance {
  std::vector<GramResult> priors;
  Mat labels;
};

inline NgdInstance make_ngd_instance(std::uint64_t seed, Index n = 3, double jitter = 1e-1) {
  if (n < 1) throw InvalidArgument("make_ngd_instance: need at least one point");
  const Mat x = 2.0 * standard_normals(derive_seed(seed, {1}), n, 2);
  NgdInstance inst;
  inst.priors.push_back(gram(BaseKernelConfig::make(KernelKind::Rbf, 1.0), x, jitter));
  inst.priors.push_back(gram(BaseKernelConfig::make(KernelKind::Rbf, 1.5, 1.0, 2.0), x, jitter));
  inst.labels = Mat::Zero(n, 2);
  Rng rng(derive_seed(seed, {2}));
  for (Index i = 0; i < n; ++i) inst.labels(i, i < 2 ? i : static_cast<Index>(rng() & 1U)) = 1.0;
  return inst;
}

}  // namespace mdgp

#endif  // MDGP_NGD_VERIFY_HPP
