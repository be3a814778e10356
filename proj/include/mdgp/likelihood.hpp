#ifndef MDGP_LIKELIHOOD_HPP
#define MDGP_LIKELIHOOD_HPP

#include <cmath>
#include <concepts>
#include <cstdint>
#include <vector>

#include <Eigen/Eigenvalues>

#include "mdgp/linalg.hpp"
#include "mdgp/random.hpp"

namespace mdgp {

/// Marginal of q(f_n): per-class means and variances at one input.
struct PointMarginal {
  Vec mean;
  Vec var;

  Index classes() const { return mean.size(); }
};

struct McConfig {
  int samples = 64;
  std::uint64_t seed = 0;
};

/// Gradients of E_q[log p(y_n | f_n)] w.r.t. the marginal mean and variance.
struct MvGrad {
  Vec g_m;
  Vec g_v;
};

/// Gradients of the same expectation w.r.t. the two mean parameters.
struct MeanParamGrad {
  Vec d_mu1;
  Vec d_mu2;
};

inline double logsumexp(const Vec& f) {
  const double mx = f.maxCoeff();
  return mx + std::log((f.array() - mx).exp().sum());
}

inline Vec softmax(const Vec& f) {
  const double mx = f.maxCoeff();
  Vec e = (f.array() - mx).exp();
  return e / e.sum();
}

/// Index of the hot entry; throws NotOneHot otherwise.
inline Index one_hot_index(const Vec& y) {
  Index hot = -1;
  for (Index c = 0; c < y.size(); ++c) {
    if (y(c) == 1.0) {
      if (hot >= 0) throw NotOneHot("label row has more than one hot entry");
      hot = c;
    } else if (y(c) != 0.0) {
      throw NotOneHot("label row has an entry other than 0/1");
    }
  }
  if (hot < 0) throw NotOneHot("label row has no hot entry");
  return hot;
}

inline void check_marginal(const PointMarginal& pm, const Vec& y) {
  if (pm.var.size() != pm.mean.size() || y.size() != pm.mean.size())
    throw DimensionMismatch("point marginal / label width mismatch");
  if ((pm.var.array() < 0.0).any()) throw InvalidArgument("negative marginal variance");
}

/// log p(y | f) = f.y - logsumexp(f).
inline double log_softmax_lik(const Vec& y, const Vec& f) {
  if (y.size() != f.size()) throw DimensionMismatch("log_softmax_lik: width");
  const Index hot = one_hot_index(y);
  return f(hot) - logsumexp(f);
}

/// Standard normal draws behind the MC estimators (S x C). Exposed so that
/// common-random-number comparisons can reuse them.
inline Mat mc_draws(const McConfig& mc, Index classes) {
  if (mc.samples < 1) throw InvalidArgument("MC sample count must be at least 1");
  return standard_normals(mc.seed, mc.samples, classes);
}

inline double expected_loglik_from_draws(const PointMarginal& pm, const Vec& y, const Mat& eps) {
  check_marginal(pm, y);
  const Index hot = one_hot_index(y);
  const Vec sd = pm.var.cwiseSqrt();
  double acc = 0.0;
  Vec f(pm.classes());
  for (Index s = 0; s < eps.rows(); ++s) {
    f = pm.mean + sd.cwiseProduct(eps.row(s).transpose());
    acc += f(hot) - logsumexp(f);
  }
  return acc / static_cast<double>(eps.rows());
}

inline MvGrad grad_mv_from_draws(const PointMarginal& pm, const Vec& y, const Mat& eps) {
  check_marginal(pm, y);
  one_hot_index(y);
  const Index c = pm.classes();
  const Vec sd = pm.var.cwiseSqrt();
  MvGrad g{Vec::Zero(c), Vec::Zero(c)};
  Vec f(c);
  for (Index s = 0; s < eps.rows(); ++s) {
    f = pm.mean + sd.cwiseProduct(eps.row(s).transpose());
    const Vec p = softmax(f);
    g.g_m += y - p;
    g.g_v += (p.array().square() - p.array()).matrix();
  }
  const double inv = 1.0 / static_cast<double>(eps.rows());
  g.g_m *= inv;
  g.g_v *= 0.5 * inv;
  return g;
}

inline double mc_expected_loglik(const PointMarginal& pm, const Vec& y, const McConfig& mc) {
  return expected_loglik_from_draws(pm, y, mc_draws(mc, pm.classes()));
}

/// g_m = E[y - p], g_v = 1/2 E[p^2 - p] with p = softmax(f), f ~ q(f_n).
inline MvGrad grad_mv(const PointMarginal& pm, const Vec& y, const McConfig& mc) {
  return grad_mv_from_draws(pm, y, mc_draws(mc, pm.classes()));
}

/// Chain rule from (m, v) to (mu1, mu2) with v = mu2 - mu1^2.
inline MeanParamGrad mean_param_grads(const MvGrad& g, const Vec& mean) {
  return {g.g_m - 2.0 * g.g_v.cwiseProduct(mean), g.g_v};
}

inline MeanParamGrad grad_mean_params(const PointMarginal& pm, const Vec& y, const McConfig& mc) {
  return mean_param_grads(grad_mv(pm, y, mc), pm.mean);
}

// ---------------------------------------------------------------------------
// Likelihood policies consumed by the inner loop. Each provides the expected
// log-likelihood at one point and its (m, v) gradients, keyed by a seed.
// ---------------------------------------------------------------------------

template <typename L>
concept PointLikelihood = requires(const L& lik, const PointMarginal& pm, const Vec& y,
                                   std::uint64_t seed) {
  { lik.expected_loglik(pm, y, seed) } -> std::convertible_to<double>;
  { lik.grad_mv(pm, y, seed) } -> std::same_as<MvGrad>;
};

/// Softmax likelihood with Monte-Carlo expectations.
struct SoftmaxMc {
  int samples = 64;

  double expected_loglik(const PointMarginal& pm, const Vec& y, std::uint64_t seed) const {
    return mc_expected_loglik(pm, y, {samples, seed});
  }
  MvGrad grad_mv(const PointMarginal& pm, const Vec& y, std::uint64_t seed) const {
    return mdgp::grad_mv(pm, y, {samples, seed});
  }
};

/// Nodes and weights of Gauss-Hermite quadrature against the standard normal
/// density (weights sum to one), via the Golub-Welsch eigenproblem.
struct GaussHermite {
  Vec nodes;
  Vec weights;

  static GaussHermite make(int n) {
    if (n < 1) throw InvalidArgument("Gauss-Hermite needs at least one node");
    Mat jacobi = Mat::Zero(n, n);
    for (int k = 1; k < n; ++k) {
      jacobi(k, k - 1) = jacobi(k - 1, k) = std::sqrt(static_cast<double>(k));
    }
    Eigen::SelfAdjointEigenSolver<Mat> es(jacobi);
    GaussHermite gh;
    gh.nodes = es.eigenvalues();
    gh.weights = es.eigenvectors().row(0).transpose().array().square();
    gh.weights /= gh.weights.sum();
    return gh;
  }
};

/// Binary softmax with the expectation taken by quadrature over f1 - f2. The
/// result is a smooth deterministic function of (m, v); seeds are ignored.
struct SoftmaxBinaryQuadrature {
  GaussHermite rule = GaussHermite::make(64);

  double expected_loglik(const PointMarginal& pm, const Vec& y, std::uint64_t) const {
    check_binary(pm, y);
    const double sign = one_hot_index(y) == 0 ? 1.0 : -1.0;
    const double mu = pm.mean(0) - pm.mean(1);
    const double sd = std::sqrt(pm.var(0) + pm.var(1));
    double acc = 0.0;
    for (Index i = 0; i < rule.nodes.size(); ++i) {
      const double t = sign * (mu + sd * rule.nodes(i));
      acc += rule.weights(i) * log_sigmoid(t);
    }
    return acc;
  }

  MvGrad grad_mv(const PointMarginal& pm, const Vec& y, std::uint64_t) const {
    check_binary(pm, y);
    const double mu = pm.mean(0) - pm.mean(1);
    const double sd = std::sqrt(pm.var(0) + pm.var(1));
    double e_p0 = 0.0, e_p0p1 = 0.0;
    for (Index i = 0; i < rule.nodes.size(); ++i) {
      const double p0 = sigmoid(mu + sd * rule.nodes(i));
      e_p0 += rule.weights(i) * p0;
      e_p0p1 += rule.weights(i) * p0 * (1.0 - p0);
    }
    MvGrad g{Vec(2), Vec(2)};
    g.g_m(0) = y(0) - e_p0;
    g.g_m(1) = y(1) - (1.0 - e_p0);
    // p_c^2 - p_c = -p0 p1 for both classes.
    g.g_v.setConstant(-0.5 * e_p0p1);
    return g;
  }

 private:
  static double log_sigmoid(double t) { return t >= 0 ? -std::log1p(std::exp(-t)) : t - std::log1p(std::exp(t)); }

  static void check_binary(const PointMarginal& pm, const Vec& y) {
    check_marginal(pm, y);
    if (pm.classes() != 2) throw DimensionMismatch("quadrature likelihood is binary only");
    one_hot_index(y);
  }
};

/// Independent Gaussian observations y_n^c ~ N(f_n^c, noise_var). Its exact
/// mean-parameter gradient is its own natural parameter (y / s2, -1 / (2 s2)),
/// which makes conjugate updates exact. Test likelihood only.
struct GaussianTestLikelihood {
  double noise_var = 1.0;

  double expected_loglik(const PointMarginal& pm, const Vec& y, std::uint64_t) const {
    check_marginal(pm, y);
    const double c = static_cast<double>(pm.classes());
    return -0.5 * c * (kLog2Pi + std::log(noise_var)) -
           0.5 * ((y - pm.mean).squaredNorm() + pm.var.sum()) / noise_var;
  }

  MvGrad grad_mv(const PointMarginal& pm, const Vec& y, std::uint64_t) const {
    check_marginal(pm, y);
    return {(y - pm.mean) / noise_var, Vec::Constant(pm.classes(), -0.5 / noise_var)};
  }
};

static_assert(PointLikelihood<SoftmaxMc>);
static_assert(PointLikelihood<SoftmaxBinaryQuadrature>);
static_assert(PointLikelihood<GaussianTestLikelihood>);

}  // namespace mdgp

#endif  // MDGP_LIKELIHOOD_HPP
