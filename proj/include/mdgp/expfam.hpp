#ifndef MDGP_EXPFAM_HPP
#define MDGP_EXPFAM_HPP

// Dual parameterizations of the multivariate Gaussian.
//
//   moments   (m, Sigma)
//   natural   theta1 = Sigma^-1 m,  Theta2 = -1/2 Sigma^-1
//   mean      mu1 = m,              Mu2 = Sigma + m m^T
//
// Natural and mean parameters are paired by <theta, mu> = theta1.mu1 +
// tr(Theta2 Mu2). With that pairing A(theta) + H(mu) = <theta, mu> holds
// exactly for the normalizers used below.

#include <cmath>

#include "mdgp/linalg.hpp"

namespace mdgp {

struct GaussianMoments {
  Vec mean;
  Mat cov;

  Index dim() const { return mean.size(); }
};

struct GaussianNatural {
  Vec theta1;
  Mat theta2;

  Index dim() const { return theta1.size(); }
};

/// E[f] and E[f f^T].
struct FullMeanParams {
  Vec mu1;
  Mat mu2;

  Index dim() const { return mu1.size(); }
};

/// Per-coordinate mean parameters of a factorized Gaussian: (m_n, v_n + m_n^2).
struct PointMeanParams {
  Vec mu1;
  Vec mu2;
};

namespace detail {

inline void check_square(const Vec& v, const Mat& m, const char* what) {
  if (m.rows() != v.size() || m.cols() != v.size()) {
    throw DimensionMismatch(std::string(what) + ": vector/matrix size mismatch");
  }
}

}  // namespace detail

inline GaussianMoments natural_to_moments(const GaussianNatural& theta,
                                          JitterPolicy policy = {}) {
  detail::check_square(theta.theta1, theta.theta2, "natural_to_moments");
  const Mat precision = -2.0 * symmetrize(theta.theta2);
  const SpdFactor f = SpdFactor::factorize(precision, 0.0, policy);
  GaussianMoments g;
  g.cov = f.inverse();
  g.mean = f.solve(theta.theta1);
  return g;
}

inline GaussianNatural moments_to_natural(const GaussianMoments& g,
                                          JitterPolicy policy = {}) {
  detail::check_square(g.mean, g.cov, "moments_to_natural");
  const SpdFactor f = SpdFactor::factorize(g.cov, 0.0, policy);
  GaussianNatural theta;
  theta.theta1 = f.solve(g.mean);
  theta.theta2 = -0.5 * f.inverse();
  return theta;
}

inline FullMeanParams moments_to_mean_params(const GaussianMoments& g) {
  detail::check_square(g.mean, g.cov, "moments_to_mean_params");
  return {g.mean, symmetrize(g.cov) + g.mean * g.mean.transpose()};
}

inline GaussianMoments mean_params_to_moments(const FullMeanParams& mu) {
  detail::check_square(mu.mu1, mu.mu2, "mean_params_to_moments");
  return {mu.mu1, symmetrize(mu.mu2) - mu.mu1 * mu.mu1.transpose()};
}

/// grad A(theta).
inline FullMeanParams natural_to_mean_params(const GaussianNatural& theta) {
  return moments_to_mean_params(natural_to_moments(theta));
}

/// grad H(mu).
inline GaussianNatural mean_params_to_natural(const FullMeanParams& mu) {
  return moments_to_natural(mean_params_to_moments(mu));
}

inline PointMeanParams point_mean_params(const Vec& mean, const Vec& var) {
  if (mean.size() != var.size()) throw DimensionMismatch("point_mean_params");
  if ((var.array() < 0.0).any()) throw InvalidArgument("point_mean_params: negative variance");
  return {mean, var.array() + mean.array().square()};
}

inline double pairing(const GaussianNatural& theta, const FullMeanParams& mu) {
  detail::check_square(theta.theta1, mu.mu2, "pairing");
  return theta.theta1.dot(mu.mu1) +
         (symmetrize(theta.theta2).array() * symmetrize(mu.mu2).array()).sum();
}

/// A(theta) = 1/2 m^T Sigma^-1 m + 1/2 log|Sigma| + N/2 log 2pi.
inline double log_partition(const GaussianNatural& theta) {
  detail::check_square(theta.theta1, theta.theta2, "log_partition");
  const Mat precision = -2.0 * symmetrize(theta.theta2);
  const SpdFactor f = SpdFactor::factorize(precision);
  const Vec m = f.solve(theta.theta1);
  const double n = static_cast<double>(theta.dim());
  return 0.5 * theta.theta1.dot(m) - 0.5 * f.log_det() + 0.5 * n * kLog2Pi;
}

/// H = E_q[log q] = -N/2 log(2 pi e) - 1/2 log|Sigma|. Ignores the mean.
inline double neg_entropy(const GaussianMoments& g) {
  detail::check_square(g.mean, g.cov, "neg_entropy");
  const SpdFactor f = SpdFactor::factorize(g.cov);
  const double n = static_cast<double>(g.dim());
  return -0.5 * n * (kLog2Pi + 1.0) - 0.5 * f.log_det();
}

inline double neg_entropy(const FullMeanParams& mu) {
  return neg_entropy(mean_params_to_moments(mu));
}

/// KL(q || p) in closed form.
inline double gaussian_kl(const GaussianMoments& q, const GaussianMoments& p) {
  detail::check_square(q.mean, q.cov, "gaussian_kl");
  detail::check_square(p.mean, p.cov, "gaussian_kl");
  if (q.dim() != p.dim()) throw DimensionMismatch("gaussian_kl: dimension");
  const SpdFactor fp = SpdFactor::factorize(p.cov);
  const SpdFactor fq = SpdFactor::factorize(q.cov);
  const Vec diff = p.mean - q.mean;
  const double trace = fp.solve(symmetrize(q.cov)).trace();
  const double quad = diff.dot(fp.solve(diff));
  const double n = static_cast<double>(q.dim());
  return 0.5 * (trace + quad - n + fp.log_det() - fq.log_det());
}

/// Bregman divergence of the negative entropy,
/// B_H(mu, mu') = H(mu) - H(mu') - <grad H(mu'), mu - mu'>.
inline double bregman_h(const FullMeanParams& mu, const FullMeanParams& mu_ref) {
  if (mu.dim() != mu_ref.dim()) throw DimensionMismatch("bregman_h: dimension");
  const GaussianNatural theta_ref = mean_params_to_natural(mu_ref);
  const FullMeanParams delta{mu.mu1 - mu_ref.mu1, mu.mu2 - mu_ref.mu2};
  return neg_entropy(mu) - neg_entropy(mu_ref) - pairing(theta_ref, delta);
}

}  // namespace mdgp

#endif  // MDGP_EXPFAM_HPP
