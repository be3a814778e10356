#ifndef MDGP_LINALG_HPP
#define MDGP_LINALG_HPP

#include <cmath>
#include <string>

#include <Eigen/Dense>

#include "mdgp/error.hpp"

namespace mdgp {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Index = Eigen::Index;

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

/// Jitter escalation used whenever an SPD factorization fails: add eps*I,
/// starting at `initial` and doubling until `max`.
struct JitterPolicy {
  double initial = 1e-8;
  double max = 1e-2;
};

inline Mat symmetrize(const Mat& a) { return 0.5 * (a + a.transpose()); }

inline bool all_finite(const Mat& a) { return a.allFinite(); }

/// Cholesky factor of (A + jitter*I). The jitter is `floor` unless that
/// fails, in which case it escalates per JitterPolicy on top of the floor.
class SpdFactor {
 public:
  SpdFactor() = default;

  static SpdFactor factorize(const Mat& a, double floor = 0.0,
                             JitterPolicy policy = {}) {
    if (a.rows() != a.cols()) {
      throw DimensionMismatch("SPD factorization of a non-square matrix");
    }
    SpdFactor f;
    if (f.try_factor(a, floor)) return f;
    for (double eps = policy.initial; eps > 0.0 && eps <= policy.max * (1 + 1e-12);
         eps *= 2.0) {
      if (f.try_factor(a, floor + eps)) return f;
    }
    throw NotPositiveDefinite("matrix of size " + std::to_string(a.rows()) +
                              " is not positive definite after jitter " +
                              std::to_string(policy.max));
  }

  Index size() const { return llt_.rows(); }
  double jitter() const { return jitter_; }

  Mat lower() const { return llt_.matrixL(); }

  double log_det() const {
    const Mat& lu = llt_.matrixLLT();
    double s = 0.0;
    for (Index i = 0; i < lu.rows(); ++i) s += std::log(lu(i, i));
    return 2.0 * s;
  }

  template <typename Derived>
  typename Derived::PlainObject solve(const Eigen::MatrixBase<Derived>& b) const {
    if (b.rows() != size()) throw DimensionMismatch("SPD solve: row mismatch");
    return llt_.solve(b);
  }

  Mat inverse() const {
    return symmetrize(llt_.solve(Mat::Identity(size(), size())));
  }

  /// Solves L x = b for the lower factor.
  template <typename Derived>
  typename Derived::PlainObject half_solve(const Eigen::MatrixBase<Derived>& b) const {
    return llt_.matrixL().solve(b);
  }

 private:
  bool try_factor(const Mat& a, double jitter) {
    Mat shifted = symmetrize(a);
    if (jitter > 0) shifted.diagonal().array() += jitter;
    llt_.compute(shifted);
    if (llt_.info() != Eigen::Success) return false;
    const Mat& lu = llt_.matrixLLT();
    for (Index i = 0; i < lu.rows(); ++i) {
      if (!(lu(i, i) > 0.0) || !std::isfinite(lu(i, i))) return false;
    }
    jitter_ = jitter;
    return true;
  }

  Eigen::LLT<Mat> llt_;
  double jitter_ = 0.0;
};

inline double softplus(double x) {
  return x > 30.0 ? x : std::log1p(std::exp(x));
}

/// Derivative of softplus.
inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Inverse of softplus, for initializing raw parameters from positive values.
inline double softplus_inverse(double y) {
  if (!(y > 0)) throw InvalidArgument("softplus_inverse needs a positive value");
  return y > 30.0 ? y : std::log(std::expm1(y));
}

/// Index of the largest entry; ties go to the lowest index.
inline Index argmax_first(const Vec& v) {
  if (v.size() == 0) throw DimensionMismatch("argmax of an empty vector");
  Index best = 0;
  for (Index i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = i;
  return best;
}

inline double max_abs(const Mat& a) {
  return a.size() == 0 ? 0.0 : a.cwiseAbs().maxCoeff();
}

}  // namespace mdgp

#endif  // MDGP_LINALG_HPP
