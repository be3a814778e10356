#ifndef MDGP_MODEL_HPP
#define MDGP_MODEL_HPP

#include <cstdint>
#include <vector>

#include "mdgp/inference.hpp"
#include "mdgp/kernels.hpp"
#include "mdgp/likelihood.hpp"
#include "mdgp/tasks.hpp"

namespace mdgp {

/// An episode after the inner loop. Holds its own copy of the kernel so that
/// later outer updates cannot invalidate the cached features and Grams.
struct FittedEpisode {
  DeepKernel kernel;
  Mat support_x;
  Mat labels;
  Extracted support;
  std::vector<GramResult> grams;
  InnerResult inner;

  Index classes() const { return labels.cols(); }
  Index points() const { return labels.rows(); }
  const std::vector<GaussianMoments>& posteriors() const { return inner.posteriors; }
};

struct LatentPrediction {
  Mat mean;  // M x C
  Mat var;   // M x C
};

struct PredictiveDist {
  Mat probs;
  Mat latent_mean;
  Mat latent_var;

  /// Hard labels, ties to the lowest class index.
  std::vector<Index> labels() const {
    std::vector<Index> out(static_cast<std::size_t>(probs.rows()));
    for (Index i = 0; i < probs.rows(); ++i) out[static_cast<std::size_t>(i)] = argmax_first(probs.row(i).transpose());
    return out;
  }
};

inline constexpr double kMinLatentVar = 1e-12;

template <PointLikelihood Lik>
FittedEpisode fit_episode(const DeepKernel& kernel, const Mat& support_x, const Mat& support_y,
                          const InnerConfig& cfg, const Lik& lik, InnerMethod method = InnerMethod::MD,
                          bool record_trace = false) {
  kernel.validate();
  cfg.validate();
  if (support_y.cols() != kernel.num_classes())
    throw DimensionMismatch("episode has " + std::to_string(support_y.cols()) + " classes, kernel has " +
                            std::to_string(kernel.num_classes()));
  if (support_y.rows() != support_x.rows()) throw DimensionMismatch("support labels / inputs row count");
  FittedEpisode fit;
  fit.kernel = kernel;
  fit.support_x = support_x;
  fit.labels = support_y;
  fit.support = extract(kernel.extractor, support_x);
  fit.grams = kernel.class_grams(fit.support.features);
  fit.inner = run_inner(method, fit.grams, support_y, cfg, lik, record_trace);
  return fit;
}

inline FittedEpisode fit_episode(const DeepKernel& kernel, const Episode& ep, const InnerConfig& cfg,
                                 InnerMethod method = InnerMethod::MD) {
  return fit_episode(kernel, ep.support_x, ep.support_y, cfg, SoftmaxMc{cfg.mc.samples}, method);
}

/// Per class: mu* = k*^T K^-1 m, var* = k** - k*^T K^-1 (K - Sigma) K^-1 k*.
/// The second form equals k** - k*^T K^-1 k* + k*^T K^-1 Sigma K^-1 k* and is
/// exact in the prior state, where K - Sigma vanishes.
inline LatentPrediction predict_latent(const FittedEpisode& fit, const Mat& xq) {
  const Mat zq = extract(fit.kernel.extractor, xq).features;
  const Index m = xq.rows();
  const Index cls = fit.classes();
  LatentPrediction out{Mat(m, cls), Mat(m, cls)};
  for (Index c = 0; c < cls; ++c) {
    const GramResult& g = fit.grams[static_cast<std::size_t>(c)];
    const BaseKernelConfig& base = fit.kernel.base[static_cast<std::size_t>(c)];
    const GaussianMoments& q = fit.posteriors()[static_cast<std::size_t>(c)];
    const Mat prior = g.prior_cov();
    const SpdFactor kf = SpdFactor::factorize(prior, 0.0, {0.0, 0.0});
    const Mat ks = cross_gram(base, zq, g);  // M x N
    const Mat b = kf.solve(Mat(ks.transpose()));             // N x M
    const Vec kss = self_gram_diag(base, zq, g);
    const Mat shrink = symmetrize(prior - q.cov);
    out.mean.col(c) = b.transpose() * q.mean;
    const Vec reduction = (b.array() * (shrink * b).array()).colwise().sum().transpose();
    out.var.col(c) = (kss - reduction).cwiseMax(kMinLatentVar);
  }
  return out;
}

/// probs_m = 1/S sum_s softmax(f^(s)) with independent per-class draws.
/// Each query row has its own stream, so rows do not depend on each other.
inline Mat mc_label_probs(const Mat& mean, const Mat& var, const McConfig& mc) {
  if (mean.rows() != var.rows() || mean.cols() != var.cols()) throw DimensionMismatch("mc_label_probs");
  if (mc.samples < 1) throw InvalidArgument("MC sample count must be at least 1");
  Mat probs(mean.rows(), mean.cols());
  for (Index i = 0; i < mean.rows(); ++i) {
    const Mat eps = standard_normals(derive_seed(mc.seed, {static_cast<std::uint64_t>(i)}), mc.samples, mean.cols());
    const Vec mu = mean.row(i).transpose();
    const Vec sd = var.row(i).transpose().cwiseSqrt();
    Vec acc = Vec::Zero(mean.cols());
    for (Index s = 0; s < mc.samples; ++s) acc += softmax(mu + sd.cwiseProduct(eps.row(s).transpose()));
    probs.row(i) = (acc / acc.sum()).transpose();
  }
  return probs;
}

inline PredictiveDist predict_labels(const FittedEpisode& fit, const Mat& xq, const McConfig& mc = {512, 0}) {
  LatentPrediction lat = predict_latent(fit, xq);
  PredictiveDist out;
  out.probs = mc_label_probs(lat.mean, lat.var, mc);
  out.latent_mean = std::move(lat.mean);
  out.latent_var = std::move(lat.var);
  return out;
}

}  // namespace mdgp

#endif  // MDGP_MODEL_HPP
