#ifndef MDGP_KERNELS_HPP
#define MDGP_KERNELS_HPP

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mdgp/linalg.hpp"
#include "mdgp/random.hpp"

namespace mdgp {

// ---------------------------------------------------------------------------
// Feature extractor: fully connected, ReLU on hidden layers, linear output.
// ---------------------------------------------------------------------------

struct DenseLayer {
  Mat weight;  // out x in
  Vec bias;    // out
};

class FeatureExtractor {
 public:
  FeatureExtractor() = default;
  explicit FeatureExtractor(std::vector<DenseLayer> layers)
      : layers_(std::move(layers)) {
    validate();
  }

  /// He-style normal initialization scaled by `init_scale`, zero biases.
  static FeatureExtractor random(const std::vector<int>& dims,
                                 std::uint64_t seed, double init_scale = 1.0) {
    if (dims.size() < 2) {
      throw InvalidArgument("feature extractor needs at least [D_in, d_out]");
    }
    std::vector<DenseLayer> layers;
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      if (dims[l] <= 0 || dims[l + 1] <= 0) throw InvalidArgument("layer dims must be positive");
      DenseLayer layer{Mat(dims[l + 1], dims[l]), Vec::Zero(dims[l + 1])};
      const double sd = init_scale * std::sqrt(2.0 / dims[l]);
      for (Index i = 0; i < layer.weight.rows(); ++i)
        for (Index j = 0; j < layer.weight.cols(); ++j) layer.weight(i, j) = sd * normal(rng);
      layers.push_back(std::move(layer));
    }
    return FeatureExtractor(std::move(layers));
  }

  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& layers() { return layers_; }

  std::vector<int> layer_dims() const {
    std::vector<int> dims;
    if (layers_.empty()) return dims;
    dims.push_back(static_cast<int>(layers_.front().weight.cols()));
    for (const auto& l : layers_) dims.push_back(static_cast<int>(l.weight.rows()));
    return dims;
  }

  Index input_dim() const { return layers_.empty() ? 0 : layers_.front().weight.cols(); }
  Index output_dim() const { return layers_.empty() ? 0 : layers_.back().weight.rows(); }

  void validate() const {
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& layer = layers_[l];
      if (layer.bias.size() != layer.weight.rows())
        throw DimensionMismatch("layer " + std::to_string(l) + ": bias length");
      if (l > 0 && layer.weight.cols() != layers_[l - 1].weight.rows())
        throw DimensionMismatch("layer " + std::to_string(l) + ": input width");
      if (!layer.weight.allFinite() || !layer.bias.allFinite())
        throw NumericalError("layer " + std::to_string(l) + ": non-finite weights");
    }
  }

 private:
  std::vector<DenseLayer> layers_;
};

/// Activations kept by extract() for the reverse pass.
struct ExtractorCache {
  std::vector<Mat> inputs;           // input to each layer
  std::vector<Mat> pre_activations;  // X W^T + b per layer
};

struct Extracted {
  Mat features;
  ExtractorCache cache;
};

inline Extracted extract(const FeatureExtractor& fe, const Mat& x) {
  if (fe.layers().empty()) throw InvalidArgument("empty feature extractor");
  if (x.cols() != fe.input_dim()) {
    throw DimensionMismatch("extract: input has " + std::to_string(x.cols()) +
                            " columns, network expects " + std::to_string(fe.input_dim()));
  }
  Extracted out;
  Mat h = x;
  const std::size_t n_layers = fe.layers().size();
  for (std::size_t l = 0; l < n_layers; ++l) {
    const auto& layer = fe.layers()[l];
    out.cache.inputs.push_back(h);
    Mat a = h * layer.weight.transpose();
    a.rowwise() += layer.bias.transpose();
    out.cache.pre_activations.push_back(a);
    h = (l + 1 < n_layers) ? Mat(a.cwiseMax(0.0)) : a;
  }
  out.features = std::move(h);
  return out;
}

/// Gradient with the same layout as the network.
using ExtractorGrad = std::vector<DenseLayer>;

inline ExtractorGrad extractor_backward(const FeatureExtractor& fe, const ExtractorCache& cache,
                                        const Mat& d_features) {
  const std::size_t n_layers = fe.layers().size();
  if (cache.inputs.size() != n_layers || cache.pre_activations.size() != n_layers)
    throw StaleCache("extractor_backward: cache depth does not match network");
  for (std::size_t l = 0; l < n_layers; ++l) {
    const auto& w = fe.layers()[l].weight;
    if (cache.inputs[l].cols() != w.cols() || cache.pre_activations[l].cols() != w.rows() ||
        cache.inputs[l].rows() != cache.pre_activations[l].rows())
      throw StaleCache("extractor_backward: cached shapes disagree at layer " + std::to_string(l));
  }
  if (d_features.rows() != cache.inputs.front().rows() ||
      d_features.cols() != fe.output_dim())
    throw StaleCache("extractor_backward: upstream gradient shape");

  ExtractorGrad grad(n_layers);
  Mat upstream = d_features;
  for (std::size_t k = n_layers; k-- > 0;) {
    Mat da = upstream;
    if (k + 1 < n_layers) {
      da.array() *= (cache.pre_activations[k].array() > 0.0).cast<double>();
    }
    grad[k].weight = da.transpose() * cache.inputs[k];
    grad[k].bias = da.colwise().sum().transpose();
    if (k > 0) upstream = da * fe.layers()[k].weight;
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Base kernels on extracted features.
// ---------------------------------------------------------------------------

enum class KernelKind { Cos, Rbf, Pol1, Pol2 };

inline std::string_view to_string(KernelKind k) {
  switch (k) {
    case KernelKind::Cos: return "COS";
    case KernelKind::Rbf: return "RBF";
    case KernelKind::Pol1: return "POL1";
    case KernelKind::Pol2: return "POL2";
  }
  return "?";
}

inline KernelKind kernel_kind_from_string(std::string_view s) {
  if (s == "COS" || s == "cos") return KernelKind::Cos;
  if (s == "RBF" || s == "rbf") return KernelKind::Rbf;
  if (s == "POL1" || s == "pol1") return KernelKind::Pol1;
  if (s == "POL2" || s == "pol2") return KernelKind::Pol2;
  throw InvalidArgument("unknown kernel kind '" + std::string(s) + "'");
}

/// Positive quantities are stored raw and mapped through softplus.
struct BaseKernelConfig {
  KernelKind kind = KernelKind::Cos;
  double length_scale_raw = softplus_inverse(1.0);
  double offset_raw = softplus_inverse(1.0);
  double output_scale_raw = softplus_inverse(1.0);

  double length_scale() const { return softplus(length_scale_raw); }
  double offset() const { return softplus(offset_raw); }
  double output_scale() const { return softplus(output_scale_raw); }

  static BaseKernelConfig make(KernelKind kind, double length_scale = 1.0, double offset = 1.0,
                               double output_scale = 1.0) {
    return {kind, softplus_inverse(length_scale), softplus_inverse(offset),
            softplus_inverse(output_scale)};
  }
};

struct BaseKernelGrad {
  double length_scale_raw = 0.0;
  double offset_raw = 0.0;
  double output_scale_raw = 0.0;
};

struct GramResult {
  Mat k;               // kernel matrix without jitter
  double jitter_used;  // k + jitter_used * I is SPD
  Mat cached_features;
  Vec center;          // COS centering vector, empty for other kinds

  Index size() const { return k.rows(); }
  Mat prior_cov() const {
    Mat c = k;
    c.diagonal().array() += jitter_used;
    return c;
  }
};

inline constexpr double kDegenerateNorm = 1e-12;

namespace detail {

// Rows of (z - center), normalized. Throws on near-zero rows.
inline Mat cos_normalize(const Mat& z, const Vec& center, Vec* norms = nullptr) {
  Mat u = z.rowwise() - center.transpose();
  Vec n = u.rowwise().norm();
  for (Index i = 0; i < u.rows(); ++i) {
    if (n(i) < kDegenerateNorm)
      throw DegenerateInput("COS kernel: centered feature row " + std::to_string(i) +
                            " has zero norm");
    u.row(i) /= n(i);
  }
  if (norms) *norms = std::move(n);
  return u;
}

inline Mat sq_distances(const Mat& a, const Mat& b) {
  const Vec an = a.rowwise().squaredNorm();
  const Vec bn = b.rowwise().squaredNorm();
  Mat d = (-2.0 * a * b.transpose());
  d.colwise() += an;
  d.rowwise() += bn.transpose();
  return d.cwiseMax(0.0);
}

// Unscaled kernel between two feature sets.
inline Mat unscaled_kernel(const BaseKernelConfig& base, const Mat& a, const Mat& b,
                           const Vec& center) {
  switch (base.kind) {
    case KernelKind::Cos:
      return cos_normalize(a, center) * cos_normalize(b, center).transpose();
    case KernelKind::Rbf: {
      const double l = base.length_scale();
      return (-sq_distances(a, b) / (2.0 * l * l)).array().exp().matrix();
    }
    case KernelKind::Pol1:
      return ((a * b.transpose()).array() + base.offset()).matrix();
    case KernelKind::Pol2:
      return ((a * b.transpose()).array() + base.offset()).square().matrix();
  }
  return {};
}

}  // namespace detail

/// Column mean of the features, the centering convention of the COS kernel.
inline Vec feature_center(const Mat& z) { return z.colwise().mean().transpose(); }

/// Gram matrix over one feature batch. COS centers by the batch mean.
inline GramResult gram(const BaseKernelConfig& base, const Mat& z, double jitter_floor = 0.0,
                       JitterPolicy policy = {}) {
  if (z.rows() < 1) throw DimensionMismatch("gram: empty feature matrix");
  GramResult out;
  out.center = base.kind == KernelKind::Cos ? feature_center(z) : Vec();
  Mat k = base.output_scale() * detail::unscaled_kernel(base, z, z, out.center);
  out.k = symmetrize(k);
  out.cached_features = z;
  out.jitter_used = SpdFactor::factorize(out.k, jitter_floor, policy).jitter();
  return out;
}

/// Cross-kernel between query features and support features. For COS the
/// support centering vector is reused for both sides.
inline Mat cross_gram(const BaseKernelConfig& base, const Mat& zq, const GramResult& support) {
  if (zq.cols() != support.cached_features.cols())
    throw DimensionMismatch("cross_gram: feature width");
  return base.output_scale() *
         detail::unscaled_kernel(base, zq, support.cached_features, support.center);
}

/// Prior variances k(x*, x*) for every query row.
inline Vec self_gram_diag(const BaseKernelConfig& base, const Mat& zq, const GramResult& support) {
  const double s = base.output_scale();
  switch (base.kind) {
    case KernelKind::Cos:
      detail::cos_normalize(zq, support.center);  // surfaces DegenerateInput
      return Vec::Constant(zq.rows(), s);
    case KernelKind::Rbf:
      return Vec::Constant(zq.rows(), s);
    case KernelKind::Pol1:
      return s * (zq.rowwise().squaredNorm().array() + base.offset()).matrix();
    case KernelKind::Pol2:
      return s * (zq.rowwise().squaredNorm().array() + base.offset()).square().matrix();
  }
  return {};
}

struct GramGrad {
  Mat d_features;
  BaseKernelGrad d_base;
};

/// Reverse pass of gram() for the scalar sum_ij G_ij K_ij. G is symmetrized.
inline GramGrad gram_backward(const BaseKernelConfig& base, const Mat& z, const Mat& g_in) {
  const Index n = z.rows();
  if (g_in.rows() != n || g_in.cols() != n) throw DimensionMismatch("gram_backward: G shape");
  const Mat g = symmetrize(g_in);
  const double s = base.output_scale();
  const double ds_draw = sigmoid(base.output_scale_raw);
  GramGrad out;
  out.d_features = Mat::Zero(n, z.cols());

  switch (base.kind) {
    case KernelKind::Cos: {
      const Vec center = feature_center(z);
      Vec norms;
      const Mat u = detail::cos_normalize(z, center, &norms);
      const Mat k0 = u * u.transpose();
      out.d_base.output_scale_raw = (g.array() * k0.array()).sum() * ds_draw;
      const Mat du = 2.0 * s * g * u;
      Mat dzc(n, z.cols());
      for (Index i = 0; i < n; ++i) {
        const double proj = u.row(i).dot(du.row(i));
        dzc.row(i) = (du.row(i) - proj * u.row(i)) / norms(i);
      }
      // Centering is linear: dZ = (I - 11^T/N) dZc.
      out.d_features = dzc.rowwise() - dzc.colwise().mean();
      break;
    }
    case KernelKind::Rbf: {
      const double l = base.length_scale();
      const Mat d2 = detail::sq_distances(z, z);
      const Mat k0 = (-d2 / (2.0 * l * l)).array().exp().matrix();
      out.d_base.output_scale_raw = (g.array() * k0.array()).sum() * ds_draw;
      const double dl = s * (g.array() * k0.array() * d2.array()).sum() / (l * l * l);
      out.d_base.length_scale_raw = dl * sigmoid(base.length_scale_raw);
      // dL/dd_ij for the symmetric distance matrix.
      const Mat a = (g.array() * k0.array()).matrix() * (-s / (2.0 * l * l));
      const Vec row_sums = a.rowwise().sum();
      out.d_features = 4.0 * (row_sums.asDiagonal() * z - a * z);
      break;
    }
    case KernelKind::Pol1: {
      const Mat k0 = ((z * z.transpose()).array() + base.offset()).matrix();
      out.d_base.output_scale_raw = (g.array() * k0.array()).sum() * ds_draw;
      out.d_base.offset_raw = s * g.sum() * sigmoid(base.offset_raw);
      out.d_features = 2.0 * s * g * z;
      break;
    }
    case KernelKind::Pol2: {
      const Mat p = ((z * z.transpose()).array() + base.offset()).matrix();
      out.d_base.output_scale_raw = (g.array() * p.array().square()).sum() * ds_draw;
      const Mat dp = 2.0 * s * (g.array() * p.array()).matrix();
      out.d_base.offset_raw = dp.sum() * sigmoid(base.offset_raw);
      out.d_features = 2.0 * dp * z;
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Deep kernel: shared extractor, one base kernel per class.
// ---------------------------------------------------------------------------

struct DeepKernel {
  FeatureExtractor extractor;
  std::vector<BaseKernelConfig> base;
  double jitter = 1e-6;  // diagonal floor added to every prior Gram

  Index num_classes() const { return static_cast<Index>(base.size()); }

  void validate() const {
    if (base.size() < 2) throw InvalidArgument("deep kernel needs at least two classes");
    extractor.validate();
    if (!(jitter >= 0)) throw InvalidArgument("jitter must be nonnegative");
  }

  std::vector<GramResult> class_grams(const Mat& z) const {
    std::vector<GramResult> out;
    out.reserve(base.size());
    for (const auto& b : base) out.push_back(gram(b, z, jitter));
    return out;
  }
};

}  // namespace mdgp

#endif  // MDGP_KERNELS_HPP
