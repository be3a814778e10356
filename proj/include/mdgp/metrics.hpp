#ifndef MDGP_METRICS_HPP
#define MDGP_METRICS_HPP

#include <algorithm>
#include <cmath>
#include <vector>

#include "mdgp/linalg.hpp"

namespace mdgp {

inline constexpr int kDefaultBins = 15;
inline constexpr double kProbFloor = 1e-12;

namespace detail {

inline void check_predictions(const Mat& probs, const Mat& y) {
  if (probs.rows() != y.rows() || probs.cols() != y.cols())
    throw DimensionMismatch("probs and labels must have the same shape");
  if (probs.rows() == 0) throw EmptyInput("no predictions");
}

}  // namespace detail

/// Fraction of rows whose argmax matches the label argmax, ties to the lowest index.
inline double accuracy(const Mat& probs, const Mat& y) {
  detail::check_predictions(probs, y);
  Index hits = 0;
  for (Index i = 0; i < probs.rows(); ++i)
    hits += argmax_first(probs.row(i).transpose()) == argmax_first(y.row(i).transpose());
  return static_cast<double>(hits) / static_cast<double>(probs.rows());
}

/// Mean of -log p(true class), with probabilities floored at 1e-12.
inline double nll(const Mat& probs, const Mat& y) {
  detail::check_predictions(probs, y);
  double acc = 0.0;
  for (Index i = 0; i < probs.rows(); ++i)
    acc -= std::log(std::max(probs(i, argmax_first(y.row(i).transpose())), kProbFloor));
  return acc / static_cast<double>(probs.rows());
}

struct CalibrationBin {
  double lower = 0.0;
  double upper = 0.0;
  Index count = 0;
  double confidence = 0.0;  // mean max-class probability, 0 when empty
  double accuracy = 0.0;    // fraction correct, 0 when empty
};

struct CalibrationTable {
  std::vector<CalibrationBin> bins;
  Index total = 0;

  double ece() const {
    if (total == 0) throw EmptyInput("empty calibration table");
    double e = 0.0;
    for (const auto& b : bins)
      if (b.count > 0) e += static_cast<double>(b.count) / static_cast<double>(total) * std::abs(b.accuracy - b.confidence);
    return e;
  }

  double mce() const {
    if (total == 0) throw EmptyInput("empty calibration table");
    double e = 0.0;
    for (const auto& b : bins)
      if (b.count > 0) e = std::max(e, std::abs(b.accuracy - b.confidence));
    return e;
  }
};

/// Bin b (1-based) covers ((b-1)/B, b/B]; confidence 0 falls in the first bin.
inline int calibration_bin(double confidence, int bins) {
  const int b = static_cast<int>(std::ceil(confidence * bins));
  return std::clamp(b, 1, bins) - 1;
}

inline CalibrationTable reliability_table(const Mat& probs, const Mat& y, int bins = kDefaultBins) {
  detail::check_predictions(probs, y);
  if (bins < 1) throw InvalidArgument("need at least one calibration bin");
  CalibrationTable t;
  t.bins.resize(static_cast<std::size_t>(bins));
  std::vector<double> conf_sum(static_cast<std::size_t>(bins), 0.0), hit_sum(static_cast<std::size_t>(bins), 0.0);
  for (int b = 0; b < bins; ++b) {
    t.bins[static_cast<std::size_t>(b)].lower = static_cast<double>(b) / bins;
    t.bins[static_cast<std::size_t>(b)].upper = static_cast<double>(b + 1) / bins;
  }
  for (Index i = 0; i < probs.rows(); ++i) {
    const Index pred = argmax_first(probs.row(i).transpose());
    const double conf = probs(i, pred);
    const auto b = static_cast<std::size_t>(calibration_bin(conf, bins));
    t.bins[b].count += 1;
    conf_sum[b] += conf;
    hit_sum[b] += pred == argmax_first(y.row(i).transpose()) ? 1.0 : 0.0;
  }
  for (std::size_t b = 0; b < t.bins.size(); ++b) {
    auto& bin = t.bins[b];
    if (bin.count == 0) continue;
    bin.confidence = conf_sum[b] / static_cast<double>(bin.count);
    bin.accuracy = hit_sum[b] / static_cast<double>(bin.count);
  }
  t.total = probs.rows();
  return t;
}

inline double ece(const Mat& probs, const Mat& y, int bins = kDefaultBins) {
  return reliability_table(probs, y, bins).ece();
}

inline double mce(const Mat& probs, const Mat& y, int bins = kDefaultBins) {
  return reliability_table(probs, y, bins).mce();
}

}  // namespace mdgp

#endif  // MDGP_METRICS_HPP
