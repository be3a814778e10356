#ifndef MDGP_TASKS_HPP
#define MDGP_TASKS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mdgp/error.hpp"
#include "mdgp/linalg.hpp"
#include "mdgp/random.hpp"

namespace mdgp {

/// One C-way L-shot task. Rows are grouped by class: rows [c*L, (c+1)*L) of
/// the support set belong to class c, and likewise with M for the query set.
struct Episode {
  Mat support_x;
  Mat support_y;
  Mat query_x;
  Mat query_y;
  Index ways = 0;
  Index shots = 0;
  Index queries = 0;

  Index dim() const { return support_x.cols(); }

  void validate() const {
    if (ways < 1 || shots < 1 || queries < 0) throw InvalidArgument("episode counts must be positive");
    if (support_x.rows() != ways * shots || support_y.rows() != ways * shots)
      throw DimensionMismatch("episode: support rows must equal C*L");
    if (query_x.rows() != ways * queries || query_y.rows() != ways * queries)
      throw DimensionMismatch("episode: query rows must equal C*M");
    if (support_y.cols() != ways || query_y.cols() != ways)
      throw DimensionMismatch("episode: label width must equal C");
    if (query_x.cols() != support_x.cols()) throw DimensionMismatch("episode: feature width");
    auto check_block = [](const Mat& y, Index per_class) {
      for (Index r = 0; r < y.rows(); ++r) {
        const Index want = r / per_class;
        for (Index c = 0; c < y.cols(); ++c)
          if (y(r, c) != (c == want ? 1.0 : 0.0)) throw NotOneHot("episode labels are not class-blocked one-hot");
      }
    };
    check_block(support_y, shots);
    if (queries > 0) check_block(query_y, queries);
  }
};

struct DomainShift {
  double angle_deg = 30.0;
  double scale = 1.5;
};

struct TaskGenConfig {
  int ways = 5;
  int shots = 5;
  int queries = 16;
  int dim = 8;
  double tau = 3.0;      // prototype scale
  double sigma_w = 0.5;  // within-class scale
  // Trailing coordinates that carry no class signal, only noise of scale
  // nuisance_scale. Zero keeps every coordinate informative.
  int nuisance_dims = 0;
  double nuisance_scale = 0.0;
  std::optional<DomainShift> domain_shift;
  std::uint64_t seed = 0;

  void validate() const {
    if (ways < 1 || shots < 1 || queries < 0 || dim < 1) throw ConfigError("task counts must be positive");
    if (!(tau > 0.0) || !(sigma_w > 0.0)) throw ConfigError("task scales must be positive");
    if (nuisance_dims < 0 || nuisance_dims >= dim) throw ConfigError("nuisance_dims must lie in [0, D)");
    if (!(nuisance_scale >= 0.0)) throw ConfigError("nuisance_scale must be nonnegative");
    if (domain_shift && !(domain_shift->scale > 0.0)) throw ConfigError("domain shift scale must be positive");
  }
};

/// Rotates coordinate pairs (0,1), (2,3), ... by the shift angle, then scales.
/// An odd trailing coordinate is only scaled.
inline Mat apply_domain_shift(const Mat& x, const DomainShift& shift) {
  const double a = shift.angle_deg * std::numbers::pi / 180.0;
  const double ca = std::cos(a), sa = std::sin(a);
  Mat out = x;
  for (Index j = 0; j + 1 < x.cols(); j += 2) {
    out.col(j) = ca * x.col(j) - sa * x.col(j + 1);
    out.col(j + 1) = sa * x.col(j) + ca * x.col(j + 1);
  }
  return shift.scale * out;
}

inline Mat one_hot_blocks(Index ways, Index per_class) {
  Mat y = Mat::Zero(ways * per_class, ways);
  for (Index r = 0; r < y.rows(); ++r) y(r, r / per_class) = 1.0;
  return y;
}

inline Episode gen_episode(const TaskGenConfig& cfg) {
  cfg.validate();
  const Index c = cfg.ways, l = cfg.shots, m = cfg.queries, d = cfg.dim;
  const Index informative = d - cfg.nuisance_dims;
  Rng rng(derive_seed(cfg.seed, {0x7a5cULL}));
  std::normal_distribution<double> normal(0.0, 1.0);
  Mat protos = Mat::Zero(c, d);
  for (Index k = 0; k < c; ++k)
    for (Index j = 0; j < informative; ++j) protos(k, j) = cfg.tau * normal(rng);
  Episode ep;
  ep.ways = c;
  ep.shots = l;
  ep.queries = m;
  ep.support_x.resize(c * l, d);
  ep.query_x.resize(c * m, d);
  for (Index k = 0; k < c; ++k) {
    for (Index i = 0; i < l + m; ++i) {
      Vec row = protos.row(k).transpose();
      for (Index j = 0; j < d; ++j) row(j) += (j < informative ? cfg.sigma_w : cfg.nuisance_scale) * normal(rng);
      if (i < l) ep.support_x.row(k * l + i) = row.transpose();
      else ep.query_x.row(k * m + (i - l)) = row.transpose();
    }
  }
  if (cfg.domain_shift) {
    ep.support_x = apply_domain_shift(ep.support_x, *cfg.domain_shift);
    ep.query_x = apply_domain_shift(ep.query_x, *cfg.domain_shift);
  }
  ep.support_y = one_hot_blocks(c, l);
  ep.query_y = one_hot_blocks(c, m);
  return ep;
}

// ---------------------------------------------------------------------------
// Labelled row datasets with class-disjoint splits.
// ---------------------------------------------------------------------------

struct SplitSpec {
  std::vector<int> train;
  std::vector<int> validation;
  std::vector<int> test;
};

class DatasetSource {
 public:
  DatasetSource(Mat x, std::vector<int> labels, SplitSpec split)
      : x_(std::move(x)), labels_(std::move(labels)), split_(std::move(split)) {
    if (static_cast<Index>(labels_.size()) != x_.rows()) throw DimensionMismatch("dataset: label count");
    for (int y : labels_)
      if (y < 0) throw InvalidArgument("dataset labels must be nonnegative");
    const std::vector<int>* parts[] = {&split_.train, &split_.validation, &split_.test};
    std::set<int> seen;
    for (const auto* p : parts) {
      std::set<int> local(p->begin(), p->end());
      if (local.size() != p->size()) throw OverlappingSplits("duplicate class id inside one split");
      for (int id : local)
        if (!seen.insert(id).second) throw OverlappingSplits("class " + std::to_string(id) + " appears in two splits");
    }
  }

  const Mat& features() const { return x_; }
  const std::vector<int>& labels() const { return labels_; }
  const SplitSpec& split() const { return split_; }

  const std::vector<int>& classes(std::string_view name) const {
    if (name == "train") return split_.train;
    if (name == "validation" || name == "val") return split_.validation;
    if (name == "test") return split_.test;
    throw InvalidArgument("unknown split '" + std::string(name) + "'");
  }

  std::vector<Index> rows_of(int label) const {
    std::vector<Index> rows;
    for (std::size_t i = 0; i < labels_.size(); ++i)
      if (labels_[i] == label) rows.push_back(static_cast<Index>(i));
    return rows;
  }

 private:
  Mat x_;
  std::vector<int> labels_;
  SplitSpec split_;
};

/// Draws C classes of the split without replacement, then L + M rows of each
/// without replacement. Classes are relabelled 0..C-1 in the order drawn.
/// `drawn` receives the original class ids when non-null.
inline Episode sample_episode_from_dataset(const DatasetSource& src, std::string_view split, int ways,
                                           int shots, int queries, std::uint64_t seed,
                                           std::vector<int>* drawn = nullptr) {
  if (ways < 1 || shots < 1 || queries < 0) throw InvalidArgument("episode counts must be positive");
  std::vector<int> pool = src.classes(split);
  if (static_cast<int>(pool.size()) < ways)
    throw InsufficientClasses("split '" + std::string(split) + "' has " + std::to_string(pool.size()) +
                              " classes, need " + std::to_string(ways));
  std::sort(pool.begin(), pool.end());
  Rng rng(derive_seed(seed, {0xda7aULL}));
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(ways);

  const Index d = src.features().cols();
  Episode ep;
  ep.ways = ways;
  ep.shots = shots;
  ep.queries = queries;
  ep.support_x.resize(ways * shots, d);
  ep.query_x.resize(ways * queries, d);
  for (int k = 0; k < ways; ++k) {
    std::vector<Index> rows = src.rows_of(pool[k]);
    if (static_cast<int>(rows.size()) < shots + queries)
      throw InsufficientRows("class " + std::to_string(pool[k]) + " has " + std::to_string(rows.size()) +
                             " rows, need " + std::to_string(shots + queries));
    std::shuffle(rows.begin(), rows.end(), rng);
    for (int i = 0; i < shots; ++i) ep.support_x.row(k * shots + i) = src.features().row(rows[i]);
    for (int i = 0; i < queries; ++i) ep.query_x.row(k * queries + i) = src.features().row(rows[shots + i]);
  }
  ep.support_y = one_hot_blocks(ways, shots);
  ep.query_y = one_hot_blocks(ways, queries);
  if (drawn) *drawn = pool;
  return ep;
}

namespace detail {

inline std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s, long line) {
  if (s.empty()) throw ParseError("empty field", line);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || !std::isfinite(v)) throw ParseError("bad number '" + s + "'", line);
  return v;
}

inline int parse_label(const std::string& s, long line) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
    throw ParseError("label must be a nonnegative integer, got '" + s + "'", line);
  try {
    return std::stoi(s);
  } catch (const std::out_of_range&) {
    throw ParseError("label out of range '" + s + "'", line);
  }
}

}  // namespace detail

/// Parses `f0,...,f{D-1},label` rows. Line numbers in errors are 1-based and
/// count the header.
inline DatasetSource parse_csv_dataset(std::istream& in, const SplitSpec& split) {
  std::string line;
  long lineno = 0;
  if (!std::getline(in, line)) throw ParseError("missing header", 1);
  ++lineno;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::vector<std::string> header = detail::split_commas(line);
  if (header.size() < 2 || header.back() != "label") throw ParseError("header must end with 'label'", lineno);
  const std::size_t d = header.size() - 1;
  for (std::size_t j = 0; j < d; ++j)
    if (header[j] != "f" + std::to_string(j)) throw ParseError("header column " + std::to_string(j) + " must be f" + std::to_string(j), lineno);

  std::vector<double> values;
  std::vector<int> labels;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> cells = detail::split_commas(line);
    if (cells.size() != d + 1)
      throw ParseError("expected " + std::to_string(d + 1) + " fields, got " + std::to_string(cells.size()), lineno);
    for (std::size_t j = 0; j < d; ++j) values.push_back(detail::parse_double(cells[j], lineno));
    labels.push_back(detail::parse_label(cells[d], lineno));
  }
  if (labels.empty()) throw ParseError("no data rows", lineno);
  Mat x(static_cast<Index>(labels.size()), static_cast<Index>(d));
  for (Index i = 0; i < x.rows(); ++i)
    for (Index j = 0; j < x.cols(); ++j) x(i, j) = values[static_cast<std::size_t>(i) * d + j];
  return DatasetSource(std::move(x), std::move(labels), split);
}

inline DatasetSource load_csv_dataset(const std::string& path, const SplitSpec& split) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open dataset '" + path + "'");
  return parse_csv_dataset(in, split);
}

/// Writes rows with 17 significant digits so that reloading is exact.
inline void write_csv_dataset(std::ostream& out, const Mat& x, const std::vector<int>& labels) {
  if (static_cast<Index>(labels.size()) != x.rows()) throw DimensionMismatch("write_csv_dataset: label count");
  for (Index j = 0; j < x.cols(); ++j) out << 'f' << j << ',';
  out << "label\n";
  char buf[32];
  for (Index i = 0; i < x.rows(); ++i) {
    for (Index j = 0; j < x.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", x(i, j));
      out << buf << ',';
    }
    out << labels[static_cast<std::size_t>(i)] << '\n';
  }
}

inline void write_csv_dataset(const std::string& path, const Mat& x, const std::vector<int>& labels) {
  std::ofstream out(path);
  if (!out) throw InvalidArgument("cannot write '" + path + "'");
  write_csv_dataset(out, x, labels);
}

/// Support and query rows of an episode stacked, with integer labels.
inline std::pair<Mat, std::vector<int>> episode_pool(const Episode& ep) {
  Mat x(ep.support_x.rows() + ep.query_x.rows(), ep.dim());
  x << ep.support_x, ep.query_x;
  std::vector<int> labels;
  for (Index r = 0; r < ep.support_x.rows(); ++r) labels.push_back(static_cast<int>(r / ep.shots));
  for (Index r = 0; r < ep.query_x.rows(); ++r) labels.push_back(static_cast<int>(r / ep.queries));
  return {std::move(x), std::move(labels)};
}

}  // namespace mdgp

#endif  // MDGP_TASKS_HPP
