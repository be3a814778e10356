#ifndef MDGP_CHECKPOINT_HPP
#define MDGP_CHECKPOINT_HPP

#include <fstream>
#include <string>

#include <json.hpp>

#include "mdgp/error.hpp"
#include "mdgp/kernels.hpp"

namespace mdgp {

inline constexpr int kCheckpointFormat = 1;

// Layout:
//   {"format_version": 1,
//    "kernel": {"jitter": j,
//               "layers": [{"shape": [out, in], "weight": [row-major], "bias": [...]}, ...],
//               "base": [{"kind": "cos", "length_scale_raw": ., "offset_raw": ., "output_scale_raw": .}, ...]},
//    "config": {...}}

inline nlohmann::json kernel_to_json(const DeepKernel& k) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : k.extractor.layers()) {
    std::vector<double> w;
    w.reserve(static_cast<std::size_t>(l.weight.size()));
    for (Index i = 0; i < l.weight.rows(); ++i)
      for (Index j = 0; j < l.weight.cols(); ++j) w.push_back(l.weight(i, j));
    std::vector<double> b(l.bias.data(), l.bias.data() + l.bias.size());
    layers.push_back({{"shape", {l.weight.rows(), l.weight.cols()}}, {"weight", w}, {"bias", b}});
  }
  nlohmann::json base = nlohmann::json::array();
  for (const auto& b : k.base) {
    base.push_back({{"kind", std::string(to_string(b.kind))},
                    {"length_scale_raw", b.length_scale_raw},
                    {"offset_raw", b.offset_raw},
                    {"output_scale_raw", b.output_scale_raw}});
  }
  return {{"jitter", k.jitter}, {"layers", layers}, {"base", base}};
}

inline DeepKernel kernel_from_json(const nlohmann::json& j) {
  try {
    DeepKernel k;
    k.jitter = j.at("jitter").get<double>();
    std::vector<DenseLayer> layers;
    for (const auto& l : j.at("layers")) {
      const auto shape = l.at("shape").get<std::vector<Index>>();
      if (shape.size() != 2) throw ParseError("layer shape must have two entries", 0);
      const auto w = l.at("weight").get<std::vector<double>>();
      const auto b = l.at("bias").get<std::vector<double>>();
      if (static_cast<Index>(w.size()) != shape[0] * shape[1] || static_cast<Index>(b.size()) != shape[0])
        throw ParseError("layer data does not match its shape", 0);
      DenseLayer layer{Mat(shape[0], shape[1]), Vec(shape[0])};
      for (Index r = 0; r < shape[0]; ++r)
        for (Index c = 0; c < shape[1]; ++c) layer.weight(r, c) = w[static_cast<std::size_t>(r * shape[1] + c)];
      for (Index r = 0; r < shape[0]; ++r) layer.bias(r) = b[static_cast<std::size_t>(r)];
      layers.push_back(std::move(layer));
    }
    k.extractor = FeatureExtractor(std::move(layers));
    for (const auto& b : j.at("base")) {
      BaseKernelConfig cfg;
      cfg.kind = kernel_kind_from_string(b.at("kind").get<std::string>());
      cfg.length_scale_raw = b.at("length_scale_raw").get<double>();
      cfg.offset_raw = b.at("offset_raw").get<double>();
      cfg.output_scale_raw = b.at("output_scale_raw").get<double>();
      k.base.push_back(cfg);
    }
    k.validate();
    return k;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed kernel JSON: ") + e.what(), 0);
  }
}

inline void save_checkpoint(const std::string& path, const DeepKernel& k, const nlohmann::json& config) {
  const nlohmann::json doc{{"format_version", kCheckpointFormat}, {"kernel", kernel_to_json(k)}, {"config", config}};
  std::ofstream out(path);
  if (!out) throw InvalidArgument("cannot write checkpoint '" + path + "'");
  out << doc.dump(2) << '\n';
}

inline DeepKernel load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open checkpoint '" + path + "'");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("checkpoint is not valid JSON: ") + e.what(), 0);
  }
  if (!doc.contains("format_version") || doc.at("format_version") != kCheckpointFormat)
    throw ParseError("unsupported checkpoint format_version", 0);
  return kernel_from_json(doc.at("kernel"));
}

}  // namespace mdgp

#endif  // MDGP_CHECKPOINT_HPP
