#pragma once

// Export of the EVE text-image attention mask: a JSON record with the
// weights and their geometry, and for grid features a grayscale PGM.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "vekit/dataset.hpp"
#include "vekit/image_features.hpp"
#include "vekit/models.hpp"
#include "vekit/text_encoder.hpp"

namespace vekit {

struct AttentionExport {
  std::string image_id;
  std::string hypothesis;
  Label predicted = Label::neutral;
  std::vector<real> weights;
  FeatureKind kind = FeatureKind::grid;
  std::size_t grid_d = 0;
  std::vector<Box> boxes;

  json to_json() const {
    json j;
    j["image_id"] = image_id;
    j["hypothesis"] = hypothesis;
    j["predicted_label"] = std::string(to_string(predicted));
    j["weights"] = weights;
    if (kind == FeatureKind::grid) {
      j["grid"] = {grid_d, grid_d};
    } else {
      json boxes_json = json::array();
      for (const auto& b : boxes) boxes_json.push_back({b.x1, b.y1, b.x2, b.y2});
      j["boxes"] = boxes_json;
    }
    return j;
  }
};

/// Runs the EVE forward pass on one hypothesis and captures the 1 x M mask.
inline AttentionExport export_attention(const ModelParams& p, const FeatureSet& features,
                                        const std::string& hypothesis, const Vocabulary& vocab) {
  if (!is_eve(p.arch())) {
    throw ConfigError("attention export needs an eve-image or eve-roi checkpoint, got " +
                      std::string(to_string(p.arch())));
  }
  const auto tokens = tokenize(hypothesis);
  const auto ids = vocab.encode(tokens);
  Graph g;
  g.set_grad_enabled(false);
  const auto out = forward_eve(g, features, ids, p);
  const auto& z = out.logits.value();
  std::size_t pred = 0;
  for (std::size_t j = 1; j < num_classes; ++j) {
    if (z.data[j] > z.data[pred]) pred = j;
  }
  AttentionExport e;
  e.image_id = features.image_id;
  e.hypothesis = hypothesis;
  e.predicted = static_cast<Label>(pred);
  e.weights = out.attention.value().data;
  e.kind = features.kind;
  e.grid_d = features.grid_d;
  e.boxes = features.boxes;
  return e;
}

/// Weights min-max scaled to 0..255. A constant map has no range to
/// stretch: a single cell saturates, several equal cells become mid-gray.
inline std::vector<int> heatmap_intensities(const std::vector<real>& weights) {
  std::vector<int> out(weights.size());
  if (weights.empty()) return out;
  const auto [lo, hi] = std::minmax_element(weights.begin(), weights.end());
  const real range = *hi - *lo;
  if (!(range > 0)) {
    std::fill(out.begin(), out.end(), weights.size() == 1 ? 255 : 128);
    return out;
  }
  for (std::size_t i = 0; i < weights.size(); ++i) {
    out[i] = static_cast<int>(std::lround(255.0 * static_cast<double>((weights[i] - *lo) / range)));
  }
  return out;
}

/// Plain (P2) PGM of a d x d weight grid, row-major like the grid objects.
inline std::string attention_pgm(const std::vector<real>& weights, std::size_t d) {
  if (d == 0 || weights.size() != d * d) {
    throw DimensionError("attention_pgm: " + std::to_string(weights.size()) + " weights do not form a " +
                         std::to_string(d) + "x" + std::to_string(d) + " grid");
  }
  const auto px = heatmap_intensities(weights);
  std::string s = "P2\n" + std::to_string(d) + " " + std::to_string(d) + "\n255\n";
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      if (j) s += ' ';
      s += std::to_string(px[i * d + j]);
    }
    s += '\n';
  }
  return s;
}

/// Writes <prefix>.json and, for grid features, <prefix>.pgm.
inline std::vector<std::string> write_attention(const AttentionExport& e, const std::string& prefix) {
  std::vector<std::string> written;
  const auto json_path = prefix + ".json";
  {
    std::ofstream out(json_path, std::ios::trunc);
    if (!out) throw Error("cannot write " + json_path);
    out << e.to_json().dump(2) << '\n';
  }
  written.push_back(json_path);
  if (e.kind == FeatureKind::grid) {
    const auto pgm_path = prefix + ".pgm";
    std::ofstream out(pgm_path, std::ios::trunc);
    if (!out) throw Error("cannot write " + pgm_path);
    out << attention_pgm(e.weights, e.grid_d);
    written.push_back(pgm_path);
  }
  return written;
}

}  // namespace vekit
