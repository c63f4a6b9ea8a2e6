#include "traceform/features.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>

#include "traceform/errors.hpp"
#include "traceform/hash.hpp"

namespace traceform {

SparseVector text_buckets(std::string_view sentence, int buckets) {
  if (buckets <= 0) throw ConfigError("text bucket count must be positive");
  std::map<int, float> counts;
  std::size_t i = 0;
  while (i < sentence.size()) {
    while (i < sentence.size() && std::isspace(static_cast<unsigned char>(sentence[i]))) ++i;
    std::size_t j = i;
    while (j < sentence.size() && !std::isspace(static_cast<unsigned char>(sentence[j]))) ++j;
    if (j > i) {
      const auto b = static_cast<int>(fnv1a64(sentence.substr(i, j - i)) % static_cast<std::uint64_t>(buckets));
      counts[b] += 1.0f;
    }
    i = j;
  }
  double norm = 0;
  for (const auto& [b, c] : counts) norm += static_cast<double>(c) * c;
  SparseVector out;
  if (norm == 0) return out;
  const double inv = 1.0 / std::sqrt(norm);
  out.reserve(counts.size());
  for (const auto& [b, c] : counts) out.emplace_back(b, static_cast<float>(c * inv));
  return out;
}

std::vector<float> vision_features(const Image& crop) {
  if (crop.empty()) throw DataError("vision crop has zero area");
  std::vector<float> out(static_cast<std::size_t>(kVisionInput));
  const double sx = static_cast<double>(crop.width) / kVisionSide;
  const double sy = static_cast<double>(crop.height) / kVisionSide;
  for (int oy = 0; oy < kVisionSide; ++oy) {
    const double fy = std::clamp((oy + 0.5) * sy - 0.5, 0.0, static_cast<double>(crop.height - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, crop.height - 1);
    const double wy = fy - y0;
    for (int ox = 0; ox < kVisionSide; ++ox) {
      const double fx = std::clamp((ox + 0.5) * sx - 0.5, 0.0, static_cast<double>(crop.width - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, crop.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double top = crop.at(x0, y0)[c] * (1 - wx) + crop.at(x1, y0)[c] * wx;
        const double bot = crop.at(x0, y1)[c] * (1 - wx) + crop.at(x1, y1)[c] * wx;
        out[static_cast<std::size_t>((oy * kVisionSide + ox) * 3 + c)] =
            static_cast<float>((top * (1 - wy) + bot * wy) / 255.0);
      }
    }
  }
  return out;
}

ScreenFeatures compute_screen_features(const Screen& screen, int buckets) {
  if (screen.raster.empty()) throw DataError("screen " + screen.screen_id + " has no raster loaded");
  if (screen.raster.width != screen.width || screen.raster.height != screen.height) {
    throw DataError("raster size disagrees with screen " + screen.screen_id);
  }
  ScreenFeatures f;
  f.screen_id = screen.screen_id;
  f.app_id = screen.app_id;
  f.width = screen.width;
  f.height = screen.height;
  f.leaves = extract_leaves(screen.vh);
  f.buckets = buckets;
  f.whole_vision = vision_features(screen.raster);
  for (const auto& leaf : f.leaves) {
    const BoundingBox& b = leaf.bounds;
    f.sentences.push_back(leaf_sentence(leaf));
    f.bags.push_back(text_buckets(f.sentences.back(), buckets));
    f.positions.push_back(positional_features(b, screen.width, screen.height));
    f.leaf_vision.push_back(vision_features(crop(screen.raster, b.x_min, b.y_min, b.x_max, b.y_max)));
  }
  return f;
}

}  // namespace traceform
