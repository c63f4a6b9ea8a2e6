#pragma once

#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "traceform/image.hpp"
#include "traceform/synth.hpp"
#include "traceform/vh.hpp"

namespace traceform {

inline constexpr int kVisionSide = 16;
inline constexpr int kVisionInput = kVisionSide * kVisionSide * 3;  // 768

/// Sorted (bucket, weight) pairs with unit L2 norm, or empty.
using SparseVector = std::vector<std::pair<int, float>>;

/// Bag of whitespace tokens hashed with FNV-1a 64 into `buckets` counts, then L2-normalised.
SparseVector text_buckets(std::string_view sentence, int buckets);

/// Bilinear resize to 16x16 (pixel-centre sampling), channels scaled to [0, 1], flattened HWC.
std::vector<float> vision_features(const Image& crop);

/// Everything the model reads about one screen, precomputed once per unique screen.
struct ScreenFeatures {
  std::string screen_id;
  std::string app_id;
  int width = 0;
  int height = 0;
  std::vector<LeafNode> leaves;
  std::vector<std::string> sentences;
  std::vector<SparseVector> bags;  // hashed with `buckets`
  int buckets = 0;
  std::vector<PositionalFeatures> positions;
  std::vector<float> whole_vision;
  std::vector<std::vector<float>> leaf_vision;

  // Downstream labels; empty when the corpus carries none.
  int app_type = -1;
  std::vector<int> icon_classes;
  std::vector<int> function_labels;
  std::vector<ReferringExpression> referring;

  std::size_t leaf_count() const { return leaves.size(); }
};

/// Builds features from a screen with its raster loaded.
ScreenFeatures compute_screen_features(const Screen& screen, int buckets);

}  // namespace traceform
