#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "traceform/autograd.hpp"
#include "traceform/features.hpp"

namespace traceform {

inline constexpr int kPositionalDim = 9;
inline constexpr int kSegmentCount = 5;

struct ModelConfig {
  int layers = 2;
  int heads = 2;
  int hidden = 64;
  int ffn_mult = 4;
  int max_len = 128;
  double dropout = 0.1;
  int text_buckets = 4096;
  int text_dim = 64;    // D_t
  int vision_dim = 64;  // D_v

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);

  /// 6 or 12 layers, 6 heads, hidden 768.
  static ModelConfig paper_base();
  static ModelConfig paper_large();
};

struct Projection {
  int weight = -1;
  int bias = -1;
};

struct Norm {
  int gain = -1;
  int offset = -1;
};

/// Linear map into the hidden size followed by layer norm, one per input stream.
struct StreamFusion {
  Projection proj;
  Norm norm;
};

struct LayerLayout {
  Norm attn_norm;
  Projection query, key, value, output;
  Norm ffn_norm;
  Projection ffn_in, ffn_out;
};

struct MlpHead {
  Projection fc1, fc2;  // hidden -> hidden -> out
};

/// Tensor indices into the ParamSet. Text tables: buckets (B x D_t), special rows
/// [CLS, SEP, END, NO_TEXT] (4 x D_t), mask (1 x D_t).
struct ModelLayout {
  int text_buckets = -1;
  int text_special = -1;
  int text_mask = -1;
  Projection vision;
  int vision_img = -1;
  StreamFusion text_stream, vision_stream, position_stream, segment_stream;
  std::vector<LayerLayout> layers;
  Norm final_norm;
  MlpHead lcp, cui;
  int mask_adapter = -1;  // frozen, present only when D_t != hidden
};

enum class SpecialRow : int { cls = 0, sep = 1, end = 2, no_text = 3 };

/// Parameters are float for training and double for gradient checks.
template <typename T>
struct Model {
  ModelConfig config;
  ModelLayout layout;
  ag::ParamSet<T> params;

  template <typename U>
  Model<U> cast() const {
    return Model<U>{config, layout, params.template cast<U>()};
  }
};

/// Glorot-uniform weights (bound sqrt(6 / (fan_in + fan_out))), zero biases, unit gains.
/// Each tensor draws from its own stream keyed by (seed, tensor name).
template <typename T>
Model<T> init_params(const ModelConfig& cfg, std::uint64_t seed);

/// Rebuilds tensor indices from names, for parameter sets loaded from disk.
ModelLayout layout_from_names(const ModelConfig& cfg, const std::vector<std::string>& names);

/// Adds a Glorot-initialised (in x out) linear head named `prefix`.weight/.bias if absent.
template <typename T>
Projection ensure_linear_head(Model<T>& model, const std::string& prefix, int in, int out, std::uint64_t seed);

/// Frozen tensors are excluded from optimisation.
bool is_frozen(const std::string& name);

double glorot_bound(Eigen::Index fan_in, Eigen::Index fan_out);

/// Inverted dropout with masks keyed by (seed, key, site), so reruns draw identical masks.
struct Dropout {
  double rate = 0;
  std::uint64_t seed = 0;
  std::uint64_t key = 0;
  bool active() const { return rate > 0; }
};

template <typename T>
ag::Var dropout(ag::Tape<T>& t, ag::Var x, const Dropout& d, int site);

}  // namespace traceform
