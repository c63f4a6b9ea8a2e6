#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "traceform/autograd.hpp"
#include "traceform/encoders.hpp"
#include "traceform/model.hpp"

namespace traceform {

/// Pre-norm encoder stack followed by a final layer norm. PAD rows of the output are zero.
/// Throws NumericError on non-finite input.
template <typename T>
ag::Var encode(ag::Tape<T>& t, const Model<T>& model, ag::Var x, const std::vector<bool>& attention_mask,
               const Dropout& drop);

/// Gradient-free convenience: fuse then encode, L x hidden.
template <typename T>
ag::Matrix<T> contextual_embeddings(const Model<T>& model, const TokenSequence& seq);

inline constexpr int kCheckpointFormatVersion = 1;

/// Adam moments travel with the parameters so training can resume.
struct OptimizerState {
  ag::ParamSet<float> m, v;
  std::int64_t step = 0;
};

struct Checkpoint {
  Model<float> model;
  OptimizerState optimizer;
  bool has_optimizer = false;
  nlohmann::json lineage = nlohmann::json::object();  // seeds and provenance of the run
};

/// Writes manifest.json plus tensors/<name>.f32 (little-endian float32, row-major).
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace traceform
