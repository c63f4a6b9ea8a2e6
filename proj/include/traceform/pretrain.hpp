#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "traceform/autograd.hpp"
#include "traceform/dataset.hpp"
#include "traceform/encoders.hpp"
#include "traceform/model.hpp"
#include "traceform/transformer.hpp"

namespace traceform {

struct LossWeights {
  double lambda_cui = 0.1;
  double lambda_mask = 0.01;
  void validate() const;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-7;
  /// Rate 1e-5 with batch 128.
  static AdamConfig paper() { return AdamConfig{1e-5, 0.9, 0.999, 1e-7}; }
};

/// hidden -> hidden -> out with GELU; returns an n x out column of logits.
template <typename T>
ag::Var mlp_head(ag::Tape<T>& t, ag::Var x, const MlpHead& head);

template <typename T>
struct LcpResult {
  ag::Var loss;        // exactly 0 without a link target
  int predicted = -1;  // token index of the best-scoring candidate
};

/// Softmax over every TEXT and VISION token that comes from a leaf, on either UI.
template <typename T>
LcpResult<T> lcp_loss(ag::Tape<T>& t, ag::Var outputs, const TokenSequence& seq, const MlpHead& head);

template <typename T>
struct CuiResult {
  ag::Var loss;
  double probability = 0;
};

/// Sigmoid of the head applied to the [CLS] row, binary cross-entropy against the label.
template <typename T>
CuiResult<T> cui_loss(ag::Tape<T>& t, ag::Var outputs, const TokenSequence& seq, const MlpHead& head);

/// Targets for every masked TEXT token: the current text encoding of the original sentence, as a
/// constant (no gradient), mapped through the frozen adapter when D_t differs from hidden.
template <typename T>
std::vector<std::pair<int, ag::Matrix<T>>> mask_targets(const Model<T>& model, const TokenSequence& seq);

/// Sum of squared L2 distances between output rows and targets at masked positions.
template <typename T>
ag::Var mask_loss(ag::Tape<T>& t, ag::Var outputs, const TokenSequence& seq,
                  const std::vector<std::pair<int, ag::Matrix<T>>>& targets);

double total_loss(double l_lcp, double l_cui, double l_mask, const LossWeights& w);

template <typename T>
struct SampleOutcome {
  ag::Var total, lcp, cui, mask;
  int lcp_predicted = -1;
  double cui_probability = 0;
};

/// Full forward pass of one pre-training sequence, recorded on `t`.
template <typename T>
SampleOutcome<T> pretrain_forward(ag::Tape<T>& t, const Model<T>& model, const TokenSequence& seq,
                                  const LossWeights& w, const Dropout& drop);

struct StepMetrics {
  std::int64_t step = 0;
  double loss_total = 0, loss_lcp = 0, loss_cui = 0, loss_mask = 0;
  double acc_lcp = 0, acc_cui = 0;
  std::size_t lcp_count = 0, cui_count = 0;
  nlohmann::json to_json() const;
};

/// Per-thread gradient buffers plus the Adam update. Gradients of a batch are reduced in
/// chunk order, so results depend on the thread count but not on scheduling.
class Trainer {
 public:
  Trainer(Model<float>& model, OptimizerState& state, AdamConfig adam, LossWeights weights, int threads);

  /// One averaged update over `batch`; `ids` key the dropout masks. Throws NumericError on NaN.
  StepMetrics step(const std::vector<const TokenSequence*>& batch, const std::vector<std::uint64_t>& ids,
                   std::uint64_t dropout_seed);

  /// Generic variant for task losses: `loss_fn` records a per-example loss on the tape.
  using LossFn = std::function<ag::Var(ag::Tape<float>&, std::size_t index, const Dropout&)>;
  double step_with(std::size_t batch_size, const LossFn& loss_fn, const std::vector<std::uint64_t>& ids,
                   std::uint64_t dropout_seed);

  void adam_update();

 private:
  Model<float>& model_;
  OptimizerState& state_;
  AdamConfig adam_;
  LossWeights weights_;
  int threads_;
  std::vector<ag::ParamSet<float>> grads_;
};

/// Fresh zeroed moments for `model`.
OptimizerState make_optimizer_state(const Model<float>& model);
/// Grows an optimizer state with zero moments for tensors added after it was created.
void sync_optimizer_state(const Model<float>& model, OptimizerState& state);

/// Sequence for a stored pair: ui_a / ui_b features, cui label, link component and mask flags.
SequenceInput pair_input(const PairSample& p, const ScreenStore& store, int max_len);

struct PretrainConfig {
  ModelConfig model;
  LossWeights weights;
  AdamConfig adam;
  int batch = 32;
  std::int64_t steps = 6000;
  int log_every = 100;
  std::int64_t checkpoint_every = 0;  // 0: only the final checkpoint
  std::uint64_t init_seed = 4;
  std::uint64_t train_seed = 5;
  bool remask_each_epoch = false;
  double mask_rate = 0.15;
  int threads = 1;
};

struct EvalMetrics {
  double acc_lcp = 0;
  double acc_cui = 0;
  double chance_lcp = 0;  // mean of 1 / candidate count over samples with a link target
  std::size_t lcp_count = 0;
  std::size_t cui_count = 0;
  double loss_total = 0;
  nlohmann::json to_json() const;
};

/// Dropout-free evaluation of LCP and CUI.
EvalMetrics evaluate_pretrain(const Model<float>& model, const std::vector<PairSample>& pairs,
                              const ScreenStore& store, const LossWeights& w, int threads);

/// Training loop: epochs of shuffled pairs, JSON metrics lines to `metrics`, checkpoints.
/// `checkpoint_dir` may be empty to skip checkpointing.
Checkpoint pretrain(const PretrainConfig& cfg, const std::vector<PairSample>& train, const ScreenStore& store,
                    std::ostream* metrics, const std::filesystem::path& checkpoint_dir,
                    std::optional<Checkpoint> resume = std::nullopt);

}  // namespace traceform
