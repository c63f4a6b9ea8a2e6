#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "traceform/dataset.hpp"
#include "traceform/encoders.hpp"
#include "traceform/model.hpp"
#include "traceform/pretrain.hpp"

namespace traceform {

enum class Task { similar_component, referring_expression, icon_cls, app_type_cls, link_component };

const char* task_name(Task task);
Task parse_task(const std::string& name);  // throws ConfigError

struct TaskSpec {
  Task task = Task::icon_cls;
  int num_classes = 0;  // classification tasks only
  bool macro_f1 = false;

  static TaskSpec make(Task task, const GeneratorConfig& corpus_config);
  bool is_classification() const { return task == Task::icon_cls || task == Task::app_type_cls; }
};

/// One downstream example. Icon examples cover every leaf of a screen; the others pick one answer.
struct TaskExample {
  std::uint64_t id = 0;
  const ScreenFeatures* a = nullptr;
  const ScreenFeatures* b = nullptr;
  int anchor = -1;           // similar_component: leaf of `a`
  std::vector<int> answers;  // accepted leaves (of `b` for similar_component, of `a` otherwise)
  int label = -1;            // app_type_cls
  std::vector<int> labels;   // icon_cls, per leaf of `a`
  std::string query;         // referring_expression
};

struct TaskData {
  std::vector<TaskExample> train, dev, test;
};

struct TaskDataLimits {
  std::size_t train = 5000;
  std::size_t eval = 600;
  std::uint64_t seed = 9;
};

/// Builds app-disjoint task examples using the dataset split. Link examples come from the
/// positive pairs of each shard, similar pairs from the corpus annotations.
TaskData build_task_data(Task task, const Corpus& corpus, const Dataset& dataset, const ScreenStore& store,
                         TaskDataLimits limits = {});

/// Output rows at each leaf's VISION token, in leaf order (-1 rows are absent leaves).
std::vector<ag::Matrix<float>> component_embeddings(const ag::Matrix<float>& outputs, const TokenSequence& seq, int ui);

/// Argmax of dot products; ties go to the lowest index. Throws DataError on no candidates.
int retrieve_by_dot_product(const ag::Matrix<float>& anchor, const std::vector<ag::Matrix<float>>& candidates);

/// Single-UI layout plus one TEXT token holding the expression.
TokenSequence format_referring_task(const std::string& expression, const ScreenFeatures& screen, int max_len);

/// Softmax of a linear head (weight hidden x K, bias 1 x K) applied to one embedding row.
std::vector<double> class_probabilities(const ag::Matrix<float>& embedding, const ag::Matrix<float>& weight,
                                        const ag::Matrix<float>& bias);
int classify_component(const ag::Matrix<float>& embedding, const ag::Matrix<float>& weight, const ag::Matrix<float>& bias);
int classify_screen(const ag::Matrix<float>& cls_embedding, const ag::Matrix<float>& weight, const ag::Matrix<float>& bias);

double micro_accuracy(const std::vector<int>& truth, const std::vector<int>& predicted);
/// Unweighted mean of per-class F1 over classes occurring in truth or predictions.
double macro_f1(const std::vector<int>& truth, const std::vector<int>& predicted);

struct FinetuneConfig {
  int epochs = 6;
  int batch = 16;
  AdamConfig adam{};
  std::uint64_t seed = 11;  // head init, shuffling and dropout
  bool random_init = false;
  std::uint64_t init_seed = 4;  // used with random_init
  int threads = 1;
};

struct TaskMetrics {
  std::string task, split, init_mode;
  double micro_accuracy = 0;
  std::optional<double> macro_f1;
  std::size_t n_examples = 0;
  double chance_accuracy = 0;
  std::uint64_t seed = 0;
  nlohmann::json to_json() const;
};

/// Adds the task head if missing: heads.icon / heads.app_type. Selection tasks reuse heads.lcp.
void prepare_task_model(Model<float>& model, const TaskSpec& spec, std::uint64_t seed);

/// Per-example loss on the tape (used by fine-tuning and gradient checks).
ag::Var task_loss(ag::Tape<float>& t, const Model<float>& model, const TaskSpec& spec, const TaskExample& ex,
                  const Dropout& drop);

/// Joint fine-tuning of every parameter on `train`.
void finetune_task(Model<float>& model, const TaskSpec& spec, const std::vector<TaskExample>& train,
                   const FinetuneConfig& cfg);

TaskMetrics evaluate_task(const Model<float>& model, const TaskSpec& spec, const std::vector<TaskExample>& examples,
                          const std::string& split, int threads);

/// Fine-tunes from `pretrained` (or from random init when cfg.random_init) and reports on test.
TaskMetrics eval_task(const TaskSpec& spec, const Model<float>* pretrained, const TaskData& data,
                      const FinetuneConfig& cfg, Model<float>* tuned_out = nullptr);

}  // namespace traceform
