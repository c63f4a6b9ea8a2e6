#include "traceform/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "traceform/errors.hpp"
#include "traceform/parallel.hpp"
#include "traceform/rng.hpp"
#include "traceform/transformer.hpp"

namespace traceform {

using ag::Matrix;
using ag::Var;
using nlohmann::json;

const char* task_name(Task task) {
  switch (task) {
    case Task::similar_component: return "similar_component";
    case Task::referring_expression: return "referring_expression";
    case Task::icon_cls: return "icon_cls";
    case Task::app_type_cls: return "app_type_cls";
    case Task::link_component: return "link_component";
  }
  return "?";
}

Task parse_task(const std::string& name) {
  for (Task t : {Task::similar_component, Task::referring_expression, Task::icon_cls, Task::app_type_cls,
                 Task::link_component}) {
    if (name == task_name(t)) return t;
  }
  if (name == "lcp") return Task::link_component;
  if (name == "icon") return Task::icon_cls;
  if (name == "app_type") return Task::app_type_cls;
  if (name == "referring") return Task::referring_expression;
  if (name == "similar") return Task::similar_component;
  throw ConfigError("unknown task '" + name + "'");
}

TaskSpec TaskSpec::make(Task task, const GeneratorConfig& corpus_config) {
  TaskSpec s;
  s.task = task;
  if (task == Task::icon_cls) s.num_classes = corpus_config.icon_classes;
  if (task == Task::app_type_cls) s.num_classes = corpus_config.app_type_count;
  s.macro_f1 = s.is_classification();
  return s;
}

// ---- task data ---------------------------------------------------------------

namespace {

void subsample(std::vector<TaskExample>& v, std::size_t limit, std::uint64_t seed, std::uint64_t key) {
  if (v.size() <= limit) return;
  std::vector<std::size_t> idx(v.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng::stream(seed, "task-subsample", key).shuffle(idx);
  idx.resize(limit);
  std::sort(idx.begin(), idx.end());
  std::vector<TaskExample> out;
  out.reserve(limit);
  for (std::size_t i : idx) out.push_back(std::move(v[i]));
  v = std::move(out);
}

}  // namespace

TaskData build_task_data(Task task, const Corpus& corpus, const Dataset& dataset, const ScreenStore& store,
                         TaskDataLimits limits) {
  std::map<std::string, int> split_of;
  for (const auto& a : dataset.split.train) split_of[a] = 0;
  for (const auto& a : dataset.split.dev) split_of[a] = 1;
  for (const auto& a : dataset.split.test) split_of[a] = 2;
  TaskData data;
  std::vector<TaskExample>* parts[3] = {&data.train, &data.dev, &data.test};
  auto part_of = [&](const std::string& app) -> std::vector<TaskExample>* {
    auto it = split_of.find(app);
    if (it == split_of.end()) throw DataError("app " + app + " is in no split");
    return parts[it->second];
  };

  switch (task) {
    case Task::icon_cls:
    case Task::app_type_cls:
    case Task::referring_expression:
      for (const auto& s : store.all()) {
        if (s.app_type < 0) continue;
        auto* dst = part_of(s.app_id);
        TaskExample ex;
        ex.a = &s;
        if (task == Task::icon_cls) {
          ex.labels = s.icon_classes;
          dst->push_back(std::move(ex));
        } else if (task == Task::app_type_cls) {
          ex.label = s.app_type;
          dst->push_back(std::move(ex));
        } else {
          for (const auto& r : s.referring) {
            TaskExample q = ex;
            q.query = r.expression;
            q.answers = {r.leaf};
            dst->push_back(std::move(q));
          }
        }
      }
      break;
    case Task::similar_component:
      for (const auto& app : corpus.apps) {
        std::map<std::tuple<int, int, int>, std::vector<int>> groups;
        for (const auto& p : app.labels.similar_pairs) groups[{p.screen_a, p.component_a, p.screen_b}].push_back(p.component_b);
        auto* dst = part_of(app.app_id);
        for (const auto& [key, comps] : groups) {
          const auto& [sa, ca, sb] = key;
          const std::string& ida = app.screen_ids.at(static_cast<std::size_t>(sa));
          const std::string& idb = app.screen_ids.at(static_cast<std::size_t>(sb));
          if (!store.contains(ida) || !store.contains(idb)) continue;
          TaskExample ex;
          ex.a = &store.at(ida);
          ex.b = &store.at(idb);
          ex.anchor = ca;
          ex.answers = comps;
          dst->push_back(std::move(ex));
        }
      }
      break;
    case Task::link_component: {
      const std::vector<PairSample>* pairs[3] = {&dataset.train, &dataset.dev, &dataset.test};
      for (int s = 0; s < 3; ++s) {
        for (const auto& p : *pairs[s]) {
          if (!p.label_consecutive || !p.link_component) continue;
          TaskExample ex;
          ex.a = &store.at(p.ui_a);
          ex.b = &store.at(p.ui_b);
          ex.answers = {*p.link_component};
          parts[s]->push_back(std::move(ex));
        }
      }
      break;
    }
  }
  subsample(data.train, limits.train, limits.seed, 0);
  subsample(data.dev, limits.eval, limits.seed, 1);
  subsample(data.test, limits.eval, limits.seed, 2);
  for (int s = 0; s < 3; ++s) {
    for (std::size_t i = 0; i < parts[s]->size(); ++i) (*parts[s])[i].id = (static_cast<std::uint64_t>(s) << 40) + i;
  }
  return data;
}

// ---- embeddings and heads ----------------------------------------------------

std::vector<Matrix<float>> component_embeddings(const Matrix<float>& outputs, const TokenSequence& seq, int ui) {
  const ScreenFeatures* s = seq.screens[ui];
  if (!s) return {};
  std::vector<Matrix<float>> out;
  for (std::size_t leaf = 0; leaf < s->leaf_count(); ++leaf) {
    const int tok = seq.token_of(TokenKind::vision, ui, static_cast<int>(leaf));
    if (tok < 0) continue;
    out.push_back(outputs.row(tok));
  }
  return out;
}

int retrieve_by_dot_product(const Matrix<float>& anchor, const std::vector<Matrix<float>>& candidates) {
  if (candidates.empty()) throw DataError("retrieval needs at least one candidate");
  int best = 0;
  double best_score = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (candidates[i].size() != anchor.size()) throw ConfigError("retrieval dimension mismatch");
    double score = 0;
    for (Eigen::Index k = 0; k < anchor.size(); ++k) {
      score += static_cast<double>(anchor.data()[k]) * static_cast<double>(candidates[i].data()[k]);
    }
    if (i == 0 || score > best_score) {
      best = static_cast<int>(i);
      best_score = score;
    }
  }
  return best;
}

TokenSequence format_referring_task(const std::string& expression, const ScreenFeatures& screen, int max_len) {
  if (expression.empty()) throw DataError("referring expression is empty");
  SequenceInput in;
  in.a = &screen;
  in.query = expression;
  in.max_len = max_len;
  return compose_sequence(in);
}

std::vector<double> class_probabilities(const Matrix<float>& embedding, const Matrix<float>& weight,
                                        const Matrix<float>& bias) {
  if (embedding.rows() != 1 || embedding.cols() != weight.rows() || bias.cols() != weight.cols()) {
    throw ConfigError("classification head dimension mismatch");
  }
  const Matrix<double> z = embedding.cast<double>() * weight.cast<double>() + bias.cast<double>();
  const double mx = z.maxCoeff();
  std::vector<double> p(static_cast<std::size_t>(z.cols()));
  double sum = 0;
  for (Eigen::Index k = 0; k < z.cols(); ++k) sum += (p[static_cast<std::size_t>(k)] = std::exp(z(0, k) - mx));
  for (double& v : p) v /= sum;
  return p;
}

int classify_component(const Matrix<float>& embedding, const Matrix<float>& weight, const Matrix<float>& bias) {
  const auto p = class_probabilities(embedding, weight, bias);
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

int classify_screen(const Matrix<float>& cls_embedding, const Matrix<float>& weight, const Matrix<float>& bias) {
  return classify_component(cls_embedding, weight, bias);
}

double micro_accuracy(const std::vector<int>& truth, const std::vector<int>& predicted) {
  if (truth.size() != predicted.size()) throw DataError("prediction count mismatch");
  if (truth.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += truth[i] == predicted[i];
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

double macro_f1(const std::vector<int>& truth, const std::vector<int>& predicted) {
  if (truth.size() != predicted.size()) throw DataError("prediction count mismatch");
  std::map<int, std::array<std::size_t, 3>> c;  // tp, fp, fn
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] == predicted[i]) {
      c[truth[i]][0]++;
    } else {
      c[predicted[i]][1]++;
      c[truth[i]][2]++;
    }
  }
  if (c.empty()) return 0.0;
  double sum = 0;
  for (const auto& [k, v] : c) {
    const double denom = 2.0 * static_cast<double>(v[0]) + static_cast<double>(v[1] + v[2]);
    sum += denom > 0 ? 2.0 * static_cast<double>(v[0]) / denom : 0.0;
  }
  return sum / static_cast<double>(c.size());
}

json TaskMetrics::to_json() const {
  return {{"task", task},
          {"split", split},
          {"micro_accuracy", micro_accuracy},
          {"macro_f1", macro_f1 ? json(*macro_f1) : json(nullptr)},
          {"n_examples", n_examples},
          {"chance_accuracy", chance_accuracy},
          {"init_mode", init_mode},
          {"seed", seed}};
}

// ---- task forward passes -----------------------------------------------------

namespace {

const char* head_prefix(Task task) { return task == Task::icon_cls ? "heads.icon" : "heads.app_type"; }

Projection head_of(const Model<float>& model, Task task) {
  const std::string p = head_prefix(task);
  if (!model.params.contains(p + ".weight")) throw ConfigError("model lacks the " + p + " head");
  return Projection{model.params.index(p + ".weight"), model.params.index(p + ".bias")};
}

TokenSequence task_sequence(const Model<float>& model, const TaskSpec& spec, const TaskExample& ex) {
  const int L = model.config.max_len;
  switch (spec.task) {
    case Task::referring_expression: return format_referring_task(ex.query, *ex.a, L);
    case Task::similar_component:
    case Task::link_component: {
      SequenceInput in;
      in.a = ex.a;
      in.b = ex.b;
      in.max_len = L;
      if (spec.task == Task::link_component) in.link_component = ex.answers.at(0);
      return compose_sequence(in);
    }
    case Task::icon_cls:
    case Task::app_type_cls: {
      SequenceInput in;
      in.a = ex.a;
      in.max_len = L;
      return compose_sequence(in);
    }
  }
  throw ConfigError("unknown task");
}

bool contains(const std::vector<int>& v, int x) { return std::find(v.begin(), v.end(), x) != v.end(); }

/// Token indices of leaf candidates for selection tasks, and which of them are correct.
struct Selection {
  std::vector<int> tokens;
  std::vector<int> correct;  // positions in `tokens`
};

Selection referring_selection(const TokenSequence& seq, const TaskExample& ex) {
  Selection s;
  for (int tok : seq.leaf_tokens()) {
    const Token& tk = seq.tokens[static_cast<std::size_t>(tok)];
    if (tk.ui != 0) continue;
    if (contains(ex.answers, tk.leaf)) s.correct.push_back(static_cast<int>(s.tokens.size()));
    s.tokens.push_back(tok);
  }
  return s;
}

Selection similar_selection(const TokenSequence& seq, const TaskExample& ex) {
  Selection s;
  for (std::size_t leaf = 0; leaf < ex.b->leaf_count(); ++leaf) {
    const int tok = seq.token_of(TokenKind::vision, 1, static_cast<int>(leaf));
    if (tok < 0) continue;
    if (contains(ex.answers, static_cast<int>(leaf))) s.correct.push_back(static_cast<int>(s.tokens.size()));
    s.tokens.push_back(tok);
  }
  return s;
}

}  // namespace

void prepare_task_model(Model<float>& model, const TaskSpec& spec, std::uint64_t seed) {
  if (spec.is_classification()) {
    if (spec.num_classes < 2) throw ConfigError("classification task needs at least two classes");
    ensure_linear_head(model, head_prefix(spec.task), model.config.hidden, spec.num_classes, seed);
  }
}

Var task_loss(ag::Tape<float>& t, const Model<float>& model, const TaskSpec& spec, const TaskExample& ex,
              const Dropout& drop) {
  const TokenSequence seq = task_sequence(model, spec, ex);
  Var out = encode(t, model, fuse_inputs(t, model, seq, drop), seq.attention_mask, drop);
  switch (spec.task) {
    case Task::icon_cls: {
      const Projection h = head_of(model, spec.task);
      std::vector<int> rows, labels;
      for (std::size_t leaf = 0; leaf < ex.a->leaf_count(); ++leaf) {
        const int tok = seq.token_of(TokenKind::vision, 0, static_cast<int>(leaf));
        if (tok < 0) continue;
        rows.push_back(tok);
        labels.push_back(ex.labels.at(leaf));
      }
      if (rows.empty()) return t.constant(Matrix<float>::Zero(1, 1));
      Var logits = ag::linear(t, ag::gather_rows(t, out, rows), t.param(h.weight), t.param(h.bias));
      return ag::scale(t, ag::cross_entropy_rows(t, logits, labels), 1.0f / static_cast<float>(rows.size()));
    }
    case Task::app_type_cls: {
      const Projection h = head_of(model, spec.task);
      Var logits = ag::linear(t, ag::gather_rows(t, out, {0}), t.param(h.weight), t.param(h.bias));
      return ag::cross_entropy_rows(t, logits, {ex.label});
    }
    case Task::referring_expression: {
      const Selection s = referring_selection(seq, ex);
      if (s.correct.empty()) throw DataError("referring answer was truncated away");
      Var logits = mlp_head(t, ag::gather_rows(t, out, s.tokens), model.layout.lcp);
      return ag::softmax_cross_entropy_set(t, logits, s.correct);
    }
    case Task::similar_component: {
      const Selection s = similar_selection(seq, ex);
      const int anchor = seq.token_of(TokenKind::vision, 0, ex.anchor);
      if (s.correct.empty() || anchor < 0) throw DataError("similar-component example lost to truncation");
      Var logits = ag::matmul(t, ag::gather_rows(t, out, s.tokens), ag::transpose(t, ag::gather_rows(t, out, {anchor})));
      return ag::softmax_cross_entropy_set(t, logits, s.correct);
    }
    case Task::link_component: return lcp_loss(t, out, seq, model.layout.lcp).loss;
  }
  throw ConfigError("unknown task");
}

void finetune_task(Model<float>& model, const TaskSpec& spec, const std::vector<TaskExample>& train,
                   const FinetuneConfig& cfg) {
  if (train.empty()) throw DataError(std::string("no training examples for ") + task_name(spec.task));
  if (cfg.epochs < 0 || cfg.batch < 1) throw ConfigError("invalid fine-tuning schedule");
  prepare_task_model(model, spec, cfg.seed);
  OptimizerState state = make_optimizer_state(model);
  Trainer trainer(model, state, cfg.adam, LossWeights{}, resolve_threads(cfg.threads));
  const std::size_t n = train.size();
  std::vector<std::size_t> order(n);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng::stream(cfg.seed, "finetune-epoch", static_cast<std::uint64_t>(epoch)).shuffle(order);
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end = std::min(n, start + static_cast<std::size_t>(cfg.batch));
      std::vector<std::uint64_t> ids;
      for (std::size_t k = start; k < end; ++k) ids.push_back(static_cast<std::uint64_t>(epoch) * n + k);
      trainer.step_with(
          end - start,
          [&](ag::Tape<float>& t, std::size_t i, const Dropout& drop) {
            return task_loss(t, model, spec, train[order[start + i]], drop);
          },
          ids, cfg.seed);
    }
  }
}

TaskMetrics evaluate_task(const Model<float>& model, const TaskSpec& spec, const std::vector<TaskExample>& examples,
                          const std::string& split, int threads) {
  struct Result {
    std::vector<int> truth, pred;
    double chance = 0;
  };
  std::vector<Result> res(examples.size());
  parallel_for(examples.size(), resolve_threads(threads), [&](std::size_t i) {
    const TaskExample& ex = examples[i];
    const TokenSequence seq = task_sequence(model, spec, ex);
    const Matrix<float> out = contextual_embeddings(model, seq);
    Result& r = res[i];
    switch (spec.task) {
      case Task::icon_cls: {
        const Projection h = head_of(model, spec.task);
        for (std::size_t leaf = 0; leaf < ex.a->leaf_count(); ++leaf) {
          const int tok = seq.token_of(TokenKind::vision, 0, static_cast<int>(leaf));
          if (tok < 0) continue;
          r.truth.push_back(ex.labels.at(leaf));
          r.pred.push_back(classify_component(out.row(tok), model.params[h.weight], model.params[h.bias]));
        }
        break;
      }
      case Task::app_type_cls: {
        const Projection h = head_of(model, spec.task);
        r.truth.push_back(ex.label);
        r.pred.push_back(classify_screen(out.row(0), model.params[h.weight], model.params[h.bias]));
        break;
      }
      case Task::referring_expression:
      case Task::link_component: {
        std::vector<int> cand;
        if (spec.task == Task::referring_expression) {
          cand = referring_selection(seq, ex).tokens;
        } else {
          cand = seq.leaf_tokens();
        }
        ag::Tape<float> t(&model.params, nullptr);
        Var logits = mlp_head(t, ag::gather_rows(t, t.constant(out), cand), model.layout.lcp);
        const auto& z = t.value(logits);
        int best = 0;
        for (int k = 1; k < z.rows(); ++k) {
          if (z(k, 0) > z(best, 0)) best = k;
        }
        const Token& tk = seq.tokens[static_cast<std::size_t>(cand[static_cast<std::size_t>(best)])];
        const bool hit = tk.ui == 0 && contains(ex.answers, tk.leaf);
        r.truth.push_back(1);
        r.pred.push_back(hit ? 1 : 0);
        std::set<std::pair<int, int>> leaves;
        for (int c : cand) leaves.insert({seq.tokens[static_cast<std::size_t>(c)].ui, seq.tokens[static_cast<std::size_t>(c)].leaf});
        r.chance = static_cast<double>(ex.answers.size()) / static_cast<double>(leaves.size());
        break;
      }
      case Task::similar_component: {
        const Selection s = similar_selection(seq, ex);
        std::vector<Matrix<float>> cands;
        for (int tok : s.tokens) cands.push_back(out.row(tok));
        const int anchor = seq.token_of(TokenKind::vision, 0, ex.anchor);
        const int best = retrieve_by_dot_product(out.row(anchor), cands);
        r.truth.push_back(1);
        r.pred.push_back(contains(s.correct, best) ? 1 : 0);
        r.chance = static_cast<double>(s.correct.size()) / static_cast<double>(s.tokens.size());
        break;
      }
    }
  });
  TaskMetrics m;
  m.task = task_name(spec.task);
  m.split = split;
  std::vector<int> truth, pred;
  double chance = 0;
  for (const auto& r : res) {
    truth.insert(truth.end(), r.truth.begin(), r.truth.end());
    pred.insert(pred.end(), r.pred.begin(), r.pred.end());
    chance += r.chance;
  }
  m.n_examples = truth.size();
  m.micro_accuracy = micro_accuracy(truth, pred);
  if (spec.is_classification()) {
    m.macro_f1 = macro_f1(truth, pred);
    m.chance_accuracy = 1.0 / spec.num_classes;
  } else {
    m.chance_accuracy = examples.empty() ? 0.0 : chance / static_cast<double>(examples.size());
  }
  return m;
}

TaskMetrics eval_task(const TaskSpec& spec, const Model<float>* pretrained, const TaskData& data,
                      const FinetuneConfig& cfg, Model<float>* tuned_out) {
  Model<float> model;
  if (cfg.random_init || !pretrained) {
    const ModelConfig mc = pretrained ? pretrained->config : ModelConfig{};
    model = init_params<float>(mc, Rng::stream(cfg.init_seed, "np-init", cfg.seed).next());
  } else {
    model = *pretrained;
  }
  finetune_task(model, spec, data.train, cfg);
  TaskMetrics m = evaluate_task(model, spec, data.test, "test", cfg.threads);
  m.init_mode = cfg.random_init || !pretrained ? "random" : "pretrained";
  m.seed = cfg.seed;
  if (tuned_out) *tuned_out = std::move(model);
  return m;
}

}  // namespace traceform
