#include "traceform/pretrain.hpp"

#include <algorithm>
#include <cmath>

#include "traceform/errors.hpp"
#include "traceform/parallel.hpp"
#include "traceform/rng.hpp"

namespace traceform {

using ag::Matrix;
using ag::Var;
using nlohmann::json;

void LossWeights::validate() const {
  if (!(lambda_cui >= 0) || !(lambda_mask >= 0)) throw ConfigError("loss weights must be non-negative");
}

template <typename T>
Var mlp_head(ag::Tape<T>& t, Var x, const MlpHead& head) {
  Var h = ag::gelu(t, ag::linear(t, x, t.param(head.fc1.weight), t.param(head.fc1.bias)));
  return ag::linear(t, h, t.param(head.fc2.weight), t.param(head.fc2.bias));
}

namespace {

template <typename T>
Var zero_scalar(ag::Tape<T>& t) {
  return t.constant(Matrix<T>::Zero(1, 1));
}

template <typename T>
int argmax_column(const Matrix<T>& m) {
  int best = 0;
  for (int i = 1; i < m.rows(); ++i) {
    if (m(i, 0) > m(best, 0)) best = i;
  }
  return best;
}

}  // namespace

template <typename T>
LcpResult<T> lcp_loss(ag::Tape<T>& t, Var outputs, const TokenSequence& seq, const MlpHead& head) {
  LcpResult<T> r;
  const std::vector<int> cand = seq.leaf_tokens();
  if (cand.empty()) {
    if (seq.link_target) throw DataError("link target set on a sequence without candidates");
    r.loss = zero_scalar(t);
    return r;
  }
  Var logits = mlp_head(t, ag::gather_rows(t, outputs, cand), head);
  r.predicted = cand[static_cast<std::size_t>(argmax_column(t.value(logits)))];
  if (!seq.link_target) {
    r.loss = zero_scalar(t);
    return r;
  }
  auto it = std::find(cand.begin(), cand.end(), *seq.link_target);
  if (it == cand.end()) throw DataError("link target is not a candidate token");
  r.loss = ag::softmax_cross_entropy(t, logits, static_cast<int>(it - cand.begin()));
  return r;
}

template <typename T>
CuiResult<T> cui_loss(ag::Tape<T>& t, Var outputs, const TokenSequence& seq, const MlpHead& head) {
  if (!seq.cui_label) throw DataError("consecutive-UI label missing");
  Var logit = mlp_head(t, ag::gather_rows(t, outputs, {0}), head);
  CuiResult<T> r;
  const double z = static_cast<double>(t.value(logit)(0, 0));
  r.probability = 1.0 / (1.0 + std::exp(-z));
  r.loss = ag::bce_with_logits(t, logit, *seq.cui_label ? T(1) : T(0));
  return r;
}

template <typename T>
std::vector<std::pair<int, Matrix<T>>> mask_targets(const Model<T>& model, const TokenSequence& seq) {
  std::vector<std::pair<int, Matrix<T>>> out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (!seq.mask_flags[i]) continue;
    const Token& tk = seq.tokens[i];
    if (tk.kind != TokenKind::text) throw DataError("mask flag on a non-text token");
    Matrix<T> target = text_encode(tk.sentence, model);
    if (model.layout.mask_adapter >= 0) target = target * model.params[model.layout.mask_adapter];
    out.emplace_back(static_cast<int>(i), std::move(target));
  }
  return out;
}

template <typename T>
Var mask_loss(ag::Tape<T>& t, Var outputs, const TokenSequence& seq, const std::vector<std::pair<int, Matrix<T>>>& targets) {
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq.mask_flags[i] && seq.tokens[i].kind != TokenKind::text) throw DataError("mask flag on a non-text token");
  }
  if (targets.empty()) return zero_scalar(t);
  std::vector<Var> terms;
  std::vector<T> ones;
  for (const auto& [token, target] : targets) {
    if (!seq.mask_flags[static_cast<std::size_t>(token)]) throw DataError("mask target at an unmasked token");
    terms.push_back(ag::squared_distance(t, ag::gather_rows(t, outputs, {token}), target));
    ones.push_back(T(1));
  }
  return ag::weighted_sum(t, terms, ones);
}

double total_loss(double l_lcp, double l_cui, double l_mask, const LossWeights& w) {
  return l_lcp + w.lambda_cui * l_cui + w.lambda_mask * l_mask;
}

template <typename T>
SampleOutcome<T> pretrain_forward(ag::Tape<T>& t, const Model<T>& model, const TokenSequence& seq,
                                  const LossWeights& w, const Dropout& drop) {
  auto targets = mask_targets(model, seq);
  Var x = fuse_inputs(t, model, seq, drop);
  Var out = encode(t, model, x, seq.attention_mask, drop);
  SampleOutcome<T> o;
  auto lcp = lcp_loss(t, out, seq, model.layout.lcp);
  auto cui = cui_loss(t, out, seq, model.layout.cui);
  o.lcp = lcp.loss;
  o.cui = cui.loss;
  o.mask = mask_loss(t, out, seq, targets);
  o.lcp_predicted = lcp.predicted;
  o.cui_probability = cui.probability;
  o.total = ag::weighted_sum(t, {o.lcp, o.cui, o.mask},
                             {T(1), static_cast<T>(w.lambda_cui), static_cast<T>(w.lambda_mask)});
  return o;
}

template Var mlp_head<float>(ag::Tape<float>&, Var, const MlpHead&);
template Var mlp_head<double>(ag::Tape<double>&, Var, const MlpHead&);
template LcpResult<float> lcp_loss<float>(ag::Tape<float>&, Var, const TokenSequence&, const MlpHead&);
template LcpResult<double> lcp_loss<double>(ag::Tape<double>&, Var, const TokenSequence&, const MlpHead&);
template CuiResult<float> cui_loss<float>(ag::Tape<float>&, Var, const TokenSequence&, const MlpHead&);
template CuiResult<double> cui_loss<double>(ag::Tape<double>&, Var, const TokenSequence&, const MlpHead&);
template std::vector<std::pair<int, Matrix<float>>> mask_targets<float>(const Model<float>&, const TokenSequence&);
template std::vector<std::pair<int, Matrix<double>>> mask_targets<double>(const Model<double>&, const TokenSequence&);
template Var mask_loss<float>(ag::Tape<float>&, Var, const TokenSequence&, const std::vector<std::pair<int, Matrix<float>>>&);
template Var mask_loss<double>(ag::Tape<double>&, Var, const TokenSequence&,
                               const std::vector<std::pair<int, Matrix<double>>>&);
template SampleOutcome<float> pretrain_forward<float>(ag::Tape<float>&, const Model<float>&, const TokenSequence&,
                                                      const LossWeights&, const Dropout&);
template SampleOutcome<double> pretrain_forward<double>(ag::Tape<double>&, const Model<double>&, const TokenSequence&,
                                                        const LossWeights&, const Dropout&);

json StepMetrics::to_json() const {
  return {{"step", step},         {"loss_total", loss_total}, {"loss_lcp", loss_lcp}, {"loss_cui", loss_cui},
          {"loss_mask", loss_mask}, {"acc_lcp", acc_lcp},       {"acc_cui", acc_cui}};
}

json EvalMetrics::to_json() const {
  return {{"acc_lcp", acc_lcp},     {"acc_cui", acc_cui},     {"chance_lcp", chance_lcp},
          {"lcp_count", lcp_count}, {"cui_count", cui_count}, {"loss_total", loss_total}};
}

// ---- optimisation ------------------------------------------------------------

OptimizerState make_optimizer_state(const Model<float>& model) {
  OptimizerState s;
  s.m = model.params.zeros_like();
  s.v = model.params.zeros_like();
  return s;
}

void sync_optimizer_state(const Model<float>& model, OptimizerState& state) {
  for (int i = 0; i < model.params.size(); ++i) {
    const std::string& name = model.params.name(i);
    if (i < state.m.size()) {
      if (state.m.name(i) != name) throw DataError("optimizer state does not match tensor " + name);
      continue;
    }
    const auto& p = model.params[i];
    state.m.add(name, Matrix<float>::Zero(p.rows(), p.cols()));
    state.v.add(name, Matrix<float>::Zero(p.rows(), p.cols()));
  }
}

Trainer::Trainer(Model<float>& model, OptimizerState& state, AdamConfig adam, LossWeights weights, int threads)
    : model_(model), state_(state), adam_(adam), weights_(weights), threads_(std::max(1, threads)) {
  weights_.validate();
  if (!(adam_.lr >= 0) || !(adam_.eps > 0)) throw ConfigError("invalid optimizer settings");
}

namespace {

std::vector<std::pair<std::size_t, std::size_t>> chunks(std::size_t n, int threads) {
  const auto k = std::max<std::size_t>(1, std::min<std::size_t>(n, static_cast<std::size_t>(threads)));
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t c = 0; c < k; ++c) out.emplace_back(c * n / k, (c + 1) * n / k);
  return out;
}

}  // namespace

double Trainer::step_with(std::size_t batch_size, const LossFn& loss_fn, const std::vector<std::uint64_t>& ids,
                          std::uint64_t dropout_seed) {
  if (batch_size == 0) throw DataError("empty batch");
  sync_optimizer_state(model_, state_);
  const auto parts = chunks(batch_size, threads_);
  if (grads_.size() != parts.size() || grads_[0].size() != model_.params.size()) {
    grads_.assign(parts.size(), model_.params.zeros_like());
  } else {
    for (auto& g : grads_) g.set_zero();
  }
  std::vector<double> losses(batch_size, 0.0);
  const float inv = 1.0f / static_cast<float>(batch_size);
  parallel_for(parts.size(), static_cast<int>(parts.size()), [&](std::size_t c) {
    for (std::size_t i = parts[c].first; i < parts[c].second; ++i) {
      ag::Tape<float> t(&model_.params, &grads_[c]);
      const Dropout drop{model_.config.dropout, dropout_seed, ids.at(i)};
      Var loss = loss_fn(t, i, drop);
      losses[i] = static_cast<double>(t.value(loss)(0, 0));
      if (!std::isfinite(losses[i])) continue;
      t.backward(ag::scale(t, loss, inv));
    }
  });
  std::string bad;
  double sum = 0;
  for (std::size_t i = 0; i < batch_size; ++i) {
    if (!std::isfinite(losses[i])) bad += (bad.empty() ? "" : ",") + std::to_string(ids[i]);
    sum += losses[i];
  }
  if (!bad.empty()) throw NumericError("non-finite loss for samples " + bad);
  for (std::size_t c = 1; c < grads_.size(); ++c) {
    for (int p = 0; p < grads_[0].size(); ++p) grads_[0][p] += grads_[c][p];
  }
  for (int p = 0; p < grads_[0].size(); ++p) {
    if (!grads_[0][p].allFinite()) throw NumericError("non-finite gradient in " + model_.params.name(p));
  }
  adam_update();
  return sum / static_cast<double>(batch_size);
}

StepMetrics Trainer::step(const std::vector<const TokenSequence*>& batch, const std::vector<std::uint64_t>& ids,
                          std::uint64_t dropout_seed) {
  struct Record {
    double lcp = 0, cui = 0, mask = 0;
    bool has_link = false, lcp_hit = false, cui_hit = false;
  };
  std::vector<Record> rec(batch.size());
  const double total = step_with(
      batch.size(),
      [&](ag::Tape<float>& t, std::size_t i, const Dropout& drop) {
        const TokenSequence& seq = *batch[i];
        auto o = pretrain_forward(t, model_, seq, weights_, drop);
        Record& r = rec[i];
        r.lcp = t.value(o.lcp)(0, 0);
        r.cui = t.value(o.cui)(0, 0);
        r.mask = t.value(o.mask)(0, 0);
        r.has_link = seq.link_target.has_value();
        r.lcp_hit = r.has_link && o.lcp_predicted == *seq.link_target;
        r.cui_hit = (o.cui_probability >= 0.5) == *seq.cui_label;
        return o.total;
      },
      ids, dropout_seed);
  StepMetrics m;
  m.step = state_.step;
  m.loss_total = total;
  std::size_t hits = 0, cui_hits = 0;
  for (const auto& r : rec) {
    m.loss_lcp += r.lcp;
    m.loss_cui += r.cui;
    m.loss_mask += r.mask;
    m.lcp_count += r.has_link;
    hits += r.lcp_hit;
    cui_hits += r.cui_hit;
  }
  const double n = static_cast<double>(batch.size());
  m.loss_lcp /= n;
  m.loss_cui /= n;
  m.loss_mask /= n;
  m.cui_count = batch.size();
  m.acc_lcp = m.lcp_count ? static_cast<double>(hits) / static_cast<double>(m.lcp_count) : 0.0;
  m.acc_cui = static_cast<double>(cui_hits) / n;
  return m;
}

void Trainer::adam_update() {
  state_.step += 1;
  const double t = static_cast<double>(state_.step);
  const double c1 = 1.0 - std::pow(adam_.beta1, t);
  const double c2 = 1.0 - std::pow(adam_.beta2, t);
  const auto b1 = static_cast<float>(adam_.beta1);
  const auto b2 = static_cast<float>(adam_.beta2);
  const auto step = static_cast<float>(adam_.lr / c1);
  const auto rc2 = static_cast<float>(1.0 / std::sqrt(c2));
  const auto eps = static_cast<float>(adam_.eps);
  for (int p = 0; p < model_.params.size(); ++p) {
    if (is_frozen(model_.params.name(p))) continue;
    float* w = model_.params[p].data();
    float* m = state_.m[p].data();
    float* v = state_.v[p].data();
    const float* g = grads_[0][p].data();
    const Eigen::Index n = model_.params[p].size();
    for (Eigen::Index i = 0; i < n; ++i) {
      m[i] = b1 * m[i] + (1.0f - b1) * g[i];
      v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
      w[i] -= step * m[i] / (std::sqrt(v[i]) * rc2 + eps);
    }
  }
}

// ---- loop --------------------------------------------------------------------

SequenceInput pair_input(const PairSample& p, const ScreenStore& store, int max_len) {
  SequenceInput in;
  in.a = &store.at(p.ui_a);
  in.b = &store.at(p.ui_b);
  if (in.a->leaf_count() != p.mask_a.size() || in.b->leaf_count() != p.mask_b.size()) {
    throw DataError("sample " + std::to_string(p.id) + " disagrees with the leaf counts of its screens");
  }
  in.link_component = p.link_component;
  in.cui_label = p.label_consecutive;
  in.mask_a = p.mask_a;
  in.mask_b = p.mask_b;
  in.max_len = max_len;
  return in;
}

EvalMetrics evaluate_pretrain(const Model<float>& model, const std::vector<PairSample>& pairs, const ScreenStore& store,
                              const LossWeights& w, int threads) {
  struct Record {
    bool has_link = false, lcp_hit = false, cui_hit = false;
    double chance = 0, loss = 0;
  };
  std::vector<Record> rec(pairs.size());
  parallel_for(pairs.size(), resolve_threads(threads), [&](std::size_t i) {
    const TokenSequence seq = compose_sequence(pair_input(pairs[i], store, model.config.max_len));
    ag::Tape<float> t(&model.params, nullptr);
    auto o = pretrain_forward(t, model, seq, w, Dropout{});
    Record& r = rec[i];
    r.has_link = seq.link_target.has_value();
    r.lcp_hit = r.has_link && o.lcp_predicted == *seq.link_target;
    r.cui_hit = (o.cui_probability >= 0.5) == *seq.cui_label;
    r.chance = r.has_link ? 1.0 / static_cast<double>(seq.leaf_tokens().size()) : 0.0;
    r.loss = t.value(o.total)(0, 0);
  });
  EvalMetrics m;
  std::size_t hits = 0, cui_hits = 0;
  for (const auto& r : rec) {
    m.lcp_count += r.has_link;
    hits += r.lcp_hit;
    cui_hits += r.cui_hit;
    m.chance_lcp += r.chance;
    m.loss_total += r.loss;
  }
  m.cui_count = pairs.size();
  if (m.lcp_count) {
    m.acc_lcp = static_cast<double>(hits) / static_cast<double>(m.lcp_count);
    m.chance_lcp /= static_cast<double>(m.lcp_count);
  }
  if (m.cui_count) {
    m.acc_cui = static_cast<double>(cui_hits) / static_cast<double>(m.cui_count);
    m.loss_total /= static_cast<double>(m.cui_count);
  }
  return m;
}

namespace {

std::string step_dir_name(std::int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%06lld", static_cast<long long>(step));
  return buf;
}

}  // namespace

Checkpoint pretrain(const PretrainConfig& cfg, const std::vector<PairSample>& train, const ScreenStore& store,
                    std::ostream* metrics, const std::filesystem::path& checkpoint_dir, std::optional<Checkpoint> resume) {
  if (train.empty()) throw DataError("no training pairs");
  if (cfg.batch < 1 || cfg.steps < 0 || cfg.log_every < 1) throw ConfigError("invalid training schedule");
  Checkpoint ck;
  if (resume) {
    ck = std::move(*resume);
  } else {
    ck.model = init_params<float>(cfg.model, cfg.init_seed);
    ck.optimizer = make_optimizer_state(ck.model);
  }
  ck.has_optimizer = true;
  ck.lineage = {{"init_seed", cfg.init_seed}, {"train_seed", cfg.train_seed}, {"task", "pretrain"}};
  Trainer trainer(ck.model, ck.optimizer, cfg.adam, cfg.weights, resolve_threads(cfg.threads));

  const std::size_t n = train.size();
  std::int64_t cached_epoch = -1;
  std::vector<std::size_t> order(n);
  auto sample_at = [&](std::uint64_t k) -> std::size_t {
    const auto epoch = static_cast<std::int64_t>(k / n);
    if (epoch != cached_epoch) {
      for (std::size_t i = 0; i < n; ++i) order[i] = i;
      Rng::stream(cfg.train_seed, "epoch", static_cast<std::uint64_t>(epoch)).shuffle(order);
      cached_epoch = epoch;
    }
    return order[k % n];
  };

  StepMetrics acc;
  int in_window = 0;
  auto flush = [&] {
    if (!metrics || in_window == 0) return;
    const double d = in_window;
    StepMetrics m = acc;
    m.loss_total /= d;
    m.loss_lcp /= d;
    m.loss_cui /= d;
    m.loss_mask /= d;
    m.acc_lcp = m.lcp_count ? m.acc_lcp / static_cast<double>(m.lcp_count) : 0.0;
    m.acc_cui = m.cui_count ? m.acc_cui / static_cast<double>(m.cui_count) : 0.0;
    m.step = ck.optimizer.step;
    *metrics << m.to_json().dump() << "\n";
    metrics->flush();
    acc = StepMetrics{};
    in_window = 0;
  };

  std::vector<TokenSequence> seqs(static_cast<std::size_t>(cfg.batch));
  std::vector<const TokenSequence*> ptrs(static_cast<std::size_t>(cfg.batch));
  std::vector<std::uint64_t> ids(static_cast<std::size_t>(cfg.batch));
  while (ck.optimizer.step < cfg.steps) {
    const auto base = static_cast<std::uint64_t>(ck.optimizer.step) * static_cast<std::uint64_t>(cfg.batch);
    for (int j = 0; j < cfg.batch; ++j) {
      const std::uint64_t k = base + static_cast<std::uint64_t>(j);
      const std::size_t idx = sample_at(k);
      const PairSample* p = &train[idx];
      PairSample remasked;
      if (cfg.remask_each_epoch) {
        const std::uint64_t epoch_seed = Rng::stream(cfg.train_seed, "remask", k / n).next();
        remasked = apply_text_mask(*p, cfg.mask_rate, epoch_seed);
        p = &remasked;
      }
      seqs[static_cast<std::size_t>(j)] = compose_sequence(pair_input(*p, store, cfg.model.max_len));
      ptrs[static_cast<std::size_t>(j)] = &seqs[static_cast<std::size_t>(j)];
      ids[static_cast<std::size_t>(j)] = k;
    }
    const StepMetrics m = trainer.step(ptrs, ids, cfg.train_seed);
    acc.loss_total += m.loss_total;
    acc.loss_lcp += m.loss_lcp;
    acc.loss_cui += m.loss_cui;
    acc.loss_mask += m.loss_mask;
    acc.acc_lcp += m.acc_lcp * static_cast<double>(m.lcp_count);
    acc.lcp_count += m.lcp_count;
    acc.acc_cui += m.acc_cui * static_cast<double>(m.cui_count);
    acc.cui_count += m.cui_count;
    ++in_window;
    if (ck.optimizer.step % cfg.log_every == 0) flush();
    if (cfg.checkpoint_every > 0 && ck.optimizer.step % cfg.checkpoint_every == 0 && !checkpoint_dir.empty()) {
      ck.lineage["step"] = ck.optimizer.step;
      save_checkpoint(ck, checkpoint_dir / step_dir_name(ck.optimizer.step));
    }
  }
  flush();
  ck.lineage["step"] = ck.optimizer.step;
  if (!checkpoint_dir.empty()) save_checkpoint(ck, checkpoint_dir / "final");
  return ck;
}

}  // namespace traceform
