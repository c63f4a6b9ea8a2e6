// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and exits non-zero if
// any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "traceform/dataset.hpp"
#include "traceform/errors.hpp"
#include "traceform/finetune.hpp"
#include "traceform/parallel.hpp"
#include "traceform/pretrain.hpp"
#include "traceform/synth.hpp"
#include "traceform/transformer.hpp"
#include "support.hpp"

using namespace traceform;
namespace fs = std::filesystem;
using MatD = ag::Matrix<double>;

namespace {

// Pinned tolerances and budgets.
constexpr double kLnTolerance = 1e-6;
constexpr double kGradTolerance = 1e-4;
constexpr double kGradEps = 1e-5;
constexpr int kGradCoordinates = 20;
constexpr double kCompositionTolerance = 0.02;
constexpr double kLcpChanceFactor = 3.0;
constexpr double kCuiThreshold = 0.85;
constexpr double kTieTolerance = 0.005;
constexpr double kMaskRateLow = 0.145, kMaskRateHigh = 0.155;
constexpr double kPretrainBudgetSeconds = 30 * 60;
constexpr double kFinetuneBudgetSeconds = 45 * 60;
constexpr double kIndicatorBudgetSeconds = 60;
constexpr double kGradBudgetSeconds = 5 * 60;
constexpr std::int64_t kPretrainSteps = 16000;
constexpr std::int64_t kDeterminismSteps = 500;

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

/// Default corpus, dataset and feature store shared by the learnability criteria.
struct Shared {
  testing::TempDir dir{"acceptance"};
  Corpus corpus;
  Dataset dataset;
  ScreenStore store;
  std::string corpus_checksum;
  std::optional<Checkpoint> pretrained;
};

Shared& shared() {
  static Shared s;
  static bool built = false;
  if (!built) {
    const auto t0 = Clock::now();
    GeneratorConfig g;
    g.threads = resolve_threads(0);
    s.corpus_checksum = write_corpus(g, 1, s.dir / "corpus").manifest_checksum;
    DatasetConfig d;
    d.threads = g.threads;
    build_dataset(s.dir / "corpus", d, s.dir / "dataset");
    s.corpus = read_corpus(s.dir / "corpus");
    s.dataset = load_dataset(s.dir / "dataset");
    s.store = ScreenStore::from_corpus(s.corpus, ModelConfig{}.text_buckets, g.threads);
    std::cout << "  default corpus and dataset built in " << fmt(seconds_since(t0)) << " s ("
              << s.dataset.train.size() << " / " << s.dataset.dev.size() << " / " << s.dataset.test.size()
              << " pairs)\n";
    built = true;
  }
  return s;
}

// ---- 1 ----------------------------------------------------------------------------

Outcome indicator_semantics() {
  const auto t0 = Clock::now();
  const Model<double> m = init_params<float>(ModelConfig{}, 4).cast<double>();
  Rng r(101);
  int zero_ok = 0, ln_ok = 0;
  double worst = 0;
  for (int k = 0; k < 1000; ++k) {
    const int na = static_cast<int>(r.between(1, 12)), nb = static_cast<int>(r.between(0, 12));
    const ScreenFeatures a = testing::synthetic_screen(na, 2 * k + 1);
    const ScreenFeatures b = testing::synthetic_screen(std::max(nb, 1), 2 * k + 2);
    SequenceInput in;
    in.a = &a;
    in.b = nb > 0 ? &b : nullptr;
    const TokenSequence neg = compose_sequence(in);
    ag::Tape<double> t(&m.params, nullptr);
    MatD out(static_cast<int>(neg.size()), m.config.hidden);
    for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = 10 * (2 * r.uniform() - 1);
    zero_ok += t.value(lcp_loss(t, t.constant(out), neg, m.layout.lcp).loss)(0, 0) == 0.0;

    in.link_component = static_cast<int>(r.below(static_cast<std::uint64_t>(na)));
    const TokenSequence pos = compose_sequence(in);
    // Identical rows give identical logits; every leaf contributes a TEXT and a VISION token.
    const double k_candidates = 2.0 * (na + (nb > 0 ? nb : 0));
    const MatD same = MatD::Zero(static_cast<int>(pos.size()), m.config.hidden);
    const double loss = t.value(lcp_loss(t, t.constant(same), pos, m.layout.lcp).loss)(0, 0);
    const double err = std::abs(loss - std::log(k_candidates));
    worst = std::max(worst, err);
    ln_ok += err <= kLnTolerance;
  }
  const double secs = seconds_since(t0);
  return {zero_ok == 1000 && ln_ok == 1000 && secs < kIndicatorBudgetSeconds,
          "1_LC=0 exact zero " + std::to_string(zero_ok) + "/1000; ln K within 1e-6 " + std::to_string(ln_ok) +
              "/1000 (worst " + fmt(worst, 3) + "); " + fmt(secs, 3) + " s"};
}

// ---- 2 ----------------------------------------------------------------------------

Outcome composition() {
  const LossWeights w;  // lambda_cui 0.1, lambda_mask 0.01
  const double v = total_loss(1, 2, 3, w);
  return {v == 1.23 && w.lambda_cui == 0.1 && w.lambda_mask == 0.01, "total_loss(1, 2, 3) = " + fmt(v, 17)};
}

// ---- 3 ----------------------------------------------------------------------------

Outcome gradients() {
  const auto t0 = Clock::now();
  Model<double> m = init_params<float>(ModelConfig{}, 4).cast<double>();
  m.config.dropout = 0;
  const ScreenFeatures a = testing::synthetic_screen(5, 11), b = testing::synthetic_screen(4, 12),
                       c = testing::synthetic_screen(3, 13);
  SequenceInput in;
  in.a = &a;
  in.b = &b;
  in.link_component = 2;
  in.cui_label = true;
  in.mask_a = {true, false, false, true, false};
  in.mask_b = {false, true, false, false};
  const TokenSequence pos = compose_sequence(in);
  in.b = &c;
  in.link_component.reset();
  in.cui_label = false;
  in.mask_b = {false, false, true};
  const TokenSequence neg = compose_sequence(in);
  // Heavier loss weights than the defaults so every term moves the gradient visibly.
  const LossWeights w{0.5, 0.5};
  const auto tp = mask_targets(m, pos), tn = mask_targets(m, neg);
  auto one = [&](ag::Tape<double>& t, const TokenSequence& seq, const std::vector<std::pair<int, MatD>>& targets) {
    ag::Var out = encode(t, m, fuse_inputs(t, m, seq, Dropout{}), seq.attention_mask, Dropout{});
    return ag::weighted_sum(t,
                            {lcp_loss(t, out, seq, m.layout.lcp).loss, cui_loss(t, out, seq, m.layout.cui).loss,
                             mask_loss(t, out, seq, targets)},
                            {1.0, w.lambda_cui, w.lambda_mask});
  };
  const auto res = testing::check_gradients(
      m, [&](ag::Tape<double>& t) { return ag::add(t, one(t, pos, tp), one(t, neg, tn)); }, 7, kGradCoordinates,
      kGradEps);
  std::size_t expected = 0;
  for (int i = 0; i < m.params.size(); ++i) {
    if (!is_frozen(m.params.name(i))) {
      expected += std::min<std::size_t>(kGradCoordinates, static_cast<std::size_t>(m.params[i].size()));
    }
  }
  // Key biases shift every logit of a query row equally, so softmax makes their gradient vanish;
  // these and other coordinates with |gradient| under the floor are counted separately.
  double key_bias = 0;
  {
    ag::ParamSet<double> grads = m.params.zeros_like();
    ag::Tape<double> t(&m.params, &grads);
    t.backward(ag::add(t, one(t, pos, tp), one(t, neg, tn)));
    for (const auto& layer : m.layout.layers) key_bias = std::max(key_bias, grads[layer.key.bias].cwiseAbs().maxCoeff());
  }
  const double secs = seconds_since(t0);
  const bool enough = res.coordinates - res.below_floor >= res.coordinates * 3 / 4;
  return {res.worst < kGradTolerance && static_cast<std::size_t>(res.coordinates) == expected && enough &&
              key_bias < 1e-12 && secs < kGradBudgetSeconds,
          std::to_string(res.coordinates) + " coordinates over " + std::to_string(m.params.size()) + " tensors (" +
              std::to_string(res.below_floor) + " with both sides below " + fmt(testing::kGradFloor, 2) +
              "), worst relative error " + fmt(res.worst, 3) + " at " + res.worst_at + "; key-bias gradient max " +
              fmt(key_bias, 2) + "; " + fmt(secs, 3) + " s"};
}

// ---- 4 ----------------------------------------------------------------------------

Outcome sampling_recipe() {
  Shared& s = shared();
  std::size_t pos = 0, same = 0, cross = 0;
  for (const auto* part : {&s.dataset.train, &s.dataset.dev, &s.dataset.test}) {
    for (const auto& p : *part) {
      pos += p.negative_kind == NegativeKind::none;
      same += p.negative_kind == NegativeKind::same_sequence;
      cross += p.negative_kind == NegativeKind::cross_sequence;
    }
  }
  const double n = static_cast<double>(pos + same + cross);
  const double fp = pos / n, fs_ = same / n, fc = cross / n;
  const bool mix = n >= 10000 && std::abs(fp - 0.5) <= kCompositionTolerance &&
                   std::abs(fs_ - 0.25) <= kCompositionTolerance && std::abs(fc - 0.25) <= kCompositionTolerance;

  // Leakage: re-split and re-pair the corpus in memory under 100 split seeds.
  std::vector<std::string> ids;
  for (const auto& a : s.corpus.apps) ids.push_back(a.app_id);
  std::size_t leaks = 0, checked = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Split sp = split_by_app(ids, seed);
    std::map<std::string, int> of;
    for (const auto& a : sp.train) of[a] = 0;
    for (const auto& a : sp.dev) of[a] = 1;
    for (const auto& a : sp.test) of[a] = 2;
    for (int part = 0; part < 3; ++part) {
      std::vector<Trace> traces;
      for (const auto& t : s.corpus.traces) {
        if (of.at(t.app_id) == part) traces.push_back(t);
      }
      for (const auto& p : build_pairs(traces, seed)) {
        ++checked;
        leaks += of.at(p.app_a) != part || of.at(p.app_b) != part;
      }
    }
  }
  return {mix && leaks == 0,
          "n=" + std::to_string(static_cast<std::size_t>(n)) + " positive " + fmt(fp) + " same-seq " + fmt(fs_) +
              " cross-seq " + fmt(fc) + "; " + std::to_string(leaks) + " leaked of " + std::to_string(checked) +
              " pairs over 100 split seeds"};
}

// ---- 5 ----------------------------------------------------------------------------

/// Chance from the candidate-count histogram: mean over linked samples of 1 / K.
double analytic_chance(const std::vector<PairSample>& pairs, const ScreenStore& store, int max_len,
                       std::map<int, std::size_t>* histogram) {
  double sum = 0;
  std::size_t n = 0;
  for (const auto& p : pairs) {
    if (!p.link_component) continue;
    const ScreenFeatures& a = store.at(p.ui_a);
    const ScreenFeatures& b = store.at(p.ui_b);
    // 5 special tokens plus two per leaf; truncation caps the total at max_len.
    int leaves = static_cast<int>(a.leaf_count() + b.leaf_count());
    leaves = std::min(leaves, (max_len - 5) / 2);
    (*histogram)[2 * leaves]++;
    ++n;
  }
  for (const auto& [k, c] : *histogram) sum += static_cast<double>(c) / k;
  return n ? sum / static_cast<double>(n) : 0.0;
}

Outcome learnability() {
  Shared& s = shared();
  PretrainConfig cfg;  // desk model, default loss weights and optimiser
  cfg.steps = kPretrainSteps;
  cfg.log_every = 1000;
  cfg.threads = resolve_threads(0);
  std::ostringstream log;
  const auto t0 = Clock::now();
  s.pretrained = pretrain(cfg, s.dataset.train, s.store, &log, {});
  const double train_secs = seconds_since(t0);
  const EvalMetrics dev = evaluate_pretrain(s.pretrained->model, s.dataset.dev, s.store, cfg.weights, cfg.threads);
  std::map<int, std::size_t> hist;
  const double chance = analytic_chance(s.dataset.dev, s.store, cfg.model.max_len, &hist);
  std::string h;
  for (const auto& [k, c] : hist) h += (h.empty() ? "" : ",") + std::to_string(k) + ":" + std::to_string(c);
  std::cout << "  candidate-count histogram (K:count) " << h << "\n";
  const bool pass = train_secs <= kPretrainBudgetSeconds && dev.acc_lcp >= kLcpChanceFactor * chance &&
                    dev.acc_cui >= kCuiThreshold && std::abs(chance - dev.chance_lcp) < 1e-9;
  return {pass, "dev LCP " + fmt(dev.acc_lcp) + " vs 3 x chance " + fmt(kLcpChanceFactor * chance) + " (chance " +
                    fmt(chance) + ", evaluator " + fmt(dev.chance_lcp) + "); dev CUI " + fmt(dev.acc_cui) +
                    "; " + std::to_string(kPretrainSteps) + " steps in " + fmt(train_secs) + " s"};
}

// ---- 6 ----------------------------------------------------------------------------

Outcome pretraining_helps() {
  Shared& s = shared();
  if (!s.pretrained) return {false, "no pre-trained checkpoint (criterion 5 did not produce one)"};
  const auto t0 = Clock::now();
  bool pass = true;
  std::string detail;
  for (Task task : {Task::icon_cls, Task::referring_expression}) {
    const TaskSpec spec = TaskSpec::make(task, s.corpus.config);
    const TaskData data = build_task_data(task, s.corpus, s.dataset, s.store);
    double mean[2] = {0, 0};
    for (int init = 0; init < 2; ++init) {
      for (std::uint64_t seed : {11, 12, 13}) {
        FinetuneConfig f;
        f.seed = seed;
        f.random_init = init == 1;
        f.threads = resolve_threads(0);
        mean[init] += eval_task(spec, &s.pretrained->model, data, f).micro_accuracy / 3.0;
      }
    }
    const bool ok = mean[0] >= mean[1] - kTieTolerance;
    pass = pass && ok;
    detail += std::string(detail.empty() ? "" : "; ") + task_name(task) + " (" + std::to_string(data.train.size()) +
              " train) pre-trained " + fmt(mean[0]) + " vs random " + fmt(mean[1]) +
              (mean[0] > mean[1] ? "" : (ok ? " [tie]" : " [worse]"));
  }
  const double secs = seconds_since(t0);
  return {pass && secs < kFinetuneBudgetSeconds, detail + "; " + fmt(secs) + " s"};
}

// ---- 7 ----------------------------------------------------------------------------

Outcome masked_invariance() {
  const Model<float> m = init_params<float>(ModelConfig{}, 4);
  Rng r(7);
  int changed = 0, trials = 0;
  for (int k = 0; k < 50; ++k) {
    const int na = static_cast<int>(r.between(1, 10)), nb = static_cast<int>(r.between(1, 10));
    const ScreenFeatures a = testing::synthetic_screen(na, 500 + 2 * k), b = testing::synthetic_screen(nb, 501 + 2 * k);
    SequenceInput in;
    in.a = &a;
    in.b = &b;
    for (int i = 0; i < na; ++i) in.mask_a.push_back(r.uniform() < 0.3);
    for (int i = 0; i < nb; ++i) in.mask_b.push_back(r.uniform() < 0.3);
    const TokenSequence seq = compose_sequence(in);
    const auto targets = mask_targets(m, seq);
    const ag::Matrix<float> out = contextual_embeddings(m, seq);
    ag::Tape<float> t(&m.params, nullptr);
    const float base = t.value(mask_loss(t, t.constant(out), seq, targets))(0, 0);
    for (int rep = 0; rep < 20; ++rep) {
      ag::Matrix<float> p = out;
      for (int i = 0; i < p.rows(); ++i) {
        if (seq.mask_flags[static_cast<std::size_t>(i)]) continue;
        for (int j = 0; j < p.cols(); ++j) p(i, j) += static_cast<float>(3 * (2 * r.uniform() - 1));
      }
      ++trials;
      changed += t.value(mask_loss(t, t.constant(p), seq, targets))(0, 0) != base;
    }
  }
  PairSample p;
  p.mask_a.assign(5, false);
  p.mask_b.assign(5, false);
  std::size_t flagged = 0, total = 0;
  for (std::uint64_t id = 0; id < 10000; ++id) {
    p.id = id;
    const PairSample q = apply_text_mask(p, 0.15, 3);
    for (bool f : q.mask_a) flagged += f;
    for (bool f : q.mask_b) flagged += f;
    total += 10;
  }
  const double rate = static_cast<double>(flagged) / static_cast<double>(total);
  return {changed == 0 && rate >= kMaskRateLow && rate <= kMaskRateHigh,
          std::to_string(changed) + " of " + std::to_string(trials) + " unmasked perturbations changed the loss; rate " +
              fmt(rate, 5) + " over " + std::to_string(total) + " components"};
}

// ---- 8 ----------------------------------------------------------------------------

bool bitwise_equal(const ag::ParamSet<float>& a, const ag::ParamSet<float>& b) {
  if (a.size() != b.size()) return false;
  for (int i = 0; i < a.size(); ++i) {
    if (a.name(i) != b.name(i) || a[i].rows() != b[i].rows() || a[i].cols() != b[i].cols()) return false;
    if (std::memcmp(a[i].data(), b[i].data(), sizeof(float) * static_cast<std::size_t>(a[i].size())) != 0) return false;
  }
  return true;
}

Outcome determinism() {
  Shared& s = shared();
  GeneratorConfig g;
  g.threads = resolve_threads(0);
  const std::string rerun = write_corpus(g, 1, s.dir / "corpus2").manifest_checksum;
  DatasetConfig d;
  d.threads = g.threads;
  build_dataset(s.dir / "corpus2", d, s.dir / "dataset2");
  const Dataset again = load_dataset(s.dir / "dataset2");
  bool shards_equal = true;
  for (const char* split : {"train", "dev", "test"}) {
    shards_equal = shards_equal && again.manifest["shards"][split]["checksum"] == s.dataset.manifest["shards"][split]["checksum"];
  }
  const ScreenStore store2 = ScreenStore::from_corpus(read_corpus(s.dir / "corpus2"), ModelConfig{}.text_buckets, g.threads);

  PretrainConfig cfg;
  cfg.steps = kDeterminismSteps;
  cfg.log_every = static_cast<int>(kDeterminismSteps);
  cfg.threads = resolve_threads(0);
  std::ostringstream l1, l2;
  const Checkpoint c1 = pretrain(cfg, s.dataset.train, s.store, &l1, {});
  const Checkpoint c2 = pretrain(cfg, again.train, store2, &l2, {});
  const bool same_loss = !l1.str().empty() && l1.str() == l2.str();

  bool round_trip = false;
  if (s.pretrained) {
    save_checkpoint(*s.pretrained, s.dir / "ckpt");
    const Checkpoint back = load_checkpoint(s.dir / "ckpt");
    round_trip = bitwise_equal(back.model.params, s.pretrained->model.params) &&
                 bitwise_equal(back.optimizer.m, s.pretrained->optimizer.m) &&
                 bitwise_equal(back.optimizer.v, s.pretrained->optimizer.v) &&
                 back.optimizer.step == s.pretrained->optimizer.step;
  }
  const bool params_equal = bitwise_equal(c1.model.params, c2.model.params);
  std::string step_line = l1.str();
  if (!step_line.empty() && step_line.back() == '\n') step_line.pop_back();
  return {rerun == s.corpus_checksum && shards_equal && same_loss && params_equal && round_trip,
          std::string("corpus checksum ") + (rerun == s.corpus_checksum ? "equal" : "differs") + ", shards " +
              (shards_equal ? "equal" : "differ") + ", step-" + std::to_string(kDeterminismSteps) + " metrics " +
              (same_loss ? "equal" : "differ") + " " + step_line + ", parameters " +
              (params_equal ? "bitwise equal" : "differ") + ", checkpoint round trip " +
              (round_trip ? "bitwise" : "FAILED")};
}

// ---- 9 ----------------------------------------------------------------------------

Outcome paper_configs() {
  std::string detail;
  bool pass = true;
  for (const auto& [label, cfg] : {std::pair{"base", ModelConfig::paper_base()}, std::pair{"large", ModelConfig::paper_large()}}) {
    Model<float> m = init_params<float>(cfg, 4);
    bool glorot = true;
    for (int i = 0; i < m.params.size(); ++i) {
      const std::string& n = m.params.name(i);
      if (n.ends_with(".weight")) {
        glorot = glorot && m.params[i].cwiseAbs().maxCoeff() <= glorot_bound(m.params[i].rows(), m.params[i].cols());
      }
    }
    const ScreenFeatures a = testing::synthetic_screen(8, 21, cfg.text_buckets),
                         b = testing::synthetic_screen(6, 22, cfg.text_buckets);
    SequenceInput in;
    in.a = &a;
    in.b = &b;
    in.link_component = 1;
    in.cui_label = true;
    in.mask_a = {false, true, false, false, false, false, false, false};
    in.max_len = cfg.max_len;
    const TokenSequence s1 = compose_sequence(in);
    in.link_component.reset();
    in.cui_label = false;
    const TokenSequence s2 = compose_sequence(in);
    const auto before = m.params[m.layout.layers.back().query.weight];
    OptimizerState st = make_optimizer_state(m);
    Trainer trainer(m, st, AdamConfig::paper(), LossWeights{}, resolve_threads(0));
    const StepMetrics sm = trainer.step({&s1, &s2}, {0, 1}, 1);
    const bool moved = (m.params[m.layout.layers.back().query.weight] - before).cwiseAbs().maxCoeff() > 0;
    const bool shape = static_cast<int>(m.layout.layers.size()) == cfg.layers && cfg.heads == 6 && cfg.hidden == 768;
    const bool ok = glorot && moved && shape && std::isfinite(sm.loss_total);
    pass = pass && ok;
    detail += std::string(detail.empty() ? "" : "; ") + label + " " + std::to_string(cfg.layers) + "L " +
              std::to_string(m.params.scalar_count()) + " params, loss " + fmt(sm.loss_total) +
              (glorot ? ", glorot ok" : ", glorot VIOLATED") + (moved ? "" : ", no update");
  }
  return {pass, detail};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"1 lcp indicator semantics", indicator_semantics},
      {"2 loss composition", composition},
      {"3 gradient correctness", gradients},
      {"7 masked-loss invariance and mask rate", masked_invariance},
      {"9 paper-size configs", paper_configs},
      {"4 sampling recipe and split leakage", sampling_recipe},
      {"5 synthetic learnability", learnability},
      {"6 pre-training helps fine-tuning", pretraining_helps},
      {"8 determinism and persistence", determinism},
  };
  std::map<std::string, Outcome> results;
  for (const auto& [name, fn] : criteria) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
    results[name] = o;
  }
  int failed = 0;
  for (const auto& [name, o] : results) failed += !o.pass;
  std::cout << (failed ? "acceptance: " + std::to_string(failed) + " criteria failed" : "acceptance: all criteria passed")
            << std::endl;
  return failed ? 1 : 0;
}
