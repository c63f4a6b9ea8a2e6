#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "traceform/config.hpp"
#include "traceform/dataset.hpp"
#include "traceform/errors.hpp"
#include "traceform/finetune.hpp"
#include "traceform/hash.hpp"
#include "traceform/pretrain.hpp"
#include "traceform/synth.hpp"
#include "traceform/transformer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace traceform;

namespace {

struct Common {
  std::string config_file;
  std::vector<std::string> sets;
  int threads = -1;
  std::string out;
};

RunConfig resolve(const Common& c, const std::vector<std::pair<std::string, std::string>>& flags) {
  RunConfig cfg;
  if (!c.config_file.empty()) cfg.merge_file(c.config_file);
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    cfg.set(s.substr(0, eq), s.substr(eq + 1));
  }
  if (c.threads >= 0) cfg.set("threads", std::to_string(c.threads));
  for (const auto& [k, v] : flags) cfg.set(k, v);
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw DataError("cannot write " + path.string());
}

/// Runs `body` with `out` created; a failure leaves `out/.failed` holding the message.
void with_output(const fs::path& out, const RunConfig& cfg, const std::function<void()>& body) {
  fs::create_directories(out);
  fs::remove(out / ".failed");
  write_text(out / "config.resolved", cfg.to_text());
  try {
    body();
  } catch (const std::exception& e) {
    write_text(out / ".failed", std::string(e.what()) + "\n");
    throw;
  }
}

fs::path require_out(const Common& c) {
  if (c.out.empty()) throw ConfigError("--out is required");
  return c.out;
}

ScreenStore store_for(const Dataset& d, int buckets, int threads) {
  return ScreenStore::from_corpus(read_corpus(d.corpus_root), buckets, threads);
}

const std::vector<PairSample>& split_pairs(const Dataset& d, const std::string& split) {
  if (split == "train") return d.train;
  if (split == "dev") return d.dev;
  if (split == "test") return d.test;
  throw ConfigError("unknown split '" + split + "'");
}

const std::vector<TaskExample>& split_examples(const TaskData& d, const std::string& split) {
  if (split == "train") return d.train;
  if (split == "dev") return d.dev;
  if (split == "test") return d.test;
  throw ConfigError("unknown split '" + split + "'");
}

// ---- commands ------------------------------------------------------------------

int cmd_synth(const Common& c, std::optional<std::uint64_t> seed) {
  std::vector<std::pair<std::string, std::string>> flags;
  if (seed) flags.push_back({"seed.corpus", std::to_string(*seed)});
  const RunConfig cfg = resolve(c, flags);
  const GeneratorConfig g = cfg.generator();
  const fs::path out = require_out(c);
  with_output(out, cfg, [&] {
    const CorpusSummary s = write_corpus(g, cfg.get_u64("seed.corpus"), out);
    json j = {{"apps", s.apps}, {"traces", s.traces}, {"screens", s.screens}, {"checksum", s.manifest_checksum}};
    std::cout << j.dump() << "\n";
  });
  return 0;
}

int cmd_build_dataset(const Common& c, const std::string& corpus, std::optional<std::uint64_t> split_seed,
                      std::optional<std::uint64_t> pair_seed, std::optional<double> mask_rate) {
  std::vector<std::pair<std::string, std::string>> flags;
  if (split_seed) flags.push_back({"seed.split", std::to_string(*split_seed)});
  if (pair_seed) flags.push_back({"seed.pairs", std::to_string(*pair_seed)});
  if (mask_rate) flags.push_back({"dataset.mask_rate", std::to_string(*mask_rate)});
  const RunConfig cfg = resolve(c, flags);
  const DatasetConfig d = cfg.dataset();
  const fs::path out = require_out(c);
  read_corpus(corpus);  // fails before any output exists
  with_output(out, cfg, [&] {
    const json m = build_dataset(corpus, d, out);
    json summary = {{"shards", m.at("shards")}, {"warnings", m.at("warnings").size()}};
    std::cout << summary.dump() << "\n";
  });
  return 0;
}

int cmd_pretrain(const Common& c, const std::string& dataset_dir, std::optional<std::int64_t> steps,
                 bool remask, bool paper_optim, const std::string& resume_dir) {
  std::vector<std::pair<std::string, std::string>> flags;
  if (steps) flags.push_back({"train.steps", std::to_string(*steps)});
  if (remask) flags.push_back({"train.remask_each_epoch", "true"});
  if (paper_optim) flags.push_back({"optim.paper", "true"});
  const RunConfig cfg = resolve(c, flags);
  const PretrainConfig p = cfg.pretrain();
  const fs::path out = require_out(c);
  const Dataset d = load_dataset(dataset_dir);
  std::optional<Checkpoint> resume;
  if (!resume_dir.empty()) resume = load_checkpoint(resume_dir);
  const ScreenStore store = store_for(d, p.model.text_buckets, p.threads);
  with_output(out, cfg, [&] {
    std::ofstream metrics(out / "metrics.jsonl");
    const auto t0 = std::chrono::steady_clock::now();
    Checkpoint ck = pretrain(p, d.train, store, &metrics, out / "checkpoints", resume);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const EvalMetrics dev = evaluate_pretrain(ck.model, d.dev, store, p.weights, p.threads);
    json j = dev.to_json();
    j["split"] = "dev";
    j["steps"] = ck.optimizer.step;
    j["seconds"] = secs;
    write_text(out / "dev_metrics.json", j.dump(2) + "\n");
    std::cout << j.dump() << "\n";
  });
  return 0;
}

Model<float> checkpoint_model(const std::string& dir) { return load_checkpoint(dir).model; }

int cmd_finetune(const Common& c, const std::string& dataset_dir, const std::string& checkpoint,
                 const std::string& task_flag, const std::string& init_flag, std::optional<std::uint64_t> seed) {
  std::vector<std::pair<std::string, std::string>> flags;
  if (!task_flag.empty()) flags.push_back({"finetune.task", task_flag});
  if (!init_flag.empty()) flags.push_back({"finetune.init", init_flag});
  if (seed) flags.push_back({"seed.finetune", std::to_string(*seed)});
  const RunConfig cfg = resolve(c, flags);
  if (cfg.get("finetune.task") == "pretrain") throw ConfigError("finetune needs a downstream task");
  const FinetuneConfig f = cfg.finetune();
  const fs::path out = require_out(c);
  const Dataset d = load_dataset(dataset_dir);
  std::optional<Model<float>> pre;
  if (!checkpoint.empty()) pre = checkpoint_model(checkpoint);
  if (!pre && !f.random_init) throw ConfigError("--checkpoint is required unless --init random");
  const ModelConfig mc = pre ? pre->config : cfg.model();
  const Corpus corpus = read_corpus(d.corpus_root);
  const ScreenStore store = ScreenStore::from_corpus(corpus, mc.text_buckets, f.threads);
  const TaskSpec spec = TaskSpec::make(parse_task(cfg.get("finetune.task")), corpus.config);
  const TaskData data = build_task_data(spec.task, corpus, d, store, cfg.task_limits());
  if (!pre) pre = init_params<float>(mc, cfg.get_u64("seed.init"));
  with_output(out, cfg, [&] {
    Model<float> tuned;
    TaskMetrics test = eval_task(spec, &*pre, data, f, &tuned);
    TaskMetrics dev = evaluate_task(tuned, spec, data.dev, "dev", f.threads);
    dev.init_mode = test.init_mode;
    dev.seed = test.seed;
    Checkpoint ck;
    ck.model = tuned;
    ck.lineage = {{"task", task_name(spec.task)}, {"init_mode", test.init_mode}, {"seed", f.seed}};
    save_checkpoint(ck, out / "checkpoint");
    json j = {{"test", test.to_json()}, {"dev", dev.to_json()}};
    write_text(out / "metrics.json", j.dump(2) + "\n");
    std::cout << test.to_json().dump() << "\n";
  });
  return 0;
}

int cmd_eval(const Common& c, const std::string& dataset_dir, const std::string& checkpoint,
             const std::string& task_flag, const std::string& split) {
  std::vector<std::pair<std::string, std::string>> flags;
  if (!task_flag.empty()) flags.push_back({"finetune.task", task_flag});
  const RunConfig cfg = resolve(c, flags);
  if (checkpoint.empty()) throw ConfigError("--checkpoint is required");
  const Dataset d = load_dataset(dataset_dir);
  const Model<float> model = checkpoint_model(checkpoint);
  const Corpus corpus = read_corpus(d.corpus_root);
  const ScreenStore store = ScreenStore::from_corpus(corpus, model.config.text_buckets, cfg.threads());
  json j;
  if (cfg.get("finetune.task") == "pretrain") {
    const PretrainConfig p = cfg.pretrain();
    j = evaluate_pretrain(model, split_pairs(d, split), store, p.weights, p.threads).to_json();
    j["task"] = "pretrain";
    j["split"] = split;
  } else {
    const TaskSpec spec = TaskSpec::make(parse_task(cfg.get("finetune.task")), corpus.config);
    const TaskData data = build_task_data(spec.task, corpus, d, store, cfg.task_limits());
    TaskMetrics m = evaluate_task(model, spec, split_examples(data, split), split, cfg.threads());
    m.init_mode = "checkpoint";
    j = m.to_json();
  }
  if (c.out.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    with_output(c.out, cfg, [&] {
      write_text(fs::path(c.out) / "metrics.json", j.dump(2) + "\n");
      std::cout << j.dump() << "\n";
    });
  }
  return 0;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

int cmd_inspect(const std::string& path) {
  const fs::path p = path;
  const fs::path manifest = p / "manifest.json";
  if (!fs::exists(manifest)) throw DataError("no manifest.json under " + path);
  const json m = read_json(manifest);
  json out;
  if (m.contains("format") && m.at("format") == "traceform-checkpoint") {
    const Checkpoint ck = load_checkpoint(p);
    std::size_t n = 0;
    for (int i = 0; i < ck.model.params.size(); ++i) n += static_cast<std::size_t>(ck.model.params[i].size());
    out = {{"kind", "checkpoint"},
           {"config", ck.model.config.to_json()},
           {"tensors", ck.model.params.size()},
           {"parameters", n},
           {"optimizer_step", ck.has_optimizer ? json(ck.optimizer.step) : json(nullptr)},
           {"lineage", ck.lineage}};
  } else if (m.contains("shards")) {
    const Dataset d = load_dataset(p);
    out = {{"kind", "dataset"},
           {"corpus", d.corpus_root.string()},
           {"apps", {{"train", d.split.train.size()}, {"dev", d.split.dev.size()}, {"test", d.split.test.size()}}},
           {"shards", m.at("shards")},
           {"warnings", m.at("warnings")}};
  } else {
    const Corpus corpus = read_corpus(p);
    out = {{"kind", "corpus"},
           {"seed", corpus.seed},
           {"apps", corpus.apps.size()},
           {"traces", corpus.traces.size()},
           {"checksum", corpus.manifest_checksum},
           {"config", corpus.config.to_json()}};
  }
  std::cout << out.dump(2) << "\n";
  return 0;
}

int exit_code_of(const std::exception_ptr& e) {
  try {
    std::rethrow_exception(e);
  } catch (const ConfigError& x) {
    std::cerr << "config error: " << x.what() << "\n";
    return 2;
  } catch (const NumericError& x) {
    std::cerr << "numeric error: " << x.what() << "\n";
    return 4;
  } catch (const DataError& x) {
    std::cerr << "data error: " << x.what() << "\n";
    return 3;
  } catch (const fs::filesystem_error& x) {
    std::cerr << "data error: " << x.what() << "\n";
    return 3;
  } catch (const std::exception& x) {
    std::cerr << "error: " << x.what() << "\n";
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"traceform: UI representation pre-training from interaction traces"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_file, "key = value config file")->check(CLI::ExistingFile);
    sub->add_option("--set", common.sets, "override one config key (key=value), repeatable");
    sub->add_option("--threads", common.threads, "worker threads (default TRACEFORM_THREADS or 1)");
    sub->add_option("--out", common.out, "output directory");
  };

  std::optional<std::uint64_t> seed, split_seed, pair_seed, ft_seed;
  std::optional<double> mask_rate;
  std::optional<std::int64_t> steps;
  std::string corpus, dataset, checkpoint, resume, task, init, split = "test", inspect_path;
  bool remask = false, paper_optim = false;

  auto* synth = app.add_subcommand("synth", "generate a synthetic corpus");
  add_common(synth);
  synth->add_option("--seed", seed, "corpus seed (seed.corpus)");

  auto* build = app.add_subcommand("build-dataset", "split a corpus by app and write pair shards");
  add_common(build);
  build->add_option("--corpus", corpus, "corpus directory")->required();
  build->add_option("--split-seed", split_seed);
  build->add_option("--pair-seed", pair_seed);
  build->add_option("--mask-rate", mask_rate);

  auto* pre = app.add_subcommand("pretrain", "pre-train on a dataset's training pairs");
  add_common(pre);
  pre->add_option("--dataset", dataset, "dataset directory")->required();
  pre->add_option("--steps", steps);
  pre->add_option("--resume", resume, "checkpoint to resume from");
  pre->add_flag("--remask-each-epoch", remask);
  pre->add_flag("--paper-optim", paper_optim, "learning rate 1e-5 and batch 128");

  auto* ft = app.add_subcommand("finetune", "fine-tune on a downstream task and report test metrics");
  add_common(ft);
  ft->add_option("--dataset", dataset)->required();
  ft->add_option("--checkpoint", checkpoint);
  ft->add_option("--task", task);
  ft->add_option("--init", init, "pretrained or random");
  ft->add_option("--seed", ft_seed, "fine-tuning seed (seed.finetune)");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint without further training");
  add_common(ev);
  ev->add_option("--dataset", dataset)->required();
  ev->add_option("--checkpoint", checkpoint);
  ev->add_option("--task", task, "a downstream task, lcp, or pretrain");
  ev->add_option("--split", split);

  auto* ins = app.add_subcommand("inspect", "summarise a corpus, dataset or checkpoint directory");
  ins->add_option("path", inspect_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*synth) return cmd_synth(common, seed);
    if (*build) return cmd_build_dataset(common, corpus, split_seed, pair_seed, mask_rate);
    if (*pre) return cmd_pretrain(common, dataset, steps, remask, paper_optim, resume);
    if (*ft) return cmd_finetune(common, dataset, checkpoint, task, init, ft_seed);
    if (*ev) {
      return cmd_eval(common, dataset, checkpoint, task == "lcp" ? "link_component" : task, split);
    }
    if (*ins) return cmd_inspect(inspect_path);
  } catch (...) {
    return exit_code_of(std::current_exception());
  }
  return 0;
}
