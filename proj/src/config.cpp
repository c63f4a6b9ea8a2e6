#include "traceform/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "traceform/errors.hpp"
#include "traceform/parallel.hpp"

namespace traceform {

namespace {

enum class Kind { integer, unsigned_integer, real, boolean, text };

struct KeyInfo {
  Kind kind;
  std::string fallback;
  std::vector<std::string> choices;  // for text keys, empty = free-form
};

const std::map<std::string, KeyInfo>& registry() {
  static const std::map<std::string, KeyInfo> r = [] {
    const GeneratorConfig g;
    const DatasetConfig d;
    const ModelConfig m;
    const PretrainConfig p;
    const FinetuneConfig f;
    const TaskDataLimits lim;
    auto i = [](auto v) { return KeyInfo{Kind::integer, std::to_string(v), {}}; };
    auto u = [](std::uint64_t v) { return KeyInfo{Kind::unsigned_integer, std::to_string(v), {}}; };
    auto x = [](double v) {
      std::ostringstream os;
      os.precision(17);
      os << v;
      return KeyInfo{Kind::real, os.str(), {}};
    };
    auto b = [](bool v) { return KeyInfo{Kind::boolean, v ? "true" : "false", {}}; };
    std::map<std::string, KeyInfo> k;
    k["seed.corpus"] = u(1);
    k["seed.split"] = u(d.split_seed);
    k["seed.pairs"] = u(d.pair_seed);
    k["seed.init"] = u(p.init_seed);
    k["seed.train"] = u(p.train_seed);
    k["seed.finetune"] = u(f.seed);
    k["seed.task_data"] = u(lim.seed);
    k["threads"] = i(0);

    k["corpus.apps"] = i(g.apps);
    k["corpus.traces_per_app"] = i(g.traces_per_app);
    k["corpus.min_screens"] = i(g.min_screens);
    k["corpus.max_screens"] = i(g.max_screens);
    k["corpus.min_components"] = i(g.min_components);
    k["corpus.max_components"] = i(g.max_components);
    k["corpus.max_links"] = i(g.max_links);
    k["corpus.max_trace_len"] = i(g.max_trace_len);
    k["corpus.icon_classes"] = i(g.icon_classes);
    k["corpus.app_type_count"] = i(g.app_type_count);
    k["corpus.screen_width"] = i(g.screen_width);
    k["corpus.screen_height"] = i(g.screen_height);
    k["corpus.grid_cols"] = i(g.grid_cols);
    k["corpus.grid_rows"] = i(g.grid_rows);
    k["corpus.text_noise"] = x(g.text_noise);
    k["corpus.deepen_prob"] = x(g.deepen_prob);

    k["dataset.mask_rate"] = x(d.mask_rate);

    k["model.preset"] = KeyInfo{Kind::text, "desk", {"desk", "base", "large"}};
    k["model.layers"] = i(m.layers);
    k["model.heads"] = i(m.heads);
    k["model.hidden"] = i(m.hidden);
    k["model.ffn_mult"] = i(m.ffn_mult);
    k["model.max_len"] = i(m.max_len);
    k["model.dropout"] = x(m.dropout);
    k["model.text_buckets"] = i(m.text_buckets);
    k["model.text_dim"] = i(m.text_dim);
    k["model.vision_dim"] = i(m.vision_dim);

    k["loss.lambda_cui"] = x(p.weights.lambda_cui);
    k["loss.lambda_mask"] = x(p.weights.lambda_mask);

    k["optim.paper"] = b(false);
    k["optim.lr"] = x(p.adam.lr);
    k["optim.beta1"] = x(p.adam.beta1);
    k["optim.beta2"] = x(p.adam.beta2);
    k["optim.eps"] = x(p.adam.eps);

    k["train.batch"] = i(p.batch);
    k["train.steps"] = i(p.steps);
    k["train.log_every"] = i(p.log_every);
    k["train.checkpoint_every"] = i(p.checkpoint_every);
    k["train.remask_each_epoch"] = b(p.remask_each_epoch);

    k["finetune.task"] = KeyInfo{Kind::text, "icon_cls",
                                 {"similar_component", "referring_expression", "icon_cls", "app_type_cls",
                                  "link_component", "pretrain"}};
    k["finetune.init"] = KeyInfo{Kind::text, "pretrained", {"pretrained", "random"}};
    k["finetune.epochs"] = i(f.epochs);
    k["finetune.batch"] = i(f.batch);
    k["finetune.lr"] = x(f.adam.lr);
    k["finetune.train_examples"] = i(lim.train);
    k["finetune.eval_examples"] = i(lim.eval);
    return k;
  }();
  return r;
}

const KeyInfo& info(const std::string& key) {
  auto it = registry().find(key);
  if (it == registry().end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename N>
bool parse_number(const std::string& s, N& out) {
  if (s.empty()) return false;
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && p == end;
}

bool parse_real(const std::string& s, double& out) {
  if (s.empty()) return false;
  try {
    std::size_t pos = 0;
    out = std::stod(s, &pos);
    return pos == s.size();
  } catch (const std::exception&) {
    return false;
  }
}

bool parse_bool(const std::string& s, bool& out) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return out = true, true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return out = false, true;
  return false;
}

void check_value(const std::string& key, const KeyInfo& k, const std::string& v) {
  bool ok = true;
  switch (k.kind) {
    case Kind::integer: {
      std::int64_t n;
      ok = parse_number(v, n);
      break;
    }
    case Kind::unsigned_integer: {
      std::uint64_t n;
      ok = parse_number(v, n);
      break;
    }
    case Kind::real: {
      double n;
      ok = parse_real(v, n);
      break;
    }
    case Kind::boolean: {
      bool n;
      ok = parse_bool(v, n);
      break;
    }
    case Kind::text:
      ok = k.choices.empty() || std::find(k.choices.begin(), k.choices.end(), v) != k.choices.end();
      break;
  }
  if (!ok) throw ConfigError("invalid value '" + v + "' for config key '" + key + "'");
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& [k, v] : registry()) out.push_back(k);
  return out;
}

RunConfig::RunConfig() {
  for (const auto& [k, v] : registry()) values_[k] = v.fallback;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const KeyInfo& k = info(key);
  const std::string v = trim(value);
  check_value(key, k, v);
  values_[key] = v;
}

void RunConfig::merge_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(where + ": empty key");
    if (!section.empty()) key = section + "." + key;
    try {
      set(key, line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  merge_text(ss.str(), path.string());
}

bool RunConfig::has_key(const std::string& key) const { return registry().count(key) != 0; }

const std::string& RunConfig::get(const std::string& key) const {
  info(key);
  return values_.at(key);
}

std::int64_t RunConfig::get_int(const std::string& key) const {
  std::int64_t n = 0;
  if (!parse_number(get(key), n)) throw ConfigError("config key '" + key + "' is not an integer");
  return n;
}

std::uint64_t RunConfig::get_u64(const std::string& key) const {
  std::uint64_t n = 0;
  if (!parse_number(get(key), n)) throw ConfigError("config key '" + key + "' is not an unsigned integer");
  return n;
}

double RunConfig::get_double(const std::string& key) const {
  double n = 0;
  if (!parse_real(get(key), n)) throw ConfigError("config key '" + key + "' is not a number");
  return n;
}

bool RunConfig::get_bool(const std::string& key) const {
  bool b = false;
  if (!parse_bool(get(key), b)) throw ConfigError("config key '" + key + "' is not a boolean");
  return b;
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
  return os.str();
}

int RunConfig::threads() const { return resolve_threads(static_cast<int>(get_int("threads"))); }

GeneratorConfig RunConfig::generator() const {
  GeneratorConfig g;
  g.apps = static_cast<int>(get_int("corpus.apps"));
  g.traces_per_app = static_cast<int>(get_int("corpus.traces_per_app"));
  g.min_screens = static_cast<int>(get_int("corpus.min_screens"));
  g.max_screens = static_cast<int>(get_int("corpus.max_screens"));
  g.min_components = static_cast<int>(get_int("corpus.min_components"));
  g.max_components = static_cast<int>(get_int("corpus.max_components"));
  g.max_links = static_cast<int>(get_int("corpus.max_links"));
  g.max_trace_len = static_cast<int>(get_int("corpus.max_trace_len"));
  g.icon_classes = static_cast<int>(get_int("corpus.icon_classes"));
  g.app_type_count = static_cast<int>(get_int("corpus.app_type_count"));
  g.screen_width = static_cast<int>(get_int("corpus.screen_width"));
  g.screen_height = static_cast<int>(get_int("corpus.screen_height"));
  g.grid_cols = static_cast<int>(get_int("corpus.grid_cols"));
  g.grid_rows = static_cast<int>(get_int("corpus.grid_rows"));
  g.text_noise = get_double("corpus.text_noise");
  g.deepen_prob = get_double("corpus.deepen_prob");
  g.threads = threads();
  g.validate();
  return g;
}

DatasetConfig RunConfig::dataset() const {
  DatasetConfig d;
  d.split_seed = get_u64("seed.split");
  d.pair_seed = get_u64("seed.pairs");
  d.mask_rate = get_double("dataset.mask_rate");
  d.threads = threads();
  if (!(d.mask_rate >= 0 && d.mask_rate <= 1)) throw ConfigError("dataset.mask_rate must lie in [0, 1]");
  return d;
}

ModelConfig RunConfig::model() const {
  const std::string& preset = get("model.preset");
  ModelConfig m;
  if (preset == "base") {
    m = ModelConfig::paper_base();
  } else if (preset == "large") {
    m = ModelConfig::paper_large();
  } else {
    m.layers = static_cast<int>(get_int("model.layers"));
    m.heads = static_cast<int>(get_int("model.heads"));
    m.hidden = static_cast<int>(get_int("model.hidden"));
    m.ffn_mult = static_cast<int>(get_int("model.ffn_mult"));
    m.text_dim = static_cast<int>(get_int("model.text_dim"));
    m.vision_dim = static_cast<int>(get_int("model.vision_dim"));
  }
  m.max_len = static_cast<int>(get_int("model.max_len"));
  m.dropout = get_double("model.dropout");
  m.text_buckets = static_cast<int>(get_int("model.text_buckets"));
  m.validate();
  return m;
}

PretrainConfig RunConfig::pretrain() const {
  PretrainConfig p;
  p.model = model();
  p.weights.lambda_cui = get_double("loss.lambda_cui");
  p.weights.lambda_mask = get_double("loss.lambda_mask");
  p.weights.validate();
  if (get_bool("optim.paper")) {
    p.adam = AdamConfig::paper();
    p.batch = 128;
  } else {
    p.adam.lr = get_double("optim.lr");
    p.adam.beta1 = get_double("optim.beta1");
    p.adam.beta2 = get_double("optim.beta2");
    p.adam.eps = get_double("optim.eps");
    p.batch = static_cast<int>(get_int("train.batch"));
  }
  p.steps = get_int("train.steps");
  p.log_every = static_cast<int>(get_int("train.log_every"));
  p.checkpoint_every = get_int("train.checkpoint_every");
  p.init_seed = get_u64("seed.init");
  p.train_seed = get_u64("seed.train");
  p.remask_each_epoch = get_bool("train.remask_each_epoch");
  p.mask_rate = get_double("dataset.mask_rate");
  p.threads = threads();
  if (p.batch < 1 || p.steps < 0 || p.log_every < 1 || p.checkpoint_every < 0) {
    throw ConfigError("invalid training schedule");
  }
  if (!(p.adam.lr > 0) || !(p.adam.eps > 0)) throw ConfigError("optimizer lr and eps must be positive");
  return p;
}

FinetuneConfig RunConfig::finetune() const {
  FinetuneConfig f;
  f.epochs = static_cast<int>(get_int("finetune.epochs"));
  f.batch = static_cast<int>(get_int("finetune.batch"));
  f.adam.lr = get_double("finetune.lr");
  f.seed = get_u64("seed.finetune");
  f.random_init = get("finetune.init") == "random";
  f.init_seed = get_u64("seed.init");
  f.threads = threads();
  if (f.epochs < 0 || f.batch < 1) throw ConfigError("invalid fine-tuning schedule");
  return f;
}

TaskDataLimits RunConfig::task_limits() const {
  TaskDataLimits l;
  const auto tr = get_int("finetune.train_examples");
  const auto ev = get_int("finetune.eval_examples");
  if (tr < 1 || ev < 1) throw ConfigError("task example limits must be positive");
  l.train = static_cast<std::size_t>(tr);
  l.eval = static_cast<std::size_t>(ev);
  l.seed = get_u64("seed.task_data");
  return l;
}

}  // namespace traceform
