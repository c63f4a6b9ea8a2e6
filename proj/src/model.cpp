#include "traceform/model.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "traceform/errors.hpp"
#include "traceform/rng.hpp"

namespace traceform {

using nlohmann::json;

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (layers < 1) fail("layers must be >= 1");
  if (heads < 1) fail("heads must be >= 1");
  if (hidden < 1 || hidden % heads != 0) fail("hidden must be a positive multiple of heads");
  if (ffn_mult < 1) fail("ffn_mult must be >= 1");
  if (max_len < 6) fail("max_len too small for the mandatory tokens");
  if (dropout < 0 || dropout >= 1) fail("dropout must be in [0, 1)");
  if (text_buckets < 1) fail("text_buckets must be >= 1");
  if (text_dim < 1 || vision_dim < 1) fail("encoder dims must be >= 1");
}

json ModelConfig::to_json() const {
  return {{"layers", layers},         {"heads", heads},       {"hidden", hidden},
          {"ffn_mult", ffn_mult},     {"max_len", max_len},   {"dropout", dropout},
          {"text_buckets", text_buckets}, {"text_dim", text_dim}, {"vision_dim", vision_dim}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  c.layers = j.at("layers");
  c.heads = j.at("heads");
  c.hidden = j.at("hidden");
  c.ffn_mult = j.at("ffn_mult");
  c.max_len = j.at("max_len");
  c.dropout = j.at("dropout");
  c.text_buckets = j.at("text_buckets");
  c.text_dim = j.at("text_dim");
  c.vision_dim = j.at("vision_dim");
  return c;
}

ModelConfig ModelConfig::paper_base() {
  ModelConfig c;
  c.layers = 6;
  c.heads = 6;
  c.hidden = 768;
  c.text_dim = 768;
  c.vision_dim = 768;
  return c;
}

ModelConfig ModelConfig::paper_large() {
  ModelConfig c = paper_base();
  c.layers = 12;
  return c;
}

bool is_frozen(const std::string& name) { return name.rfind("frozen.", 0) == 0; }

double glorot_bound(Eigen::Index fan_in, Eigen::Index fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

namespace {

enum class InitKind { glorot, zero, one };

struct TensorDecl {
  std::string name;
  int rows;
  int cols;
  InitKind init;
};

std::vector<TensorDecl> declare(const ModelConfig& c) {
  std::vector<TensorDecl> d;
  const int h = c.hidden;
  auto proj = [&](const std::string& p, int in, int out, bool bias = true) {
    d.push_back({p + ".weight", in, out, InitKind::glorot});
    if (bias) d.push_back({p + ".bias", 1, out, InitKind::zero});
  };
  auto norm = [&](const std::string& p, int n) {
    d.push_back({p + ".gain", 1, n, InitKind::one});
    d.push_back({p + ".offset", 1, n, InitKind::zero});
  };
  d.push_back({"encoders.text.buckets", c.text_buckets, c.text_dim, InitKind::glorot});
  d.push_back({"encoders.text.special", 4, c.text_dim, InitKind::glorot});
  d.push_back({"encoders.text.mask", 1, c.text_dim, InitKind::glorot});
  proj("encoders.vision", kVisionInput, c.vision_dim);
  d.push_back({"encoders.vision.img", 1, c.vision_dim, InitKind::glorot});
  proj("fusion.text", c.text_dim, h);
  norm("fusion.text.norm", h);
  proj("fusion.vision", c.vision_dim, h);
  norm("fusion.vision.norm", h);
  proj("fusion.position", kPositionalDim, h);
  norm("fusion.position.norm", h);
  proj("fusion.segment", kSegmentCount, h);
  norm("fusion.segment.norm", h);
  for (int l = 0; l < c.layers; ++l) {
    const std::string p = "transformer.layer" + std::to_string(l);
    norm(p + ".attn_norm", h);
    proj(p + ".query", h, h);
    proj(p + ".key", h, h);
    proj(p + ".value", h, h);
    proj(p + ".output", h, h);
    norm(p + ".ffn_norm", h);
    proj(p + ".ffn_in", h, h * c.ffn_mult);
    proj(p + ".ffn_out", h * c.ffn_mult, h);
  }
  norm("transformer.final_norm", h);
  proj("heads.lcp.fc1", h, h);
  proj("heads.lcp.fc2", h, 1);
  proj("heads.cui.fc1", h, h);
  proj("heads.cui.fc2", h, 1);
  if (c.text_dim != h) d.push_back({"frozen.mask_adapter", c.text_dim, h, InitKind::glorot});
  return d;
}

template <typename T>
void fill(ag::Matrix<T>& m, InitKind kind, std::uint64_t seed, const std::string& name) {
  switch (kind) {
    case InitKind::zero: m.setZero(); return;
    case InitKind::one: m.setOnes(); return;
    case InitKind::glorot: {
      const double bound = glorot_bound(m.rows(), m.cols());
      Rng rng = Rng::stream(seed, "init:" + name);
      for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
      }
      return;
    }
  }
}

Projection find_proj(const std::vector<std::string>& names, const std::string& p, bool bias = true) {
  auto idx = [&](const std::string& n) {
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] == n) return static_cast<int>(i);
    }
    throw DataError("parameter set lacks tensor " + n);
  };
  return Projection{idx(p + ".weight"), bias ? idx(p + ".bias") : -1};
}

Norm find_norm(const std::vector<std::string>& names, const std::string& p) {
  Projection pr;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == p + ".gain") pr.weight = static_cast<int>(i);
    if (names[i] == p + ".offset") pr.bias = static_cast<int>(i);
  }
  if (pr.weight < 0 || pr.bias < 0) throw DataError("parameter set lacks norm " + p);
  return Norm{pr.weight, pr.bias};
}

int find_one(const std::vector<std::string>& names, const std::string& n) {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == n) return static_cast<int>(i);
  }
  throw DataError("parameter set lacks tensor " + n);
}

}  // namespace

ModelLayout layout_from_names(const ModelConfig& cfg, const std::vector<std::string>& names) {
  ModelLayout L;
  L.text_buckets = find_one(names, "encoders.text.buckets");
  L.text_special = find_one(names, "encoders.text.special");
  L.text_mask = find_one(names, "encoders.text.mask");
  L.vision = find_proj(names, "encoders.vision");
  L.vision_img = find_one(names, "encoders.vision.img");
  auto stream = [&](const std::string& p) { return StreamFusion{find_proj(names, p), find_norm(names, p + ".norm")}; };
  L.text_stream = stream("fusion.text");
  L.vision_stream = stream("fusion.vision");
  L.position_stream = stream("fusion.position");
  L.segment_stream = stream("fusion.segment");
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "transformer.layer" + std::to_string(l);
    LayerLayout ly;
    ly.attn_norm = find_norm(names, p + ".attn_norm");
    ly.query = find_proj(names, p + ".query");
    ly.key = find_proj(names, p + ".key");
    ly.value = find_proj(names, p + ".value");
    ly.output = find_proj(names, p + ".output");
    ly.ffn_norm = find_norm(names, p + ".ffn_norm");
    ly.ffn_in = find_proj(names, p + ".ffn_in");
    ly.ffn_out = find_proj(names, p + ".ffn_out");
    L.layers.push_back(ly);
  }
  L.final_norm = find_norm(names, "transformer.final_norm");
  L.lcp = MlpHead{find_proj(names, "heads.lcp.fc1"), find_proj(names, "heads.lcp.fc2")};
  L.cui = MlpHead{find_proj(names, "heads.cui.fc1"), find_proj(names, "heads.cui.fc2")};
  if (cfg.text_dim != cfg.hidden) L.mask_adapter = find_one(names, "frozen.mask_adapter");
  return L;
}

template <typename T>
Model<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model<T> m;
  m.config = cfg;
  std::vector<std::string> names;
  for (const auto& d : declare(cfg)) {
    ag::Matrix<T> v(d.rows, d.cols);
    fill(v, d.init, seed, d.name);
    m.params.add(d.name, std::move(v));
    names.push_back(d.name);
  }
  m.layout = layout_from_names(cfg, names);
  return m;
}

template <typename T>
Projection ensure_linear_head(Model<T>& model, const std::string& prefix, int in, int out, std::uint64_t seed) {
  const std::string w = prefix + ".weight";
  const std::string b = prefix + ".bias";
  if (model.params.contains(w)) {
    const auto& existing = model.params[model.params.index(w)];
    if (existing.rows() != in || existing.cols() != out) {
      throw ConfigError("head " + prefix + " has incompatible shape");
    }
    return Projection{model.params.index(w), model.params.index(b)};
  }
  ag::Matrix<T> wv(in, out);
  fill(wv, InitKind::glorot, seed, w);
  ag::Matrix<T> bv = ag::Matrix<T>::Zero(1, out);
  const int wi = model.params.add(w, std::move(wv));
  const int bi = model.params.add(b, std::move(bv));
  return Projection{wi, bi};
}

template <typename T>
ag::Var dropout(ag::Tape<T>& t, ag::Var x, const Dropout& d, int site) {
  if (!d.active()) return x;
  const auto& v = t.value(x);
  ag::Matrix<T> factor(v.rows(), v.cols());
  Rng rng = Rng::stream(d.seed, "dropout", d.key, static_cast<std::uint64_t>(site));
  const T keep = static_cast<T>(1.0 / (1.0 - d.rate));
  for (Eigen::Index i = 0; i < factor.size(); ++i) factor.data()[i] = rng.uniform() < d.rate ? T(0) : keep;
  return ag::multiply_const(t, x, std::move(factor));
}

template Model<float> init_params<float>(const ModelConfig&, std::uint64_t);
template Model<double> init_params<double>(const ModelConfig&, std::uint64_t);
template Projection ensure_linear_head<float>(Model<float>&, const std::string&, int, int, std::uint64_t);
template Projection ensure_linear_head<double>(Model<double>&, const std::string&, int, int, std::uint64_t);
template ag::Var dropout<float>(ag::Tape<float>&, ag::Var, const Dropout&, int);
template ag::Var dropout<double>(ag::Tape<double>&, ag::Var, const Dropout&, int);

}  // namespace traceform
