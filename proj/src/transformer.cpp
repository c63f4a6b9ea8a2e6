#include "traceform/transformer.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "traceform/errors.hpp"
#include "traceform/hash.hpp"

namespace traceform {

using ag::Matrix;
using ag::Var;
namespace fs = std::filesystem;

namespace {

template <typename T>
Var proj(ag::Tape<T>& t, Var x, const Projection& p) {
  return ag::linear(t, x, t.param(p.weight), p.bias >= 0 ? t.param(p.bias) : Var{});
}

template <typename T>
Var norm(ag::Tape<T>& t, Var x, const Norm& n) {
  return ag::layer_norm(t, x, t.param(n.gain), t.param(n.offset));
}

}  // namespace

template <typename T>
Var encode(ag::Tape<T>& t, const Model<T>& model, Var x, const std::vector<bool>& attention_mask, const Dropout& drop) {
  const auto& in = t.value(x);
  if (in.cols() != model.config.hidden) throw ConfigError("encoder input width disagrees with hidden size");
  if (static_cast<Eigen::Index>(attention_mask.size()) != in.rows()) throw ConfigError("attention mask length");
  if (!in.allFinite()) throw NumericError("non-finite encoder input");
  Var h = x;
  int site = 1;
  for (const LayerLayout& ly : model.layout.layers) {
    Var a = norm(t, h, ly.attn_norm);
    Var att = ag::attention(t, proj(t, a, ly.query), proj(t, a, ly.key), proj(t, a, ly.value), attention_mask,
                            model.config.heads);
    h = ag::add(t, h, dropout(t, proj(t, att, ly.output), drop, site++));
    Var f = norm(t, h, ly.ffn_norm);
    f = proj(t, ag::gelu(t, proj(t, f, ly.ffn_in)), ly.ffn_out);
    h = ag::add(t, h, dropout(t, f, drop, site++));
  }
  return ag::mask_rows(t, norm(t, h, model.layout.final_norm), attention_mask);
}

template <typename T>
Matrix<T> contextual_embeddings(const Model<T>& model, const TokenSequence& seq) {
  ag::Tape<T> t(&model.params, nullptr);
  Var x = fuse_inputs(t, model, seq, Dropout{});
  return t.value(encode(t, model, x, seq.attention_mask, Dropout{}));
}

template Var encode<float>(ag::Tape<float>&, const Model<float>&, Var, const std::vector<bool>&, const Dropout&);
template Var encode<double>(ag::Tape<double>&, const Model<double>&, Var, const std::vector<bool>&, const Dropout&);
template Matrix<float> contextual_embeddings<float>(const Model<float>&, const TokenSequence&);
template Matrix<double> contextual_embeddings<double>(const Model<double>&, const TokenSequence&);

// ---- checkpoints -------------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

void write_tensor(const Matrix<float>& m, const fs::path& path) {
  std::vector<std::uint32_t> words(static_cast<std::size_t>(m.size()));
  for (std::size_t i = 0; i < words.size(); ++i) {
    std::uint32_t w;
    std::memcpy(&w, m.data() + i, 4);
    if constexpr (std::endian::native == std::endian::big) w = __builtin_bswap32(w);
    words[i] = w;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(words.data()), static_cast<std::streamsize>(words.size() * 4));
  if (!out) throw DataError("write failed for " + path.string());
}

Matrix<float> read_tensor(const fs::path& path, Eigen::Index rows, Eigen::Index cols) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing tensor file " + path.string());
  std::vector<std::uint32_t> words(static_cast<std::size_t>(rows * cols));
  in.read(reinterpret_cast<char*>(words.data()), static_cast<std::streamsize>(words.size() * 4));
  if (in.gcount() != static_cast<std::streamsize>(words.size() * 4) || in.peek() != EOF) {
    throw DataError("tensor file has the wrong size: " + path.string());
  }
  Matrix<float> m(rows, cols);
  for (std::size_t i = 0; i < words.size(); ++i) {
    std::uint32_t w = words[i];
    if constexpr (std::endian::native == std::endian::big) w = __builtin_bswap32(w);
    std::memcpy(m.data() + i, &w, 4);
  }
  return m;
}

nlohmann::json write_set(const ag::ParamSet<float>& set, const fs::path& dir, const std::string& suffix) {
  nlohmann::json list = nlohmann::json::array();
  for (int i = 0; i < set.size(); ++i) {
    const std::string file = set.name(i) + suffix + ".f32";
    write_tensor(set[i], dir / "tensors" / file);
    list.push_back({{"name", set.name(i)},
                    {"rows", set[i].rows()},
                    {"cols", set[i].cols()},
                    {"file", "tensors/" + file},
                    {"checksum", file_checksum((dir / "tensors" / file).string())}});
  }
  return list;
}

ag::ParamSet<float> read_set(const nlohmann::json& list, const fs::path& dir) {
  ag::ParamSet<float> set;
  for (const auto& e : list) {
    set.add(e.at("name"), read_tensor(dir / e.at("file").get<std::string>(), e.at("rows"), e.at("cols")));
  }
  return set;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const fs::path& dir) {
  fs::create_directories(dir / "tensors");
  nlohmann::json manifest = {{"format", "traceform-checkpoint"},
                             {"format_version", kCheckpointFormatVersion},
                             {"config", ckpt.model.config.to_json()},
                             {"lineage", ckpt.lineage},
                             {"tensors", write_set(ckpt.model.params, dir, "")}};
  if (ckpt.has_optimizer) {
    manifest["optimizer"] = {{"step", ckpt.optimizer.step},
                             {"m", write_set(ckpt.optimizer.m, dir, ".adam_m")},
                             {"v", write_set(ckpt.optimizer.v, dir, ".adam_v")}};
  }
  std::ofstream out(dir / "manifest.json", std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint manifest in " + dir.string());
  out << manifest.dump(1) << "\n";
}

Checkpoint load_checkpoint(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  std::ifstream in(mpath, std::ios::binary);
  if (!in) throw DataError("no checkpoint manifest at " + mpath.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("malformed checkpoint manifest " + mpath.string(), e.byte);
  }
  if (manifest.value("format", "") != "traceform-checkpoint") throw DataError("not a checkpoint: " + dir.string());
  if (manifest.value("format_version", -1) != kCheckpointFormatVersion) {
    throw DataError("checkpoint format version mismatch in " + mpath.string());
  }
  Checkpoint ckpt;
  ckpt.model.config = ModelConfig::from_json(manifest.at("config"));
  ckpt.model.config.validate();
  ckpt.model.params = read_set(manifest.at("tensors"), dir);
  std::vector<std::string> names;
  for (int i = 0; i < ckpt.model.params.size(); ++i) names.push_back(ckpt.model.params.name(i));
  ckpt.model.layout = layout_from_names(ckpt.model.config, names);
  ckpt.lineage = manifest.value("lineage", nlohmann::json::object());
  if (manifest.contains("optimizer")) {
    const auto& o = manifest.at("optimizer");
    ckpt.has_optimizer = true;
    ckpt.optimizer.step = o.at("step");
    ckpt.optimizer.m = read_set(o.at("m"), dir);
    ckpt.optimizer.v = read_set(o.at("v"), dir);
  }
  return ckpt;
}

}  // namespace traceform
