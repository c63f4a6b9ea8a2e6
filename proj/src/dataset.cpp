#include "traceform/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "traceform/errors.hpp"
#include "traceform/hash.hpp"
#include "traceform/parallel.hpp"
#include "traceform/rng.hpp"

namespace traceform {

namespace fs = std::filesystem;
using nlohmann::json;

Split split_by_app(std::vector<std::string> app_ids, std::uint64_t seed) {
  if (app_ids.size() < 3) throw DataError("splitting needs at least 3 apps, got " + std::to_string(app_ids.size()));
  std::sort(app_ids.begin(), app_ids.end());
  if (std::adjacent_find(app_ids.begin(), app_ids.end()) != app_ids.end()) throw DataError("duplicate app id in split");
  Rng rng = Rng::stream(seed, "split");
  rng.shuffle(app_ids);
  const std::size_t n = app_ids.size();
  // Every split keeps at least one app.
  const auto n_train = std::min(static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(n))), n - 2);
  auto n_dev = static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n)));
  n_dev = std::max<std::size_t>(1, std::min(n_dev, n - n_train - 1));
  Split s;
  s.train.assign(app_ids.begin(), app_ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.dev.assign(app_ids.begin() + static_cast<std::ptrdiff_t>(n_train),
               app_ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev));
  s.test.assign(app_ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev), app_ids.end());
  return s;
}

const char* negative_kind_name(NegativeKind k) {
  switch (k) {
    case NegativeKind::none: return "none";
    case NegativeKind::same_sequence: return "same_sequence";
    case NegativeKind::cross_sequence: return "cross_sequence";
  }
  return "?";
}

std::vector<PairSample> build_pairs(const std::vector<Trace>& traces, std::uint64_t seed, PairStats* stats,
                                    std::uint64_t id_base) {
  PairStats local;
  PairStats& st = stats ? *stats : local;
  st = PairStats{};
  if (traces.size() < 2) throw DataError("pair building needs at least 2 traces");

  struct Anchor {
    std::size_t trace;
    std::size_t step;
  };
  std::vector<Anchor> anchors;
  std::vector<std::size_t> usable;
  for (std::size_t t = 0; t < traces.size(); ++t) {
    const Trace& tr = traces[t];
    if (tr.screens.size() < 2 || tr.actions.size() + 1 != tr.screens.size()) {
      st.warnings.push_back("skipped trace " + tr.trace_id + " (fewer than two screens)");
      continue;
    }
    usable.push_back(t);
    for (std::size_t i = 0; i + 1 < tr.screens.size(); ++i) anchors.push_back({t, i});
  }
  if (usable.size() < 2) throw DataError("pair building needs at least 2 usable traces");
  bool multi_app = false;
  for (std::size_t u : usable) multi_app = multi_app || traces[u].app_id != traces[usable[0]].app_id;

  std::vector<std::size_t> order(anchors.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  Rng order_rng = Rng::stream(seed, "negative-order");
  order_rng.shuffle(order);
  const std::size_t want_same = anchors.size() / 2;
  std::vector<NegativeKind> kind(anchors.size(), NegativeKind::cross_sequence);
  std::size_t same = 0;
  for (std::size_t k : order) {
    if (same == want_same) break;
    if (traces[anchors[k].trace].screens.size() >= 3) {
      kind[k] = NegativeKind::same_sequence;
      ++same;
    }
  }
  if (same < want_same) {
    st.warnings.push_back("backfilled " + std::to_string(want_same - same) +
                          " same-sequence negatives from other sequences (traces too short)");
  }

  auto leaf_count = [&](std::size_t t, std::size_t i) { return traces[t].screens[i].vh.leaves.size(); };
  auto make = [&](std::size_t ta, std::size_t ia, std::size_t tb, std::size_t ib) {
    PairSample p;
    const Trace& a = traces[ta];
    const Trace& b = traces[tb];
    p.trace_id = a.trace_id;
    p.app_a = a.screens[ia].app_id;
    p.app_b = b.screens[ib].app_id;
    p.ui_a = a.screens[ia].screen_id;
    p.ui_b = b.screens[ib].screen_id;
    p.mask_a.assign(leaf_count(ta, ia), false);
    p.mask_b.assign(leaf_count(tb, ib), false);
    return p;
  };

  std::vector<PairSample> out;
  out.reserve(anchors.size() * 2);
  for (std::size_t k = 0; k < anchors.size(); ++k) {
    const auto [t, i] = anchors[k];
    const Trace& tr = traces[t];
    PairSample pos = make(t, i, t, i + 1);
    pos.label_consecutive = true;
    const Action& act = tr.actions[i];
    if (auto hit = hit_test(tr.screens[i].vh.leaves, act.x, act.y)) {
      pos.link_component = static_cast<int>(*hit);
    } else {
      ++st.unresolved_clicks;
    }
    pos.id = id_base + out.size();
    out.push_back(std::move(pos));
    ++st.positives;

    Rng rng = Rng::stream(seed, "negative", k);
    PairSample neg;
    if (kind[k] == NegativeKind::same_sequence) {
      const std::size_t T = tr.screens.size();
      std::size_t j = static_cast<std::size_t>(rng.below(T - 2));
      if (j >= i) ++j;      // skip i
      if (j >= i + 1) ++j;  // skip i + 1
      neg = make(t, i, t, j);
      ++st.same_sequence;
    } else {
      std::size_t other = t;
      for (int attempt = 0; attempt < 64; ++attempt) {
        const std::size_t c = usable[static_cast<std::size_t>(rng.below(usable.size()))];
        if (c != t && (!multi_app || traces[c].app_id != tr.app_id)) {
          other = c;
          break;
        }
      }
      if (other == t) {
        for (std::size_t c : usable) {
          if (c != t && (!multi_app || traces[c].app_id != tr.app_id)) {
            other = c;
            break;
          }
        }
      }
      const std::size_t j = static_cast<std::size_t>(rng.below(traces[other].screens.size()));
      neg = make(t, i, other, j);
      ++st.cross_sequence;
    }
    neg.negative_kind = kind[k];
    neg.id = id_base + out.size();
    out.push_back(std::move(neg));
  }
  return out;
}

PairSample apply_text_mask(PairSample sample, double rate, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw ConfigError("mask rate must lie in [0, 1]");
  Rng rng = Rng::stream(seed, "mask", sample.id);
  for (std::size_t i = 0; i < sample.mask_a.size(); ++i) sample.mask_a[i] = rng.uniform() < rate;
  for (std::size_t i = 0; i < sample.mask_b.size(); ++i) sample.mask_b[i] = rng.uniform() < rate;
  return sample;
}

// ---- shards ------------------------------------------------------------------

namespace {

constexpr char kShardMagic[8] = {'T', 'F', 'S', 'H', 'A', 'R', 'D', '1'};

void put_u32(std::string& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void put_u64(std::string& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void put_str(std::string& b, const std::string& s) {
  put_u32(b, static_cast<std::uint32_t>(s.size()));
  b += s;
}
void put_flags(std::string& b, const std::vector<bool>& f) {
  put_u32(b, static_cast<std::uint32_t>(f.size()));
  for (bool x : f) b.push_back(x ? 1 : 0);
}

struct Reader {
  const unsigned char* p;
  std::size_t n;
  std::size_t pos = 0;
  bool ok = true;

  bool need(std::size_t k) {
    if (pos + k > n) ok = false;
    return ok;
  }
  std::uint64_t uint(int bytes) {
    if (!need(static_cast<std::size_t>(bytes))) return 0;
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[pos + static_cast<std::size_t>(i)]) << (8 * i);
    pos += static_cast<std::size_t>(bytes);
    return v;
  }
  std::string str() {
    const auto len = static_cast<std::size_t>(uint(4));
    if (!need(len)) return {};
    std::string s(reinterpret_cast<const char*>(p + pos), len);
    pos += len;
    return s;
  }
  std::vector<bool> flags() {
    const auto len = static_cast<std::size_t>(uint(4));
    if (!need(len)) return {};
    std::vector<bool> f(len);
    for (std::size_t i = 0; i < len; ++i) f[i] = p[pos + i] != 0;
    pos += len;
    return f;
  }
};

}  // namespace

void write_shard(const std::vector<PairSample>& samples, const fs::path& path) {
  std::string buf(kShardMagic, sizeof kShardMagic);
  put_u32(buf, kShardFormatVersion);
  put_u64(buf, samples.size());
  std::string rec;
  for (const auto& s : samples) {
    rec.clear();
    put_u64(rec, s.id);
    put_str(rec, s.trace_id);
    put_str(rec, s.app_a);
    put_str(rec, s.app_b);
    put_str(rec, s.ui_a);
    put_str(rec, s.ui_b);
    rec.push_back(s.label_consecutive ? 1 : 0);
    put_u32(rec, static_cast<std::uint32_t>(s.link_component ? *s.link_component : -1));
    rec.push_back(static_cast<char>(s.negative_kind));
    put_flags(rec, s.mask_a);
    put_flags(rec, s.mask_b);
    put_u32(buf, static_cast<std::uint32_t>(rec.size()));
    buf += rec;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write shard " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("write failed for shard " + path.string());
}

std::vector<PairSample> read_shard(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read shard " + path.string());
  const std::string data((std::istreambuf_iterator<char>(in)), {});
  if (data.size() < 20 || std::memcmp(data.data(), kShardMagic, 7) != 0) {
    throw DataError("shard header is not recognised (format version error): " + path.string());
  }
  Reader r{reinterpret_cast<const unsigned char*>(data.data()), data.size(), 8};
  const auto version = static_cast<std::uint32_t>(r.uint(4));
  if (data[7] != kShardMagic[7] || version != kShardFormatVersion) {
    throw DataError("shard format version " + std::to_string(version) + " unsupported (expected " +
                    std::to_string(kShardFormatVersion) + "): " + path.string());
  }
  const std::uint64_t count = r.uint(8);
  std::vector<PairSample> out;
  out.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(count, 1u << 20)));
  for (std::uint64_t k = 0; k < count; ++k) {
    const auto len = static_cast<std::size_t>(r.uint(4));
    if (!r.ok || !r.need(len)) {
      throw DataError("shard truncated at record " + std::to_string(k) + ": " + path.string());
    }
    Reader rec{r.p + r.pos, len};
    r.pos += len;
    PairSample s;
    s.id = rec.uint(8);
    s.trace_id = rec.str();
    s.app_a = rec.str();
    s.app_b = rec.str();
    s.ui_a = rec.str();
    s.ui_b = rec.str();
    s.label_consecutive = rec.uint(1) != 0;
    const auto link = static_cast<std::int32_t>(static_cast<std::uint32_t>(rec.uint(4)));
    if (link >= 0) s.link_component = link;
    const auto kind = rec.uint(1);
    s.mask_a = rec.flags();
    s.mask_b = rec.flags();
    if (!rec.ok || rec.pos != len || kind > 2) {
      throw DataError("shard record " + std::to_string(k) + " is malformed: " + path.string());
    }
    s.negative_kind = static_cast<NegativeKind>(kind);
    out.push_back(std::move(s));
  }
  if (r.pos != data.size()) throw DataError("trailing bytes after the last shard record: " + path.string());
  return out;
}

// ---- screen store ------------------------------------------------------------

const ScreenFeatures& ScreenStore::at(const std::string& screen_id) const {
  auto it = index_.find(screen_id);
  if (it == index_.end()) throw DataError("unknown screen " + screen_id);
  return screens_[it->second];
}

void ScreenStore::add(ScreenFeatures f) {
  if (contains(f.screen_id)) throw DataError("duplicate screen " + f.screen_id);
  index_[f.screen_id] = screens_.size();
  screens_.push_back(std::move(f));
}

ScreenStore ScreenStore::from_corpus(const Corpus& corpus, int buckets, int threads) {
  std::vector<const Screen*> unique;
  std::unordered_map<std::string, std::size_t> seen;
  for (const auto& tr : corpus.traces) {
    for (const auto& s : tr.screens) {
      if (seen.emplace(s.screen_id, unique.size()).second) unique.push_back(&s);
    }
  }
  std::sort(unique.begin(), unique.end(), [](const Screen* a, const Screen* b) { return a->screen_id < b->screen_id; });
  std::vector<ScreenFeatures> feats(unique.size());
  parallel_for(unique.size(), resolve_threads(threads), [&](std::size_t i) {
    Screen s = *unique[i];
    s.raster = read_png((corpus.root / s.raster_ref).string());
    feats[i] = compute_screen_features(s, buckets);
  });
  std::unordered_map<std::string, std::pair<const CorpusApp*, const ScreenLabels*>> labels;
  for (const auto& app : corpus.apps) {
    for (const auto& sl : app.labels.screens) labels[sl.screen_id] = {&app, &sl};
  }
  ScreenStore store;
  for (auto& f : feats) {
    auto it = labels.find(f.screen_id);
    if (it != labels.end()) {
      const auto& [app, sl] = it->second;
      f.app_type = app->app_type;
      f.icon_classes = sl->icon_classes;
      f.function_labels = sl->function_labels;
      f.referring = sl->referring;
      if (f.icon_classes.size() != f.leaf_count() || f.function_labels.size() != f.leaf_count()) {
        throw DataError("labels of screen " + f.screen_id + " disagree with its leaf count");
      }
    }
    store.add(std::move(f));
  }
  return store;
}

// ---- dataset build -----------------------------------------------------------

namespace {

const char* const kSplitNames[3] = {"train", "dev", "test"};

json read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError("malformed JSON in " + path.string(), e.byte);
  }
}

}  // namespace

json build_dataset(const fs::path& corpus_dir, const DatasetConfig& cfg, const fs::path& out_dir) {
  if (!(cfg.mask_rate >= 0 && cfg.mask_rate <= 1)) throw ConfigError("mask rate must lie in [0, 1]");
  const Corpus corpus = read_corpus(corpus_dir);
  std::vector<std::string> app_ids;
  for (const auto& a : corpus.apps) app_ids.push_back(a.app_id);
  const Split split = split_by_app(app_ids, cfg.split_seed);
  const std::vector<std::string>* parts[3] = {&split.train, &split.dev, &split.test};

  fs::create_directories(out_dir);
  json shards = json::object();
  json warnings = json::array();
  for (int s = 0; s < 3; ++s) {
    std::map<std::string, int> member;
    for (const auto& a : *parts[s]) member[a] = 1;
    std::vector<Trace> traces;
    for (const auto& t : corpus.traces) {
      if (member.count(t.app_id)) traces.push_back(t);
    }
    PairStats stats;
    const std::uint64_t split_seed = Rng::stream(cfg.pair_seed, "split-pairs", static_cast<std::uint64_t>(s)).next();
    std::vector<PairSample> pairs =
        build_pairs(traces, split_seed, &stats, static_cast<std::uint64_t>(s) << 40);
    for (auto& p : pairs) p = apply_text_mask(std::move(p), cfg.mask_rate, cfg.pair_seed);
    const std::string file = std::string(kSplitNames[s]) + ".shard";
    write_shard(pairs, out_dir / file);
    for (const auto& w : stats.warnings) warnings.push_back(std::string(kSplitNames[s]) + ": " + w);
    shards[kSplitNames[s]] = {{"file", file},
                              {"count", pairs.size()},
                              {"checksum", file_checksum((out_dir / file).string())},
                              {"positives", stats.positives},
                              {"same_sequence", stats.same_sequence},
                              {"cross_sequence", stats.cross_sequence},
                              {"unresolved_clicks", stats.unresolved_clicks}};
  }
  json manifest = {{"format", "traceform-dataset"},
                   {"format_version", kDatasetFormatVersion},
                   {"corpus", {{"path", fs::absolute(corpus_dir).lexically_normal().string()},
                               {"manifest_checksum", corpus.manifest_checksum}}},
                   {"config", {{"split_seed", cfg.split_seed}, {"pair_seed", cfg.pair_seed}, {"mask_rate", cfg.mask_rate}}},
                   {"split", {{"train", split.train}, {"dev", split.dev}, {"test", split.test}}},
                   {"shards", shards},
                   {"warnings", warnings}};
  std::ofstream out(out_dir / "manifest.json", std::ios::binary);
  if (!out) throw DataError("cannot write dataset manifest in " + out_dir.string());
  out << manifest.dump(1) << "\n";
  return manifest;
}

Dataset load_dataset(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) throw DataError("no dataset manifest at " + mpath.string());
  Dataset d;
  d.root = dir;
  d.manifest = read_json(mpath);
  if (d.manifest.value("format", "") != "traceform-dataset") throw DataError("not a dataset: " + dir.string());
  if (d.manifest.value("format_version", -1) != kDatasetFormatVersion) {
    throw DataError("dataset format version mismatch in " + mpath.string());
  }
  d.corpus_root = d.manifest.at("corpus").at("path").get<std::string>();
  const auto& c = d.manifest.at("config");
  d.config.split_seed = c.at("split_seed");
  d.config.pair_seed = c.at("pair_seed");
  d.config.mask_rate = c.at("mask_rate");
  const auto& sp = d.manifest.at("split");
  d.split.train = sp.at("train").get<std::vector<std::string>>();
  d.split.dev = sp.at("dev").get<std::vector<std::string>>();
  d.split.test = sp.at("test").get<std::vector<std::string>>();
  std::vector<PairSample>* parts[3] = {&d.train, &d.dev, &d.test};
  for (int s = 0; s < 3; ++s) {
    const auto& e = d.manifest.at("shards").at(kSplitNames[s]);
    const fs::path file = dir / e.at("file").get<std::string>();
    if (file_checksum(file.string()) != e.at("checksum").get<std::string>()) {
      throw DataError("checksum mismatch for shard " + file.string());
    }
    *parts[s] = read_shard(file);
  }
  return d;
}

}  // namespace traceform
