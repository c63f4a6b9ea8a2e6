#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "traceform/features.hpp"
#include "traceform/synth.hpp"
#include "traceform/vh.hpp"

namespace traceform {

struct Split {
  std::vector<std::string> train, dev, test;
};

/// Sorts, shuffles under `seed`, then cuts 80/10/10 (rounded). Needs at least 3 apps.
Split split_by_app(std::vector<std::string> app_ids, std::uint64_t seed);

enum class NegativeKind : std::uint8_t { none = 0, same_sequence = 1, cross_sequence = 2 };

const char* negative_kind_name(NegativeKind k);

struct PairSample {
  std::uint64_t id = 0;
  std::string trace_id;  // trace of ui_a
  std::string app_a, app_b;
  std::string ui_a, ui_b;  // screen ids
  bool label_consecutive = false;
  std::optional<int> link_component;  // leaf of ui_a
  NegativeKind negative_kind = NegativeKind::none;
  std::vector<bool> mask_a, mask_b;  // per leaf of ui_a / ui_b
  friend bool operator==(const PairSample&, const PairSample&) = default;
};

struct PairStats {
  std::size_t positives = 0;
  std::size_t same_sequence = 0;
  std::size_t cross_sequence = 0;
  std::size_t unresolved_clicks = 0;  // positives whose click hit no leaf
  std::vector<std::string> warnings;
};

/// Every consecutive pair becomes a positive; each positive also yields one negative built on
/// the same ui_a, half from the same trace (non-consecutive) and half from a trace of another app.
/// Sample ids are id_base + position in the returned list.
std::vector<PairSample> build_pairs(const std::vector<Trace>& traces, std::uint64_t seed, PairStats* stats = nullptr,
                                    std::uint64_t id_base = 0);

/// Flags each text component independently with probability `rate`; the stream is keyed by sample id.
PairSample apply_text_mask(PairSample sample, double rate, std::uint64_t seed);

inline constexpr std::uint32_t kShardFormatVersion = 1;

/// Header "TFSHARD1", u32 version, u64 count, then u32-length-prefixed little-endian records.
void write_shard(const std::vector<PairSample>& samples, const std::filesystem::path& path);
std::vector<PairSample> read_shard(const std::filesystem::path& path);

/// Features of every screen referenced by the corpus traces, with downstream labels attached.
class ScreenStore {
 public:
  static ScreenStore from_corpus(const Corpus& corpus, int buckets, int threads = 1);

  const ScreenFeatures& at(const std::string& screen_id) const;
  bool contains(const std::string& screen_id) const { return index_.count(screen_id) != 0; }
  const std::vector<ScreenFeatures>& all() const { return screens_; }
  void add(ScreenFeatures f);

 private:
  std::vector<ScreenFeatures> screens_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct DatasetConfig {
  std::uint64_t split_seed = 2;
  std::uint64_t pair_seed = 3;
  double mask_rate = 0.15;
  int threads = 1;
};

inline constexpr int kDatasetFormatVersion = 1;

struct Dataset {
  std::filesystem::path root;
  std::filesystem::path corpus_root;
  DatasetConfig config;
  Split split;
  std::vector<PairSample> train, dev, test;
  nlohmann::json manifest;
};

/// Reads a corpus, splits it by app, builds pairs per split and writes shards plus manifest.json.
nlohmann::json build_dataset(const std::filesystem::path& corpus_dir, const DatasetConfig& cfg,
                             const std::filesystem::path& out_dir);

/// Loads shards after verifying their checksums against the manifest.
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace traceform
