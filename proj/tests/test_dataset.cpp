#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "traceform/dataset.hpp"
#include "traceform/errors.hpp"
#include "traceform/hash.hpp"
#include "support.hpp"

using namespace traceform;
namespace fs = std::filesystem;

namespace {

std::vector<Trace> make_traces(int apps, int traces_per_app, std::uint64_t seed = 1) {
  const GeneratorConfig cfg;
  std::vector<Trace> out;
  for (int a = 0; a < apps; ++a) {
    const auto gen = generate_app(cfg, seed, a);
    for (int t = 0; t < traces_per_app; ++t) out.push_back(simulate_trace(gen.app, seed, cfg.max_trace_len, t));
  }
  return out;
}

std::vector<std::string> app_names(int n) {
  std::vector<std::string> ids;
  for (int i = 0; i < n; ++i) ids.push_back("app" + std::to_string(i));
  return ids;
}

std::size_t index_of(const Trace& t, const std::string& screen_id) {
  for (std::size_t i = 0; i < t.screens.size(); ++i) {
    if (t.screens[i].screen_id == screen_id) return i;
  }
  return t.screens.size();
}

}  // namespace

TEST_CASE("split_by_app proportions") {
  const Split s = split_by_app(app_names(10), 1);
  CHECK(s.train.size() == 8);
  CHECK(s.dev.size() == 1);
  CHECK(s.test.size() == 1);
  const Split again = split_by_app(app_names(10), 1);
  CHECK(again.train == s.train);
  CHECK(again.test == s.test);
  CHECK_THROWS_AS(split_by_app(app_names(2), 1), DataError);
}

TEST_CASE("splits are disjoint and cover every app over 100 seeds") {
  for (int n : {3, 4, 6, 10, 37, 200}) {
    const auto ids = app_names(n);
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const Split s = split_by_app(ids, seed);
      std::set<std::string> all;
      for (const auto* part : {&s.train, &s.dev, &s.test}) {
        for (const auto& a : *part) REQUIRE(all.insert(a).second);
      }
      REQUIRE(all == std::set<std::string>(ids.begin(), ids.end()));
      CHECK_FALSE(s.train.empty());
      CHECK_FALSE(s.dev.empty());
      CHECK_FALSE(s.test.empty());
      if (n < 5) continue;  // below five apps non-empty splits win over the proportions
      CHECK(std::abs(static_cast<double>(s.train.size()) - 0.8 * n) <= 1.0);
      CHECK(std::abs(static_cast<double>(s.dev.size()) - 0.1 * n) <= 1.0);
      CHECK(std::abs(static_cast<double>(s.test.size()) - 0.1 * n) <= 1.0);
    }
  }
}

TEST_CASE("build_pairs composition and label invariants") {
  const auto traces = make_traces(20, 10);
  PairStats st;
  const auto pairs = build_pairs(traces, 3, &st);
  std::size_t positives = 0, same = 0, cross = 0;
  std::map<std::string, const Trace*> by_id;
  for (const auto& t : traces) by_id[t.trace_id] = &t;
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const PairSample& p = pairs[k];
    CHECK(p.id == k);
    CHECK(p.label_consecutive == (p.negative_kind == NegativeKind::none));
    if (p.link_component) CHECK(p.label_consecutive);
    const Trace& tr = *by_id.at(p.trace_id);
    const std::size_t i = index_of(tr, p.ui_a);
    REQUIRE(i < tr.screens.size());
    switch (p.negative_kind) {
      case NegativeKind::none: {
        ++positives;
        CHECK(index_of(tr, p.ui_b) == i + 1);
        // The stored link component replays through hit_test.
        const auto hit = hit_test(tr.screens[i].vh.leaves, tr.actions[i].x, tr.actions[i].y);
        CHECK(hit.has_value());
        CHECK(p.link_component == std::optional<int>(static_cast<int>(*hit)));
        break;
      }
      case NegativeKind::same_sequence: {
        ++same;
        const std::size_t j = index_of(tr, p.ui_b);
        REQUIRE(j < tr.screens.size());
        CHECK(j != i + 1);
        CHECK(j != i);
        CHECK(p.app_a == p.app_b);
        break;
      }
      case NegativeKind::cross_sequence:
        ++cross;
        CHECK(p.app_a != p.app_b);
        break;
    }
  }
  // Each positive yields one negative on the same anchor; half of those (rounded down) come
  // from the same sequence.
  CHECK(pairs.size() == 2 * positives);
  CHECK(same == positives / 2);
  CHECK(cross == positives - positives / 2);
  CHECK(st.positives == positives);
  CHECK(st.same_sequence == same);
  CHECK(st.warnings.empty());
  CHECK(build_pairs(traces, 3) == pairs);
  CHECK_FALSE(build_pairs(traces, 4) == pairs);
}

TEST_CASE("1000 positives give 1000 / 500 / 500") {
  std::vector<Trace> traces;
  const GeneratorConfig cfg;
  std::size_t n = 0;
  for (int a = 0; n < 1000; ++a) {
    const auto gen = generate_app(cfg, 12, a);
    for (int t = 0; t < 10 && n < 1000; ++t) {
      Trace tr = simulate_trace(gen.app, 12, cfg.max_trace_len, t);
      const std::size_t room = 1000 - n;
      if (tr.actions.size() > room) {
        tr.actions.resize(room);
        tr.screens.resize(room + 1);
      }
      n += tr.actions.size();
      traces.push_back(std::move(tr));
    }
  }
  PairStats st;
  const auto pairs = build_pairs(traces, 1, &st);
  CHECK(pairs.size() == 2000);
  CHECK(st.positives == 1000);
  CHECK(st.same_sequence == 500);
  CHECK(st.cross_sequence == 500);
}

TEST_CASE("length-2 traces force a backfill warning") {
  auto traces = make_traces(3, 4);
  for (auto& t : traces) {
    t.screens.resize(2);
    t.actions.resize(1);
  }
  PairStats st;
  const auto pairs = build_pairs(traces, 1, &st);
  CHECK(st.same_sequence == 0);
  CHECK(st.cross_sequence == st.positives);
  CHECK_FALSE(st.warnings.empty());
  traces[0].screens.resize(1);
  traces[0].actions.clear();
  build_pairs(traces, 1, &st);
  CHECK(st.warnings.size() >= 2);
  CHECK_THROWS_AS(build_pairs({traces[1]}, 1), DataError);
}

TEST_CASE("text mask rate") {
  PairSample p;
  p.mask_a.assign(5, false);
  p.mask_b.assign(5, false);
  std::size_t flagged = 0, total = 0;
  for (std::uint64_t id = 0; id < 10000; ++id) {
    p.id = id;
    const PairSample m = apply_text_mask(p, 0.15, 3);
    for (bool f : m.mask_a) flagged += f;
    for (bool f : m.mask_b) flagged += f;
    total += 10;
  }
  const double rate = static_cast<double>(flagged) / static_cast<double>(total);
  CHECK(rate >= 0.145);
  CHECK(rate <= 0.155);
  const PairSample none = apply_text_mask(p, 0.0, 3);
  for (bool f : none.mask_a) CHECK_FALSE(f);
  const PairSample all = apply_text_mask(p, 1.0, 3);
  for (bool f : all.mask_b) CHECK(f);
  CHECK(apply_text_mask(p, 0.15, 3) == apply_text_mask(p, 0.15, 3));
  CHECK_THROWS_AS(apply_text_mask(p, 1.5, 3), ConfigError);
}

TEST_CASE("shard round trip") {
  testing::TempDir dir("shard");
  write_shard({}, dir / "empty.shard");
  CHECK(read_shard(dir / "empty.shard").empty());

  auto pairs = build_pairs(make_traces(8, 20), 5);
  REQUIRE(pairs.size() >= 1000);
  pairs.resize(1000);
  for (auto& p : pairs) p = apply_text_mask(p, 0.3, 1);
  write_shard(pairs, dir / "a.shard");
  const auto back = read_shard(dir / "a.shard");
  REQUIRE(back.size() == pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) REQUIRE(back[i] == pairs[i]);
}

TEST_CASE("shard corruption is detected") {
  testing::TempDir dir("badshard");
  const auto pairs = build_pairs(make_traces(3, 3), 5);
  write_shard(pairs, dir / "a.shard");
  std::string bytes;
  {
    std::ifstream in(dir / "a.shard", std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& name, const std::string& b) {
    std::ofstream out(dir / name, std::ios::binary);
    out << b;
  };
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  write("magic.shard", bad_magic);
  CHECK_THROWS_AS(read_shard(dir / "magic.shard"), DataError);

  std::string bad_version = bytes;
  bad_version[8] = 9;
  write("version.shard", bad_version);
  try {
    read_shard(dir / "version.shard");
    FAIL("expected a version error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("version") != std::string::npos);
  }

  write("trunc.shard", bytes.substr(0, bytes.size() - 7));
  try {
    read_shard(dir / "trunc.shard");
    FAIL("expected a truncation error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("record " + std::to_string(pairs.size() - 1)) != std::string::npos);
  }
  write("trailing.shard", bytes + "x");
  CHECK_THROWS_AS(read_shard(dir / "trailing.shard"), DataError);
  CHECK_THROWS_AS(read_shard(dir / "missing.shard"), DataError);
}

TEST_CASE("dataset build is app-disjoint, verified and deterministic") {
  const auto& w = testing::small_world();
  const Dataset& d = w.dataset;
  std::map<std::string, int> split_of;
  for (const auto& a : d.split.train) split_of[a] = 0;
  for (const auto& a : d.split.dev) split_of[a] = 1;
  for (const auto& a : d.split.test) split_of[a] = 2;
  const std::vector<PairSample>* parts[3] = {&d.train, &d.dev, &d.test};
  for (int s = 0; s < 3; ++s) {
    CHECK_FALSE(parts[s]->empty());
    for (const auto& p : *parts[s]) {
      REQUIRE(split_of.at(p.app_a) == s);
      REQUIRE(split_of.at(p.app_b) == s);
    }
  }
  // Ids are unique across splits.
  std::set<std::uint64_t> ids;
  for (auto* part : parts) {
    for (const auto& p : *part) REQUIRE(ids.insert(p.id).second);
  }

  testing::TempDir dir("rebuild");
  const auto m1 = build_dataset(w.root / "corpus", DatasetConfig{}, dir / "a");
  DatasetConfig threaded;
  threaded.threads = 3;
  const auto m2 = build_dataset(w.root / "corpus", threaded, dir / "b");
  for (const char* s : {"train", "dev", "test"}) {
    CHECK(m1["shards"][s]["checksum"] == d.manifest["shards"][s]["checksum"]);
    CHECK(m2["shards"][s]["checksum"] == m1["shards"][s]["checksum"]);
  }
  {
    std::fstream f(dir / "a" / "dev.shard", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-1, std::ios::end);
    f.put('\x7f');
  }
  CHECK_THROWS_AS(load_dataset(dir / "a"), DataError);
}

TEST_CASE("screen store attaches labels") {
  const auto& w = testing::small_world();
  std::size_t labelled = 0;
  for (const auto& s : w.store.all()) {
    CHECK(s.leaf_count() == s.positions.size());
    CHECK(s.leaf_count() == s.leaf_vision.size());
    CHECK(s.whole_vision.size() == static_cast<std::size_t>(kVisionInput));
    if (s.app_type >= 0) {
      ++labelled;
      CHECK(s.icon_classes.size() == s.leaf_count());
    }
  }
  CHECK(labelled == w.store.all().size());
  CHECK_THROWS(w.store.at("nope"));
}
