#include <doctest.h>

#include <deque>
#include <set>

#include <nlohmann/json.hpp>

#include "traceform/errors.hpp"
#include "traceform/image.hpp"
#include "traceform/synth.hpp"
#include "support.hpp"

using namespace traceform;

TEST_CASE("generate_app is deterministic") {
  const GeneratorConfig cfg;
  const auto a = generate_app(cfg, 7, 3);
  const auto b = generate_app(cfg, 7, 3);
  CHECK(labels_to_json(a).dump() == labels_to_json(b).dump());
  REQUIRE(a.app.screens.size() == b.app.screens.size());
  for (std::size_t s = 0; s < a.app.screens.size(); ++s) {
    CHECK(serialize_vh(a.app.screens[s].to_view_hierarchy()) == serialize_vh(b.app.screens[s].to_view_hierarchy()));
    CHECK(render_screen(a.app.screens[s]) == render_screen(b.app.screens[s]));
  }
  CHECK(labels_to_json(generate_app(cfg, 8, 3)).dump() != labels_to_json(a).dump());
}

TEST_CASE("app invariants hold over many apps") {
  GeneratorConfig cfg;
  cfg.min_screens = 5;
  cfg.max_screens = 5;
  for (int i = 0; i < 100; ++i) {
    const auto gen = generate_app(cfg, 1, i);
    const AppSpec& app = gen.app;
    REQUIRE(app.screens.size() == 5);
    // BFS from the root reaches every screen.
    std::set<int> seen{0};
    std::deque<int> queue{0};
    while (!queue.empty()) {
      const int s = queue.front();
      queue.pop_front();
      for (const auto& e : app.outgoing(s)) {
        if (seen.insert(e.target).second) queue.push_back(e.target);
      }
    }
    CHECK(seen.size() == 5);
    std::set<std::pair<int, int>> sources;
    for (const auto& e : app.edges) {
      CHECK(app.screens[static_cast<std::size_t>(e.screen)].components[static_cast<std::size_t>(e.component)].clickable);
      CHECK(sources.insert({e.screen, e.component}).second);
    }
    for (const auto& sl : gen.labels.screens) {
      for (const auto& r : sl.referring) {
        std::vector<BoundingBox> boxes;
        const auto& spec = app.screens[static_cast<std::size_t>(&sl - gen.labels.screens.data())];
        for (const auto& c : spec.components) boxes.push_back(c.box);
        CHECK(resolve_referring_expression(r.expression, boxes, sl.function_labels) == std::optional<int>(r.leaf));
      }
    }
  }
}

TEST_CASE("unsatisfiable generator configs are rejected") {
  GeneratorConfig cfg;
  cfg.max_links = 0;
  CHECK_THROWS_AS(generate_app(cfg, 1), ConfigError);
  cfg = GeneratorConfig{};
  cfg.min_components = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = GeneratorConfig{};
  cfg.min_screens = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("every trace replays through hit_test") {
  const GeneratorConfig cfg;
  for (int i = 0; i < 40; ++i) {
    const auto gen = generate_app(cfg, 2, i);
    for (int t = 0; t < 10; ++t) {
      const Trace tr = simulate_trace(gen.app, 5, cfg.max_trace_len, t);
      REQUIRE(tr.screens.size() >= 2);
      REQUIRE(tr.screens.size() <= static_cast<std::size_t>(cfg.max_trace_len));
      REQUIRE(tr.actions.size() + 1 == tr.screens.size());
      CHECK_NOTHROW(validate_trace(tr));
      for (std::size_t k = 0; k < tr.actions.size(); ++k) {
        const auto hit = hit_test(tr.screens[k].vh.leaves, tr.actions[k].x, tr.actions[k].y);
        REQUIRE(hit.has_value());
        const int screen = static_cast<int>(&tr.screens[k] - tr.screens.data());
        (void)screen;
        const auto& leaf = tr.screens[k].vh.leaves[*hit];
        CHECK(leaf.clickable);
        CHECK(leaf.bounds.x_min < tr.actions[k].x);  // strictly inside
        CHECK(tr.actions[k].x < leaf.bounds.x_max - 1);
      }
      const Trace again = simulate_trace(gen.app, 5, cfg.max_trace_len, t);
      REQUIRE(again.actions.size() == tr.actions.size());
      for (std::size_t k = 0; k < tr.actions.size(); ++k) CHECK(again.actions[k] == tr.actions[k]);
    }
  }
}

TEST_CASE("trace click recovers the edge component") {
  const GeneratorConfig cfg;
  const auto gen = generate_app(cfg, 4, 0);
  for (int t = 0; t < 20; ++t) {
    const Trace tr = simulate_trace(gen.app, 9, cfg.max_trace_len, t);
    for (std::size_t k = 0; k < tr.actions.size(); ++k) {
      const auto hit = hit_test(tr.screens[k].vh.leaves, tr.actions[k].x, tr.actions[k].y);
      REQUIRE(hit.has_value());
      // Screen ids end in -sNN; find the spec indices to look up the edge.
      int src = -1, dst = -1;
      for (int s = 0; s < static_cast<int>(gen.app.screens.size()); ++s) {
        if (gen.app.screens[static_cast<std::size_t>(s)].screen_id == tr.screens[k].screen_id) src = s;
        if (gen.app.screens[static_cast<std::size_t>(s)].screen_id == tr.screens[k + 1].screen_id) dst = s;
      }
      CHECK(gen.app.edge_target(src, static_cast<int>(*hit)) == std::optional<int>(dst));
    }
  }
}

TEST_CASE("two-screen chain gives a single-action trace") {
  GeneratorConfig cfg;
  cfg.min_screens = 2;
  cfg.max_screens = 2;
  const auto gen = generate_app(cfg, 3, 0);
  const Trace tr = simulate_trace(gen.app, 1, 10, 0);
  CHECK(tr.screens.size() == 2);
  CHECK(tr.actions.size() == 1);
  CHECK_THROWS_AS(simulate_trace(gen.app, 1, 1, 0), ConfigError);
}

TEST_CASE("rendering") {
  ScreenSpec empty;
  empty.width = 20;
  empty.height = 10;
  empty.background = {9, 8, 7};
  const Image bg = render_screen(empty);
  for (std::size_t i = 0; i < bg.pixels.size(); i += 3) {
    REQUIRE(bg.pixels[i] == 9);
    REQUIRE(bg.pixels[i + 1] == 8);
    REQUIRE(bg.pixels[i + 2] == 7);
  }
  // Colour and glyph jointly identify the icon class.
  std::set<std::tuple<int, int, int, int>> looks;
  for (int c = 0; c < 77; ++c) {
    const Rgb col = class_color(c);
    looks.insert({col.r, col.g, col.b, glyph_pattern(c)});
  }
  CHECK(looks.size() == 77);

  ScreenSpec two = empty;
  two.width = 100;
  two.height = 50;
  ComponentSpec a, b;
  a.icon_class = 1;
  a.box = {0, 0, 40, 40};
  b.icon_class = 2;
  b.box = {50, 0, 90, 40};
  two.components = {a, b};
  const Image img = render_screen(two);
  CHECK(crop(img, 0, 0, 40, 40) != crop(img, 50, 0, 90, 40));
}

TEST_CASE("text vocabulary follows the function label") {
  const GeneratorConfig cfg;
  for (int c = 0; c < cfg.icon_classes; ++c) {
    const auto t = component_template(c, cfg);
    CHECK(t.icon_class == c);
    CHECK_FALSE(t.text_vocab.empty());
    CHECK(component_template(c, cfg).text_vocab == t.text_vocab);
    CHECK(t.color == class_color(c));
  }
}

TEST_CASE("corpus round trip and determinism across thread counts") {
  testing::TempDir dir("corpus");
  GeneratorConfig g = testing::small_generator(4, 3);
  const auto s1 = write_corpus(g, 7, dir / "a");
  g.threads = 3;
  const auto s2 = write_corpus(g, 7, dir / "b");
  CHECK(s1.manifest_checksum == s2.manifest_checksum);
  CHECK(s1.apps == 4);
  CHECK(s1.traces == 12);
  const Corpus c = read_corpus(dir / "a");
  CHECK(c.seed == 7);
  CHECK(c.apps.size() == 4);
  CHECK(c.traces.size() == 12);
  CHECK(c.config.to_json() == testing::small_generator(4, 3).to_json());
  for (const auto& t : c.traces) {
    CHECK_NOTHROW(validate_trace(t));
    for (const auto& s : t.screens) CHECK_FALSE(s.raster_ref.empty());
  }
  CHECK(write_corpus(g, 8, dir / "c").manifest_checksum != s1.manifest_checksum);
  CHECK_THROWS_AS(read_corpus(dir / "missing"), DataError);
}
