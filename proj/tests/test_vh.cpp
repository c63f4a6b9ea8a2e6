#include <doctest.h>

#include <algorithm>
#include <limits>
#include <set>

#include <nlohmann/json.hpp>

#include "traceform/errors.hpp"
#include "traceform/hash.hpp"
#include "traceform/image.hpp"
#include "traceform/rng.hpp"
#include "traceform/vh.hpp"
#include "support.hpp"

using namespace traceform;
using nlohmann::json;

namespace {

json leaf_doc(const char* cls, std::array<int, 4> b, const char* desc = "", const char* text = "",
              const char* rid = "") {
  return {{"class", cls}, {"bounds", b}, {"content_desc", desc}, {"text", text}, {"resource_id", rid},
          {"clickable", false}};
}

LeafNode leaf_at(BoundingBox b) {
  LeafNode l;
  l.class_name = "View";
  l.bounds = b;
  return l;
}

// Filter the containing leaves, then take the smallest area, then the lowest index.
std::optional<std::size_t> hit_oracle(const std::vector<LeafNode>& leaves, int x, int y) {
  std::vector<std::size_t> inside;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    const auto& b = leaves[i].bounds;
    if (b.x_min <= x && x < b.x_max && b.y_min <= y && y < b.y_max) inside.push_back(i);
  }
  if (inside.empty()) return std::nullopt;
  std::int64_t best_area = std::numeric_limits<std::int64_t>::max();
  for (auto i : inside) best_area = std::min(best_area, leaves[i].bounds.area());
  for (auto i : inside) {
    if (leaves[i].bounds.area() == best_area) return i;
  }
  return std::nullopt;
}

}  // namespace

TEST_CASE("fnv1a64 matches published test vectors") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
  CHECK(hex64(0xabcULL) == "0000000000000abc");
}

TEST_CASE("keyed rng streams are reproducible and independent of request order") {
  Rng a = Rng::stream(5, "x", 1);
  Rng b = Rng::stream(5, "x", 2);
  Rng a2 = Rng::stream(5, "x", 1);
  const auto a0 = a.next();
  CHECK(a0 == a2.next());
  CHECK(a0 != b.next());
  Rng r(3);
  for (int i = 0; i < 1000; ++i) {
    const auto v = r.between(-2, 2);
    CHECK(v >= -2);
    CHECK(v <= 2);
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}

TEST_CASE("below is close to uniform") {
  Rng r(11);
  std::array<int, 7> counts{};
  const int n = 70000;
  for (int i = 0; i < n; ++i) counts[r.below(7)]++;
  for (int c : counts) CHECK(std::abs(c - n / 7) < 400);  // about 4 standard deviations
}

TEST_CASE("parse_vh keeps a single leaf verbatim") {
  const json doc = leaf_doc("Button", {1, 2, 30, 40}, "check in", "Go", "btn_ci");
  const ViewHierarchy vh = parse_vh(doc.dump());
  REQUIRE(vh.leaves.size() == 1);
  const LeafNode& l = vh.leaves[0];
  CHECK(l.class_name == "Button");
  CHECK(l.content_description == "check in");
  CHECK(l.text == "Go");
  CHECK(l.resource_id == "btn_ci");
  CHECK(l.bounds == BoundingBox{1, 2, 30, 40});
  CHECK_FALSE(l.clickable);
}

TEST_CASE("parse_vh rejects degenerate boxes and names the node") {
  json doc = {{"class", "Frame"}, {"bounds", {0, 0, 100, 100}}, {"children", json::array()}};
  doc["children"].push_back(leaf_doc("A", {0, 0, 10, 10}));
  doc["children"].push_back(leaf_doc("B", {5, 0, 5, 10}));
  try {
    parse_vh(doc.dump());
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    CHECK(e.node() == "root/children[1]");
  }
}

TEST_CASE("parse_vh reports the byte offset of malformed input") {
  try {
    parse_vh(R"({"class": "A", "bounds": [0,0,1,1] )");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.offset() > 0);
  }
  CHECK_THROWS_AS(parse_vh(R"({"bounds": [0,0,1,1]})"), ValidationError);
  CHECK_THROWS_AS(parse_vh(R"({"class": "A", "bounds": [0,0,1]})"), ValidationError);
}

TEST_CASE("leaves come out in pre-order of a three-level tree") {
  // root -> [a, g1 -> [b, g2 -> [c, d]], e]; hand-walked leaf order: a b c d e
  json g2 = {{"class", "G2"}, {"bounds", {0, 0, 50, 50}}, {"children", {leaf_doc("c", {0, 0, 5, 5}), leaf_doc("d", {5, 5, 9, 9})}}};
  json g1 = {{"class", "G1"}, {"bounds", {0, 0, 60, 60}}, {"children", {leaf_doc("b", {1, 1, 4, 4}), g2}}};
  json root = {{"class", "R"}, {"bounds", {0, 0, 100, 100}},
               {"children", {leaf_doc("a", {0, 0, 2, 2}), g1, leaf_doc("e", {90, 90, 99, 99})}}};
  const ViewHierarchy vh = parse_vh(root.dump());
  std::string order;
  for (const auto& l : extract_leaves(vh)) order += l.class_name;
  CHECK(order == "abcde");
  const ViewHierarchy again = parse_vh(serialize_vh(vh));
  CHECK(again.leaves == vh.leaves);
  CHECK(&extract_leaves(vh) == &vh.leaves);
}

TEST_CASE("leaf_sentence joins fields in order and skips empties") {
  LeafNode l;
  l.content_description = "check in";
  l.resource_id = "btn_ci";
  l.class_name = "Button";
  CHECK(leaf_sentence(l) == "check in btn_ci Button");
  LeafNode m;
  m.class_name = "ImageView";
  CHECK(leaf_sentence(m) == "ImageView");
  LeafNode all{"d", "t", "r", "C", {}, false};
  CHECK(leaf_sentence(all) == "d r C t");
  LeafNode spaced{" d ", "", "", "C", {}, false};
  CHECK(leaf_sentence(spaced).find("  ") == std::string::npos);
}

TEST_CASE("positional features") {
  auto f = positional_features({0, 0, 360, 640}, 360, 640);
  const PositionalFeatures full{0, 0, 1, 1, 0.5, 0.5, 1, 1, 1};
  for (int i = 0; i < 9; ++i) CHECK(f[i] == doctest::Approx(full[i]).epsilon(1e-12));
  f = positional_features({10, 20, 30, 60}, 100, 200);
  const PositionalFeatures hand{0.1, 0.1, 0.3, 0.3, 0.2, 0.2, 0.2, 0.2, 0.04};
  for (int i = 0; i < 9; ++i) CHECK(f[i] == doctest::Approx(hand[i]).epsilon(1e-12));
  CHECK_THROWS_AS(positional_features({0, 0, 1, 1}, 0, 10), DataError);

  Rng r(4);
  for (int k = 0; k < 1000; ++k) {
    const int w = static_cast<int>(r.between(1, 500)), h = static_cast<int>(r.between(1, 500));
    const int x0 = static_cast<int>(r.between(0, w - 1)), y0 = static_cast<int>(r.between(0, h - 1));
    const int x1 = static_cast<int>(r.between(x0 + 1, w)), y1 = static_cast<int>(r.between(y0 + 1, h));
    const auto p = positional_features({x0, y0, x1, y1}, w, h);
    for (double v : p) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    CHECK(std::abs(p[8] - p[6] * p[7]) <= 1e-12);
  }
}

TEST_CASE("hit_test basics") {
  std::vector<LeafNode> leaves = {leaf_at({0, 0, 100, 100}), leaf_at({10, 10, 20, 20}), leaf_at({50, 50, 60, 60})};
  CHECK(hit_test(leaves, 55, 55) == std::optional<std::size_t>(2));
  CHECK(hit_test(leaves, 15, 15) == std::optional<std::size_t>(1));
  CHECK(hit_test(leaves, 5, 5) == std::optional<std::size_t>(0));
  CHECK_FALSE(hit_test(leaves, 100, 5).has_value());  // half-open right edge
  CHECK(hit_test(leaves, 20, 15) == std::optional<std::size_t>(0));
  std::vector<LeafNode> twins = {leaf_at({0, 0, 10, 10}), leaf_at({0, 0, 10, 10})};
  CHECK(hit_test(twins, 3, 3) == std::optional<std::size_t>(0));
}

TEST_CASE("hit_test agrees with the brute-force oracle on 1000 random screens") {
  Rng r(99);
  for (int s = 0; s < 1000; ++s) {
    std::vector<LeafNode> leaves;
    const int n = static_cast<int>(r.between(0, 8));
    for (int i = 0; i < n; ++i) {
      const int x0 = static_cast<int>(r.between(0, 40)), y0 = static_cast<int>(r.between(0, 40));
      leaves.push_back(leaf_at({x0, y0, x0 + static_cast<int>(r.between(1, 20)), y0 + static_cast<int>(r.between(1, 20))}));
    }
    for (int q = 0; q < 20; ++q) {
      const int x = static_cast<int>(r.between(-2, 62)), y = static_cast<int>(r.between(-2, 62));
      REQUIRE(hit_test(leaves, x, y) == hit_oracle(leaves, x, y));
    }
  }
}

TEST_CASE("png round trip and crop") {
  testing::TempDir dir("png");
  Image img(7, 5);
  for (int y = 0; y < 5; ++y) {
    for (int x = 0; x < 7; ++x) {
      auto* p = img.at(x, y);
      p[0] = static_cast<std::uint8_t>(x * 30);
      p[1] = static_cast<std::uint8_t>(y * 40);
      p[2] = static_cast<std::uint8_t>(x + y);
    }
  }
  write_png(img, (dir / "a.png").string());
  CHECK(read_png((dir / "a.png").string()) == img);
  const Image c = crop(img, 2, 1, 5, 3);
  CHECK(c.width == 3);
  CHECK(c.height == 2);
  CHECK(c.at(0, 0)[0] == img.at(2, 1)[0]);
  CHECK_THROWS_AS(crop(img, 3, 3, 3, 4), DataError);
  CHECK_THROWS_AS(crop(img, 0, 0, 8, 2), DataError);
}

TEST_CASE("validate_trace rejects actions outside the screen") {
  Trace t;
  t.trace_id = "t";
  t.app_id = "a";
  Screen s;
  s.screen_id = "s";
  s.app_id = "a";
  s.width = 10;
  s.height = 10;
  s.vh.root.class_name = "V";
  s.vh.root.bounds = {0, 0, 10, 10};
  s.vh.reindex();
  t.screens = {s, s};
  t.actions = {{3, 3}};
  CHECK_NOTHROW(validate_trace(t));
  t.actions = {{30, 3}};
  CHECK_THROWS_AS(validate_trace(t), ValidationError);
  t.actions.clear();
  CHECK_THROWS_AS(validate_trace(t), ValidationError);
}
