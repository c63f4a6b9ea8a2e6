#include "traceform/synth.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>

#include <nlohmann/json.hpp>

#include "traceform/errors.hpp"
#include "traceform/hash.hpp"
#include "traceform/parallel.hpp"
#include "traceform/rng.hpp"

namespace traceform {

using nlohmann::json;
namespace fs = std::filesystem;

namespace vocab {

const std::vector<std::string>& function_labels() {
  static const std::vector<std::string> v = {
      "back",      "home", "search", "settings", "share", "add",    "check_in", "profile",
      "cart",      "favorite", "play", "menu",   "details", "delete", "edit",  "notifications"};
  return v;
}

const std::vector<std::string>& app_types() {
  static const std::vector<std::string> v = {
      "art_and_design", "auto",          "beauty",       "books",           "business",
      "comics",         "communication", "dating",       "education",       "entertainment",
      "events",         "finance",       "food",         "health",          "house",
      "libraries",      "lifestyle",     "maps",         "medical",         "music",
      "news",           "parenting",     "personalization", "photography", "productivity",
      "shopping",       "social"};
  return v;
}

const std::vector<std::string>& link_classes() {
  static const std::vector<std::string> v = {"Button", "ImageButton"};
  return v;
}

const std::vector<std::string>& content_classes() {
  static const std::vector<std::string> v = {"TextView", "ImageView"};
  return v;
}

const std::vector<std::string>& class_names() {
  static const std::vector<std::string> v = {"Button", "ImageButton", "TextView", "ImageView"};
  return v;
}

const std::vector<std::string>& position_phrases() {
  static const std::vector<std::string> v = {"at the top", "at the bottom", "on the left",
                                             "on the right"};
  return v;
}

const std::vector<std::string>& function_names(int function) {
  static const std::vector<std::vector<std::string>> v = {
      {"back", "return"},          {"home", "main page"},      {"search", "find"},
      {"settings", "preferences"}, {"share", "send to"},       {"add", "create"},
      {"check in", "boarding pass"}, {"profile", "account"},   {"cart", "basket"},
      {"favorite", "bookmark"},    {"play", "video"},          {"menu", "navigation"},
      {"details", "more info"},    {"delete", "remove"},       {"edit", "modify"},
      {"notifications", "alerts"}};
  return v.at(static_cast<std::size_t>(function));
}

std::string icon_class_name(int icon_class, int num_functions) {
  const int variant = icon_class / num_functions;
  return "icon_" + function_labels().at(static_cast<std::size_t>(icon_class % num_functions)) + "_v" +
         std::to_string(variant + 1);
}

}  // namespace vocab

namespace {

constexpr int kNumFunctions = 16;
const std::vector<std::string> kVerbs = {"click", "tap", "select", "open"};
const std::vector<std::string> kNouns = {"button", "icon", "option"};

std::string join_id(const std::string& prefix, int value, int width) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%0*d", width, value);
  return prefix + buf;
}

Rgb hsv(double h, double s, double v) {
  h = std::fmod(h, 360.0);
  const double c = v * s;
  const double x = c * (1 - std::fabs(std::fmod(h / 60.0, 2.0) - 1));
  const double m = v - c;
  double r = 0, g = 0, b = 0;
  if (h < 60) { r = c; g = x; }
  else if (h < 120) { r = x; g = c; }
  else if (h < 180) { g = c; b = x; }
  else if (h < 240) { g = x; b = c; }
  else if (h < 300) { r = x; b = c; }
  else { r = c; b = x; }
  auto q = [&](double u) { return static_cast<std::uint8_t>(std::lround((u + m) * 255.0)); };
  return {q(r), q(g), q(b)};
}

}  // namespace

Rgb class_color(int icon_class) {
  // Golden-angle hues with alternating saturation/value bands.
  const double hue = std::fmod(137.50776 * icon_class, 360.0);
  const double sat = (icon_class % 2 == 0) ? 0.85 : 0.6;
  const double val = (icon_class % 3 == 0) ? 0.55 : ((icon_class % 3 == 1) ? 0.75 : 0.95);
  return hsv(hue, sat, val);
}

std::uint16_t glyph_pattern(int icon_class) {
  // Odd multiplier: injective on 16-bit class ids.
  return static_cast<std::uint16_t>((static_cast<unsigned>(icon_class) * 0x9E37u + 0x1234u) & 0xFFFFu);
}

namespace {

Rgb app_background(int app_type, int total, Rng& rng) {
  Rgb base = hsv(360.0 * app_type / total, 0.18, 0.97);
  auto jitter = [&](std::uint8_t c) {
    return static_cast<std::uint8_t>(std::clamp<int>(c + static_cast<int>(rng.between(-6, 6)), 0, 255));
  };
  return {jitter(base.r), jitter(base.g), jitter(base.b)};
}

std::vector<std::string> function_phrases(int function) {
  const auto& names = vocab::function_names(function);
  return {names[0], names[1], "open " + names[0], names[0] + " page", names[1] + " view"};
}

std::string slug(const std::string& s) {
  std::string out;
  for (char c : s) out.push_back(c == ' ' ? '_' : c);
  return out;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

/// position phrase index that picks `target` uniquely among `candidates`, tested in the given order.
std::optional<int> unique_position(const std::vector<BoundingBox>& boxes, const std::vector<int>& candidates,
                                   int target, int phrase) {
  auto key = [&](int leaf) -> int {
    const auto& b = boxes[static_cast<std::size_t>(leaf)];
    switch (phrase) {
      case 0: return b.y_min;    // top: smallest
      case 1: return -b.y_max;   // bottom: largest
      case 2: return b.x_min;    // left: smallest
      default: return -b.x_max;  // right: largest
    }
  };
  const int tk = key(target);
  for (int c : candidates) {
    if (c != target && key(c) <= tk) return std::nullopt;
  }
  return phrase;
}

}  // namespace

void GeneratorConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("generator config: " + m); };
  if (apps < 1) fail("apps must be >= 1");
  if (traces_per_app < 1) fail("traces_per_app must be >= 1");
  if (min_screens < 2 || max_screens < min_screens) fail("screen count range invalid (need >= 2)");
  if (max_screens > kNumFunctions) fail("max_screens exceeds the number of function labels");
  if (min_components < 2 || max_components < min_components) {
    fail("component count range invalid (need >= 2)");
  }
  if (max_components > grid_cols * grid_rows) fail("more components than grid cells");
  if (max_links < 1) fail("no clickable link components: screens cannot be connected");
  if (max_trace_len < 2) fail("max_trace_len must be >= 2");
  if (icon_classes < kNumFunctions) fail("icon_classes must cover every function label");
  if (app_type_count < 1 || app_type_count > static_cast<int>(vocab::app_types().size())) {
    fail("app_type_count out of range");
  }
  if (screen_width < 64 || screen_height < 64) fail("screen too small");
  if (text_noise < 0 || text_noise > 1) fail("text_noise must be in [0, 1]");
  if (deepen_prob < 0 || deepen_prob > 1) fail("deepen_prob must be in [0, 1]");
}

json GeneratorConfig::to_json() const {
  return {{"apps", apps},
          {"traces_per_app", traces_per_app},
          {"min_screens", min_screens},
          {"max_screens", max_screens},
          {"min_components", min_components},
          {"max_components", max_components},
          {"max_links", max_links},
          {"max_trace_len", max_trace_len},
          {"icon_classes", icon_classes},
          {"app_types", app_type_count},
          {"screen_width", screen_width},
          {"screen_height", screen_height},
          {"grid_cols", grid_cols},
          {"grid_rows", grid_rows},
          {"text_noise", text_noise},
          {"deepen_prob", deepen_prob}};
}

GeneratorConfig GeneratorConfig::from_json(const json& j) {
  GeneratorConfig c;
  c.apps = j.at("apps");
  c.traces_per_app = j.at("traces_per_app");
  c.min_screens = j.at("min_screens");
  c.max_screens = j.at("max_screens");
  c.min_components = j.at("min_components");
  c.max_components = j.at("max_components");
  c.max_links = j.at("max_links");
  c.max_trace_len = j.at("max_trace_len");
  c.icon_classes = j.at("icon_classes");
  c.app_type_count = j.at("app_types");
  c.screen_width = j.at("screen_width");
  c.screen_height = j.at("screen_height");
  c.grid_cols = j.at("grid_cols");
  c.grid_rows = j.at("grid_rows");
  c.text_noise = j.at("text_noise");
  c.deepen_prob = j.at("deepen_prob");
  return c;
}

ComponentTemplate component_template(int icon_class, const GeneratorConfig& cfg) {
  ComponentTemplate t;
  t.icon_class = icon_class;
  t.function_label = icon_class % kNumFunctions;
  const int cell_w = cfg.screen_width / cfg.grid_cols;
  const int cell_h = cfg.screen_height / cfg.grid_rows;
  t.max_width = std::max(8, cell_w - 12);
  t.min_width = std::max(6, t.max_width * 2 / 5);
  t.max_height = std::max(8, cell_h - 12);
  t.min_height = std::max(6, t.max_height * 2 / 5);
  t.glyph_id = glyph_pattern(icon_class);
  t.color = class_color(icon_class);
  t.text_vocab = function_phrases(t.function_label);
  return t;
}

ViewHierarchy ScreenSpec::to_view_hierarchy() const {
  ViewHierarchy vh;
  vh.root.class_name = "FrameLayout";
  vh.root.bounds = {0, 0, width, height};
  // Two vertical bands group the leaves; empty bands are omitted so no container becomes a leaf.
  ViewNode top{"LinearLayout", {0, 0, width, height / 2}, "", "", "", false, {}};
  ViewNode bottom{"LinearLayout", {0, height / 2, width, height}, "", "", "", false, {}};
  for (const auto& c : components) {
    ViewNode leaf{c.class_name, c.box, c.content_description, c.text, c.resource_id, c.clickable, {}};
    (c.box.y_min < height / 2 ? top : bottom).children.push_back(std::move(leaf));
  }
  if (!top.children.empty()) vh.root.children.push_back(std::move(top));
  if (!bottom.children.empty()) vh.root.children.push_back(std::move(bottom));
  vh.reindex();
  return vh;
}

std::optional<int> AppSpec::edge_target(int s, int component) const {
  for (const auto& e : edges) {
    if (e.screen == s && e.component == component) return e.target;
  }
  return std::nullopt;
}

std::vector<Edge> AppSpec::outgoing(int s) const {
  std::vector<Edge> out;
  for (const auto& e : edges) {
    if (e.screen == s) out.push_back(e);
  }
  return out;
}

Screen AppSpec::screen(int index) const {
  const auto& spec = screens.at(static_cast<std::size_t>(index));
  Screen s;
  s.screen_id = spec.screen_id;
  s.app_id = app_id;
  s.width = spec.width;
  s.height = spec.height;
  s.vh = spec.to_view_hierarchy();
  s.raster_ref = "rasters/" + spec.screen_id + ".png";
  return s;
}

GeneratedApp generate_app(const GeneratorConfig& cfg, std::uint64_t seed, int app_index) {
  cfg.validate();
  Rng rng = Rng::stream(seed, "app", static_cast<std::uint64_t>(app_index));
  GeneratedApp out;
  AppSpec& app = out.app;
  app.app_id = join_id("app", app_index, 5);
  app.app_type = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.app_type_count)));

  const int num_screens = static_cast<int>(rng.between(cfg.min_screens, cfg.max_screens));
  std::vector<int> themes(kNumFunctions);
  for (int i = 0; i < kNumFunctions; ++i) themes[static_cast<std::size_t>(i)] = i;
  rng.shuffle(themes);
  themes.resize(static_cast<std::size_t>(num_screens));

  std::vector<int> counts(static_cast<std::size_t>(num_screens));
  for (auto& n : counts) n = static_cast<int>(rng.between(cfg.min_components, cfg.max_components));

  // Tree over screens rooted at 0: one path to every screen, so a screen is a one-click successor
  // of exactly one other screen.
  std::vector<std::vector<int>> children(static_cast<std::size_t>(num_screens));
  auto capacity = [&](int s) {
    return std::min(cfg.max_links, counts[static_cast<std::size_t>(s)] - 1);
  };
  for (int k = 1; k < num_screens; ++k) {
    std::vector<int> eligible;
    for (int p = 0; p < k; ++p) {
      if (static_cast<int>(children[static_cast<std::size_t>(p)].size()) < capacity(p)) eligible.push_back(p);
    }
    if (eligible.empty()) throw ConfigError("generator config: cannot attach screen (no free link slots)");
    int parent;
    const bool newest_ok = std::find(eligible.begin(), eligible.end(), k - 1) != eligible.end();
    if (newest_ok && rng.bernoulli(cfg.deepen_prob)) {
      parent = k - 1;
    } else {
      parent = rng.pick(eligible);
    }
    children[static_cast<std::size_t>(parent)].push_back(k);
  }

  const int cell_w = cfg.screen_width / cfg.grid_cols;
  const int cell_h = cfg.screen_height / cfg.grid_rows;
  Rng style = Rng::stream(seed, "app-style", static_cast<std::uint64_t>(app_index));
  const Rgb background = app_background(app.app_type, cfg.app_type_count, style);
  const int variants = cfg.icon_classes;

  auto pick_icon_class = [&](int function) {
    std::vector<int> options;
    for (int c = function; c < variants; c += kNumFunctions) options.push_back(c);
    return rng.pick(options);
  };

  for (int s = 0; s < num_screens; ++s) {
    ScreenSpec spec;
    spec.screen_id = app.app_id + join_id("-s", s, 2);
    spec.app_id = app.app_id;
    spec.theme = themes[static_cast<std::size_t>(s)];
    spec.width = cfg.screen_width;
    spec.height = cfg.screen_height;
    spec.background = background;

    const int n = counts[static_cast<std::size_t>(s)];
    std::vector<int> cells(static_cast<std::size_t>(cfg.grid_cols * cfg.grid_rows));
    for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = static_cast<int>(i);
    rng.shuffle(cells);
    cells.resize(static_cast<std::size_t>(n));
    std::sort(cells.begin(), cells.end());

    const auto& kids = children[static_cast<std::size_t>(s)];
    std::vector<int> slots(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) slots[static_cast<std::size_t>(i)] = i;
    rng.shuffle(slots);
    std::vector<int> link_child(static_cast<std::size_t>(n), -1);
    for (std::size_t i = 0; i < kids.size(); ++i) link_child[static_cast<std::size_t>(slots[i])] = kids[i];

    for (int i = 0; i < n; ++i) {
      ComponentSpec c;
      const int child = link_child[static_cast<std::size_t>(i)];
      c.role = child >= 0 ? ComponentRole::link : ComponentRole::content;
      c.function_label = child >= 0 ? themes[static_cast<std::size_t>(child)] : spec.theme;
      c.icon_class = pick_icon_class(c.function_label);
      const ComponentTemplate t = component_template(c.icon_class, cfg);

      const int cell = cells[static_cast<std::size_t>(i)];
      const int cx = (cell % cfg.grid_cols) * cell_w;
      const int cy = (cell / cfg.grid_cols) * cell_h;
      const int w = static_cast<int>(rng.between(t.min_width, t.max_width));
      const int h = static_cast<int>(rng.between(t.min_height, t.max_height));
      const int x0 = cx + static_cast<int>(rng.between(2, cell_w - w - 2));
      const int y0 = cy + static_cast<int>(rng.between(2, cell_h - h - 2));
      c.box = {x0, y0, x0 + w, y0 + h};

      const auto& names = vocab::function_names(c.function_label);
      const std::string name = slug(rng.pick(names));
      c.clickable = c.role == ComponentRole::link;
      c.class_name = rng.pick(c.clickable ? vocab::link_classes() : vocab::content_classes());
      c.content_description = rng.pick(t.text_vocab);
      c.text = rng.pick(t.text_vocab);
      c.resource_id = (c.clickable ? "btn_" : (c.class_name == "ImageView" ? "img_" : "txt_")) + name;
      if (rng.bernoulli(cfg.text_noise)) {
        c.text_blanked = true;
        c.content_description.clear();
        c.text.clear();
        c.resource_id.clear();
      }
      if (c.clickable) app.edges.push_back(Edge{s, i, child});
      spec.components.push_back(std::move(c));
    }
    app.screens.push_back(std::move(spec));
  }

  // Labels.
  DownstreamLabels& labels = out.labels;
  labels.app_type = app.app_type;
  Rng expr_rng = Rng::stream(seed, "referring", static_cast<std::uint64_t>(app_index));
  for (const auto& spec : app.screens) {
    ScreenLabels sl;
    sl.screen_id = spec.screen_id;
    std::vector<BoundingBox> boxes;
    for (const auto& c : spec.components) {
      sl.icon_classes.push_back(c.icon_class);
      sl.function_labels.push_back(c.function_label);
      boxes.push_back(c.box);
    }
    for (int leaf = 0; leaf < static_cast<int>(spec.components.size()); ++leaf) {
      const int f = sl.function_labels[static_cast<std::size_t>(leaf)];
      std::vector<int> same;
      for (int j = 0; j < static_cast<int>(boxes.size()); ++j) {
        if (sl.function_labels[static_cast<std::size_t>(j)] == f) same.push_back(j);
      }
      std::string expr = expr_rng.pick(kVerbs) + " the " + expr_rng.pick(vocab::function_names(f));
      if (expr_rng.bernoulli(0.5)) expr += " " + expr_rng.pick(kNouns);
      std::optional<int> phrase;
      const bool want_phrase = same.size() > 1 || expr_rng.bernoulli(0.3);
      if (want_phrase) {
        std::vector<int> order = {0, 1, 2, 3};
        expr_rng.shuffle(order);
        for (int p : order) {
          if ((phrase = unique_position(boxes, same, leaf, p))) break;
        }
        if (!phrase && same.size() > 1) continue;  // cannot be referred to unambiguously
      }
      if (phrase) expr += " " + vocab::position_phrases()[static_cast<std::size_t>(*phrase)];
      sl.referring.push_back({leaf, expr});
    }
    labels.screens.push_back(std::move(sl));
  }
  for (const auto& e : app.edges) {
    const auto& target = app.screens[static_cast<std::size_t>(e.target)];
    const int f = app.screens[static_cast<std::size_t>(e.screen)].components[static_cast<std::size_t>(e.component)].function_label;
    for (int j = 0; j < static_cast<int>(target.components.size()); ++j) {
      if (target.components[static_cast<std::size_t>(j)].function_label == f) {
        labels.similar_pairs.push_back({e.screen, e.component, e.target, j});
      }
    }
  }
  return out;
}

Trace simulate_trace(const AppSpec& app, std::uint64_t seed, int max_len, int trace_index) {
  if (max_len < 2) throw ConfigError("simulate_trace: max_len must be >= 2");
  Rng rng = Rng::stream(seed, "trace:" + app.app_id, static_cast<std::uint64_t>(trace_index));
  Trace trace;
  trace.app_id = app.app_id;
  trace.trace_id = app.app_id + join_id("-t", trace_index, 3);

  int current = 0;
  if (app.outgoing(0).empty()) {
    std::vector<int> roots;
    for (int s = 0; s < static_cast<int>(app.screens.size()); ++s) {
      if (!app.outgoing(s).empty()) roots.push_back(s);
    }
    if (roots.empty()) throw DataError("simulate_trace: app " + app.app_id + " has no outgoing edges");
    current = rng.pick(roots);
  }
  trace.screens.push_back(app.screen(current));
  while (static_cast<int>(trace.screens.size()) < max_len) {
    const auto edges = app.outgoing(current);
    if (edges.empty()) break;
    const Edge& e = rng.pick(edges);
    const auto& box = app.screens[static_cast<std::size_t>(current)].components[static_cast<std::size_t>(e.component)].box;
    Action a;
    a.x = box.width() >= 3 ? static_cast<int>(rng.between(box.x_min + 1, box.x_max - 2)) : box.x_min;
    a.y = box.height() >= 3 ? static_cast<int>(rng.between(box.y_min + 1, box.y_max - 2)) : box.y_min;
    trace.actions.push_back(a);
    current = e.target;
    trace.screens.push_back(app.screen(current));
  }
  return trace;
}

Image render_screen(const ScreenSpec& spec) {
  Image img(spec.width, spec.height);
  fill_rect(img, 0, 0, spec.width, spec.height, spec.background);
  for (const auto& c : spec.components) {
    const auto& b = c.box;
    const Rgb color = class_color(c.icon_class);
    fill_rect(img, b.x_min, b.y_min, b.x_max, b.y_max, color);
    const std::uint16_t glyph = glyph_pattern(c.icon_class);
    const int luminance = (299 * color.r + 587 * color.g + 114 * color.b) / 1000;
    const Rgb ink = luminance < 128 ? Rgb{255, 255, 255} : Rgb{20, 20, 20};
    // 4x4 glyph cells inside a 10% inset.
    const int ix0 = b.x_min + b.width() / 10;
    const int iy0 = b.y_min + b.height() / 10;
    const int iw = b.width() - 2 * (b.width() / 10);
    const int ih = b.height() - 2 * (b.height() / 10);
    for (int bit = 0; bit < 16; ++bit) {
      if (((glyph >> bit) & 1u) == 0) continue;
      const int gx = bit % 4;
      const int gy = bit / 4;
      fill_rect(img, ix0 + gx * iw / 4, iy0 + gy * ih / 4, ix0 + (gx + 1) * iw / 4,
                iy0 + (gy + 1) * ih / 4, ink);
    }
  }
  return img;
}

std::optional<int> resolve_referring_expression(const std::string& expression,
                                                const std::vector<BoundingBox>& boxes,
                                                const std::vector<int>& function_labels) {
  std::string rest = expression;
  bool verb_ok = false;
  for (const auto& v : kVerbs) {
    if (rest.rfind(v + " the ", 0) == 0) {
      rest = rest.substr(v.size() + 5);
      verb_ok = true;
      break;
    }
  }
  if (!verb_ok) return std::nullopt;
  std::optional<int> phrase;
  for (int p = 0; p < 4; ++p) {
    const std::string suffix = " " + vocab::position_phrases()[static_cast<std::size_t>(p)];
    if (ends_with(rest, suffix)) {
      phrase = p;
      rest.resize(rest.size() - suffix.size());
      break;
    }
  }
  for (const auto& n : kNouns) {
    if (ends_with(rest, " " + n)) {
      rest.resize(rest.size() - n.size() - 1);
      break;
    }
  }
  std::optional<int> function;
  for (int f = 0; f < kNumFunctions; ++f) {
    for (const auto& name : vocab::function_names(f)) {
      if (rest == name) function = f;
    }
  }
  if (!function) return std::nullopt;
  std::vector<int> same;
  for (int j = 0; j < static_cast<int>(function_labels.size()); ++j) {
    if (function_labels[static_cast<std::size_t>(j)] == *function) same.push_back(j);
  }
  if (same.empty()) return std::nullopt;
  if (!phrase) {
    if (same.size() == 1) return same[0];
    return std::nullopt;
  }
  std::optional<int> found;
  for (int c : same) {
    if (unique_position(boxes, same, c, *phrase)) {
      if (found) return std::nullopt;
      found = c;
    }
  }
  return found;
}

}  // namespace traceform
