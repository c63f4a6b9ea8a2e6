#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "traceform/image.hpp"
#include "traceform/vh.hpp"

namespace traceform {

/// Closed vocabularies shared by the generator, the corpus manifest and the downstream tasks.
namespace vocab {

const std::vector<std::string>& function_labels();  // 16 functions
const std::vector<std::string>& app_types();        // 27 app categories
const std::vector<std::string>& link_classes();     // class names of clickable components
const std::vector<std::string>& content_classes();  // class names of static components
const std::vector<std::string>& class_names();      // union, the declared class vocabulary
const std::vector<std::string>& position_phrases();  // "at the top", ...

/// Words that name a function in referring expressions; first entry is canonical.
const std::vector<std::string>& function_names(int function);

std::string icon_class_name(int icon_class, int num_functions);

}  // namespace vocab

struct GeneratorConfig {
  int apps = 200;
  int traces_per_app = 30;
  int min_screens = 8;
  int max_screens = 12;
  int min_components = 2;
  int max_components = 4;
  int max_links = 2;  // clickable link components per screen
  int max_trace_len = 10;
  int icon_classes = 32;
  int app_type_count = 27;
  int screen_width = 360;
  int screen_height = 640;
  int grid_cols = 2;
  int grid_rows = 5;
  double text_noise = 0.3;  // probability that a component's text fields are blanked
  double deepen_prob = 0.6;  // tree growth: prefer extending the newest screen
  int threads = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static GeneratorConfig from_json(const nlohmann::json& j);
};

enum class ComponentRole { link, content };

/// Everything a component's appearance and text derive from.
struct ComponentTemplate {
  int icon_class = 0;
  int function_label = 0;
  int min_width = 0, max_width = 0;
  int min_height = 0, max_height = 0;
  std::uint16_t glyph_id = 0;  // 4x4 bit pattern
  Rgb color;
  std::vector<std::string> text_vocab;  // phrases for text/content_desc
};

ComponentTemplate component_template(int icon_class, const GeneratorConfig& cfg);

/// Fill colour and glyph bits are functions of the icon class alone.
Rgb class_color(int icon_class);
std::uint16_t glyph_pattern(int icon_class);

struct ComponentSpec {
  int icon_class = 0;
  int function_label = 0;
  ComponentRole role = ComponentRole::content;
  BoundingBox box;
  std::string content_description;
  std::string text;
  std::string resource_id;
  std::string class_name;
  bool clickable = false;
  bool text_blanked = false;
};

struct ScreenSpec {
  std::string screen_id;
  std::string app_id;
  int theme = 0;  // function label of the screen's content
  int width = 0;
  int height = 0;
  Rgb background;
  std::vector<ComponentSpec> components;  // leaf pre-order

  ViewHierarchy to_view_hierarchy() const;
};

struct Edge {
  int screen = 0;
  int component = 0;
  int target = 0;
  friend bool operator==(const Edge&, const Edge&) = default;
};

struct AppSpec {
  std::string app_id;
  int app_type = 0;
  std::vector<ScreenSpec> screens;
  std::vector<Edge> edges;

  std::optional<int> edge_target(int screen, int component) const;
  std::vector<Edge> outgoing(int screen) const;
  Screen screen(int index) const;  // VH only, raster not rendered
};

struct ReferringExpression {
  int leaf = 0;
  std::string expression;
};

struct ScreenLabels {
  std::string screen_id;
  std::vector<int> icon_classes;
  std::vector<int> function_labels;
  std::vector<ReferringExpression> referring;
};

struct SimilarPair {
  int screen_a = 0, component_a = 0;
  int screen_b = 0, component_b = 0;
};

struct DownstreamLabels {
  int app_type = 0;
  std::vector<ScreenLabels> screens;
  std::vector<SimilarPair> similar_pairs;
};

struct GeneratedApp {
  AppSpec app;
  DownstreamLabels labels;
};

/// Deterministic in (cfg, seed, app_index). Throws ConfigError for unsatisfiable configs.
GeneratedApp generate_app(const GeneratorConfig& cfg, std::uint64_t seed, int app_index = 0);

/// Random walk over the app graph. Each action is a point strictly inside the clicked component.
Trace simulate_trace(const AppSpec& app, std::uint64_t seed, int max_len, int trace_index = 0);

/// Background fill, then every component as a filled rectangle with its glyph, in pre-order.
Image render_screen(const ScreenSpec& spec);

/// Reverse of the expression grammar: the unique leaf an expression names, or nullopt.
std::optional<int> resolve_referring_expression(const std::string& expression,
                                                const std::vector<BoundingBox>& boxes,
                                                const std::vector<int>& function_labels);

nlohmann::json labels_to_json(const GeneratedApp& generated);

/// Corpus on disk: manifest.json, traces/*.jsonl, rasters/*.png, labels/*.json.
struct CorpusSummary {
  std::string manifest_checksum;
  std::size_t apps = 0;
  std::size_t traces = 0;
  std::size_t screens = 0;
};

inline constexpr int kCorpusFormatVersion = 1;

CorpusSummary write_corpus(const GeneratorConfig& cfg, std::uint64_t seed,
                           const std::filesystem::path& out_dir);

struct CorpusApp {
  std::string app_id;
  int app_type = 0;
  DownstreamLabels labels;
  std::vector<std::string> screen_ids;
  std::vector<int> screen_themes;
};

struct Corpus {
  std::filesystem::path root;
  GeneratorConfig config;
  std::uint64_t seed = 0;
  std::string manifest_checksum;
  std::vector<CorpusApp> apps;
  std::vector<Trace> traces;
};

Corpus read_corpus(const std::filesystem::path& dir);

nlohmann::json screen_record_to_json(const Screen& screen, const std::optional<Action>& action);

}  // namespace traceform
