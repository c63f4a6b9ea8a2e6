#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "traceform/image.hpp"

namespace traceform {

/// Pixel-space rectangle. Containment is half-open: [x_min, x_max) x [y_min, y_max).
struct BoundingBox {
  int x_min = 0;
  int y_min = 0;
  int x_max = 0;
  int y_max = 0;

  int width() const { return x_max - x_min; }
  int height() const { return y_max - y_min; }
  std::int64_t area() const { return static_cast<std::int64_t>(width()) * height(); }
  bool contains(int x, int y) const { return x >= x_min && x < x_max && y >= y_min && y < y_max; }
  bool valid() const { return x_min < x_max && y_min < y_max; }
  bool within(int screen_w, int screen_h) const {
    return x_min >= 0 && y_min >= 0 && x_max <= screen_w && y_max <= screen_h;
  }
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct LeafNode {
  std::string content_description;
  std::string text;
  std::string resource_id;
  std::string class_name;
  BoundingBox bounds;
  bool clickable = false;
  friend bool operator==(const LeafNode&, const LeafNode&) = default;
};

/// One node of the parsed tree. Leaves are nodes without children.
struct ViewNode {
  std::string class_name;
  BoundingBox bounds;
  std::string content_description;
  std::string text;
  std::string resource_id;
  bool clickable = false;
  std::vector<ViewNode> children;

  bool is_leaf() const { return children.empty(); }
};

struct ViewHierarchy {
  ViewNode root;
  std::vector<LeafNode> leaves;  // pre-order

  /// Rebuilds `leaves` from `root`.
  void reindex();
};

struct Screen {
  std::string screen_id;
  std::string app_id;
  int width = 0;
  int height = 0;
  ViewHierarchy vh;
  Image raster;            // may be empty when only `raster_ref` is loaded
  std::string raster_ref;  // corpus-relative path of the PNG, if any
};

struct Action {
  int x = 0;
  int y = 0;
  friend bool operator==(const Action&, const Action&) = default;
};

struct Trace {
  std::string trace_id;
  std::string app_id;
  std::vector<Screen> screens;
  std::vector<Action> actions;  // actions[i] clicks screens[i], leading to screens[i + 1]
};

ViewHierarchy parse_vh(std::string_view document);
ViewHierarchy vh_from_json(const nlohmann::json& doc);
nlohmann::json vh_to_json(const ViewHierarchy& vh);
std::string serialize_vh(const ViewHierarchy& vh);

const std::vector<LeafNode>& extract_leaves(const ViewHierarchy& vh);

/// content description, resource id, class name, text; single spaces, empty fields skipped.
std::string leaf_sentence(const LeafNode& leaf);

using PositionalFeatures = std::array<double, 9>;

/// (x_min, y_min, x_max, y_max, x_center, y_center, height, width, area), all normalized by the screen.
PositionalFeatures positional_features(const BoundingBox& box, int screen_w, int screen_h);

/// Smallest-area leaf containing (x, y); ties go to the earliest pre-order index.
std::optional<std::size_t> hit_test(std::span<const LeafNode> leaves, int x, int y);

/// Throws ValidationError if any leaf falls outside the screen or the trace is inconsistent.
void validate_screen(const Screen& screen);
void validate_trace(const Trace& trace);

}  // namespace traceform
