#include "traceform/vh.hpp"

#include <cctype>

#include <nlohmann/json.hpp>

#include "traceform/errors.hpp"

namespace traceform {

using nlohmann::json;

namespace {

void collect_leaves(const ViewNode& node, std::vector<LeafNode>& out) {
  if (node.is_leaf()) {
    out.push_back(LeafNode{node.content_description, node.text, node.resource_id, node.class_name,
                           node.bounds, node.clickable});
    return;
  }
  for (const auto& child : node.children) collect_leaves(child, out);
}

std::string optional_string(const json& doc, const char* key, const std::string& path) {
  auto it = doc.find(key);
  if (it == doc.end() || it->is_null()) return {};
  if (!it->is_string()) throw ValidationError(std::string("field '") + key + "' must be a string", path);
  return it->get<std::string>();
}

ViewNode node_from_json(const json& doc, const std::string& path, int depth) {
  if (depth > 512) throw ValidationError("tree too deep", path);
  if (!doc.is_object()) throw ValidationError("node must be an object", path);
  ViewNode node;

  auto cls = doc.find("class");
  if (cls == doc.end() || !cls->is_string() || cls->get<std::string>().empty()) {
    throw ValidationError("missing or empty 'class'", path);
  }
  node.class_name = cls->get<std::string>();

  auto bounds = doc.find("bounds");
  if (bounds == doc.end() || !bounds->is_array() || bounds->size() != 4) {
    throw ValidationError("'bounds' must be [x_min, y_min, x_max, y_max]", path);
  }
  std::array<int, 4> b{};
  for (std::size_t i = 0; i < 4; ++i) {
    if (!(*bounds)[i].is_number_integer()) throw ValidationError("bounds must be integers", path);
    b[i] = (*bounds)[i].get<int>();
  }
  node.bounds = BoundingBox{b[0], b[1], b[2], b[3]};
  if (!node.bounds.valid()) throw ValidationError("degenerate or inverted bounds", path);

  node.content_description = optional_string(doc, "content_desc", path);
  node.text = optional_string(doc, "text", path);
  node.resource_id = optional_string(doc, "resource_id", path);
  if (auto it = doc.find("clickable"); it != doc.end() && !it->is_null()) {
    if (!it->is_boolean()) throw ValidationError("'clickable' must be a boolean", path);
    node.clickable = it->get<bool>();
  }

  if (auto it = doc.find("children"); it != doc.end() && !it->is_null()) {
    if (!it->is_array()) throw ValidationError("'children' must be an array", path);
    node.children.reserve(it->size());
    for (std::size_t i = 0; i < it->size(); ++i) {
      node.children.push_back(
          node_from_json((*it)[i], path + "/children[" + std::to_string(i) + "]", depth + 1));
    }
  }
  return node;
}

json node_to_json(const ViewNode& node) {
  json out = {
      {"class", node.class_name},
      {"bounds", {node.bounds.x_min, node.bounds.y_min, node.bounds.x_max, node.bounds.y_max}},
      {"content_desc", node.content_description},
      {"text", node.text},
      {"resource_id", node.resource_id},
      {"clickable", node.clickable},
  };
  if (!node.children.empty()) {
    json children = json::array();
    for (const auto& c : node.children) children.push_back(node_to_json(c));
    out["children"] = std::move(children);
  }
  return out;
}

}  // namespace

void ViewHierarchy::reindex() {
  leaves.clear();
  collect_leaves(root, leaves);
}

ViewHierarchy vh_from_json(const json& doc) {
  ViewHierarchy vh;
  vh.root = node_from_json(doc, "root", 0);
  vh.reindex();
  // The class name is mandatory, so every leaf already carries one non-empty field.
  return vh;
}

ViewHierarchy parse_vh(std::string_view document) {
  json doc;
  try {
    doc = json::parse(document.begin(), document.end());
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("malformed VH document: ") + e.what(), e.byte);
  }
  return vh_from_json(doc);
}

json vh_to_json(const ViewHierarchy& vh) { return node_to_json(vh.root); }

std::string serialize_vh(const ViewHierarchy& vh) { return vh_to_json(vh).dump(); }

const std::vector<LeafNode>& extract_leaves(const ViewHierarchy& vh) { return vh.leaves; }

std::string leaf_sentence(const LeafNode& leaf) {
  std::string out;
  for (const std::string* field :
       {&leaf.content_description, &leaf.resource_id, &leaf.class_name, &leaf.text}) {
    // Collapse internal whitespace so the sentence never has doubled or edge spaces.
    std::size_t i = 0;
    const std::string& s = *field;
    while (i < s.size()) {
      while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
      std::size_t j = i;
      while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
      if (j > i) {
        if (!out.empty()) out.push_back(' ');
        out.append(s, i, j - i);
      }
      i = j;
    }
  }
  return out;
}

PositionalFeatures positional_features(const BoundingBox& box, int screen_w, int screen_h) {
  if (screen_w <= 0 || screen_h <= 0) throw DataError("positional_features: zero screen dimension");
  if (!box.valid() || !box.within(screen_w, screen_h)) {
    throw DataError("positional_features: box outside screen");
  }
  const double w = screen_w;
  const double h = screen_h;
  const double nw = box.width() / w;
  const double nh = box.height() / h;
  return {box.x_min / w,
          box.y_min / h,
          box.x_max / w,
          box.y_max / h,
          (box.x_min + box.x_max) / (2.0 * w),
          (box.y_min + box.y_max) / (2.0 * h),
          nh,
          nw,
          nw * nh};
}

std::optional<std::size_t> hit_test(std::span<const LeafNode> leaves, int x, int y) {
  std::optional<std::size_t> best;
  std::int64_t best_area = 0;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    const auto& b = leaves[i].bounds;
    if (!b.contains(x, y)) continue;
    if (!best || b.area() < best_area) {
      best = i;
      best_area = b.area();
    }
  }
  return best;
}

void validate_screen(const Screen& screen) {
  if (screen.width <= 0 || screen.height <= 0) {
    throw ValidationError("screen has zero dimension", screen.screen_id);
  }
  for (std::size_t i = 0; i < screen.vh.leaves.size(); ++i) {
    if (!screen.vh.leaves[i].bounds.within(screen.width, screen.height)) {
      throw ValidationError("leaf outside screen bounds",
                            screen.screen_id + "/leaf[" + std::to_string(i) + "]");
    }
  }
  if (!screen.raster.empty() &&
      (screen.raster.width != screen.width || screen.raster.height != screen.height)) {
    throw ValidationError("raster size does not match screen", screen.screen_id);
  }
}

void validate_trace(const Trace& trace) {
  if (trace.screens.size() < 2) throw ValidationError("trace shorter than 2 screens", trace.trace_id);
  if (trace.actions.size() + 1 != trace.screens.size()) {
    throw ValidationError("trace needs exactly T-1 actions", trace.trace_id);
  }
  for (std::size_t i = 0; i < trace.screens.size(); ++i) {
    const auto& s = trace.screens[i];
    validate_screen(s);
    if (s.app_id != trace.app_id) throw ValidationError("screen from a different app", s.screen_id);
    if (i < trace.actions.size()) {
      const auto& a = trace.actions[i];
      if (a.x < 0 || a.y < 0 || a.x >= s.width || a.y >= s.height) {
        throw ValidationError("action outside source screen",
                              trace.trace_id + "/actions[" + std::to_string(i) + "]");
      }
    }
  }
}

}  // namespace traceform
