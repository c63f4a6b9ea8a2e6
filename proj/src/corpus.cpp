#include <algorithm>
#include <fstream>
#include <map>
#include <mutex>

#include <nlohmann/json.hpp>

#include "traceform/errors.hpp"
#include "traceform/hash.hpp"
#include "traceform/parallel.hpp"
#include "traceform/synth.hpp"

namespace traceform {

using nlohmann::json;
namespace fs = std::filesystem;

json labels_to_json(const GeneratedApp& generated) {
  const AppSpec& app = generated.app;
  const DownstreamLabels& labels = generated.labels;
  json screens = json::array();
  for (std::size_t i = 0; i < labels.screens.size(); ++i) {
    const auto& sl = labels.screens[i];
    json refs = json::array();
    for (const auto& r : sl.referring) refs.push_back({{"leaf", r.leaf}, {"expression", r.expression}});
    screens.push_back({{"screen_id", sl.screen_id},
                       {"theme", app.screens[i].theme},
                       {"icon_classes", sl.icon_classes},
                       {"function_labels", sl.function_labels},
                       {"referring", std::move(refs)}});
  }
  json similar = json::array();
  for (const auto& p : labels.similar_pairs) {
    similar.push_back({p.screen_a, p.component_a, p.screen_b, p.component_b});
  }
  json edges = json::array();
  for (const auto& e : app.edges) edges.push_back({e.screen, e.component, e.target});
  return {{"app_id", app.app_id},
          {"app_type", labels.app_type},
          {"screens", std::move(screens)},
          {"similar_pairs", std::move(similar)},
          {"edges", std::move(edges)}};
}

json screen_record_to_json(const Screen& screen, const std::optional<Action>& action) {
  json rec = {{"screen_id", screen.screen_id},
              {"app_id", screen.app_id},
              {"width", screen.width},
              {"height", screen.height},
              {"vh", vh_to_json(screen.vh)},
              {"raster", screen.raster_ref}};
  rec["action"] = action ? json{{"x", action->x}, {"y", action->y}} : json(nullptr);
  return rec;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

json parse_json_file(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw ParseError("malformed JSON in " + path.string(), e.byte);
  }
}

}  // namespace

CorpusSummary write_corpus(const GeneratorConfig& cfg, std::uint64_t seed, const fs::path& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir / "traces");
  fs::create_directories(out_dir / "rasters");
  fs::create_directories(out_dir / "labels");

  struct AppFiles {
    std::string app_id;
    std::vector<std::string> trace_ids;
    std::vector<std::pair<std::string, std::string>> checksums;  // relpath, checksum
    std::size_t screens = 0;
  };
  std::vector<AppFiles> per_app(static_cast<std::size_t>(cfg.apps));

  parallel_for(per_app.size(), resolve_threads(cfg.threads), [&](std::size_t a) {
    const GeneratedApp gen = generate_app(cfg, seed, static_cast<int>(a));
    AppFiles& files = per_app[a];
    files.app_id = gen.app.app_id;
    files.screens = gen.app.screens.size();
    auto record = [&](const std::string& rel) {
      files.checksums.emplace_back(rel, file_checksum((out_dir / rel).string()));
    };
    for (const auto& spec : gen.app.screens) {
      const std::string rel = "rasters/" + spec.screen_id + ".png";
      write_png(render_screen(spec), (out_dir / rel).string());
      record(rel);
    }
    const std::string labels_rel = "labels/" + gen.app.app_id + ".json";
    write_text(out_dir / labels_rel, labels_to_json(gen).dump(1) + "\n");
    record(labels_rel);
    for (int t = 0; t < cfg.traces_per_app; ++t) {
      const Trace trace = simulate_trace(gen.app, seed, cfg.max_trace_len, t);
      std::string body;
      for (std::size_t i = 0; i < trace.screens.size(); ++i) {
        std::optional<Action> act;
        if (i < trace.actions.size()) act = trace.actions[i];
        json rec = screen_record_to_json(trace.screens[i], act);
        rec["trace_id"] = trace.trace_id;
        rec["step"] = i;
        body += rec.dump() + "\n";
      }
      const std::string rel = "traces/" + trace.trace_id + ".jsonl";
      write_text(out_dir / rel, body);
      record(rel);
      files.trace_ids.push_back(trace.trace_id);
    }
  });

  CorpusSummary summary;
  json apps = json::array();
  json traces = json::array();
  json checksums = json::object();
  for (const auto& f : per_app) {
    apps.push_back(f.app_id);
    for (const auto& t : f.trace_ids) traces.push_back(t);
    for (const auto& [rel, sum] : f.checksums) checksums[rel] = sum;
    summary.traces += f.trace_ids.size();
    summary.screens += f.screens;
  }
  summary.apps = per_app.size();

  const int num_functions = static_cast<int>(vocab::function_labels().size());
  json icon_names = json::array();
  for (int c = 0; c < cfg.icon_classes; ++c) icon_names.push_back(vocab::icon_class_name(c, num_functions));
  json app_type_names = json::array();
  for (int t = 0; t < cfg.app_type_count; ++t) app_type_names.push_back(vocab::app_types()[static_cast<std::size_t>(t)]);

  json manifest = {{"format", "traceform-corpus"},
                   {"format_version", kCorpusFormatVersion},
                   {"seed", seed},
                   {"config", cfg.to_json()},
                   {"vocab",
                    {{"function_labels", vocab::function_labels()},
                     {"icon_classes", std::move(icon_names)},
                     {"app_types", std::move(app_type_names)},
                     {"class_names", vocab::class_names()}}},
                   {"apps", std::move(apps)},
                   {"traces", std::move(traces)},
                   {"files", std::move(checksums)}};
  write_text(out_dir / "manifest.json", manifest.dump(1) + "\n");
  summary.manifest_checksum = file_checksum((out_dir / "manifest.json").string());
  return summary;
}

Corpus read_corpus(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw DataError("no corpus manifest at " + manifest_path.string());
  const json manifest = parse_json_file(manifest_path);
  if (manifest.value("format", "") != "traceform-corpus") throw DataError("not a traceform corpus: " + dir.string());
  if (manifest.value("format_version", -1) != kCorpusFormatVersion) {
    throw DataError("corpus format version mismatch in " + manifest_path.string());
  }

  Corpus corpus;
  corpus.root = dir;
  corpus.config = GeneratorConfig::from_json(manifest.at("config"));
  corpus.seed = manifest.at("seed").get<std::uint64_t>();
  corpus.manifest_checksum = file_checksum(manifest_path.string());

  for (const auto& app_id_json : manifest.at("apps")) {
    const std::string app_id = app_id_json.get<std::string>();
    const json lab = parse_json_file(dir / "labels" / (app_id + ".json"));
    CorpusApp app;
    app.app_id = app_id;
    app.app_type = lab.at("app_type");
    app.labels.app_type = app.app_type;
    for (const auto& s : lab.at("screens")) {
      ScreenLabels sl;
      sl.screen_id = s.at("screen_id");
      sl.icon_classes = s.at("icon_classes").get<std::vector<int>>();
      sl.function_labels = s.at("function_labels").get<std::vector<int>>();
      for (const auto& r : s.at("referring")) sl.referring.push_back({r.at("leaf"), r.at("expression")});
      app.screen_ids.push_back(sl.screen_id);
      app.screen_themes.push_back(s.at("theme"));
      app.labels.screens.push_back(std::move(sl));
    }
    for (const auto& p : lab.at("similar_pairs")) {
      app.labels.similar_pairs.push_back({p[0], p[1], p[2], p[3]});
    }
    corpus.apps.push_back(std::move(app));
  }

  for (const auto& trace_id_json : manifest.at("traces")) {
    const std::string trace_id = trace_id_json.get<std::string>();
    const fs::path path = dir / "traces" / (trace_id + ".jsonl");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("missing trace file " + path.string());
    Trace trace;
    trace.trace_id = trace_id;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      json rec;
      try {
        rec = json::parse(line);
      } catch (const json::parse_error& e) {
        throw ParseError("malformed record " + std::to_string(line_no) + " in " + path.string(), e.byte);
      }
      Screen s;
      s.screen_id = rec.at("screen_id");
      s.app_id = rec.at("app_id");
      s.width = rec.at("width");
      s.height = rec.at("height");
      s.vh = vh_from_json(rec.at("vh"));
      s.raster_ref = rec.at("raster");
      if (trace.app_id.empty()) trace.app_id = s.app_id;
      const auto& act = rec.at("action");
      trace.screens.push_back(std::move(s));
      if (!act.is_null()) trace.actions.push_back(Action{act.at("x"), act.at("y")});
    }
    validate_trace(trace);
    corpus.traces.push_back(std::move(trace));
  }
  return corpus;
}

}  // namespace traceform
