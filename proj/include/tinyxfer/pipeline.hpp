// SPDX-License-Identifier: Apache-2.0
//
// Declarative stage plans: validation before execution, sequential runs,
// completion markers for resume, and a manifest of every artifact hash.
//
// Plan document:
//   {"version": 1,
//    "workdir": "runs",                       (optional, relative to the plan)
//    "globals": {"seed": 42, "threads": 1},   (optional, lowest precedence)
//    "externals": {"rl_checkpoint": "ckpt/policy.ckpt"},
//    "stages": [{"name": "filter", "kind": "rft-filter",
//                "config": {"dataset": "@rl_data"}, "out": "..."}]}
//
// Inside a stage config, "@name" refers to a declared external artifact and
// "@stage/file" to a file an earlier stage declares as output.

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tinyxfer/stages.hpp"

namespace tinyxfer {

struct PlannedStage {
  std::string name;
  const StageDef* def = nullptr;
  json config;                        // resolved, paths relative to the plan directory
  std::filesystem::path out;          // absolute
};

struct Plan {
  std::filesystem::path base;         // plan directory
  std::filesystem::path workdir;      // absolute
  std::vector<PlannedStage> stages;
};

namespace detail {

inline std::string rel_string(const std::filesystem::path& p) { return p.generic_string(); }

}  // namespace detail

// Validates the whole plan (stage kinds, configs, artifact references,
// external files) without running anything.
inline Plan load_plan(const json& doc, const std::filesystem::path& base) {
  namespace fs = std::filesystem;
  if (!doc.is_object()) throw config_error("plan must be a JSON object");
  for (const auto& [k, v] : doc.items())
    if (k != "version" && k != "workdir" && k != "globals" && k != "externals" && k != "stages")
      throw config_error("plan: unknown key '" + k + "'");
  if (doc.value("version", json(nullptr)) != 1) throw config_error("plan: \"version\" must be 1");
  Plan plan;
  plan.base = base;
  const std::string workdir = doc.value("workdir", std::string("runs"));
  plan.workdir = detail::resolve_path(base, workdir);
  const json globals = doc.value("globals", json::object());
  const json externals = doc.value("externals", json::object());
  if (!globals.is_object() || !externals.is_object()) throw config_error("plan: globals and externals must be objects");
  for (const auto& [k, v] : globals.items())
    if (k != "seed" && k != "threads" && k != "log_level") throw config_error("plan: unknown global '" + k + "'");
  for (const auto& [k, v] : externals.items()) {
    if (!v.is_string()) throw config_error("plan: external '" + k + "' must be a path");
    if (!fs::exists(detail::resolve_path(base, v.get<std::string>())))
      throw input_error("plan: external artifact '" + k + "' not found: " + v.get<std::string>());
  }
  const json stages = doc.value("stages", json::array());
  if (!stages.is_array()) throw config_error("plan: \"stages\" must be an array");

  std::map<std::string, const PlannedStage*> by_name;
  plan.stages.reserve(stages.size());
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const json& s = stages[i];
    const std::string where = "plan stage " + std::to_string(i + 1);
    if (!s.is_object() || !s.contains("name") || !s.contains("kind"))
      throw config_error(where + ": needs \"name\" and \"kind\"");
    for (const auto& [k, v] : s.items())
      if (k != "name" && k != "kind" && k != "config" && k != "out")
        throw config_error(where + ": unknown key '" + k + "'");
    PlannedStage ps;
    ps.name = s["name"].get<std::string>();
    if (ps.name.empty() || ps.name.find('/') != std::string::npos || ps.name.find('@') != std::string::npos)
      throw config_error(where + ": invalid stage name '" + ps.name + "'");
    if (by_name.count(ps.name) || externals.contains(ps.name))
      throw config_error(where + ": duplicate name '" + ps.name + "'");
    ps.def = &find_stage(s["kind"].get<std::string>());
    const std::string where_named = where + " (" + ps.name + ")";

    json raw = s.value("config", json::object());
    if (!raw.is_object()) throw config_error(where_named + ": config must be an object");
    if (raw.contains("out")) throw config_error(where_named + ": set the output directory with the stage \"out\" field");
    // Substitute artifact references before schema validation.
    for (auto& [k, v] : raw.items()) {
      if (!v.is_string() || !v.get<std::string>().starts_with("@")) continue;
      const std::string ref = v.get<std::string>().substr(1);
      const KeySpec* spec = ps.def->key(k);
      if (!spec || spec->type != KeyType::Path) throw config_error(where_named + ": key '" + k + "' cannot take a reference");
      const auto slash = ref.find('/');
      if (slash == std::string::npos) {
        if (!externals.contains(ref)) throw config_error(where_named + ": '" + k + "' refers to undeclared external '" + ref + "'");
        v = externals[ref];
        continue;
      }
      const std::string stage = ref.substr(0, slash), file = ref.substr(slash + 1);
      auto it = by_name.find(stage);
      if (it == by_name.end())
        throw config_error(where_named + ": '" + k + "' refers to '" + stage + "', which is not an earlier stage");
      const auto& outs = it->second->def->outputs;
      if (std::find(outs.begin(), outs.end(), file) == outs.end())
        throw config_error(where_named + ": stage '" + stage + "' does not produce '" + file + "'");
      v = detail::rel_string(fs::relative(it->second->out / file, base));
    }
    const std::string out_rel = s.contains("out") ? s["out"].get<std::string>() : detail::rel_string(fs::path(workdir) / ps.name);
    raw["out"] = out_rel;
    json layered = globals;
    for (const auto& [k, v] : raw.items()) layered[k] = v;
    ConfigLayers layers;
    layers.file = layered;
    layers.file_origin = where_named;
    ps.config = resolve_config(*ps.def, layers);
    ps.out = detail::resolve_path(base, out_rel);

    // Every plain input path must already exist; references to earlier
    // stages are produced at run time.
    for (const auto& spec : ps.def->keys) {
      if (!spec.input || ps.config[spec.name].is_null()) continue;
      const std::string p = ps.config[spec.name].get<std::string>();
      if (p.empty()) continue;
      const auto abs = detail::resolve_path(base, p);
      bool produced = false;
      for (const auto& prev : plan.stages)
        for (const auto& o : prev.def->outputs)
          if ((prev.out / o).lexically_normal() == abs) produced = true;
      if (!produced && !fs::exists(abs))
        throw input_error(where_named + ": input '" + spec.name + "' not found: " + p);
    }
    plan.stages.push_back(std::move(ps));
    by_name[plan.stages.back().name] = &plan.stages.back();
  }
  return plan;
}

inline Plan load_plan_file(const std::filesystem::path& path) {
  const auto abs = std::filesystem::absolute(path);
  return load_plan(read_json_file(abs), abs.parent_path());
}

struct StageOutcome {
  std::string name;
  std::string kind;
  std::string status;  // "ran" | "skipped" | "failed" | "pending"
  json record;         // manifest entry
};

struct PipelineResult {
  std::vector<StageOutcome> stages;
  json manifest;
  std::filesystem::path manifest_path;
  std::size_t ran() const {
    return static_cast<std::size_t>(std::count_if(stages.begin(), stages.end(), [](const auto& s) { return s.status == "ran"; }));
  }
  std::size_t skipped() const {
    return static_cast<std::size_t>(
        std::count_if(stages.begin(), stages.end(), [](const auto& s) { return s.status == "skipped"; }));
  }
};

inline constexpr const char* kMarkerName = ".complete";

// Runs the stages in order. A stage whose marker fingerprint (kind, config
// hash, input hashes) and recorded output hashes still match is skipped.
// On failure the manifest is written with the failing stage and the error
// is rethrown; completed stages keep their markers.
inline PipelineResult run_pipeline(const Plan& plan) {
  namespace fs = std::filesystem;
  PipelineResult res;
  json entries = json::array();
  fs::create_directories(plan.workdir);
  res.manifest_path = plan.workdir / "pipeline_manifest.json";
  auto write_manifest = [&] {
    res.manifest = json{{"tool_version", kToolVersion}, {"stages", entries}};
    detail::write_json(res.manifest_path, res.manifest);
  };
  for (std::size_t i = 0; i < plan.stages.size(); ++i) {
    const auto& ps = plan.stages[i];
    StageOutcome oc{ps.name, ps.def->name, "pending", json::object()};
    try {
      const json inputs = input_hashes(*ps.def, ps.config, plan.base);
      const std::string config_hash = sha256_hex(canonical_dump(ps.config));
      const std::string fingerprint =
          sha256_hex(canonical_dump(json{{"kind", ps.def->name}, {"config_hash", config_hash}, {"inputs", inputs}}));
      const fs::path marker = ps.out / kMarkerName;
      json outputs;
      bool skip = false;
      if (fs::exists(marker)) {
        try {
          const json m = read_json_file(marker);
          skip = m.value("fingerprint", "") == fingerprint && m.value("outputs", json()) == artifact_hashes(*ps.def, ps.out);
          if (skip) outputs = m["outputs"];
        } catch (const Error&) {
          skip = false;
        }
      }
      if (skip) {
        oc.status = "skipped";
        log(LogLevel::Info, "stage " + ps.name + " (" + ps.def->name + "): complete, skipped");
      } else {
        fs::remove(marker);
        const json m = run_stage(*ps.def, ps.config, plan.base);
        outputs = m["outputs"];
        detail::write_json(marker, json{{"fingerprint", fingerprint}, {"outputs", outputs}});
        oc.status = "ran";
      }
      oc.record = json{{"name", ps.name},        {"kind", ps.def->name}, {"status", oc.status},
                       {"config_hash", config_hash}, {"inputs", inputs},  {"outputs", outputs},
                       {"out", detail::rel_string(fs::relative(ps.out, plan.base))}};
      entries.push_back(oc.record);
      res.stages.push_back(oc);
    } catch (const std::exception& e) {
      oc.status = "failed";
      oc.record = json{{"name", ps.name}, {"kind", ps.def->name}, {"status", "failed"}, {"error", e.what()}};
      entries.push_back(oc.record);
      for (std::size_t j = i + 1; j < plan.stages.size(); ++j)
        entries.push_back({{"name", plan.stages[j].name}, {"kind", plan.stages[j].def->name}, {"status", "pending"}});
      write_manifest();
      throw;
    }
  }
  write_manifest();
  return res;
}

}  // namespace tinyxfer
