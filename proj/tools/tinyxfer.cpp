// SPDX-License-Identifier: Apache-2.0
//
// tinyxfer: command-line entry point. One subcommand per stage plus
// pipeline-run. Exit codes: 0 ok, 2 config error, 3 input error, 4 runtime.

#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <memory>
#include <string>

#include "tinyxfer/pipeline.hpp"

namespace {

using namespace tinyxfer;

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::Config: return 2;
    case ErrorKind::Input: return 3;
    case ErrorKind::Runtime: return 4;
  }
  return 4;
}

std::string flag_name(const std::string& key) {
  std::string f = key;
  std::replace(f.begin(), f.end(), '_', '-');
  return "--" + f;
}

struct StageCommand {
  const StageDef* def = nullptr;
  CLI::App* app = nullptr;
  std::string config_file;
  std::map<std::string, std::string> values;
};

json read_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  return read_json_file(path);
}

int run(int argc, char** argv) {
  CLI::App app{"tinyxfer: compression and knowledge-transfer toolkit for small transformer models"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);

  std::vector<std::unique_ptr<StageCommand>> cmds;
  for (const auto& def : stage_registry()) {
    auto cmd = std::make_unique<StageCommand>();
    cmd->def = &def;
    cmd->app = app.add_subcommand(def.name, def.help);
    cmd->app->add_option("--config", cmd->config_file, "JSON config file ({\"version\": 1, key: value, ...})");
    for (const auto& k : def.keys) {
      std::string help = k.help;
      if (!k.def.is_null()) help += " [default: " + (k.def.is_string() ? k.def.get<std::string>() : k.def.dump()) + "]";
      if (k.required) help += " (required)";
      cmd->app->add_option_function<std::string>(
          flag_name(k.name), [c = cmd.get(), name = k.name](const std::string& v) { c->values[name] = v; }, help);
    }
    cmds.push_back(std::move(cmd));
  }

  std::string plan_path;
  std::string pipeline_log;
  auto* pipe = app.add_subcommand("pipeline-run", "validate and run a stage plan; completed stages are skipped");
  pipe->add_option("plan", plan_path, "plan JSON file")->required();
  pipe->add_option("--log-level", pipeline_log, "error | warn | info | debug");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (pipe->parsed()) {
      if (!pipeline_log.empty()) {
        log_override() = log_level_from_string(pipeline_log);
        log_threshold() = *log_override();
      }
      const Plan plan = load_plan_file(plan_path);
      const auto res = run_pipeline(plan);
      for (const auto& s : res.stages) std::cout << "stage " << s.name << " (" << s.kind << "): " << s.status << "\n";
      std::cout << res.ran() << " ran, " << res.skipped() << " skipped; manifest " << res.manifest_path.string() << "\n";
      return 0;
    }
    for (const auto& cmd : cmds) {
      if (!cmd->app->parsed()) continue;
      ConfigLayers layers;
      layers.file = read_config_file(cmd->config_file);
      if (!cmd->config_file.empty()) layers.file_origin = cmd->config_file;
      layers.env = process_env;
      layers.flags = cmd->values;
      const json cfg = resolve_config(*cmd->def, layers);
      run_stage(*cmd->def, cfg, std::filesystem::current_path());
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  return 2;
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
