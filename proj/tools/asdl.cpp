// tools/asdl.cpp
//
// Copyright 2026 The ASDL Toolkit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.
//
// Pipeline driver: simulate | features | labels | train | eval | report |
// ablate, over a JSON experiment config. Exit codes: 0 ok, 2 config error,
// 3 missing prerequisite artifact, 4 numerical divergence.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>

#include "asdl/pipeline.hpp"

using namespace asdl;

int main(int argc, char** argv) {
  CLI::App app{"array-based active speaker detection and localization toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_override, seed_override, workers_override;

  const std::vector<std::string> stages = {"simulate", "features", "labels",
                                           "train",    "eval",     "report", "ablate"};
  const std::map<std::string, std::string> descriptions = {
      {"simulate", "render synthetic scenes to multichannel WAV"},
      {"features", "extract spatial input features into chunk files"},
      {"labels", "build GT/teacher/VA tracks and fused training targets"},
      {"train", "train the student network"},
      {"eval", "score the held-out scenes and emit metrics/PR artifacts"},
      {"report", "aggregate metrics and verify manifest closure"},
      {"ablate", "expand the configured axes and run every cell"}};

  std::vector<CLI::App*> subs;
  for (const auto& s : stages) {
    CLI::App* sub = app.add_subcommand(s, descriptions.at(s));
    sub->add_option("-c,--config", config_path, "experiment config JSON")->required();
    sub->add_option("-o,--out", out_override, "override the output directory");
    sub->add_option("-s,--seed", seed_override, "override the experiment seed");
    sub->add_option("-w,--workers", workers_override, "override the worker count");
    subs.push_back(sub);
  }

  CLI11_PARSE(app, argc, argv);

  try {
    std::ifstream f(config_path);
    if (!f) throw ConfigError("cannot open config file " + config_path);
    json j = json::parse(f, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config file is not valid JSON: " + config_path);
    if (!out_override.empty()) j["out_dir"] = out_override;
    if (!seed_override.empty()) j["seed"] = std::stoull(seed_override);
    if (!workers_override.empty()) j["workers"] = std::stoi(workers_override);
    const ExperimentConfig cfg = ExperimentConfig::from_json(j);

    const std::string stage = app.get_subcommands().front()->get_name();
    if (stage == "ablate") run_ablate(cfg);
    else run_stage(stage, cfg);
    return 0;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "asdl: config error: %s\n", e.what());
    return 2;
  } catch (const MissingArtifactError& e) {
    std::fprintf(stderr, "asdl: missing prerequisite: %s\n", e.what());
    return 3;
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "asdl: numerical divergence: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "asdl: error: %s\n", e.what());
    return 1;
  }
}
